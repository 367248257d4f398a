"""Corpus statistics: counts, length histograms, and a question-type heuristic.

Question type: the first interrogative word in the question, paired with the
first following token that is not in STOP_WORDS (articles, pronouns,
auxiliaries, and "kind/type/sort" fillers). "What color is the bus?" gives
("what", "color"); "What kind of dog is this?" gives ("what", "dog").
Tokens are lowercase runs of letters, digits and apostrophes.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

from .parse import Dialogue

INTERROGATIVES = frozenset(
    "what how where why who whom whose which when is are was were do does did can could will would should has have may".split()
)
STOP_WORDS = frozenset(
    """a an the this that these those it its it's there here of in on at to for with by from about
    is are was were be been being do does did can could will would should has have had may might
    i you he she we they me him her us them my your his our their
    kind type sort types kinds sorts""".split()
)
# full-size corpus magnitudes, documented for comparison and not reproduced here
FULL_SCALE = {"dialogues": 117_238, "mean_turns": 9.89, "top7_types_share": 0.44}
LENGTH_BUCKET = 5
TOP_K = 7

_TOKEN = re.compile(r"[a-z0-9']+")


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def question_type(question: str) -> tuple[str, str] | None:
    toks = tokens(question)
    for i, tok in enumerate(toks):
        if tok in INTERROGATIVES:
            nxt = next((t for t in toks[i + 1 :] if t not in STOP_WORDS), "")
            return tok, nxt
    return None


def _histogram(lengths: list[int], width: int) -> dict[str, int]:
    counts = Counter(n // width for n in lengths)
    return {f"{b * width}-{b * width + width - 1}": counts[b] for b in sorted(counts)}


@dataclass
class DatasetStats:
    dialogues: int = 0
    instructions: int = 0
    mean_turns: float = 0.0
    question_lengths: dict[str, int] = field(default_factory=dict)
    answer_lengths: dict[str, int] = field(default_factory=dict)
    question_types: dict[str, int] = field(default_factory=dict)
    untyped_questions: int = 0
    top_types_share: float = 0.0

    def to_json(self) -> dict:
        return {
            "dialogues": self.dialogues,
            "instructions": self.instructions,
            "mean_turns": self.mean_turns,
            "question_lengths": self.question_lengths,
            "answer_lengths": self.answer_lengths,
            "question_types": self.question_types,
            "untyped_questions": self.untyped_questions,
            f"top{TOP_K}_types_share": self.top_types_share,
            "length_bucket": LENGTH_BUCKET,
        }


def compute_stats(dialogues: list[Dialogue]) -> DatasetStats:
    """A "turn" here is one question/answer round, so mean_turns is rounds per dialogue."""
    st = DatasetStats()
    if not dialogues:
        return st
    st.dialogues = len(dialogues)
    st.instructions = sum(d.rounds for d in dialogues)
    st.mean_turns = st.instructions / st.dialogues
    qs = [q for d in dialogues for q in d.questions()]
    ans = [a for d in dialogues for a in d.answers()]
    st.question_lengths = _histogram([len(tokens(q)) for q in qs], LENGTH_BUCKET)
    st.answer_lengths = _histogram([len(tokens(a)) for a in ans], LENGTH_BUCKET)
    types = Counter()
    for q in qs:
        qt = question_type(q)
        if qt is None:
            st.untyped_questions += 1
        else:
            types[" ".join(qt).strip()] += 1
    ranked = sorted(types.items(), key=lambda kv: (-kv[1], kv[0]))
    st.question_types = dict(ranked)
    st.top_types_share = sum(c for _, c in ranked[:TOP_K]) / len(qs) if qs else 0.0
    return st

