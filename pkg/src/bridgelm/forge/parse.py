"""Dialogue type and the labeled-line grammar used to read service output.

Grammar: a turn starts on a line beginning with a role label. Three label
families are recognised, tried in order and never mixed within one text:

    Question: / Answer:      (primary)
    User: / Assistant:
    Q: / A:

Labels are case-insensitive and may be preceded by whitespace. Any other line
continues the current turn, so multi-paragraph answers stay in one turn. Text
before the first label is ignored. A trailing question with no answer is
dropped.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

USER, ASSISTANT = "user", "assistant"

LABEL_FAMILIES = (
    ("question", "answer"),
    ("user", "assistant"),
    ("q", "a"),
)

# rejection reason codes
NO_LABELS = "no_labels"
ROLE_ORDER = "role_order"
EMPTY_TURN = "empty_turn"
NO_COMPLETE_ROUND = "no_complete_round"
REASONS = (NO_LABELS, ROLE_ORDER, EMPTY_TURN, NO_COMPLETE_ROUND)


class DialogueError(ValueError):
    pass


@dataclass(frozen=True)
class Dialogue:
    image_id: str
    turns: tuple[tuple[str, str], ...]
    source: str = "unimm-chat"

    def __post_init__(self):
        if not self.turns or len(self.turns) % 2:
            raise DialogueError("dialogue needs complete user/assistant rounds")
        for i, (role, text) in enumerate(self.turns):
            want = USER if i % 2 == 0 else ASSISTANT
            if role != want:
                raise DialogueError(f"turn {i} has role {role!r}, expected {want!r}")
            if not text.strip():
                raise DialogueError(f"turn {i} is empty")

    @property
    def rounds(self) -> int:
        return len(self.turns) // 2

    def questions(self) -> list[str]:
        return [t for r, t in self.turns if r == USER]

    def answers(self) -> list[str]:
        return [t for r, t in self.turns if r == ASSISTANT]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "turns": [{"role": r, "text": t} for r, t in self.turns],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Dialogue":
        return cls(str(obj["image_id"]), tuple((t["role"], t["text"]) for t in obj["turns"]), obj.get("source", "unimm-chat"))


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str
    raw: str
    image_id: str = ""

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "reason": self.reason, "detail": self.detail, "raw": self.raw}


def read_dialogues(path) -> list[Dialogue]:
    with open(path, encoding="utf-8") as f:
        return [Dialogue.from_json(json.loads(line)) for line in f if line.strip()]


def _label_pattern(user: str, assistant: str):
    return re.compile(rf"^\s*({re.escape(user)}|{re.escape(assistant)})\s*:[ \t]?(.*)$", re.IGNORECASE)


def _pick_family(lines: list[str]):
    for user, assistant in LABEL_FAMILIES:
        pat = _label_pattern(user, assistant)
        if any(pat.match(line) for line in lines):
            return user, pat
    return None, None


def _tidy(chunks: list[str]) -> str:
    return "\n".join(chunks).strip()


def parse_dialogue(raw: str, image_id: str = "", source: str = "unimm-chat") -> Dialogue | Rejection:
    """Return a Dialogue, or a Rejection carrying one of REASONS. Never raises on text input."""
    lines = raw.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    user_label, pat = _pick_family(lines)
    if pat is None:
        return Rejection(NO_LABELS, "no role labels found", raw, image_id)

    turns: list[tuple[str, list[str]]] = []
    for lineno, line in enumerate(lines, 1):
        m = pat.match(line)
        if m:
            role = USER if m.group(1).lower() == user_label else ASSISTANT
            if turns and turns[-1][0] == role:
                return Rejection(ROLE_ORDER, f"line {lineno}: two consecutive {role} turns", raw, image_id)
            if not turns and role == ASSISTANT:
                return Rejection(ROLE_ORDER, f"line {lineno}: dialogue opens with an answer", raw, image_id)
            turns.append((role, [m.group(2)]))
        elif turns:
            turns[-1][1].append(line)

    tidy = [(role, _tidy(chunks)) for role, chunks in turns]
    if tidy and tidy[-1][0] == USER:
        tidy.pop()
    for i, (role, text) in enumerate(tidy):
        if not text:
            return Rejection(EMPTY_TURN, f"turn {i} ({role}) is empty", raw, image_id)
    if not tidy:
        return Rejection(NO_COMPLETE_ROUND, "no question was followed by an answer", raw, image_id)
    return Dialogue(image_id, tuple(tidy), source)
