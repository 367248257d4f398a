"""Amassment rendering and the few-shot construction message list."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

from ..golden import load_text, normalize
from .records import MergedImageContext

HEADER_FIXES = {re.compile(r"\[\s*Image description\s*\]"): "[Image description]"}


def canonical_headers(text: str) -> str:
    """Normalise the spaced ``[ Image description ]`` spelling to the compact one."""
    for pattern, repl in HEADER_FIXES.items():
        text = pattern.sub(repl, text)
    return text


def construction_prompt() -> str:
    return load_text("construction_prompt.txt")


def amassment_template() -> str:
    return canonical_headers(load_text("amassment_template.txt"))


def qa_line(question: str, answer: str) -> str:
    return f"Question: {question} Answer: {answer}"


def _slots(ctx: MergedImageContext) -> dict[str, list[str]]:
    return {
        "VQAv2_qas": [qa_line(q, a) for q, a in ctx.vqav2_qas],
        "OKVQA_qas": [qa_line(q, a) for q, a in ctx.okvqa_qas],
        "AOKVQA_qas": [qa_line(q, a) for q, a in ctx.aokvqa_qas],
        "VisualDialog_qas": [qa_line(q, a) for q, a in ctx.visdial_qas],
        "AOKVQA_rationales": list(ctx.rationales),
        "COCO_captions": list(ctx.captions),
    }


_SLOT = re.compile(r"^\{(\w+)\}$")


def render_amassment(ctx: MergedImageContext) -> str:
    """Fill the amassment template; each slot line expands to one line per item or vanishes."""
    slots = _slots(ctx)
    out: list[str] = []
    for line in amassment_template().split("\n"):
        m = _SLOT.match(line)
        if m is None:
            out.append(line)
        else:
            out.extend(slots[m.group(1)])
    return "\n".join(out)


@dataclass(frozen=True)
class FewShotExemplar:
    input: str
    output: str

    def __post_init__(self):
        if not self.input.strip() or not self.output.strip():
            raise ValueError("few-shot exemplar needs non-empty input and output")


def load_exemplars(path=None) -> list[FewShotExemplar]:
    if path is None:
        raw = resources.files("bridgelm.golden").joinpath("fewshot_exemplars.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            raw = f.read()
    return [FewShotExemplar(normalize(e["input"]), normalize(e["output"])) for e in json.loads(raw)]


def build_messages(query: str, exemplars: list[FewShotExemplar] = ()) -> list[dict]:
    """System prompt, then a user/assistant pair per exemplar, then the query as the last user turn."""
    messages = [{"role": "system", "content": construction_prompt()}]
    for ex in exemplars:
        messages.append({"role": "user", "content": ex.input})
        messages.append({"role": "assistant", "content": ex.output})
    messages.append({"role": "user", "content": query})
    return messages
