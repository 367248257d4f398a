"""Seed-dataset annotation records, JSONL ingestion and per-image merging."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

log = logging.getLogger(__name__)

# canonical dataset tags in amassment order
DATASETS = ("vqav2", "okvqa", "aokvqa", "visdial", "coco_caption")

KIND_ALIASES = {
    "vqa": "vqav2",
    "vqav2": "vqav2",
    "okvqa": "okvqa",
    "aokvqa": "aokvqa",
    "visdial": "visdial",
    "visualdialog": "visdial",
    "caption": "coco_caption",
    "coco": "coco_caption",
    "coco_caption": "coco_caption",
}

MAX_MALFORMED_FRACTION = 0.01

# (images, annotations) of the full-size sources; provenance only, never loaded in tests
FULL_SCALE_SOURCES = {
    "vqav2": (123_287, 658_111),
    "okvqa": (14_031, 14_055),
    "aokvqa": (17_662, 18_201),
    "visdial": (123_287, 1_232_870),
    "coco_caption": (123_287, 616_767),
}


class IngestConfigError(ValueError):
    pass


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class VqaQa:
    image_id: str
    question: str
    answers: tuple[tuple[str, str], ...]  # (text, confidence)
    source: str = "vqav2"
    question_type: str | None = None

    @property
    def answer(self) -> str:
        return consensus([a for a, _ in self.answers])


@dataclass(frozen=True)
class OkQa:
    image_id: str
    question: str
    answers: tuple[str, ...]
    source: str = "okvqa"

    @property
    def answer(self) -> str:
        return consensus(self.answers)


@dataclass(frozen=True)
class AokQa:
    image_id: str
    question: str
    answer: str
    rationales: tuple[str, ...]
    source: str = "aokvqa"


@dataclass(frozen=True)
class VisDialTurn:
    image_id: str
    question: str
    answer: str
    turn: int
    source: str = "visdial"


@dataclass(frozen=True)
class Caption:
    image_id: str
    text: str
    source: str = "coco_caption"


AnnotationRecord = Union[VqaQa, OkQa, AokQa, VisDialTurn, Caption]


def consensus(answers: Iterable[str]) -> str:
    """Most frequent answer; ties go to the earliest."""
    answers = [a for a in answers if a]
    if not answers:
        return ""
    counts = Counter(answers)
    best = max(counts.values())
    return next(a for a in answers if counts[a] == best)


def _text(obj, key) -> str:
    value = obj[key]
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"field {key!r} must be a non-empty string")
    return value.strip()


def _image_id(obj) -> str:
    raw = obj["image_id"]
    if isinstance(raw, bool) or not isinstance(raw, (str, int)):
        raise ValueError("image_id must be a string or integer")
    key = str(raw).strip()
    if not key:
        raise ValueError("empty image_id")
    return key


def parse_record(kind: str, obj: dict) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    img = _image_id(obj)
    if kind == "vqav2":
        answers = []
        for a in obj["answers"]:
            if isinstance(a, str):
                answers.append((a, "yes"))
            else:
                answers.append((str(a["text"]), str(a.get("confidence", ""))))
        if not answers:
            raise ValueError("vqa record without answers")
        return VqaQa(img, _text(obj, "question"), tuple(answers), question_type=obj.get("question_type"))
    if kind == "okvqa":
        answers = tuple(str(a) for a in obj["answers"])
        if not answers:
            raise ValueError("okvqa record without answers")
        return OkQa(img, _text(obj, "question"), answers)
    if kind == "aokvqa":
        rationales = tuple(str(r).strip() for r in obj["rationales"] if str(r).strip())
        if not rationales:
            raise ValueError("aokvqa record needs at least one rationale")
        return AokQa(img, _text(obj, "question"), _text(obj, "answer"), rationales)
    if kind == "visdial":
        return VisDialTurn(img, _text(obj, "question"), _text(obj, "answer"), int(obj["turn"]))
    if kind == "coco_caption":
        return Caption(img, _text(obj, "caption"))
    raise IngestConfigError(f"unknown dataset kind {kind!r}")


@dataclass
class AnnotationStore:
    records: dict[str, list] = field(default_factory=lambda: {k: [] for k in DATASETS})
    malformed: list[tuple[str, int, str]] = field(default_factory=list)

    def add(self, rec: AnnotationRecord) -> None:
        self.records[rec.source].append(rec)

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.records.items()}

    def image_counts(self) -> dict[str, int]:
        return {k: len({r.image_id for r in v}) for k, v in self.records.items()}

    def image_ids(self) -> set[str]:
        return {r.image_id for recs in self.records.values() for r in recs}

    def __len__(self) -> int:
        return sum(self.counts().values())

    def only(self, dataset: str) -> "AnnotationStore":
        """A view holding just one dataset's records (others emptied)."""
        out = AnnotationStore()
        out.records[dataset] = list(self.records[dataset])
        return out


def canonical_kind(kind: str) -> str:
    try:
        return KIND_ALIASES[kind.lower()]
    except KeyError:
        raise IngestConfigError(f"unknown dataset kind {kind!r}; expected one of {sorted(KIND_ALIASES)}") from None


def ingest(kind: str, path, store: AnnotationStore | None = None) -> AnnotationStore:
    """Load one JSONL source into ``store`` (a fresh one by default).

    Malformed lines are collected on ``store.malformed``; more than 1% of the
    file's non-blank lines being malformed is a hard failure.
    """
    kind = canonical_kind(kind)
    store = store if store is not None else AnnotationStore()
    path = Path(path)
    total = bad = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            total += 1
            try:
                store.add(parse_record(kind, json.loads(line)))
            except IngestConfigError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                bad += 1
                store.malformed.append((str(path), lineno, f"{type(exc).__name__}: {exc}"))
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise IngestError(f"{path}: {bad}/{total} malformed lines exceeds {MAX_MALFORMED_FRACTION:.0%}")
    log.info("ingested %s from %s: %d records, %d malformed", kind, path, total - bad, bad)
    return store


def ingest_all(sources: dict[str, str | Path]) -> AnnotationStore:
    store = AnnotationStore()
    for kind, path in sources.items():
        ingest(kind, path, store)
    return store


# ---------------------------------------------------------------------------
# merge


@dataclass
class MergedImageContext:
    image_id: str
    vqav2_qas: list[tuple[str, str]] = field(default_factory=list)
    okvqa_qas: list[tuple[str, str]] = field(default_factory=list)
    aokvqa_qas: list[tuple[str, str]] = field(default_factory=list)
    visdial_qas: list[tuple[str, str]] = field(default_factory=list)
    rationales: list[str] = field(default_factory=list)
    captions: list[str] = field(default_factory=list)

    def statement_groups(self) -> list[list[tuple[str, str]]]:
        return [self.vqav2_qas, self.okvqa_qas, self.aokvqa_qas, self.visdial_qas]

    def is_empty(self) -> bool:
        return not (any(self.statement_groups()) or self.rationales or self.captions)


def merge_by_image(store: AnnotationStore) -> dict[str, MergedImageContext]:
    """One context per image with any annotation; keys sorted, groups in ingestion order."""
    contexts: dict[str, MergedImageContext] = {}

    def ctx(img: str) -> MergedImageContext:
        if img not in contexts:
            contexts[img] = MergedImageContext(img)
        return contexts[img]

    for r in store.records["vqav2"]:
        ctx(r.image_id).vqav2_qas.append((r.question, r.answer))
    for r in store.records["okvqa"]:
        ctx(r.image_id).okvqa_qas.append((r.question, r.answer))
    for r in store.records["aokvqa"]:
        c = ctx(r.image_id)
        c.aokvqa_qas.append((r.question, r.answer))
        c.rationales.extend(r.rationales)
    for r in store.records["visdial"]:
        ctx(r.image_id).visdial_qas.append((r.question, r.answer))
    for r in store.records["coco_caption"]:
        ctx(r.image_id).captions.append(r.text)
    return {k: contexts[k] for k in sorted(contexts)}
