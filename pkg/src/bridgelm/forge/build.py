"""Corpus builds: merged (one prompt per image) and the per-dataset -sep variant."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from ..golden import load_lines
from .client import ChatService, ServiceError, complete_many
from .parse import Dialogue, Rejection, parse_dialogue
from .prompts import FewShotExemplar, build_messages, render_amassment
from .records import DATASETS, AnnotationStore, MergedImageContext, merge_by_image

log = logging.getLogger(__name__)

MAX_REJECT_FRACTION = 0.10
MERGED_SOURCE = "unimm-chat"


class RejectionBudgetError(RuntimeError):
    pass


def sep_source(dataset: str) -> str:
    return f"{MERGED_SOURCE}-sep:{dataset}"


@dataclass
class BuildResult:
    source: str
    attempted: list[str] = field(default_factory=list)
    dialogues: list[Dialogue] = field(default_factory=list)
    rejects: list[Rejection] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (image_id, error)
    excluded: list[str] = field(default_factory=list)
    service_calls: int = 0

    @property
    def responses(self) -> int:
        return len(self.dialogues) + len(self.rejects)

    @property
    def rejection_rate(self) -> float:
        return len(self.rejects) / self.responses if self.responses else 0.0

    def image_ids(self) -> set[str]:
        return {d.image_id for d in self.dialogues}

    def metadata(self, config_hash: str | None = None) -> dict:
        return {
            "source": self.source,
            "images_attempted": len(self.attempted),
            "images_excluded": len(self.excluded),
            "service_calls": self.service_calls,
            "responses": self.responses,
            "accepted": len(self.dialogues),
            "rejected": len(self.rejects),
            "service_failures": len(self.failures),
            "rejection_rate": self.rejection_rate,
            "reject_reasons": _reason_counts(self.rejects),
            "dedup": "none",
            "config_hash": config_hash,
        }

    def check_budget(self, limit: float = MAX_REJECT_FRACTION) -> None:
        if self.rejection_rate > limit:
            raise RejectionBudgetError(
                f"{self.source}: {len(self.rejects)}/{self.responses} responses rejected "
                f"({self.rejection_rate:.1%} > {limit:.0%}); reasons {_reason_counts(self.rejects)}"
            )


def _reason_counts(rejects) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in rejects:
        out[r.reason] = out.get(r.reason, 0) + 1
    return dict(sorted(out.items()))


def build_from_contexts(contexts: dict[str, MergedImageContext], exemplars: list[FewShotExemplar],
                        service: ChatService, source: str = MERGED_SOURCE,
                        exclude: frozenset[str] | set[str] = frozenset(), parallelism: int = 4) -> BuildResult:
    result = BuildResult(source)
    jobs = []
    for key, ctx in contexts.items():
        if key in exclude:
            result.excluded.append(key)
            continue
        result.attempted.append(key)
        jobs.append((key, build_messages(render_amassment(ctx), exemplars)))
    result.service_calls = len(jobs)
    for key, outcome in complete_many(service, jobs, parallelism):
        if isinstance(outcome, ServiceError):
            log.error("service failed for image %s: %s", key, outcome)
            result.failures.append((key, str(outcome)))
            continue
        parsed = parse_dialogue(outcome.text, key, source)
        (result.dialogues if isinstance(parsed, Dialogue) else result.rejects).append(parsed)
    # completion order is not deterministic; files are written per key order
    result.dialogues.sort(key=lambda d: d.image_id)
    result.rejects.sort(key=lambda r: r.image_id)
    result.failures.sort()
    assert result.responses + len(result.failures) == result.service_calls
    return result


def build_corpus(store: AnnotationStore, exemplars, service: ChatService, exclude=frozenset(),
                 parallelism: int = 4) -> BuildResult:
    return build_from_contexts(merge_by_image(store), exemplars, service, MERGED_SOURCE, exclude, parallelism)


def caption_dialogues(store: AnnotationStore, seed: int = 0, exclude=frozenset()) -> BuildResult:
    """One single-round dialogue per captioned image: a caption instruction and one of its captions."""
    instructions = load_lines("caption_instructions.txt")
    result = BuildResult(sep_source("coco_caption"))
    by_image: dict[str, list[str]] = {}
    for rec in store.records["coco_caption"]:
        by_image.setdefault(rec.image_id, []).append(rec.text)
    for key in sorted(by_image):
        if key in exclude:
            result.excluded.append(key)
            continue
        result.attempted.append(key)
        rng = random.Random(f"{seed}:{key}")
        turns = (("user", rng.choice(instructions)), ("assistant", rng.choice(by_image[key])))
        result.dialogues.append(Dialogue(key, turns, result.source))
    return result


def build_sep_variant(store: AnnotationStore, exemplars, service: ChatService, exclude=frozenset(),
                      parallelism: int = 4, seed: int = 0) -> dict[str, BuildResult]:
    """Per-dataset builds with no cross-source merging; COCO captions skip the service entirely."""
    out = {}
    for ds in DATASETS:
        if ds == "coco_caption":
            out[ds] = caption_dialogues(store, seed, exclude)
        else:
            out[ds] = build_from_contexts(merge_by_image(store.only(ds)), exemplars, service,
                                          sep_source(ds), exclude, parallelism)
    return out


def _dump_jsonl(path: Path, rows, config_hash: str | None):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            if config_hash is not None:
                row = {**row, "config_hash": config_hash}
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def write_build(out_dir, name: str, result: BuildResult, config_hash: str | None = None) -> dict[str, Path]:
    """Write ``<name>.jsonl``, ``<name>.rejects.jsonl`` and ``<name>.meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "dialogues": out / f"{name}.jsonl",
        "rejects": out / f"{name}.rejects.jsonl",
        "meta": out / f"{name}.meta.json",
    }
    _dump_jsonl(paths["dialogues"], (d.to_json() for d in result.dialogues), config_hash)
    _dump_jsonl(paths["rejects"], (r.to_json() for r in result.rejects), config_hash)
    meta = result.metadata(config_hash)
    meta["failures"] = [{"image_id": k, "error": e} for k, e in result.failures]
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
