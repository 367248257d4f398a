"""Two-stage training: caption pre-training with a frozen decoder, then instruction tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import ConversationSnippet, ConversationTemplate, render_conversation
from .golden import load_lines
from .model import GROUPS, BridgeLM, ModelConfig, image_for
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

CAPTION_INSTRUCTIONS: tuple[str, ...] = tuple(load_lines("caption_instructions.txt"))

STAGES = ("pretrain", "instruct")

# Full-scale reference settings, kept for provenance only. Desk-scale runs use
# StageConfig.defaults().
FULL_SCALE = {
    "pretrain": {"steps": 100_000, "batch_size": 2048, "learning_rate": 1e-4, "image_size": 448},
    "instruct": {"steps": 3200, "batch_size": 512, "learning_rate": 2e-5, "image_size": 672},
}


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, batch_ids: list, dump: Path | None = None):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
        self.dump = dump


@dataclass
class StageConfig:
    kind: str
    steps: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    data: str | None = None
    image_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind not in STAGES:
            raise ValueError(f"unknown stage {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    @classmethod
    def defaults(cls, kind: str, **overrides) -> "StageConfig":
        base = {
            "pretrain": dict(learning_rate=1e-4, image_size=16),
            "instruct": dict(learning_rate=2e-5, image_size=32),
        }[kind]
        base.update(overrides)
        return cls(kind=kind, **base)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# parameter groups


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    trainable: bool


def param_groups(model: BridgeLM, stage: str) -> list[ParamGroup]:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    named = model.named_groups()
    return [
        ParamGroup(g, named[g], trainable=not (stage == "pretrain" and g == "llm"))
        for g in GROUPS
    ]


def apply_stage(model: BridgeLM, stage: str) -> list[ParamGroup]:
    groups = param_groups(model, stage)
    for grp in groups:
        for p in grp.params.values():
            p.requires_grad = grp.trainable
            p.grad = None
    return groups


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(
    params: dict[str, Tensor],
    state: dict[str, dict],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam step over every parameter holding a gradient."""
    b1, b2 = betas
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        s = state.setdefault(name, {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        g = p.grad
        s["t"] += 1
        s["m"] = b1 * s["m"] + (1 - b1) * g
        s["v"] = b2 * s["v"] + (1 - b2) * g * g
        m_hat = s["m"] / (1 - b1 ** s["t"])
        v_hat = s["v"] / (1 - b2 ** s["t"])
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_update(self.params, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def optimizer_for(model: BridgeLM, cfg: StageConfig) -> AdamW:
    params = {k: p for k, p in model.named_parameters() if p.requires_grad}
    return AdamW(params, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)


# ---------------------------------------------------------------------------
# steps


def batch_loss(model: BridgeLM, items: Sequence[tuple[np.ndarray, ConversationSnippet]], backward: bool = True) -> tuple[float, int]:
    """Mean answer-token NLL of a batch; gradients are accumulated when ``backward``."""
    total = sum(s.answer_tokens for _, s in items)
    if total == 0:
        return 0.0, 0
    value = 0.0
    for image, snip in items:
        if snip.answer_tokens == 0:
            continue
        if backward:
            loss = T.scale(model.loss(image, snip), 1.0 / total)
            loss.backward()
        else:
            with T.no_grad():
                loss = T.scale(model.loss(image, snip), 1.0 / total)
        value += loss.item()
    return value, total


def _keep_fitting(model: BridgeLM, items, ids=None):
    kept = []
    for i, item in enumerate(items):
        if model.fits(item[1]):
            kept.append(item)
        else:
            log.warning("skipping sample %s: %d tokens exceed capacity", ids[i] if ids else i, len(item[1]))
    return kept


def caption_snippet(model: BridgeLM, caption: str, rng: np.random.Generator) -> ConversationSnippet:
    instruction = CAPTION_INSTRUCTIONS[int(rng.integers(len(CAPTION_INSTRUCTIONS)))]
    return render_conversation([("user", instruction), ("assistant", caption)], model.template)


def pretrain_step(model: BridgeLM, opt: AdamW, batch: Sequence[tuple[str, str]], rng: np.random.Generator) -> float:
    """One caption step: a random caption instruction per pair, decoder frozen."""
    if not batch:
        raise ContractError("pretrain_step: empty batch")
    if any(p.requires_grad for p in model.llm.parameters()):
        raise ContractError("pretrain_step: the llm group must be frozen")
    items = [(image_for(img, model.image_size), caption_snippet(model, cap, rng)) for img, cap in batch]
    items = _keep_fitting(model, items, [img for img, _ in batch])
    opt.zero_grad()
    value, _ = batch_loss(model, items)
    opt.step()
    return value


def instruct_step(model: BridgeLM, opt: AdamW, batch: Sequence[tuple[str, ConversationSnippet]]) -> float:
    """One instruction-tuning step over rendered dialogues; every group trains."""
    if not batch:
        raise ContractError("instruct_step: empty batch")
    items = [(image_for(img, model.image_size), snip) for img, snip in batch]
    items = _keep_fitting(model, items, [img for img, _ in batch])
    opt.zero_grad()
    value, _ = batch_loss(model, items)
    opt.step()
    return value


# ---------------------------------------------------------------------------
# stage driver


@dataclass
class StageResult:
    metrics: list[dict]
    wall_times: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    skipped: int = 0


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, size):
            yield [int(i) for i in order[start:start + size]]


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def run_stage(model: BridgeLM, cfg: StageConfig, data: Sequence, out_dir=None, config_hash: str | None = None) -> StageResult:
    """Run ``cfg.steps`` optimizer steps.

    ``data`` holds (image_id, caption) pairs for pretrain and
    (image_id, [(role, text), ...]) dialogues for instruct. With ``out_dir``
    the stage writes ``<kind>_metrics.jsonl`` (deterministic), a separate
    ``<kind>_timing.jsonl`` with wall-clock data, and ``<kind>.ckpt``.
    """
    if not data:
        raise ContractError(f"{cfg.kind}: no training data")
    out_dir = Path(out_dir) if out_dir is not None else None
    apply_stage(model, cfg.kind)
    model.set_image_size(cfg.image_size)
    opt = optimizer_for(model, cfg)
    rng = np.random.default_rng(cfg.seed)

    skipped = 0
    if cfg.kind == "instruct":
        rendered = []
        for image_id, turns in data:
            snip = render_conversation(turns, model.template)
            if model.fits(snip):
                rendered.append((image_id, snip))
            else:
                skipped += 1
                log.warning("skipping dialogue for %s: %d tokens exceed capacity", image_id, len(snip))
        if not rendered:
            raise ContractError("instruct: every dialogue exceeds the decoder capacity")
        data = rendered

    result = StageResult(metrics=[], skipped=skipped)
    batches = _batches(len(data), cfg.batch_size, rng)
    for step in range(1, cfg.steps + 1):
        ids = next(batches)
        batch = [data[i] for i in ids]
        t0 = time.perf_counter()
        if cfg.kind == "pretrain":
            loss = pretrain_step(model, opt, batch, rng)
        else:
            loss = instruct_step(model, opt, batch)
        elapsed = time.perf_counter() - t0
        if not math.isfinite(loss):
            dump = None
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                dump = out_dir / f"{cfg.kind}_abort_step{step}.json"
                dump.write_text(json.dumps({"step": step, "batch_ids": ids, "items": [str(b[0]) for b in batch]}))
            raise TrainingAborted(f"{cfg.kind}: non-finite loss at step {step}, batch {ids}", step, ids, dump)
        row = {"step": step, "loss": loss, "lr": cfg.learning_rate, "stage": cfg.kind}
        if config_hash:
            row["config_hash"] = config_hash
        result.metrics.append(row)
        result.wall_times.append(elapsed)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out_dir / f"{cfg.kind}_metrics.jsonl", result.metrics)
        _write_jsonl(
            out_dir / f"{cfg.kind}_timing.jsonl",
            [{"step": r["step"], "seconds": w, "timestamp": time.time()} for r, w in zip(result.metrics, result.wall_times)],
        )
        result.checkpoint = model.save(
            out_dir / f"{cfg.kind}.ckpt",
            extra={"stage": cfg.kind, "stage_config": cfg.to_dict(), "run_config_hash": config_hash},
        )
    return result


def mean_loss(model: BridgeLM, data: Sequence[tuple[str, ConversationSnippet]]) -> float:
    """Answer-token NLL over ``data`` without touching gradients."""
    items = [(image_for(img, model.image_size), s) for img, s in data]
    value, _ = batch_loss(model, items, backward=False)
    return value


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckSuiteReport:
    groups: dict[str, float]
    tol: float
    nonfinite: int = 0
    floor: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.nonfinite == 0 and all(err < self.tol for err in self.groups.values())

    def failing(self) -> list[str]:
        return [g for g, err in self.groups.items() if not err < self.tol]

    def lines(self) -> list[str]:
        out = [f"{g:<10} max rel err {err:.3e}  {'ok' if err < self.tol else 'FAIL'}" for g, err in self.groups.items()]
        out.append(f"{'overall':<10} {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}, floor {self.floor:.1e})")
        return out


def grad_check_suite(
    model: BridgeLM,
    batch: Sequence[tuple[np.ndarray, ConversationSnippet]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float | None = None,
) -> GradCheckSuiteReport:
    """Finite-difference check of the summed answer-span loss wrt every trainable group."""
    if model.num_parameters() >= 5000:
        log.warning("grad_check_suite on %d parameters will be slow", model.num_parameters())

    def f() -> Tensor:
        total = None
        for image, snip in batch:
            loss = model.loss(image, snip)
            total = loss if total is None else total + loss
        return total

    named = model.named_groups()
    params = {k: p for grp in named.values() for k, p in grp.items()}
    rep = T.finite_diff_check(f, params, eps=eps, floor=floor)
    groups = {}
    for g in GROUPS:
        errs = [rep.max_rel_err[k] for k in named[g] if k in rep.max_rel_err]
        if errs:
            groups[g] = max(errs)
    model.zero_grad()
    return GradCheckSuiteReport(groups, tol, nonfinite=len(rep.nonfinite), floor=rep.floor)


def tiny_grad_check(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> tuple[GradCheckSuiteReport, int]:
    """Grad-check every group of the tiny config on two short dialogues.

    A terse template keeps sequences inside the tiny decoder's 24 positions.
    Returns the report and the parameter count.
    """
    model = BridgeLM(ModelConfig.tiny(seed=seed))
    model.template = ConversationTemplate(preamble="", user="U", assistant="A")
    apply_stage(model, "instruct")
    size = model.image_size
    batch = [
        (image_for("gc-0", size), render_conversation([("user", "hi"), ("assistant", "yo!")], model.template)),
        (image_for("gc-1", size), render_conversation([("user", "2+2"), ("assistant", "4")], model.template)),
    ]
    return grad_check_suite(model, batch, eps=eps, tol=tol), model.num_parameters()
