"""Judge-scored QA benchmark: stratified sampling, judge prompting, score parsing, reporting."""

from __future__ import annotations

import csv
import io
import json
import random
import re
from dataclasses import dataclass, field
from statistics import fmean, pvariance

from .forge.client import ChatService, ServiceError, complete_many
from .golden import load_text

BENCH_SOURCES = ("okvqa", "gqa", "aokvqa", "vqav2")
COLUMNS = {"okvqa": "OKVQA", "aokvqa": "AOKVQA", "gqa": "GQA", "vqav2": "VQAv2"}
TABLE_ORDER = ("okvqa", "aokvqa", "gqa", "vqav2")
TABLE_COLUMNS = tuple(COLUMNS[s] for s in TABLE_ORDER) + ("AVG",)
PER_SOURCE = 100
PER_TYPE = 2
SCORE_SCALE = 20
REPORT_SCHEMA = 1
NO_ANSWER = "(no answer)"
NONE_PROVIDED = "None provided."


class SamplingError(ValueError):
    def __init__(self, source: str, shortfall: int, detail: str = ""):
        super().__init__(f"{source}: {shortfall} eligible samples short{': ' + detail if detail else ''}")
        self.source = source
        self.shortfall = shortfall


class MissingResponsesError(KeyError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"no response for {len(self.ids)} sample(s): {', '.join(self.ids[:20])}")


@dataclass(frozen=True)
class BenchSample:
    sample_id: str
    source: str
    image_id: str
    question: str
    answer: str
    human_answers: tuple[tuple[str, str], ...] = ()
    rationales: tuple[str, ...] = ()
    question_type: str | None = None

    def __post_init__(self):
        if self.source not in BENCH_SOURCES:
            raise ValueError(f"unknown bench source {self.source!r}")
        if not self.answer.strip():
            raise ValueError(f"{self.sample_id}: empty ground-truth answer")

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "source": self.source,
            "image_id": self.image_id,
            "question": self.question,
            "answer": self.answer,
            "human_answers": [{"text": t, "confidence": c} for t, c in self.human_answers],
            "rationales": list(self.rationales),
            "question_type": self.question_type,
        }

    @classmethod
    def from_json(cls, obj: dict, source: str | None = None) -> "BenchSample":
        humans = []
        for h in obj.get("human_answers") or ():
            humans.append((h, "") if isinstance(h, str) else (str(h["text"]), str(h.get("confidence") or "")))
        return cls(
            sample_id=str(obj["sample_id"]),
            source=source or obj["source"],
            image_id=str(obj["image_id"]),
            question=obj["question"],
            answer=obj["answer"],
            human_answers=tuple(humans),
            rationales=tuple(obj.get("rationales") or ()),
            question_type=obj.get("question_type"),
        )


def read_samples(path, source: str | None = None) -> list[BenchSample]:
    with open(path, encoding="utf-8") as f:
        return [BenchSample.from_json(json.loads(line), source) for line in f if line.strip()]


def write_samples(path, samples, config_hash: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            row = s.to_json()
            if config_hash is not None:
                row["config_hash"] = config_hash
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# sampling


@dataclass
class BenchDraw:
    samples: list[BenchSample]
    vqav2_pool: list[BenchSample] = field(default_factory=list)

    def by_source(self) -> dict[str, list[BenchSample]]:
        out = {s: [] for s in BENCH_SOURCES}
        for s in self.samples:
            out[s.source].append(s)
        return out


def _eligible(pool, excluded) -> list[BenchSample]:
    return sorted((s for s in pool if s.image_id not in excluded), key=lambda s: s.sample_id)


def _draw(rng: random.Random, source: str, pool: list[BenchSample], k: int, detail: str = "") -> list[BenchSample]:
    if len(pool) < k:
        raise SamplingError(source, k - len(pool), detail)
    return rng.sample(pool, k)


def vqav2_type_pool(rng: random.Random, eligible: list[BenchSample], per_type: int = PER_TYPE) -> list[BenchSample]:
    """Up to ``per_type`` samples from each question_type; a type with fewer contributes all it has."""
    by_type: dict[str, list[BenchSample]] = {}
    for s in eligible:
        if not s.question_type:
            raise SamplingError("vqav2", 0, f"sample {s.sample_id} has no question_type")
        by_type.setdefault(s.question_type, []).append(s)
    pool = []
    for qt in sorted(by_type):
        group = by_type[qt]
        pool.extend(rng.sample(group, min(per_type, len(group))))
    return pool


def sample_bench(pools: dict[str, list[BenchSample]], seed: int, excluded=frozenset(),
                 per_source: int = PER_SOURCE, per_type: int = PER_TYPE) -> BenchDraw:
    """Seeded draw of ``per_source`` samples per source, never touching an excluded image."""
    missing = [s for s in BENCH_SOURCES if s not in pools]
    if missing:
        raise SamplingError(missing[0], per_source, "no pool given")
    rng = random.Random(seed)
    samples, vqa_pool = [], []
    for source in BENCH_SOURCES:
        eligible = _eligible(pools[source], excluded)
        if source == "vqav2":
            vqa_pool = vqav2_type_pool(rng, eligible, per_type)
            chosen = _draw(rng, source, vqa_pool, per_source, f"stratified pool holds {len(vqa_pool)}")
        else:
            chosen = _draw(rng, source, eligible, per_source)
        samples.extend(sorted(chosen, key=lambda s: s.sample_id))
    return BenchDraw(samples, vqa_pool)


def exclusion_check(bench, corpus_keys) -> list[str]:
    """Image keys shared by the bench and the training corpus (empty means no leak)."""
    keys = set(corpus_keys)
    return sorted({s.image_id for s in bench if s.image_id in keys})


# ---------------------------------------------------------------------------
# judge prompt


def human_answers_block(sample: BenchSample) -> str:
    """One "- answer (confidence: c)" line per human answer, then one "Rationale: r" line each."""
    lines = []
    for text, conf in sample.human_answers:
        lines.append(f"- {text} (confidence: {conf})" if conf else f"- {text}")
    lines.extend(f"Rationale: {r}" for r in sample.rationales)
    return "\n".join(lines) if lines else NONE_PROVIDED


_PLACEHOLDER = re.compile(r"\{(question|response|expected_answer|human_answers)\}")


def render_judge_prompt(sample: BenchSample, response: str) -> str:
    values = {
        "question": sample.question,
        "response": response if response.strip() else NO_ANSWER,
        "expected_answer": sample.answer,
        "human_answers": human_answers_block(sample),
    }
    # single pass so braces inside the response are never re-expanded
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], load_text("judge_prompt.txt"))


# ---------------------------------------------------------------------------
# verdicts

OK, FAILED = "ok", "failed"

_SCORE_FORMS = (
    re.compile(r"([0-9]+)"),
    re.compile(r"score\s*:\s*([0-9]+)", re.IGNORECASE),
    re.compile(r"([0-9]+)\s*/\s*5"),
)


@dataclass(frozen=True)
class JudgeVerdict:
    score: int | None
    explanation: str
    raw: str
    status: str

    def __post_init__(self):
        if (self.score is not None) != (self.status == OK):
            raise ValueError("score must be present exactly when status is ok")
        if self.score is not None and not 1 <= self.score <= 5:
            raise ValueError(f"score {self.score} outside 1..5")


def parse_verdict(raw: str) -> JudgeVerdict:
    """Score from the first non-empty line (bare N, "Score: N" or "N/5"); the rest is the explanation."""
    lines = raw.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    idx = next((i for i, line in enumerate(lines) if line.strip()), None)
    if idx is None:
        return JudgeVerdict(None, "", raw, FAILED)
    head = lines[idx].strip()
    explanation = "\n".join(lines[idx + 1 :]).strip()
    for form in _SCORE_FORMS:
        m = form.fullmatch(head)
        if m:
            score = int(m.group(1))
            if 1 <= score <= 5:
                return JudgeVerdict(score, explanation, raw, OK)
            break
    return JudgeVerdict(None, explanation or head, raw, FAILED)


def judge(service: ChatService, prompt: str) -> JudgeVerdict:
    return parse_verdict(service.complete([{"role": "user", "content": prompt}]).text)


# ---------------------------------------------------------------------------
# evaluation


def read_responses(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return {str(r["sample_id"]): r["response"] for r in rows}


@dataclass
class TrialReport:
    trial: int
    means: dict[str, float | None]  # per source, 100-point scale
    failed: dict[str, int]
    scored: dict[str, int]

    @property
    def avg(self) -> float | None:
        vals = [self.means[s] for s in BENCH_SOURCES]
        return None if any(v is None for v in vals) else fmean(vals)


@dataclass
class EvalResult:
    trials: list[TrialReport]
    verdicts: list[dict]


def _trial_report(trial: int, bench, verdicts: dict[str, JudgeVerdict]) -> TrialReport:
    means, failed, scored = {}, {}, {}
    for source in BENCH_SOURCES:
        vs = [verdicts[s.sample_id] for s in bench if s.source == source]
        scores = [v.score for v in vs if v.status == OK]
        failed[source] = len(vs) - len(scores)
        scored[source] = len(scores)
        means[source] = fmean(scores) * SCORE_SCALE if scores else None
    return TrialReport(trial, means, failed, scored)


def run_eval(responses: dict[str, str], bench: list[BenchSample], trials: int, service: ChatService,
             parallelism: int = 4) -> EvalResult:
    """Judge every (sample, response) once per trial; responses stay fixed across trials."""
    if trials < 1:
        raise ValueError("need at least one trial")
    missing = [s.sample_id for s in bench if s.sample_id not in responses]
    if missing:
        raise MissingResponsesError(missing)
    reports, rows = [], []
    for t in range(1, trials + 1):
        jobs = [(s.sample_id, [{"role": "user", "content": render_judge_prompt(s, responses[s.sample_id])}]) for s in bench]
        verdicts = {}
        for sid, outcome in complete_many(service, jobs, parallelism):
            if isinstance(outcome, ServiceError):
                raise outcome
            verdicts[sid] = parse_verdict(outcome.text)
        reports.append(_trial_report(t, bench, verdicts))
        for s in bench:
            v = verdicts[s.sample_id]
            rows.append({"sample_id": s.sample_id, "trial": t, "score": v.score, "status": v.status, "explanation": v.explanation})
    return EvalResult(reports, rows)


def write_verdicts(path, rows, config_hash: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            if config_hash is not None:
                row = {**row, "config_hash": config_hash}
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_verdicts(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def reports_from_verdicts(rows: list[dict], bench: list[BenchSample]) -> list[TrialReport]:
    by_trial: dict[int, dict[str, JudgeVerdict]] = {}
    for r in rows:
        status = r["status"]
        v = JudgeVerdict(r["score"] if status == OK else None, r.get("explanation", ""), "", status)
        by_trial.setdefault(int(r["trial"]), {})[r["sample_id"]] = v
    return [_trial_report(t, bench, by_trial[t]) for t in sorted(by_trial)]


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportRow:
    table: str  # "trial", "mean" or "variance"
    trial: int | None
    values: dict[str, float | None]  # keyed by TABLE_COLUMNS
    failed_parses: int


def summarize(trials: list[TrialReport]) -> list[ReportRow]:
    """Per-trial rows, then the across-trial mean and population variance of each column."""
    if not trials:
        raise ValueError("report needs at least one trial")
    rows = []
    for tr in trials:
        vals = {COLUMNS[s]: tr.means[s] for s in TABLE_ORDER}
        vals["AVG"] = tr.avg
        rows.append(ReportRow("trial", tr.trial, vals, sum(tr.failed.values())))
    mean, var = {}, {}
    for col in TABLE_COLUMNS[:-1]:
        xs = [r.values[col] for r in rows]
        ok = None not in xs
        mean[col] = fmean(xs) if ok else None
        var[col] = pvariance(xs) if ok else None
    src = [mean[c] for c in TABLE_COLUMNS[:-1]]
    mean["AVG"] = None if None in src else fmean(src)
    avgs = [r.values["AVG"] for r in rows]
    var["AVG"] = None if None in avgs else pvariance(avgs)
    failed = sum(r.failed_parses for r in rows)
    rows.append(ReportRow("mean", None, mean, failed))
    rows.append(ReportRow("variance", None, var, failed))
    return rows


def _fmt(x: float | None, digits: int = 1) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def render_markdown(rows: list[ReportRow], config_hash: str | None = None) -> str:
    head = "| | " + " | ".join(TABLE_COLUMNS) + " | failed parses |"
    sep = "|---" * (len(TABLE_COLUMNS) + 2) + "|"
    out = ["## Per-trial scores", "", head, sep]
    for r in rows:
        if r.table == "trial":
            out.append(f"| trial {r.trial} | " + " | ".join(_fmt(r.values[c]) for c in TABLE_COLUMNS) + f" | {r.failed_parses} |")
    out += ["", "## Averaged over trials", "", head, sep]
    for r in rows:
        if r.table == "mean":
            out.append("| mean | " + " | ".join(_fmt(r.values[c]) for c in TABLE_COLUMNS) + f" | {r.failed_parses} |")
        elif r.table == "variance":
            out.append("| variance | " + " | ".join(_fmt(r.values[c], 4) for c in TABLE_COLUMNS) + " | |")
    out += [
        "",
        f"Scores are judge ratings on a 1 to 5 scale multiplied by {SCORE_SCALE}. "
        "Unparseable verdicts are left out of the means and counted under failed parses. "
        "Variance is the population variance across trials.",
        "",
        f"config hash: {config_hash or 'n/a'}",
        "",
    ]
    return "\n".join(out)


CSV_HEADER = ("schema", "table", "trial") + TABLE_COLUMNS + ("failed_parses", "config_hash")


def render_csv(rows: list[ReportRow], config_hash: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(
            [REPORT_SCHEMA, r.table, "" if r.trial is None else r.trial]
            + ["" if r.values[c] is None else repr(float(r.values[c])) for c in TABLE_COLUMNS]
            + [r.failed_parses, config_hash or ""]
        )
    return buf.getvalue()


def read_csv_report(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected report header {reader.fieldnames}")
    rows = []
    for rec in reader:
        if int(rec["schema"]) != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {rec['schema']}")
        rows.append(ReportRow(
            rec["table"],
            int(rec["trial"]) if rec["trial"] else None,
            {c: float(rec[c]) if rec[c] else None for c in TABLE_COLUMNS},
            int(rec["failed_parses"]),
        ))
    return rows
