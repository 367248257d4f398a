"""Command-line entry point: ``bridgelm <group> <command>`` driven by one JSON config."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import bench as B
from . import trainer
from .bridge import ConfigError
from .checkpoint import config_hash
from .forge import build as fbuild
from .forge.client import AuthError, ChatClient, ClientConfig, ClientConfigError, MockChatService, MockJudge, ServiceError
from .forge.parse import read_dialogues
from .forge.prompts import load_exemplars
from .forge.records import IngestConfigError, IngestError, canonical_kind, ingest_all
from .forge.stats import compute_stats
from .model import BridgeLM, ModelConfig, image_for
from .tensor import ContractError

log = logging.getLogger("bridgelm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    """Parsed run config. Relative paths resolve against the config file's directory."""

    raw: dict
    base: Path
    output_dir: Path
    sources: dict[str, Path]
    exemplars: Path | None
    pretrain_data: Path | None
    instruct_data: Path | None
    bench_pools: dict[str, Path]
    exclude_images: list[str]
    model: ModelConfig
    stages: dict[str, trainer.StageConfig]
    client: ClientConfig
    judge_client: ClientConfig
    seed: int = 0
    bench_seed: int = 0
    max_new_tokens: int = 24
    hash: str = field(default="")

    @property
    def corpus_path(self) -> Path:
        return self.instruct_data or self.output_dir / f"{fbuild.MERGED_SOURCE}.jsonl"


KNOWN_KEYS = {"seed", "paths", "model", "stages", "client", "judge_client", "bench", "exclude_images"}
PATH_KEYS = {"output_dir", "sources", "exemplars", "pretrain_data", "instruct_data", "bench_pools"}


def _path(base: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else (base / p).resolve()


def load_run_config(path, output_dir=None, seed=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if output_dir is not None:
        raw.setdefault("paths", {})["output_dir"] = str(Path(output_dir).resolve())
    if seed is not None:
        raw["seed"] = seed
    base = path.resolve().parent
    paths = raw.get("paths", {})
    unknown = set(paths) - PATH_KEYS
    if unknown:
        raise UsageError(f"unknown paths keys: {sorted(unknown)}")
    seed_val = int(raw.get("seed", 0))

    try:
        sources = {canonical_kind(k): _path(base, v) for k, v in paths.get("sources", {}).items()}
    except IngestConfigError as exc:
        raise UsageError(str(exc)) from None
    pools = dict(paths.get("bench_pools", {}))
    if set(pools) - set(B.BENCH_SOURCES):
        raise UsageError(f"unknown bench pools: {sorted(set(pools) - set(B.BENCH_SOURCES))}")
    try:
        model = ModelConfig.from_dict(raw["model"]) if "model" in raw else ModelConfig(seed=seed_val)
        stages = {}
        for kind in trainer.STAGES:
            over = dict(raw.get("stages", {}).get(kind, {}))
            over.setdefault("seed", seed_val)
            stages[kind] = trainer.StageConfig.defaults(kind, **over)
        client = ClientConfig.from_dict(raw.get("client"))
        judge_client = ClientConfig.from_dict(raw.get("judge_client", raw.get("client")))
    except (ConfigError, ClientConfigError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    bench_cfg = raw.get("bench", {})

    cfg = RunConfig(
        raw=raw,
        base=base,
        output_dir=_path(base, paths.get("output_dir", "out")),
        sources=sources,
        exemplars=_path(base, paths.get("exemplars")),
        pretrain_data=_path(base, paths.get("pretrain_data")),
        instruct_data=_path(base, paths.get("instruct_data")),
        bench_pools={k: _path(base, v) for k, v in pools.items()},
        exclude_images=[str(x) for x in raw.get("exclude_images", [])],
        model=model,
        stages=stages,
        client=client,
        judge_client=judge_client,
        seed=seed_val,
        bench_seed=int(bench_cfg.get("seed", seed_val)),
        max_new_tokens=int(bench_cfg.get("max_new_tokens", 24)),
    )
    # the hash covers the effective config, not the file's absolute location
    cfg.hash = config_hash({k: v for k, v in raw.items() if k != "paths"} | {"paths": _relpaths(paths)})
    _validate_inputs(cfg)
    return cfg


def _relpaths(paths: dict) -> dict:
    out = dict(paths)
    out.pop("output_dir", None)
    return out


def _validate_inputs(cfg: RunConfig) -> None:
    inputs = list(cfg.sources.values()) + list(cfg.bench_pools.values())
    inputs += [p for p in (cfg.exemplars, cfg.pretrain_data) if p is not None]
    missing = [str(p) for p in inputs if not p.is_file()]
    if missing:
        raise UsageError(f"configured input file(s) not found: {', '.join(missing)}")


# ---------------------------------------------------------------------------
# helpers


def _service(cfg: ClientConfig, mock, fake):
    if mock:
        return fake
    try:
        return ChatClient(cfg)
    except ClientConfigError as exc:
        raise UsageError(f"{exc} (set it or pass the mock flag)") from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _excluded(cfg: RunConfig) -> set[str]:
    return set(cfg.exclude_images)


def _load_pools(cfg: RunConfig) -> dict[str, list]:
    missing = [s for s in B.BENCH_SOURCES if s not in cfg.bench_pools]
    if missing:
        raise UsageError(f"paths.bench_pools lacks {missing}")
    return {s: B.read_samples(cfg.bench_pools[s], s) for s in B.BENCH_SOURCES}


def _read_pairs(path: Path) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return [(str(r["image_id"]), r["caption"]) for r in rows]


# ---------------------------------------------------------------------------
# commands


def cmd_forge_build(cfg: RunConfig, args) -> int:
    if not cfg.sources:
        raise UsageError("paths.sources is empty")
    store = ingest_all(cfg.sources)
    for path, lineno, err in store.malformed:
        log.warning("malformed line %s:%d: %s", path, lineno, err)
    exemplars = load_exemplars(cfg.exemplars)
    service = _service(cfg.client, args.mock, MockChatService())
    exclude = _excluded(cfg)
    out = cfg.output_dir
    if args.sep:
        results = fbuild.build_sep_variant(store, exemplars, service, exclude, cfg.client.parallelism, cfg.seed)
        for ds, res in results.items():
            fbuild.write_build(out, f"{fbuild.MERGED_SOURCE}-sep.{ds}", res, cfg.hash)
    else:
        results = {"merged": fbuild.build_corpus(store, exemplars, service, exclude, cfg.client.parallelism)}
        fbuild.write_build(out, fbuild.MERGED_SOURCE, results["merged"], cfg.hash)
    status = EXIT_OK
    for name, res in results.items():
        print(f"{res.source}: {len(res.dialogues)} accepted, {len(res.rejects)} rejected, "
              f"{len(res.failures)} service failures, {len(res.excluded)} excluded")
        try:
            res.check_budget()
        except fbuild.RejectionBudgetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            status = EXIT_DATA
        if res.failures and status == EXIT_OK:
            status = EXIT_SERVICE
    return status


def cmd_forge_stats(cfg: RunConfig, args) -> int:
    corpus = Path(args.corpus) if args.corpus else cfg.corpus_path
    if not corpus.is_file():
        raise UsageError(f"corpus {corpus} not found")
    st = compute_stats(read_dialogues(corpus))
    out = Path(args.out) if args.out else cfg.output_dir / "stats"
    payload = st.to_json()
    payload["config_hash"] = cfg.hash
    payload["corpus"] = corpus.name
    _write_json(out / "stats.json", payload)
    tables = {
        "question_lengths.csv": ("tokens", st.question_lengths),
        "answer_lengths.csv": ("tokens", st.answer_lengths),
        "question_types.csv": ("question_type", st.question_types),
    }
    for name, (key, hist) in tables.items():
        with open(out / name, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([key, "count", "config_hash"])
            for k, v in hist.items():
                w.writerow([k, v, cfg.hash])
    print(f"{st.dialogues} dialogues, {st.instructions} instructions, mean turns {st.mean_turns:.2f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    stage = cfg.stages[args.stage]
    out = cfg.output_dir
    if args.stage == "pretrain":
        if cfg.pretrain_data is None:
            raise UsageError("paths.pretrain_data is not set")
        data = _read_pairs(cfg.pretrain_data)
        model = BridgeLM(cfg.model)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else out / "pretrain.ckpt"
        if ckpt.is_file():
            model, _ = BridgeLM.load(ckpt)
        elif args.from_scratch:
            model = BridgeLM(cfg.model)
        else:
            raise UsageError(f"no pretrain checkpoint at {ckpt}; run the pretrain stage first or pass --from-scratch")
        corpus = cfg.corpus_path
        if not corpus.is_file():
            raise UsageError(f"instruction corpus {corpus} not found; run 'forge build' first")
        data = [(d.image_id, list(d.turns)) for d in read_dialogues(corpus)]
    llm_before = model.group_digest("llm")
    res = trainer.run_stage(model, stage, data, out, cfg.hash)
    losses = [r["loss"] for r in res.metrics]
    print(f"{args.stage}: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}, "
          f"{res.skipped} skipped, checkpoint {res.checkpoint}")
    if args.stage == "pretrain" and model.group_digest("llm") != llm_before:
        raise DataError("pretrain changed the frozen language model")
    return EXIT_OK


def cmd_check_grads(cfg: RunConfig | None, args) -> int:
    report, n = trainer.tiny_grad_check(seed=args.seed or 0)
    print(f"gradient check over {n} parameters")
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_DATA


def cmd_bench_sample(cfg: RunConfig, args) -> int:
    pools = _load_pools(cfg)
    excluded = _excluded(cfg)
    corpus = cfg.corpus_path
    if corpus.is_file():
        excluded |= {d.image_id for d in read_dialogues(corpus)}
    else:
        log.warning("no corpus at %s; only configured exclusions apply", corpus)
    draw = B.sample_bench(pools, cfg.bench_seed, excluded)
    leaks = B.exclusion_check(draw.samples, excluded)
    if leaks:
        raise DataError(f"bench shares images with the corpus: {leaks}")
    path = cfg.output_dir / "bench.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    B.write_samples(path, draw.samples, cfg.hash)
    print(f"bench: {len(draw.samples)} samples (vqav2 stratified pool {len(draw.vqav2_pool)}) -> {path}")
    return EXIT_OK


def _generate_responses(cfg: RunConfig, bench, ckpt: Path) -> dict[str, str]:
    if not ckpt.is_file():
        raise UsageError(f"no responses given and no checkpoint at {ckpt}")
    model, _ = BridgeLM.load(ckpt)
    out = {}
    for s in bench:
        out[s.sample_id] = model.generate(image_for(s.image_id, model.image_size), s.question, cfg.max_new_tokens)
    path = cfg.output_dir / "responses.jsonl"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in bench:
            f.write(json.dumps({"sample_id": s.sample_id, "response": out[s.sample_id], "config_hash": cfg.hash},
                               ensure_ascii=False, sort_keys=True) + "\n")
    log.info("wrote %d responses to %s", len(out), path)
    return out


def cmd_bench_eval(cfg: RunConfig, args) -> int:
    bench_path = cfg.output_dir / "bench.jsonl"
    if not bench_path.is_file():
        raise UsageError(f"{bench_path} not found; run 'bench sample' first")
    bench = B.read_samples(bench_path)
    if args.responses:
        responses = B.read_responses(args.responses)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "instruct.ckpt"
        responses = _generate_responses(cfg, bench, ckpt)
    service = _service(cfg.judge_client, args.mock_judge, MockJudge())
    result = B.run_eval(responses, bench, args.trials, service, cfg.judge_client.parallelism)
    B.write_verdicts(cfg.output_dir / "verdicts.jsonl", result.verdicts, cfg.hash)
    for tr in result.trials:
        print(f"trial {tr.trial}: AVG {tr.avg if tr.avg is None else round(tr.avg, 2)}, failed parses {sum(tr.failed.values())}")
    return EXIT_OK


def cmd_bench_report(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    for name in ("bench.jsonl", "verdicts.jsonl"):
        if not (out / name).is_file():
            raise UsageError(f"{out / name} not found")
    bench = B.read_samples(out / "bench.jsonl")
    trials = B.reports_from_verdicts(B.read_verdicts(out / "verdicts.jsonl"), bench)
    rows = B.summarize(trials)
    (out / "report.md").write_text(B.render_markdown(rows, cfg.hash), encoding="utf-8")
    (out / "report.csv").write_text(B.render_csv(rows, cfg.hash), encoding="utf-8")
    print(B.render_markdown(rows, cfg.hash))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bridgelm", description=__doc__)
    p.add_argument("-c", "--config", default="bridgelm.json", help="run config (JSON)")
    p.add_argument("--output-dir", help="override paths.output_dir")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("-v", "--verbose", action="store_true")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    forge = groups.add_parser("forge", help="build and inspect the instruction corpus")
    fsub = forge.add_subparsers(dest="command", required=True, parser_class=_Parser)
    b = fsub.add_parser("build")
    b.add_argument("--sep", action="store_true", help="per-dataset builds without merging")
    b.add_argument("--mock", action="store_true", help="use the offline deterministic chat service")
    b.set_defaults(func=cmd_forge_build)
    s = fsub.add_parser("stats")
    s.add_argument("--corpus", help="dialogue JSONL (default: the merged build output)")
    s.add_argument("--out", help="output directory (default: <output_dir>/stats)")
    s.set_defaults(func=cmd_forge_stats)

    t = groups.add_parser("train", help="run a training stage")
    t.add_argument("--stage", choices=trainer.STAGES, required=True)
    t.add_argument("--from-scratch", action="store_true", help="instruct stage without a pretrain checkpoint")
    t.add_argument("--checkpoint", help="starting checkpoint for the instruct stage")
    t.set_defaults(func=cmd_train)

    m = groups.add_parser("model", help="model diagnostics")
    msub = m.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = msub.add_parser("check-grads", help="finite-difference check on the tiny config")
    g.set_defaults(func=cmd_check_grads, needs_config=False)

    bn = groups.add_parser("bench", help="benchmark sampling, judging and reporting")
    bsub = bn.add_subparsers(dest="command", required=True, parser_class=_Parser)
    bs = bsub.add_parser("sample")
    bs.set_defaults(func=cmd_bench_sample)
    be = bsub.add_parser("eval")
    be.add_argument("--responses", help="transcript JSONL {sample_id, response}; generated from the checkpoint if omitted")
    be.add_argument("--checkpoint", help="checkpoint for generation (default: <output_dir>/instruct.ckpt)")
    be.add_argument("--trials", type=int, default=3)
    be.add_argument("--mock-judge", action="store_true", help="use the offline keyword-overlap judge")
    be.set_defaults(func=cmd_bench_eval)
    br = bsub.add_parser("report")
    br.set_defaults(func=cmd_bench_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if getattr(args, "needs_config", True):
            cfg = load_run_config(args.config, args.output_dir, args.seed)
        return args.func(cfg, args)
    except (UsageError, ClientConfigError, IngestConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ServiceError,) as exc:
        kind = "authentication" if isinstance(exc, AuthError) else "service"
        print(f"{kind} error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (DataError, IngestError, B.SamplingError, B.MissingResponsesError, fbuild.RejectionBudgetError,
            trainer.TrainingAborted, ContractError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
