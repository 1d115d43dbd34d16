"""``toolgrad`` command line: filter APIs, generate, add negatives, evaluate, run the baseline, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import prompts
from .baseline import BaselineConfig, BaselineResult, aggregate, annotate_one, baseline_subsets
from .engine import RunConfig, run_sample
from .evaluation import FRAMEWORKS, EvalConfig, EvalRecord, aggregate_report, evaluate_sample, format_table
from .llm.backends import BackendConfig, ScriptError, make_backend
from .llm.gateway import BackendUnavailable, Gateway
from .models import CostLedger, Sample, ledger_sum
from .negatives import EmbeddingIndex, HashedLocalEmbedder, RemoteEmbedder, sample_negatives
from .persistence import (
    BASELINE_SCHEMA,
    EVAL_SCHEMA,
    SAMPLE_SCHEMA,
    Config,
    ConfigError,
    DatasetError,
    OrderedWriter,
    RunManifest,
    completed_prefix,
    dump_line,
    file_digest,
    load_config,
    manifest_path,
    read_jsonl,
    read_samples,
    sample_line,
    utc_now,
    write_lines,
)
from .simdata import write_sim_workspace
from .tools import (
    FilterAborted,
    LiveEnvironment,
    Registry,
    RegistryError,
    SimEnvironment,
    SimProfile,
    ToolEnvironment,
    filter_registry,
    load_registry,
    load_sim_profile,
    save_registry,
)

log = logging.getLogger("toolgrad")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_OUTAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# wiring


def derive_seed(seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{index}".encode()).digest()[:4], "big")


def backend_config(cfg: Config, role: str | None = None) -> BackendConfig:
    raw = dict(cfg.section("backend"))
    if role is not None:
        raw.update(cfg.section("backends").get(role) or {})
    if not raw:
        raise ConfigError("config has no 'backend' section")
    if raw.get("kind") == "http" and os.environ.get("LLM_BASE_URL"):
        raw["base_url"] = os.environ["LLM_BASE_URL"]
    try:
        return BackendConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad backend config: {exc}") from exc


def make_gateway(cfg: Config, role: str | None = None) -> Gateway:
    bc = backend_config(cfg, role)
    try:
        backend = make_backend(bc, cfg.base_dir)
    except FileNotFoundError as exc:
        raise ConfigError(f"script not found: {exc.filename}") from exc
    except ScriptError as exc:
        raise ConfigError(f"bad script: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    g = cfg.section("gateway")
    return Gateway(backend, max_retries=int(g.get("max_retries", 2)), backoff_s=float(g.get("backoff_s", 0.5)))


def load_reg(cfg: Config, override: Path | None) -> tuple[Registry, Path]:
    path = override if override is not None else cfg.required_path("registry")
    if not path.exists():
        raise UsageError(f"registry not found: {path}")
    return load_registry(path), path


def make_env(cfg: Config, reg: Registry) -> ToolEnvironment:
    env = cfg.section("env")
    kind = env.get("kind", "sim")
    if kind == "sim":
        profile = load_sim_profile(cfg.path(env["profile"])) if env.get("profile") else SimProfile()
        return SimEnvironment(reg, profile, int(env.get("seed", 0)))
    if kind == "live":
        return LiveEnvironment(reg, int(env.get("max_workers", 32)))
    raise ConfigError(f"unknown env kind {kind!r}")


def run_config(cfg: Config, args: argparse.Namespace) -> RunConfig:
    try:
        rc = RunConfig.from_dict(cfg.section("run"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad run config: {exc}") from exc
    return replace(rc, seed=args.seed) if args.seed is not None else rc


def run_ordered(
    count: int,
    start: int,
    workers: int,
    job: Callable[[int], str],
    writer: OrderedWriter,
) -> None:
    """Run ``job(i)`` for ``start <= i < count`` on a pool; lines reach ``writer`` in index order.

    At most ``2 * workers`` jobs are in flight. On an exception the pool
    stops taking work, every finished line is still written, and the
    exception is re-raised.
    """
    pending: dict[Future, int] = {}
    nxt = start
    failure: BaseException | None = None
    with ThreadPoolExecutor(max_workers=max(workers, 1), thread_name_prefix="job") as pool:
        while nxt < count or pending:
            while failure is None and nxt < count and len(pending) < 2 * max(workers, 1):
                pending[pool.submit(job, nxt)] = nxt
                nxt += 1
            if not pending:
                break
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=pending.__getitem__):
                i = pending.pop(fut)
                try:
                    writer.put(i, fut.result())
                except BaseException as exc:  # noqa: BLE001 - re-raised below
                    if failure is None:
                        failure = exc
            if failure is not None:
                nxt = count
    if failure is not None:
        raise failure


def _snapshot(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    cli = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "handler"}
    return {"file": cfg.raw, "cli": cli}


# ---------------------------------------------------------------------------
# commands


def cmd_filter_apis(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reg, reg_path = load_reg(cfg, args.registry or args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress = out / "filter_progress.jsonl"
    if not args.resume and progress.exists():
        progress.unlink()
    started = utc_now()
    gateway = make_gateway(cfg, "filter")
    ledger = CostLedger()
    try:
        result = filter_registry(reg, gateway, ledger, progress)
    except FilterAborted as exc:
        log.error("%s; rerun with --resume to continue", exc)
        return EXIT_OUTAGE
    save_registry(result.kept, out / "apis.filtered.json")
    write_lines(out / "rejected.jsonl", (json.dumps({"id": i, "reason": r}) for i, r in result.rejected))
    reasons: dict[str, int] = {}
    for _, r in result.rejected:
        reasons[r] = reasons.get(r, 0) + 1
    report = {"total": len(reg), "kept": len(result.kept), "rejected": len(result.rejected),
              "rejection_reasons": dict(sorted(reasons.items()))}
    (out / "filter_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    RunManifest(
        command="filter-apis",
        config=_snapshot(cfg, args),
        registry_digest=reg.digest(),
        prompt_versions=prompts.versions(),
        backend_identities={"filter": gateway.identity},
        started_at=started,
        finished_at=utc_now(),
        output=str(out / "apis.filtered.json"),
        output_digest=file_digest(out / "apis.filtered.json"),
        ledger=ledger.to_dict(),
        stats=report,
    ).write(out / "filter.manifest.json")
    print(f"{report['kept']} kept, {report['rejected']} rejected of {report['total']} ({reg_path})")
    return EXIT_OK


def generation_stats(samples: Sequence[Sample]) -> dict[str, Any]:
    passed = [s for s in samples if s.passed]
    n = len(samples)
    return {
        "count": n,
        "passed": len(passed),
        "pass_rate": 100.0 * len(passed) / n if n else 0.0,
        "mean_tool_uses_passed": sum(s.workflow.size for s in passed) / len(passed) if passed else 0.0,
        "mean_llm_calls": sum(s.ledger.llm_calls for s in samples) / n if n else 0.0,
        "mean_generation_llm_calls": sum(s.ledger.generation_llm_calls for s in samples) / n if n else 0.0,
        "mean_executor_sessions": sum(s.ledger.executor_sessions for s in samples) / n if n else 0.0,
        "mean_tool_calls": sum(s.ledger.tool_calls for s in samples) / n if n else 0.0,
    }


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reg, _ = load_reg(cfg, args.registry)
    rc = run_config(cfg, args)
    gen = cfg.section("generate")
    count = args.count if args.count is not None else int(gen.get("count", 0))
    workers = args.workers if args.workers is not None else int(gen.get("workers", 1))
    if count < 0:
        raise UsageError("--count must be >= 0")
    gateway = make_gateway(cfg)
    env = make_env(cfg, reg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    start = completed_prefix(out, SAMPLE_SCHEMA) if args.resume else 0
    if start:
        log.info("resuming at sample %d", start)
    started = utc_now()

    def job(i: int) -> str:
        sample = run_sample(replace(rc, seed=derive_seed(rc.seed, i)), reg, gateway, env, f"tg-{i:06d}")
        return sample_line(i, sample)

    with OrderedWriter(out, start, append=bool(start)) as writer:
        try:
            run_ordered(count, start, workers, job, writer)
        except BackendUnavailable as exc:
            log.error("backend outage after %d sample(s): %s; rerun with --resume", writer.written, exc)
            return EXIT_OUTAGE
    samples = [s for _, s in read_samples(out)]
    RunManifest(
        command="generate",
        config=_snapshot(cfg, args),
        registry_digest=reg.digest(),
        prompt_versions=prompts.versions(),
        backend_identities={"generation": gateway.identity},
        started_at=started,
        finished_at=utc_now(),
        output=str(out),
        output_digest=file_digest(out),
        ledger=ledger_sum(s.ledger for s in samples).to_dict(),
        stats=generation_stats(samples),
    ).write(manifest_path(out))
    st = generation_stats(samples)
    print(f"{st['count']} samples, pass rate {st['pass_rate']:.1f}% -> {out}")
    return EXIT_OK


def _embedding_index(cfg: Config, reg: Registry, args: argparse.Namespace) -> EmbeddingIndex:
    neg = cfg.section("negatives")
    index_path = args.index or (cfg.path(neg["index"]) if neg.get("index") else None)
    if index_path is not None and Path(index_path).exists():
        index = EmbeddingIndex.load(index_path)
        if not index.covers(reg):
            raise ConfigError(f"embedding index {index_path} does not cover the registry")
        return index
    kind = args.embedder or neg.get("embedder", "hashed-local")
    if kind == "hashed-local":
        provider: Any = HashedLocalEmbedder(int(neg.get("dim", 256)), int(neg.get("embed_seed", 0)))
    elif kind == "remote":
        base = os.environ.get("EMBED_BASE_URL") or neg.get("base_url")
        if not base:
            raise ConfigError("remote embedder needs EMBED_BASE_URL")
        provider = RemoteEmbedder(base, neg.get("model", "text-embedding-3-small"), os.environ.get("EMBED_API_KEY"))
    else:
        raise ConfigError(f"unknown embedder {kind!r}")
    index = EmbeddingIndex.build(reg, provider)
    if index_path is not None:
        index.save(index_path)
    return index


def cmd_negatives(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reg, _ = load_reg(cfg, args.registry)
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"dataset not found: {src}")
    neg = cfg.section("negatives")
    p = args.p if args.p is not None else int(neg.get("p", cfg.section("run").get("p", 20)))
    aggregate_mode = neg.get("aggregate", "max")
    index = _embedding_index(cfg, reg, args)
    records = read_jsonl(src, SAMPLE_SCHEMA)
    lines, skipped, annotated = [], [], 0
    for rec in records:
        positives = [s["request"]["api_id"] for c in rec["workflow"]["chains"] for s in c["steps"]]
        if not positives:
            lines.append(dump_line(SAMPLE_SCHEMA, {k: v for k, v in rec.items() if k != "schema_id"}))
            continue
        try:
            negs = sample_negatives(positives, reg, index, p, aggregate_mode)
        except ValueError as exc:
            skipped.append({"sample_id": rec.get("sample_id"), "reason": str(exc)})
            log.warning("sample %s skipped: %s", rec.get("sample_id"), exc)
            negs = rec.get("negative_api_ids", [])
        else:
            annotated += 1
        body = {k: v for k, v in rec.items() if k != "schema_id"}
        body["negative_api_ids"] = list(negs)
        lines.append(dump_line(SAMPLE_SCHEMA, body))
    out = Path(args.out) if args.out else src
    write_lines(out, lines)
    report = {"p": p, "lines": len(records), "annotated": annotated, "skipped": skipped,
              "embedder": index.provider_tag, "dim": index.dim}
    out.with_name(out.name + ".negatives.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"{annotated} of {len(records)} lines annotated with p={p}; {len(skipped)} skipped -> {out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reg, _ = load_reg(cfg, args.registry)
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"dataset not found: {src}")
    samples = [s for _, s in read_samples(src) if s.passed]
    if not samples:
        raise UsageError(f"{src} holds no passed samples to evaluate")
    ev = cfg.section("evaluate")
    frameworks = args.frameworks.split(",") if args.frameworks else list(ev.get("frameworks", FRAMEWORKS))
    bad = [f for f in frameworks if f not in FRAMEWORKS]
    if bad:
        raise UsageError(f"unknown framework(s) {bad}; choose from {FRAMEWORKS}")
    workers = args.workers if args.workers is not None else int(ev.get("workers", 1))
    ecfg = EvalConfig.from_dict(ev)
    agent, writer_gw, judge = make_gateway(cfg, "agent"), make_gateway(cfg, "writer"), make_gateway(cfg, "judge")
    env = make_env(cfg, reg)
    jobs = [(s, f) for s in samples for f in frameworks]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    start = completed_prefix(out, EVAL_SCHEMA) if args.resume else 0
    started = utc_now()

    def job(i: int) -> str:
        sample, fw = jobs[i]
        rec = evaluate_sample(sample, fw, reg, agent, env, writer_gw, judge, ecfg)
        return dump_line(EVAL_SCHEMA, {"index": i, **rec.to_dict()})

    with OrderedWriter(out, start, append=bool(start)) as w:
        try:
            run_ordered(len(jobs), start, workers, job, w)
        except BackendUnavailable as exc:
            log.error("backend outage after %d record(s): %s; rerun with --resume", w.written, exc)
            return EXIT_OUTAGE
    records = [EvalRecord.from_dict(r) for r in read_jsonl(out, EVAL_SCHEMA)]
    summary = aggregate_report(records)
    RunManifest(
        command="evaluate",
        config=_snapshot(cfg, args),
        registry_digest=reg.digest(),
        prompt_versions=prompts.versions(),
        backend_identities={"agent": agent.identity, "writer": writer_gw.identity, "judge": judge.identity},
        started_at=started,
        finished_at=utc_now(),
        output=str(out),
        output_digest=file_digest(out),
        ledger=ledger_sum(r.ledger for r in records).to_dict(),
        stats=summary,
    ).write(manifest_path(out))
    print(format_table(summary))
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reg, _ = load_reg(cfg, args.registry)
    bsec = cfg.section("baseline")
    bcfg = BaselineConfig.from_dict(bsec)
    if args.seed is not None:
        bcfg = replace(bcfg, seed=args.seed)
    count = args.count if args.count is not None else int(bsec.get("count", 0))
    if count < 1:
        raise UsageError("baseline needs --count >= 1")
    workers = args.workers if args.workers is not None else int(bsec.get("workers", 1))
    gateway = make_gateway(cfg, "agent")
    env = make_env(cfg, reg)
    subsets = baseline_subsets(reg, count, bcfg.subset_size, bcfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    start = completed_prefix(out, BASELINE_SCHEMA) if args.resume else 0
    started = utc_now()

    def job(i: int) -> str:
        res = annotate_one(bcfg, subsets[i], gateway, env, f"dfs-{i:06d}")
        return dump_line(BASELINE_SCHEMA, {"index": i, **res.to_dict()})

    with OrderedWriter(out, start, append=bool(start)) as w:
        try:
            run_ordered(count, start, workers, job, w)
        except BackendUnavailable as exc:
            log.error("backend outage after %d result(s): %s; rerun with --resume", w.written, exc)
            return EXIT_OUTAGE
    results = [BaselineResult.from_dict(r) for r in read_jsonl(out, BASELINE_SCHEMA)]
    agg = aggregate(results)
    RunManifest(
        command="baseline-dfs",
        config=_snapshot(cfg, args),
        registry_digest=reg.digest(),
        prompt_versions=prompts.versions(),
        backend_identities={"agent": gateway.identity},
        started_at=started,
        finished_at=utc_now(),
        output=str(out),
        output_digest=file_digest(out),
        ledger=ledger_sum(r.ledger for r in results).to_dict(),
        stats=agg,
    ).write(manifest_path(out))
    print(f"{agg['count']} queries, pass rate {agg['pass_rate']:.1f}% -> {out}")
    return EXIT_OK


def build_report(dataset: Path | None, evals: Path | None, baseline: Path | None) -> dict[str, Any]:
    report: dict[str, Any] = {}
    if dataset is not None:
        report["generation"] = generation_stats([s for _, s in read_samples(dataset)])
    if baseline is not None:
        report["baseline"] = aggregate([BaselineResult.from_dict(r) for r in read_jsonl(baseline, BASELINE_SCHEMA)])
    if evals is not None:
        report["evaluation"] = aggregate_report([EvalRecord.from_dict(r) for r in read_jsonl(evals, EVAL_SCHEMA)])
    return report


def format_report(report: dict[str, Any]) -> str:
    parts = []
    gen_rows = []
    if "generation" in report:
        g = report["generation"]
        gen_rows.append(("toolgrad", g["pass_rate"], g["mean_tool_uses_passed"], g["mean_llm_calls"], g["mean_executor_sessions"]))
    if "baseline" in report:
        b = report["baseline"]
        gen_rows.append(("dfs-baseline", b["pass_rate"], b["mean_tool_uses_passed"], b["mean_llm_cost"], b["mean_tool_cost"]))
    if gen_rows:
        header = f"{'generator':<14}{'pass %':>9}{'tools':>8}{'llm cost':>10}{'tool cost':>11}"
        parts.append("\n".join([header, "-" * len(header)] +
                               [f"{n:<14}{a:>9.1f}{b:>8.2f}{c:>10.2f}{d:>11.2f}" for n, a, b, c, d in gen_rows]))
    if "evaluation" in report:
        parts.append(format_table(report["evaluation"]))
    return "\n\n".join(parts)


def cmd_report(args: argparse.Namespace) -> int:
    paths = {"dataset": args.dataset, "evals": args.input, "baseline": args.baseline}
    if not any(paths.values()):
        raise UsageError("report needs at least one of --in, --dataset, --baseline")
    for name, p in paths.items():
        if p is not None and not Path(p).exists():
            raise UsageError(f"{name} file not found: {p}")
    report = build_report(args.dataset, args.input, args.baseline)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(format_report(report))
    return EXIT_OK


def cmd_make_sim(args: argparse.Namespace) -> int:
    path = write_sim_workspace(args.out, args.apis, args.seed or 0, args.unsolvable, args.failure_rate, args.junk)
    print(f"simulation workspace written; config at {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolgrad", description="Answer-first tool-use dataset generation.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace], int], help: str, config: bool = True) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(handler=handler)
        sp.add_argument("--config", type=Path, required=config, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        sp.add_argument("--out", required=name not in ("report", "negatives"), help="output path")
        sp.add_argument("--resume", action="store_true", help="continue an interrupted run")
        return sp

    sp = command("filter-apis", cmd_filter_apis, "Drop unusable APIs from a registry.")
    sp.add_argument("--in", dest="input", type=Path, default=None, help="registry to filter (default: config registry)")
    sp.add_argument("--registry", type=Path, default=None, help=argparse.SUPPRESS)

    sp = command("generate", cmd_generate, "Generate samples with the answer-first loop.")
    sp.add_argument("--registry", type=Path, default=None, help="registry to draw from (default: config registry)")
    sp.add_argument("--count", type=int, default=None, help="number of samples")
    sp.add_argument("--workers", type=int, default=None, help="samples generated in parallel")

    sp = command("negatives", cmd_negatives, "Annotate a dataset with distractor APIs.")
    sp.add_argument("--in", dest="input", type=Path, required=True, help="dataset JSONL")
    sp.add_argument("--registry", type=Path, default=None)
    sp.add_argument("--p", type=int, default=None, help="tools shown per sample (positives + negatives)")
    sp.add_argument("--index", type=Path, default=None, help="embedding index file (loaded if present, else written)")
    sp.add_argument("--embedder", choices=("hashed-local", "remote"), default=None)

    sp = command("evaluate", cmd_evaluate, "Evaluate agent frameworks on a dataset.")
    sp.add_argument("--in", dest="input", type=Path, required=True, help="dataset JSONL")
    sp.add_argument("--registry", type=Path, default=None)
    sp.add_argument("--frameworks", default=None, help="comma list of standard,react,dfs")
    sp.add_argument("--workers", type=int, default=None)

    sp = command("baseline-dfs", cmd_baseline, "Run the query-first DFS baseline.")
    sp.add_argument("--registry", type=Path, default=None)
    sp.add_argument("--count", type=int, default=None, help="number of generated queries")
    sp.add_argument("--workers", type=int, default=None)

    sp = command("report", cmd_report, "Summarize datasets, baseline results and evaluations.", config=False)
    sp.add_argument("--in", dest="input", type=Path, default=None, help="evaluation JSONL")
    sp.add_argument("--dataset", type=Path, default=None, help="dataset JSONL")
    sp.add_argument("--baseline", type=Path, default=None, help="baseline JSONL")

    sp = command("make-sim", cmd_make_sim, "Write a synthetic library, sim profile, script and config.", config=False)
    sp.add_argument("--apis", type=int, default=200)
    sp.add_argument("--unsolvable", type=float, default=0.1, help="fraction of APIs that always fail")
    sp.add_argument("--failure-rate", type=float, default=0.1)
    sp.add_argument("--junk", type=int, default=0, help="extra placeholder APIs for the filter to catch")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=max(logging.WARNING - 10 * args.verbose, logging.DEBUG),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"toolgrad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RegistryError, DatasetError, ScriptError) as exc:
        print(f"toolgrad {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
