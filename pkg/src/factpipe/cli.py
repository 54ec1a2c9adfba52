"""Command-line surface: scoring runs, pipeline comparison, meta-evaluation,
data generation, prompt sieving, benchmarking, ranking, and cache tools.

Every command is a thin wrapper over the library; anything it prints or
writes is reproducible by direct calls with the same configuration. Config
precedence is flags, then FACTPIPE_* environment variables, then a
key=value config file. Exit codes: 0 full success, 2 partial success
(error records present), 1 fatal.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

from .bench import SimulatedLatency, benchmark, render_timing_table, speedup
from .datagen import (
    dataset_stats,
    forge_records,
    mix_evidence,
    render_stats_table,
    render_training_text,
    save_records,
    sieve_prompt,
)
from .errors import ConfigError, FactPipeError, IdMismatch
from .gateway import FactList, HttpChatBackend, Label, MockBackend, VerifiedClaim
from .integrated import results_hash, run_batch
from .meta_eval import JudgeCache, meta_evaluate, rank_systems
from .records import load_responses, read_jsonl, write_jsonl
from .retrieval import SEARCH_KEY_ENV, SearchCache, SearchClient
from .scorer import SystemScore, aggregate

BACKEND_URL_ENV = "FACTPIPE_BACKEND_URL"
CACHE_ENV = "FACTPIPE_CACHE"


# --- configuration ----------------------------------------------------------


def load_config_file(path: Optional[str]) -> dict[str, str]:
    """key=value lines; '#' comments and blank lines ignored."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for line in p.read_text("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (want key=value): {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip().strip("\"'")
    return out


def _resolve(flag_value: Optional[str], env_var: str, config: dict, config_key: str):
    """Flags beat environment beats config file."""
    if flag_value is not None:
        return flag_value
    if os.environ.get(env_var):
        return os.environ[env_var]
    return config.get(config_key)


def make_search_client(args, config: dict) -> SearchClient:
    cache = _resolve(getattr(args, "cache", None), CACHE_ENV, config, "cache")
    api_key = _resolve(None, SEARCH_KEY_ENV, config, "search_key")
    offline = True if getattr(args, "offline", False) else (None if api_key else True)
    return SearchClient(
        cache_path=cache,
        api_key=api_key,
        offline=offline,
        max_parallel=getattr(args, "parallelism", 8) or 8,
    )


def make_backend(args, config: dict, prefix: str = "backend"):
    kind = getattr(args, prefix.replace("-", "_"))
    fixtures = getattr(args, f"{prefix}_fixtures".replace("-", "_"), None)
    if kind == "mock":
        if fixtures:
            return MockBackend.from_fixture_file(
                fixtures, oracle=not getattr(args, "fixtures_only", False)
            )
        if getattr(args, "fixtures_only", False):
            raise ConfigError("--fixtures-only needs a fixtures file")
        return MockBackend()
    url = _resolve(
        getattr(args, f"{prefix}_url".replace("-", "_"), None),
        BACKEND_URL_ENV, config, "backend_url",
    )
    if not url:
        raise ConfigError(f"http {prefix} needs a URL (flag, {BACKEND_URL_ENV}, or config)")
    return HttpChatBackend(endpoint=url, model_id=getattr(args, "model_id", None) or "default")


# --- score -------------------------------------------------------------------


def cmd_score(args) -> int:
    config = load_config_file(args.config)
    in_path = Path(args.in_path)
    if not in_path.exists():
        raise ConfigError(f"input file not found: {in_path}")
    responses = load_responses(in_path)
    if not responses:
        raise ConfigError(f"no responses in {in_path}")
    backend = make_backend(args, config)
    client = make_search_client(args, config)
    items = run_batch(
        responses,
        backend,
        client,
        pipeline=args.pipeline,
        k=args.k,
        parallelism=args.parallelism,
        staged_parallelism=args.staged_parallelism,
    )
    records = [item.to_json_dict() for item in items]
    write_jsonl(args.out, records)

    reports_by_system: dict[str, list] = {}
    errors = 0
    for item in items:
        if item.error is not None:
            errors += 1
        else:
            reports_by_system.setdefault(item.system_id or "all", []).append(item.report)
    print(f"scored {len(items) - errors}/{len(items)} responses -> {args.out}")
    summaries = [
        aggregate(reports_by_system[system_id], system_id=system_id)
        for system_id in sorted(reports_by_system)
    ]
    for score in summaries:
        print(f"  {score.system_id}: mean F1@K = {score.mean_f1_at_k:.4f} over {score.n_responses}")
    if args.summary:
        write_jsonl(
            args.summary,
            (
                {"system_id": s.system_id, "mean_f1_at_k": s.mean_f1_at_k,
                 "n_responses": s.n_responses}
                for s in summaries
            ),
        )
        print(f"summary -> {args.summary}")
    if args.print_hash:
        print(f"results hash: {results_hash(records)}")
    if errors:
        print(f"{errors} response(s) failed; see error records", file=sys.stderr)
        return 2
    return 0


# --- meta-eval -----------------------------------------------------------------


def _load_fact_lists(path: Path) -> dict[str, FactList]:
    out: dict[str, FactList] = {}
    for rec in read_jsonl(path):
        if rec.get("kind") == "error":
            continue
        claims = [VerifiedClaim(f["text"], Label(f["label"])) for f in rec.get("facts", [])]
        out[str(rec["id"])] = FactList(
            claims=claims,
            no_verifiable_claim=bool(rec.get("no_verifiable_claim", not claims)),
            raw="",
        )
    return out


def cmd_meta_eval(args) -> int:
    config = load_config_file(args.config)
    pred_path, gold_path = Path(args.pred), Path(args.gold)
    for p in (pred_path, gold_path):
        if not p.exists():
            raise ConfigError(f"results file not found: {p}")
    pred, gold = _load_fact_lists(pred_path), _load_fact_lists(gold_path)
    if set(pred) != set(gold):
        only_pred = sorted(set(pred) - set(gold))[:3]
        only_gold = sorted(set(gold) - set(pred))[:3]
        raise IdMismatch(f"ids differ (pred-only {only_pred}, gold-only {only_gold})")
    judge_backend = None
    judge_cache = None
    if args.matcher == "judge":
        judge_backend = make_backend(args, config, prefix="judge")
        if args.judge_cache:
            judge_cache = JudgeCache(args.judge_cache)
    pairs = [(pred[i], gold[i]) for i in sorted(pred)]
    report = meta_evaluate(
        pairs,
        matcher=args.matcher,
        judge_backend=judge_backend,
        judge_cache=judge_cache,
        k_pred=args.k_pred,
        k_gold=args.k_gold,
    )
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
        print(f"report -> {args.out}")
    print(report.render_table())
    return 0


# --- gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config_file(args.config)
    in_path = Path(args.in_path)
    if not in_path.exists():
        raise ConfigError(f"input file not found: {in_path}")
    responses = load_responses(in_path)
    backend = make_backend(args, config)
    client = make_search_client(args, config)
    records = forge_records(
        responses,
        backend,
        client,
        source=args.source,
        split=args.split,
        parallelism=args.parallelism,
    )
    if args.mix is not None:
        records = mix_evidence(records, claim_fraction=args.mix, seed=args.seed)
    save_records(args.out, records)
    print(f"wrote {len(records)} records -> {args.out}")
    if args.export_text:
        write_jsonl(
            args.export_text,
            (
                {"id": rec.id, "evidence_granularity": rec.evidence_granularity,
                 "text": render_training_text(rec)}
                for rec in records
            ),
        )
        print(f"rendered training text -> {args.export_text}")
    print(render_stats_table(dataset_stats(records)))
    return 0


# --- sieve ----------------------------------------------------------------------


def cmd_sieve(args) -> int:
    config = load_config_file(args.config)
    prompts_path = Path(args.prompts)
    if not prompts_path.exists():
        raise ConfigError(f"prompts file not found: {prompts_path}")
    judge = make_backend(args, config, prefix="judge")
    kept, dropped = [], 0
    for rec in read_jsonl(prompts_path):
        if sieve_prompt(rec["prompt"], judge):
            kept.append(rec)
        else:
            dropped += 1
    if args.out:
        write_jsonl(args.out, kept)
    print(f"kept {len(kept)}, dropped {dropped}")
    return 0


# --- bench ----------------------------------------------------------------------


def cmd_bench(args) -> int:
    config = load_config_file(args.config)
    in_path = Path(args.in_path)
    if not in_path.exists():
        raise ConfigError(f"input file not found: {in_path}")
    instances = load_responses(in_path)
    backend = make_backend(args, config)
    client = make_search_client(args, config)
    latency = None
    if args.simulate:
        try:
            search_s, model_s = (float(x) for x in args.simulate.split(","))
        except ValueError as e:
            raise ConfigError(f"--simulate wants 'search_s,model_s': {args.simulate!r}") from e
        latency = SimulatedLatency(search_s=search_s, model_s_per_call=model_s)
    pipelines = (
        ["integrated", "staged"] if args.pipeline == "both" else [args.pipeline]
    )
    reports = [
        benchmark(p, instances, backend, client, latency=latency, parallelism=args.parallelism)
        for p in pipelines
    ]
    print(render_timing_table(reports))
    payload = {"reports": [r.to_json_dict() for r in reports]}
    if len(reports) == 2:
        ratios = speedup(reports[1], reports[0])  # staged over integrated
        payload["speedup_staged_over_integrated"] = ratios
        printable = {k: round(v, 4) for k, v in ratios.items()}
        print(f"speedup (staged / integrated): {printable}")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
        print(f"report -> {args.out}")
    return 2 if any(r.partial for r in reports) else 0


# --- rank ------------------------------------------------------------------------


def cmd_rank(args) -> int:
    scores_path = Path(args.scores)
    if not scores_path.exists():
        raise ConfigError(f"scores file not found: {scores_path}")
    scores = [
        SystemScore(
            system_id=str(rec["system_id"]),
            mean_f1_at_k=float(rec["mean_f1_at_k"]),
            n_responses=int(rec.get("n_responses", 0)),
        )
        for rec in read_jsonl(scores_path)
    ]
    ranked = rank_systems(scores)
    print(f"{'Rank':<5} {'System':<24} {'Mean F1@K':>10} {'N':>6}")
    for place, s in enumerate(ranked, start=1):
        print(f"{place:<5} {s.system_id:<24} {s.mean_f1_at_k:>10.4f} {s.n_responses:>6}")
    return 0


# --- cache ----------------------------------------------------------------------


def cmd_cache(args) -> int:
    cache_path = Path(args.cache)
    if not cache_path.exists():
        raise ConfigError(f"cache file not found: {cache_path}")
    cache = SearchCache(cache_path)
    if args.cache_action == "inspect":
        stats = cache.stats()
        print(json.dumps(stats, indent=2, sort_keys=True))
        return 0
    n = cache.freeze(args.out)
    print(f"froze {n} queries -> {args.out}")
    return 0


# --- parser ----------------------------------------------------------------------


def _add_backend_flags(p: argparse.ArgumentParser):
    p.add_argument("--backend", choices=["mock", "http"], default="mock",
                   help="inference backend (default: mock)")
    p.add_argument("--fixtures", dest="backend_fixtures", metavar="JSONL",
                   help="content-addressed fixture store for the mock backend")
    p.add_argument("--fixtures-only", action="store_true",
                   help="disable the mock's rule oracle; misses become errors")
    p.add_argument("--backend-url", dest="backend_url",
                   help=f"chat-completions endpoint (or {BACKEND_URL_ENV})")
    p.add_argument("--model-id", help="model id sent to the http backend")


def _add_judge_flags(p: argparse.ArgumentParser):
    p.add_argument("--judge", choices=["mock", "http"], default=None,
                   help="judge backend for --matcher judge / sieving")
    p.add_argument("--judge-fixtures", dest="judge_fixtures", metavar="JSONL")
    p.add_argument("--judge-url", dest="judge_url")
    p.add_argument("--judge-cache", dest="judge_cache", metavar="JSONL",
                   help="cache judge calls keyed by (statement, reference-set hash)")


def _add_search_flags(p: argparse.ArgumentParser):
    p.add_argument("--cache", help=f"search replay cache JSONL (or {CACHE_ENV})")
    p.add_argument("--offline", action="store_true",
                   help="replay-only: a cache miss is an error")
    p.add_argument("--config", help="key=value config file (lowest precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factpipe",
        description="Factuality evaluation pipelines: score, compare, generate data, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score responses with a pipeline")
    p.add_argument("--pipeline", choices=["integrated", "staged"], default="integrated")
    p.add_argument("--in", dest="in_path", required=True, metavar="JSONL")
    p.add_argument("--out", required=True, metavar="JSONL")
    p.add_argument("--summary", metavar="JSONL",
                   help="also write per-system SystemScore records (rank input)")
    p.add_argument("--k", type=float, default=None,
                   help="override the batch-median recall target K")
    p.add_argument("--parallelism", type=int, default=4,
                   help="concurrent responses in a batch")
    p.add_argument("--staged-parallelism", type=int, default=1,
                   help="fan-out inside the staged pipeline's stages")
    p.add_argument("--print-hash", action="store_true",
                   help="print the timing-independent results hash")
    _add_backend_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("meta-eval", help="agreement between two results files")
    p.add_argument("--pred", required=True, metavar="JSONL")
    p.add_argument("--gold", required=True, metavar="JSONL")
    p.add_argument("--matcher", choices=["exact", "judge"], default="exact")
    p.add_argument("--k-pred", type=float, default=None)
    p.add_argument("--k-gold", type=float, default=None)
    p.add_argument("--out", metavar="JSON")
    p.add_argument("--config")
    _add_judge_flags(p)
    p.set_defaults(func=cmd_meta_eval)

    p = sub.add_parser("gen-data", help="build training records via the staged pipeline")
    p.add_argument("--in", dest="in_path", required=True, metavar="JSONL")
    p.add_argument("--out", required=True, metavar="JSONL")
    p.add_argument("--source", required=True, help="prompt_source tag for the records")
    p.add_argument("--split", default="train")
    p.add_argument("--mix", type=float, default=None,
                   help="claim-level fraction; emits one granularity per response")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-text", dest="export_text", metavar="JSONL",
                   help="also render each record into the training text format")
    p.add_argument("--parallelism", type=int, default=4)
    _add_backend_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sieve", help="keep prompts likely to elicit verifiable claims")
    p.add_argument("--prompts", required=True, metavar="JSONL")
    p.add_argument("--out", metavar="JSONL")
    p.add_argument("--config")
    _add_judge_flags(p)
    p.set_defaults(func=cmd_sieve)

    p = sub.add_parser("bench", help="latency/cost comparison of the pipelines")
    p.add_argument("--pipeline", choices=["integrated", "staged", "staged_parallel", "both"],
                   default="both")
    p.add_argument("--in", dest="in_path", required=True, metavar="JSONL")
    p.add_argument("--out", metavar="JSON")
    p.add_argument("--simulate", metavar="SEARCH_S,MODEL_S",
                   help="deterministic latency model instead of wall clock")
    p.add_argument("--parallelism", type=int, default=8,
                   help="stage fan-out for staged_parallel")
    _add_backend_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rank", help="rank systems by mean F1@K")
    p.add_argument("--scores", required=True, metavar="JSONL")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("cache", help="inspect or freeze a search cache")
    p.add_argument("cache_action", choices=["inspect", "freeze"])
    p.add_argument("--cache", required=True, metavar="JSONL")
    p.add_argument("--out", metavar="JSONL", help="destination for freeze")
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "matcher", None) == "judge" and not getattr(args, "judge", None):
        parser.error("--matcher judge requires --judge mock|http")
    if args.command == "sieve" and not args.judge:
        parser.error("sieve requires --judge mock|http")
    if args.command == "cache" and args.cache_action == "freeze" and not args.out:
        parser.error("cache freeze requires --out")
    try:
        return args.func(args)
    except FactPipeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
