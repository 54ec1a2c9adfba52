"""Latency, call-count, and cost benchmarking for both pipelines.

Live mode measures wall-clock around each instance's retrieval and modeling
phases. Simulated mode swaps the clock for deterministic arithmetic over
the pipelines' call counts (waves of parallel calls, each one unit long),
so CI can assert architectural speedups without network or timing flake.
Speedup is defined as ratio-of-means; when per-instance data exists a
mean-of-ratios figure rides along for comparison.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional, Sequence

from .errors import ContractViolation, FactPipeError
from .gateway import MockBackend
from .integrated import _integrated_facts
from .records import Response
from .retrieval import DEFAULT_UNIT_PRICE_PER_1000, SearchClient
from .staged import run_staged

BENCH_PIPELINES = ("integrated", "staged", "staged_parallel")


@dataclass(frozen=True)
class SimulatedLatency:
    """Deterministic latency model: each search costs ``search_s`` and each
    model call ``model_s_per_call``; calls run in waves of ``parallelism``."""

    search_s: float
    model_s_per_call: float
    parallelism: int = 1

    def waves(self, n_calls: int) -> int:
        return math.ceil(n_calls / self.parallelism) if n_calls > 0 else 0


@dataclass
class TimingReport:
    pipeline: str
    n_instances: int
    mean_retrieval_s: float
    mean_modeling_s: float
    mean_total_s: float
    retrieval_fraction: float
    mean_search_queries: float
    mean_model_calls: float
    cost_usd_per_response: Decimal
    latency_model: str = "live"
    parallelism: int = 1
    overlapped: bool = False
    partial: bool = False
    failures: int = 0
    per_instance: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "n_instances": self.n_instances,
            "mean_retrieval_s": self.mean_retrieval_s,
            "mean_modeling_s": self.mean_modeling_s,
            "mean_total_s": self.mean_total_s,
            "retrieval_fraction": self.retrieval_fraction,
            "mean_search_queries": self.mean_search_queries,
            "mean_model_calls": self.mean_model_calls,
            "cost_usd_per_response": str(self.cost_usd_per_response),
            "latency_model": self.latency_model,
            "parallelism": self.parallelism,
            "overlapped": self.overlapped,
            "partial": self.partial,
            "failures": self.failures,
        }


def benchmark(
    pipeline_id: str,
    instances: Sequence[Response],
    backend,
    search_client: SearchClient,
    latency: Optional[SimulatedLatency] = None,
    parallelism: int = 8,
    overlap_instances: bool = False,
    overlap_bound: int = 4,
    unit_price: Decimal = DEFAULT_UNIT_PRICE_PER_1000,
) -> TimingReport:
    """Run one pipeline over the instances and average its per-phase times.

    ``staged_parallel`` is the staged pipeline with its stages fanned out to
    ``parallelism``; plain ``staged`` runs its stages serially. Instances
    run one at a time for clean timing unless ``overlap_instances`` is set,
    in which case the report is labeled overlapped (per-instance phase times
    then share the machine). Per-instance failures are counted and flag the
    report as partial; an all-failed run raises.
    """
    if pipeline_id not in BENCH_PIPELINES:
        raise ContractViolation(f"unknown pipeline {pipeline_id!r}")
    if not instances:
        raise ContractViolation("benchmark needs at least one instance")
    if latency is not None and not isinstance(backend, MockBackend):
        raise ContractViolation("simulated latency requires a mock backend")

    stage_bound = parallelism if pipeline_id == "staged_parallel" else 1

    def run_one(instance) -> Optional[tuple[float, float, int, int]]:
        try:
            if pipeline_id == "integrated":
                _facts, telemetry = _integrated_facts(instance, backend, search_client)
                queries, calls = telemetry.search_queries, telemetry.model_calls
                retrieval_s = telemetry.retrieval_seconds
                modeling_s = telemetry.modeling_seconds
                if latency is not None:
                    retrieval_s = latency.waves(queries) * latency.search_s
                    modeling_s = calls * latency.model_s_per_call
            else:
                _facts, trace = run_staged(
                    instance, backend, search_client, parallelism=stage_bound
                )
                queries = trace.search_queries
                calls = trace.extraction_calls + trace.verification_calls
                retrieval_s = trace.per_stage_seconds["retrieval"]
                modeling_s = (
                    trace.per_stage_seconds["extraction"]
                    + trace.per_stage_seconds["verification"]
                )
                if latency is not None:
                    sim_par = parallelism if pipeline_id == "staged_parallel" else latency.parallelism
                    model = SimulatedLatency(latency.search_s, latency.model_s_per_call, sim_par)
                    retrieval_s = model.waves(queries) * latency.search_s
                    modeling_s = (
                        model.waves(trace.extraction_calls)
                        + model.waves(trace.verification_calls)
                    ) * latency.model_s_per_call
            return (retrieval_s, modeling_s, queries, calls)
        except FactPipeError:
            return None

    if overlap_instances and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=overlap_bound) as pool:
            outcomes = list(pool.map(run_one, instances))
    else:
        outcomes = [run_one(instance) for instance in instances]
    rows = [row for row in outcomes if row is not None]
    failures = len(outcomes) - len(rows)
    if not rows:
        raise ContractViolation(f"all {len(instances)} instances failed")

    n = len(rows)
    mean_retrieval = sum(r[0] for r in rows) / n
    mean_modeling = sum(r[1] for r in rows) / n
    mean_total = mean_retrieval + mean_modeling
    total_queries = sum(r[2] for r in rows)
    return TimingReport(
        pipeline=pipeline_id,
        n_instances=n,
        mean_retrieval_s=mean_retrieval,
        mean_modeling_s=mean_modeling,
        mean_total_s=mean_total,
        retrieval_fraction=100.0 * mean_retrieval / mean_total if mean_total else 0.0,
        mean_search_queries=total_queries / n,
        mean_model_calls=sum(r[3] for r in rows) / n,
        cost_usd_per_response=Decimal(total_queries) * unit_price / Decimal(1000) / Decimal(n),
        latency_model="simulated" if latency is not None else "live",
        parallelism=stage_bound if pipeline_id != "integrated" else 1,
        overlapped=overlap_instances,
        partial=failures > 0,
        failures=failures,
        per_instance=[(r[0], r[1]) for r in rows],
    )


def speedup(a: TimingReport, b: TimingReport) -> dict:
    """How much slower ``a`` is than ``b``, per phase and total, as
    ratio-of-means; adds mean-of-ratios when per-instance data lines up."""
    if b.mean_retrieval_s == 0 or b.mean_modeling_s == 0 or b.mean_total_s == 0:
        raise ZeroDivisionError("cannot compute speedup against zero-time phases")
    result = {
        "retrieval_ratio": a.mean_retrieval_s / b.mean_retrieval_s,
        "modeling_ratio": a.mean_modeling_s / b.mean_modeling_s,
        "total_ratio": a.mean_total_s / b.mean_total_s,
    }
    if (
        a.per_instance
        and len(a.per_instance) == len(b.per_instance)
        and all(sum(pair) > 0 for pair in b.per_instance)
    ):
        ratios = [
            (ar + am) / (br + bm)
            for (ar, am), (br, bm) in zip(a.per_instance, b.per_instance)
        ]
        result["mean_of_ratios_total"] = sum(ratios) / len(ratios)
    return result


def render_timing_table(reports: Sequence[TimingReport]) -> str:
    header = (
        f"{'Pipeline':<16} {'Retrieval(s)':>13} {'Modeling(s)':>12} {'Total(s)':>9} "
        f"{'Retr%':>6} {'Queries':>8} {'Calls':>7} {'Cost($)':>9}"
    )
    lines = [header]
    for r in reports:
        lines.append(
            f"{r.pipeline:<16} {r.mean_retrieval_s:>13.3f} {r.mean_modeling_s:>12.3f} "
            f"{r.mean_total_s:>9.3f} {r.retrieval_fraction:>6.1f} "
            f"{r.mean_search_queries:>8.1f} {r.mean_model_calls:>7.1f} "
            f"{r.cost_usd_per_response:>9}"
        )
    return "\n".join(lines)
