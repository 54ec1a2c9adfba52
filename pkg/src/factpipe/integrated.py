"""The integrated single-pass pipeline and the batch driver for both
pipelines.

Integrated evaluation retrieves evidence per sentence, consolidates it, and
spends exactly one model call per response on joint claim extraction and
verification. Batch scoring is two-pass: every response's fact list is
computed first, the recall target K is the batch median claim count, then
every response is scored against that K.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import (
    ContractViolation,
    PipelineError,
    RetrievalError,
    WhollyUnparseable,
)
from .gateway import FactList, build_joint_prompt, generate, parse_facts
from .gateway import DEFAULT_PROMPT_VERSION
from .records import Response
from .retrieval import DEFAULT_EVIDENCE_TOKEN_BUDGET, SearchClient, consolidate
from .scorer import FactualityReport, Telemetry, median_k, score_response
from .segmenter import split_sentences
from .staged import StagedTrace, run_staged

PIPELINES = ("integrated", "staged")


@dataclass
class ErrorReport:
    """A per-response failure kept in the batch output instead of a score."""

    id: str
    stage: str
    error: str

    def to_json_dict(self) -> dict:
        return {"id": self.id, "kind": "error", "stage": self.stage, "error": self.error}


@dataclass
class BatchItem:
    """One input response's outcome: a report with its fact list, or an error."""

    response_id: str
    system_id: str = ""
    report: Optional[FactualityReport] = None
    facts: Optional[FactList] = None
    trace: Optional[StagedTrace] = None
    error: Optional[ErrorReport] = None

    def to_json_dict(self) -> dict:
        if self.error is not None:
            return self.error.to_json_dict()
        rec = {"id": self.response_id, "kind": "report", "system_id": self.system_id}
        rec.update(self.report.to_json_dict())
        rec["facts"] = [{"text": c.text, "label": c.label.value} for c in self.facts.claims]
        rec["no_verifiable_claim"] = self.facts.no_verifiable_claim
        if self.trace is not None:
            rec["trace"] = self.trace.to_json_dict()
        return rec


def run_integrated(
    response,
    backend,
    search_client: SearchClient,
    k: float,
    token_budget: int = DEFAULT_EVIDENCE_TOKEN_BUDGET,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> tuple[FactualityReport, FactList]:
    """Segment, retrieve per sentence, consolidate, one generate, parse, score.

    Telemetry records wall-clock seconds around the retrieval and modeling
    phases separately. An unparseable model output propagates; batch callers
    turn it into an ErrorReport rather than a silent zero.
    """
    facts, telemetry = _integrated_facts(
        response, backend, search_client, token_budget, prompt_version
    )
    return score_response(facts, k, telemetry), facts


def _integrated_facts(
    response,
    backend,
    search_client: SearchClient,
    token_budget: int = DEFAULT_EVIDENCE_TOKEN_BUDGET,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> tuple[FactList, Telemetry]:
    response_text = getattr(response, "response", response)
    sentences = split_sentences(response_text)
    if not sentences:
        return FactList.sentinel(), Telemetry()
    t0 = time.perf_counter()
    bundle = search_client.retrieve_sentence_evidence(sentences)
    context = consolidate(bundle, token_budget)
    retrieval_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    payload = build_joint_prompt(
        response_text, context, prompt_version=prompt_version
    )
    raw = generate(backend, payload)
    facts = parse_facts(raw)
    modeling_seconds = time.perf_counter() - t1
    telemetry = Telemetry(
        model_calls=1,
        search_queries=len(sentences),
        retrieval_seconds=retrieval_seconds,
        modeling_seconds=modeling_seconds,
    )
    return facts, telemetry


def run_batch(
    responses: Sequence[Response],
    backend,
    search_client: SearchClient,
    pipeline: str = "integrated",
    k: Optional[float] = None,
    parallelism: int = 4,
    staged_parallelism: int = 1,
    token_budget: int = DEFAULT_EVIDENCE_TOKEN_BUDGET,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> list[BatchItem]:
    """Score a batch with either pipeline; outputs are ordered as inputs.

    Per-response failures become ErrorReports and the batch continues. K is
    the median claim count over the successful responses unless overridden.
    """
    if pipeline not in PIPELINES:
        raise ContractViolation(f"unknown pipeline {pipeline!r}")
    if not responses:
        raise ContractViolation("empty batch")

    def first_pass(response: Response):
        if pipeline == "integrated":
            facts, telemetry = _integrated_facts(
                response, backend, search_client, token_budget, prompt_version
            )
            return facts, telemetry, None
        facts, trace = run_staged(
            response, backend, search_client, parallelism=staged_parallelism,
            prompt_version=prompt_version,
        )
        telemetry = Telemetry(
            model_calls=trace.extraction_calls + trace.verification_calls,
            search_queries=trace.search_queries,
            retrieval_seconds=trace.per_stage_seconds["retrieval"],
            modeling_seconds=trace.per_stage_seconds["extraction"]
            + trace.per_stage_seconds["verification"],
        )
        return facts, telemetry, trace

    outcomes: list = [None] * len(responses)
    if parallelism <= 1 or len(responses) == 1:
        for i, response in enumerate(responses):
            outcomes[i] = _capture(first_pass, response)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_capture, first_pass, r) for r in responses]
            outcomes = [f.result() for f in futures]

    claim_counts = [len(out[0].claims) for out in outcomes if not isinstance(out, ErrorStub)]
    if k is None and claim_counts:
        k = median_k(claim_counts)

    items: list[BatchItem] = []
    for response, out in zip(responses, outcomes):
        if isinstance(out, ErrorStub):
            items.append(
                BatchItem(
                    response_id=response.id,
                    system_id=response.system_id,
                    error=ErrorReport(id=response.id, stage=out.stage, error=out.message),
                )
            )
            continue
        facts, telemetry, trace = out
        items.append(
            BatchItem(
                response_id=response.id,
                system_id=response.system_id,
                report=score_response(facts, k, telemetry) if k is not None else None,
                facts=facts,
                trace=trace,
            )
        )
    return items


class ErrorStub:
    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message


def _capture(fn, response):
    try:
        return fn(response)
    except PipelineError as e:
        return ErrorStub(e.stage, str(e))
    except WhollyUnparseable as e:
        return ErrorStub("parse", str(e))
    except RetrievalError as e:
        return ErrorStub("retrieval", str(e))
    except Exception as e:  # per-response isolation: the batch continues
        return ErrorStub("pipeline", str(e))


# --- determinism hashing ------------------------------------------------------

_TIMING_KEYS = ("retrieval_seconds", "modeling_seconds", "per_stage_seconds")


def _strip_timing(value):
    if isinstance(value, dict):
        return {k: _strip_timing(v) for k, v in value.items() if k not in _TIMING_KEYS}
    if isinstance(value, list):
        return [_strip_timing(v) for v in value]
    return value


def results_hash(records: Sequence[dict]) -> str:
    """Content hash of result records with wall-clock timing fields excluded;
    equal hashes mean equal scoring outcomes."""
    h = hashlib.sha256()
    for rec in records:
        h.update(json.dumps(_strip_timing(rec), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
