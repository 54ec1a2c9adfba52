"""The staged baseline pipeline: extract per sentence, retrieve per claim,
verify per claim.

For a typical response this means one extraction call per sentence, one
search query per extracted claim, and one verification call per claim, so a
14-sentence response yielding 23 claims costs 60 model or API touches. The
integrated pipeline exists to collapse that; this baseline is kept for
meta-evaluation targets, synthetic-data generation, and benchmarking.
"""
from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import ContractViolation, PipelineError, UnparseableVerdict
from .gateway import (
    DEFAULT_PROMPT_VERSION,
    FactList,
    Label,
    PromptPayload,
    VerifiedClaim,
    generate,
    load_prompt,
    normalize_claim_text,
    serialize_facts,
    SENTINEL,
)
from .retrieval import EvidenceBundle, EvidenceContext, SearchClient, consolidate
from .segmenter import Sentence, split_sentences


@dataclass
class StagedTrace:
    """Call accounting for one staged run: extraction_calls equals the
    sentence count, verification_calls and search_queries the claim count."""

    extraction_calls: int = 0
    verification_calls: int = 0
    search_queries: int = 0
    per_stage_seconds: dict = field(
        default_factory=lambda: {"extraction": 0.0, "retrieval": 0.0, "verification": 0.0}
    )

    def total_touches(self) -> int:
        return self.extraction_calls + self.verification_calls + self.search_queries

    def to_json_dict(self) -> dict:
        return {
            "extraction_calls": self.extraction_calls,
            "verification_calls": self.verification_calls,
            "search_queries": self.search_queries,
            "per_stage_seconds": dict(self.per_stage_seconds),
        }


# --- prompts ---------------------------------------------------------------


def build_extract_prompt(
    sentence: Sentence, full_response: str, prompt_version: str = DEFAULT_PROMPT_VERSION
) -> PromptPayload:
    """Extraction prompt: the focused sentence plus the full response for
    decontextualization."""
    system = load_prompt("staged_extract_system", prompt_version)
    user = load_prompt("staged_extract_user", prompt_version).format(
        response=full_response, sentence=sentence.text
    )
    return PromptPayload(
        system=system,
        user=user,
        decode_params={"temperature": 0, "max_output_tokens": 512},
        kind="extract",
        fields={"sentence": sentence.text, "response": full_response},
    )


def build_verify_prompt(
    claim: str, evidence_text: str, prompt_version: str = DEFAULT_PROMPT_VERSION
) -> PromptPayload:
    system = load_prompt("staged_verify_system", prompt_version)
    user = load_prompt("staged_verify_user", prompt_version).format(
        claim=claim, evidence=evidence_text
    )
    return PromptPayload(
        system=system,
        user=user,
        decode_params={"temperature": 0, "max_output_tokens": 8},
        kind="verify",
        fields={"claim": claim, "evidence": evidence_text},
    )


# --- stage operations ---------------------------------------------------------

_LEADING_MARKER = re.compile(r"^\s*(?:[-*•]\s+|\d+[.)]\s+)")
_HEADER_LINE = re.compile(r"^\s*facts?\s*:?\s*$", re.I)


def parse_extracted_claims(raw: str) -> list[str]:
    """Claim lines from an extraction response; the sentinel maps to []."""
    if not raw or not raw.strip():
        return []
    claims = []
    for line in raw.splitlines():
        line = line.strip()
        if not line or _HEADER_LINE.match(line):
            continue
        if normalize_claim_text(line) == normalize_claim_text(SENTINEL):
            continue
        claims.append(_LEADING_MARKER.sub("", line).strip())
    return [c for c in claims if c]


def extract_claims(
    sentence: Sentence,
    full_response: str,
    backend,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> list[str]:
    """Verifiable claims for one sentence, decontextualized against the
    full response."""
    raw = generate(backend, build_extract_prompt(sentence, full_response, prompt_version))
    return parse_extracted_claims(raw)


def _parse_verdict(raw: str) -> Label:
    words = re.findall(r"[a-z]+", raw.casefold())
    has_supported = "supported" in words
    has_unsupported = "unsupported" in words
    if has_supported and not has_unsupported:
        return Label.SUPPORTED
    if has_unsupported and not has_supported:
        return Label.UNSUPPORTED
    raise UnparseableVerdict(f"ambiguous verdict: {raw[:80]!r}")


def verify_claim(
    claim: str,
    evidence: EvidenceContext,
    backend,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> Label:
    """One binary label for one claim against its own retrieved evidence."""
    raw = generate(backend, build_verify_prompt(claim, evidence.text, prompt_version))
    return _parse_verdict(raw)


# --- the pipeline -------------------------------------------------------------


def run_staged(
    response,
    backend,
    search_client: SearchClient,
    parallelism: int = 1,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> tuple[FactList, StagedTrace]:
    """Extract, retrieve, verify; output is identical for any parallelism.

    ``response`` is a plain string or an object with a ``response``
    attribute. Any stage failure raises PipelineError carrying the partial
    trace. Claims keep sentence order, then extraction order; duplicates
    across sentences are preserved on purpose, since the meta-evaluator must
    see them.
    """
    if parallelism < 1:
        raise ContractViolation(f"parallelism must be >= 1, got {parallelism}")
    response_text = getattr(response, "response", response)
    trace = StagedTrace()
    sentences = split_sentences(response_text)
    if not sentences:
        return FactList.sentinel(), trace

    t0 = time.perf_counter()
    per_sentence = _fan_out(
        lambda s: extract_claims(s, response_text, backend, prompt_version),
        sentences,
        parallelism,
        stage="extraction",
        trace=trace,
    )
    trace.extraction_calls = len(sentences)
    trace.per_stage_seconds["extraction"] = time.perf_counter() - t0
    claims = [c for claim_list in per_sentence for c in claim_list]
    if not claims:
        return FactList.sentinel(), trace

    t1 = time.perf_counter()
    try:
        bundle = search_client.retrieve_claim_evidence(claims)
    except Exception as e:
        raise PipelineError("retrieval", e, trace=trace) from e
    trace.search_queries = len(claims)
    # Each claim is verified against only its own consolidated snippets.
    contexts = [
        consolidate(EvidenceBundle(entries=[entry], granularity="claim"))
        for entry in bundle.entries
    ]
    trace.per_stage_seconds["retrieval"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    labels = _fan_out(
        lambda pair: verify_claim(pair[0], pair[1], backend, prompt_version),
        list(zip(claims, contexts)),
        parallelism,
        stage="verification",
        trace=trace,
    )
    trace.verification_calls = len(claims)
    trace.per_stage_seconds["verification"] = time.perf_counter() - t2

    _check_trace(trace, n_sentences=len(sentences), n_claims=len(claims))
    fact_claims = [VerifiedClaim(text=c, label=lb) for c, lb in zip(claims, labels)]
    facts = FactList(claims=fact_claims, no_verifiable_claim=False, raw="")
    facts.raw = serialize_facts(facts)
    return facts, trace


def _fan_out(fn: Callable, items: Sequence, parallelism: int, stage: str, trace: StagedTrace):
    """Run ``fn`` over items with a bounded pool, restoring input order.

    The first failure aborts the stage; the raised PipelineError carries the
    item index and the partial trace."""
    if parallelism == 1 or len(items) == 1:
        results = []
        for i, item in enumerate(items):
            try:
                results.append(fn(item))
            except Exception as e:
                raise PipelineError(stage, e, trace=trace, index=i) from e
        return results
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(fn, item) for item in items]
        results = [None] * len(items)
        failure: Optional[tuple[int, Exception]] = None
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result()
            except Exception as e:
                if failure is None:
                    failure = (i, e)
        if failure is not None:
            raise PipelineError(stage, failure[1], trace=trace, index=failure[0]) from failure[1]
    return results


def _check_trace(trace: StagedTrace, n_sentences: int, n_claims: int) -> None:
    if trace.extraction_calls != n_sentences:
        raise ContractViolation("extraction_calls must equal the sentence count")
    if trace.verification_calls != n_claims or trace.search_queries != n_claims:
        raise ContractViolation("verification_calls and search_queries must equal the claim count")
