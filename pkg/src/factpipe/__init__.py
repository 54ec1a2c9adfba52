"""Factuality evaluation pipelines over retrieved web evidence.

Two pipelines share one engine: a staged baseline (per-sentence claim
extraction, per-claim retrieval, per-claim verification) and an integrated
single-pass evaluator (per-sentence retrieval, one joint extract-and-verify
call). On top sit exact score algebra, pipeline-agreement meta-evaluation,
synthetic training-data generation, and latency/cost benchmarking. Model
inference and web search are pluggable backends with deterministic mocks.
"""

from .bench import SimulatedLatency, TimingReport, benchmark, speedup
from .datagen import (
    TrainingRecord,
    build_record,
    dataset_stats,
    forge_records,
    mix_evidence,
    sieve_prompt,
)
from .gateway import (
    FactList,
    HttpChatBackend,
    Label,
    MockBackend,
    PromptPayload,
    VerifiedClaim,
    build_joint_prompt,
    generate,
    parse_facts,
    serialize_facts,
)
from .integrated import BatchItem, ErrorReport, results_hash, run_batch, run_integrated
from .meta_eval import (
    ClaimAlignment,
    MetaEvalReport,
    claim_accuracy,
    claim_metrics,
    match_exact,
    match_judge,
    meta_evaluate,
    pearson,
    rank_systems,
)
from .records import Response
from .retrieval import (
    CostReport,
    EvidenceBundle,
    EvidenceContext,
    SearchClient,
    SearchSnippet,
    consolidate,
    query_cost,
    url_overlap,
)
from .scorer import (
    FactualityReport,
    SystemScore,
    Telemetry,
    aggregate,
    f1_at_k,
    factual_precision,
    factual_recall,
    median_k,
    score_response,
)
from .segmenter import Sentence, split_sentences
from .staged import StagedTrace, extract_claims, run_staged, verify_claim

__version__ = "0.1.0"

__all__ = [
    "BatchItem",
    "ClaimAlignment",
    "CostReport",
    "ErrorReport",
    "EvidenceBundle",
    "EvidenceContext",
    "FactList",
    "FactualityReport",
    "HttpChatBackend",
    "Label",
    "MetaEvalReport",
    "MockBackend",
    "PromptPayload",
    "Response",
    "SearchClient",
    "SearchSnippet",
    "Sentence",
    "SimulatedLatency",
    "StagedTrace",
    "SystemScore",
    "Telemetry",
    "TimingReport",
    "TrainingRecord",
    "VerifiedClaim",
    "aggregate",
    "benchmark",
    "build_joint_prompt",
    "build_record",
    "claim_accuracy",
    "claim_metrics",
    "consolidate",
    "dataset_stats",
    "extract_claims",
    "f1_at_k",
    "factual_precision",
    "factual_recall",
    "forge_records",
    "generate",
    "match_exact",
    "match_judge",
    "median_k",
    "meta_evaluate",
    "mix_evidence",
    "parse_facts",
    "pearson",
    "query_cost",
    "rank_systems",
    "results_hash",
    "run_batch",
    "run_integrated",
    "run_staged",
    "score_response",
    "serialize_facts",
    "sieve_prompt",
    "speedup",
    "split_sentences",
    "url_overlap",
    "verify_claim",
]
