"""Per-response factuality scores and corpus aggregation.

A response with claim set C, of which S are supported, scores
precision P = S/|C|, length-capped recall R = min(1, |C|/K) against the
batch median claim count K, and F1@K = harmonic mean of P and R (zero when
nothing is supported). A system's score is the mean F1@K over its responses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

from .errors import ContractViolation, DegenerateK, EmptyBatch
from .gateway import FactList, Label


@dataclass
class Telemetry:
    model_calls: int = 0
    search_queries: int = 0
    retrieval_seconds: float = 0.0
    modeling_seconds: float = 0.0


@dataclass
class FactualityReport:
    """Counts, scores, and telemetry for one scored response."""

    claim_count: int
    supported_count: int
    precision: float
    recall_k: float
    f1_at_k: float
    k_used: float
    telemetry: Telemetry = field(default_factory=Telemetry)

    def to_json_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        return (
            f"|C|={self.claim_count} S={self.supported_count} "
            f"P={self.precision:.4f} R={self.recall_k:.4f} F1@K={self.f1_at_k:.4f}"
        )


@dataclass
class SystemScore:
    system_id: str
    mean_f1_at_k: float
    n_responses: int


def factual_precision(supported: int, total: int) -> float:
    """Fraction of the response's claims that are supported; 0 when claimless."""
    if supported < 0 or total < 0 or supported > total:
        raise ContractViolation(f"bad counts: supported={supported} total={total}")
    if total == 0:
        return 0.0
    return supported / total


def factual_recall(total: int, k: float) -> float:
    """min(1, total/k): full credit once the claim count reaches K."""
    if k <= 0:
        raise ContractViolation(f"k must be positive, got {k}")
    if total < 0:
        raise ContractViolation(f"negative claim count {total}")
    return min(1.0, total / k)


def f1_at_k(p: float, r: float, supported: int) -> float:
    """Harmonic mean of precision and recall, pinned to 0 when supported = 0."""
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise ContractViolation(f"scores out of range: p={p} r={r}")
    if supported == 0:
        return 0.0
    if p == 0.0 or r == 0.0:
        raise ContractViolation(f"supported={supported} but p={p}, r={r}")
    return 2.0 * p * r / (p + r)


def median_k(claim_counts: Sequence[int]) -> float:
    """Median claim count across responses; the K of F1@K."""
    if not claim_counts:
        raise ContractViolation("median_k over an empty batch")
    if any(c < 0 for c in claim_counts):
        raise ContractViolation("negative claim count")
    ordered = sorted(claim_counts)
    n = len(ordered)
    if n % 2:
        med = float(ordered[n // 2])
    else:
        med = (ordered[n // 2 - 1] + ordered[n // 2]) / 2.0
    if med == 0:
        raise DegenerateK("median claim count is zero")
    return med


def score_response(
    facts: FactList, k: float, telemetry: Optional[Telemetry] = None
) -> FactualityReport:
    """Score one response's labeled fact list against recall target ``k``."""
    total = len(facts.claims)
    supported = sum(1 for c in facts.claims if c.label == Label.SUPPORTED)
    p = factual_precision(supported, total)
    r = factual_recall(total, k)
    return FactualityReport(
        claim_count=total,
        supported_count=supported,
        precision=p,
        recall_k=r,
        f1_at_k=f1_at_k(p, r, supported),
        k_used=float(k),
        telemetry=telemetry or Telemetry(),
    )


def aggregate(reports: Sequence[FactualityReport], system_id: str = "all") -> SystemScore:
    """Mean F1@K over a system's responses."""
    if not reports:
        raise EmptyBatch("no reports to aggregate")
    mean = sum(r.f1_at_k for r in reports) / len(reports)
    return SystemScore(system_id=system_id, mean_f1_at_k=mean, n_responses=len(reports))
