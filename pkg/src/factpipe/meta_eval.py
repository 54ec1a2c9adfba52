"""Agreement measurement between two pipelines' outputs.

One pipeline's fact lists are compared against another's (the staged
baseline acting as gold): claim precision and recall, a four-way accuracy
partition over gold claims (correct, incorrect label, missing, erroneous),
and Pearson correlation between the two sides' factuality scores. Claims
match either by normalized string equality or through an entailment judge
that returns the minimal justifying subset of reference claims.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

from .errors import (
    ConstantInput,
    ContractViolation,
    DegenerateK,
    DuplicateSystemId,
    FactPipeError,
    JudgeGrammarError,
    LengthMismatch,
)
from .gateway import (
    DEFAULT_PROMPT_VERSION,
    FactList,
    Label,
    PromptPayload,
    generate,
    load_prompt,
    normalize_claim_text,
)
from .scorer import SystemScore, median_k, score_response


@dataclass(frozen=True)
class MatchedPred:
    """A predicted claim entailed by a set of gold claims."""

    pred_index: int
    gold_indices: tuple[int, ...]
    labels_agree: bool


@dataclass(frozen=True)
class MatchedGold:
    """A gold claim entailed by a set of predicted claims."""

    gold_index: int
    pred_indices: tuple[int, ...]
    labels_agree: bool


@dataclass
class ClaimAlignment:
    """Both directed matchings plus the leftover partitions.

    Every gold index lands in exactly one of gold_matches / unmatched_gold /
    erroneous; the recall-side accounting depends on that.
    """

    matched: list[MatchedPred]
    gold_matches: list[MatchedGold]
    unmatched_pred: list[int]
    unmatched_gold: list[int]
    erroneous: list[int]
    matcher: str
    warnings: list[str] = field(default_factory=list)


class ClaimMetrics(NamedTuple):
    precision: float
    recall: float
    flagged: bool  # a zero denominator was coerced to 0.0


# --- exact matching ---------------------------------------------------------


def match_exact(pred: FactList, gold: FactList) -> ClaimAlignment:
    """Greedy in-order one-to-one matching on normalized claim text."""
    available: dict[str, list[int]] = {}
    for j, claim in enumerate(gold.claims):
        available.setdefault(normalize_claim_text(claim.text), []).append(j)

    matched: list[MatchedPred] = []
    gold_matches: list[MatchedGold] = []
    unmatched_pred: list[int] = []
    taken: set[int] = set()
    for i, claim in enumerate(pred.claims):
        queue = available.get(normalize_claim_text(claim.text))
        if queue:
            j = queue.pop(0)
            taken.add(j)
            agree = claim.label == gold.claims[j].label
            matched.append(MatchedPred(pred_index=i, gold_indices=(j,), labels_agree=agree))
            gold_matches.append(MatchedGold(gold_index=j, pred_indices=(i,), labels_agree=agree))
        else:
            unmatched_pred.append(i)
    unmatched_gold = [j for j in range(len(gold.claims)) if j not in taken]
    gold_matches.sort(key=lambda m: m.gold_index)
    return ClaimAlignment(
        matched=matched,
        gold_matches=gold_matches,
        unmatched_pred=unmatched_pred,
        unmatched_gold=unmatched_gold,
        erroneous=[],
        matcher="exact",
    )


# --- judge matching -----------------------------------------------------------


def build_judge_prompt(
    statement: str, references: Sequence[str], prompt_version: str = DEFAULT_PROMPT_VERSION
) -> PromptPayload:
    numbered = "\n".join(f"{i}. {text}" for i, text in enumerate(references, start=1))
    system = load_prompt("judge_system", prompt_version)
    user = load_prompt("judge_user", prompt_version).format(
        references=numbered, statement=statement
    )
    return PromptPayload(
        system=system,
        user=user,
        decode_params={"temperature": 0, "max_output_tokens": 512},
        kind="judge",
        fields={"statement": statement, "references": list(references)},
    )


_SECTION = re.compile(r"^###\s*(thoughts|justifying facts|judgement)\s*$", re.I | re.M)


def parse_judge_response(raw: str, n_references: int) -> tuple[bool, list[int]]:
    """Parse a judge response into (supported, 1-based justifier indices).

    Raises JudgeGrammarError on anything outside the response grammar:
    missing sections, a judgement that is neither label, justifiers that are
    not a comma-separated number list, indices out of range, or a Supported
    judgement with no justifiers.
    """
    sections: dict[str, str] = {}
    marks = list(_SECTION.finditer(raw or ""))
    for m, nxt in zip(marks, marks[1:] + [None]):
        name = m.group(1).lower()
        endpos = nxt.start() if nxt else len(raw)
        sections[name] = raw[m.end(): endpos].strip()
    if "judgement" not in sections:
        raise JudgeGrammarError("missing Judgement section")
    verdict = sections["judgement"].strip().strip(".").casefold()
    if verdict not in ("supported", "unsupported"):
        raise JudgeGrammarError(f"judgement is neither label: {sections['judgement']!r}")
    supported = verdict == "supported"

    justifier_text = sections.get("justifying facts", "").strip()
    if not justifier_text or justifier_text.casefold() in ("none", "none."):
        justifiers: list[int] = []
    else:
        justifiers = []
        for token in justifier_text.replace("\n", ",").split(","):
            token = token.strip().rstrip(".")
            if not token:
                continue
            if not token.isdigit():
                raise JudgeGrammarError(f"non-numeric justifier {token!r}")
            justifiers.append(int(token))
        for idx in justifiers:
            if not 1 <= idx <= n_references:
                raise JudgeGrammarError(f"justifier {idx} outside 1..{n_references}")
    if supported and not justifiers:
        raise JudgeGrammarError("Supported judgement without justifying facts")
    return supported, justifiers


class JudgeCache:
    """JSONL cache of raw judge outputs keyed by (statement, reference-set
    hash), so re-running a meta-evaluation is free and deterministic."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._store: dict[str, str] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._store[rec["key"]] = rec["output"]

    @staticmethod
    def key(statement: str, references: Sequence[str]) -> str:
        h = hashlib.sha256()
        h.update(statement.encode("utf-8"))
        h.update(b"\x1f")
        for ref in references:
            h.update(ref.encode("utf-8"))
            h.update(b"\x1e")
        return h.hexdigest()

    def get(self, key: str) -> Optional[str]:
        return self._store.get(key)

    def put(self, key: str, output: str) -> None:
        with self._lock:
            self._store[key] = output
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "output": output}) + "\n")


def _effective_label(justifiers_0based: Sequence[int], reference_labels: Sequence[Label]) -> Label:
    """A match inherits Unsupported if any justifying reference claim is
    Unsupported, else Supported."""
    if any(reference_labels[j] == Label.UNSUPPORTED for j in justifiers_0based):
        return Label.UNSUPPORTED
    return Label.SUPPORTED


def match_judge(
    pred: FactList,
    gold: FactList,
    judge_backend,
    judge_cache: Optional[JudgeCache] = None,
    parallelism: int = 8,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> ClaimAlignment:
    """Two directed entailment passes through the judge backend.

    Precision pass: each predicted claim is judged against the gold claims;
    a Supported verdict with a minimal justifying subset is a match, and its
    effective gold label is Unsupported if any justifier is Unsupported.
    Recall pass: each gold claim is judged against the predicted claims the
    same way. Grammar-violating judge outputs put the gold claim in
    ``erroneous`` (pred-side violations become unmatched with a warning).
    Judge backend errors propagate.
    """
    pred_texts = [c.text for c in pred.claims]
    gold_texts = [c.text for c in gold.claims]
    warnings: list[str] = []

    def ask(statement: str, references: list[str]):
        key = JudgeCache.key(statement, references)
        raw = judge_cache.get(key) if judge_cache else None
        if raw is None:
            raw = generate(judge_backend, build_judge_prompt(statement, references, prompt_version))
            if judge_cache:
                judge_cache.put(key, raw)
        return parse_judge_response(raw, len(references))

    def run_pass(statements: list[str], references: list[str]):
        def one(statement):
            try:
                return ("ok", ask(statement, references))
            except JudgeGrammarError as e:
                return ("grammar", str(e))

        if not statements or not references:
            return [("unsupported", None)] * len(statements)
        if parallelism <= 1 or len(statements) == 1:
            return [one(s) for s in statements]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, statements))

    matched: list[MatchedPred] = []
    unmatched_pred: list[int] = []
    gold_labels = [c.label for c in gold.claims]
    for i, outcome in enumerate(run_pass(pred_texts, gold_texts)):
        kind, value = outcome
        if kind == "grammar":
            unmatched_pred.append(i)
            warnings.append(f"pred {i}: judge grammar violation: {value}")
        elif kind == "ok" and value[0]:
            justifiers = [j - 1 for j in value[1]]
            effective = _effective_label(justifiers, gold_labels)
            matched.append(
                MatchedPred(
                    pred_index=i,
                    gold_indices=tuple(justifiers),
                    labels_agree=pred.claims[i].label == effective,
                )
            )
        else:
            unmatched_pred.append(i)

    gold_matches: list[MatchedGold] = []
    unmatched_gold: list[int] = []
    erroneous: list[int] = []
    pred_labels = [c.label for c in pred.claims]
    for j, outcome in enumerate(run_pass(gold_texts, pred_texts)):
        kind, value = outcome
        if kind == "grammar":
            erroneous.append(j)
            warnings.append(f"gold {j}: judge grammar violation: {value}")
        elif kind == "ok" and value[0]:
            justifiers = [p - 1 for p in value[1]]
            effective = _effective_label(justifiers, pred_labels)
            gold_matches.append(
                MatchedGold(
                    gold_index=j,
                    pred_indices=tuple(justifiers),
                    labels_agree=gold.claims[j].label == effective,
                )
            )
        else:
            unmatched_gold.append(j)

    return ClaimAlignment(
        matched=matched,
        gold_matches=gold_matches,
        unmatched_pred=unmatched_pred,
        unmatched_gold=unmatched_gold,
        erroneous=erroneous,
        matcher="judge",
        warnings=warnings,
    )


# --- metrics over an alignment -------------------------------------------------


def claim_metrics(alignment: ClaimAlignment, pred_count: int, gold_count: int) -> ClaimMetrics:
    """Precision = matched pred / pred count; recall = matched gold / gold
    count; zero denominators yield 0.0 with the flag set."""
    if pred_count < 0 or gold_count < 0:
        raise ContractViolation("negative claim counts")
    flagged = pred_count == 0 or gold_count == 0
    precision = len(alignment.matched) / pred_count if pred_count else 0.0
    recall = len(alignment.gold_matches) / gold_count if gold_count else 0.0
    return ClaimMetrics(precision=precision, recall=recall, flagged=flagged)


def claim_accuracy(
    alignment: ClaimAlignment, gold_count: int
) -> tuple[float, float, float, float]:
    """The four accuracy percentages over gold claims; they sum to 100."""
    if gold_count <= 0:
        raise ContractViolation("claim_accuracy needs gold_count > 0")
    matched_set = {m.gold_index for m in alignment.gold_matches}
    unmatched_set = set(alignment.unmatched_gold)
    erroneous_set = set(alignment.erroneous)
    if (
        matched_set & unmatched_set
        or matched_set & erroneous_set
        or unmatched_set & erroneous_set
        or len(matched_set | unmatched_set | erroneous_set) != gold_count
    ):
        raise ContractViolation("gold partition must be disjoint and complete")
    correct = sum(1 for m in alignment.gold_matches if m.labels_agree)
    incorrect = len(alignment.gold_matches) - correct
    missing = len(alignment.unmatched_gold)
    erroneous = len(alignment.erroneous)
    return (
        100.0 * correct / gold_count,
        100.0 * incorrect / gold_count,
        100.0 * missing / gold_count,
        100.0 * erroneous / gold_count,
    )


# --- correlation ------------------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued-fraction core of the regularized incomplete beta (modified
    Lentz method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise FactPipeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to ~1e-10 over the t-test parameter range."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r and the two-sided p-value from the t distribution
    with n-2 degrees of freedom."""
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} vs {len(ys)} values")
    n = len(xs)
    if n < 3:
        raise ContractViolation("pearson needs at least 3 pairs")
    mx = sum(xs) / n
    my = sum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = sum(d * d for d in dx)
    syy = sum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInput("a constant vector has no correlation")
    r = sum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t_squared = r * r * df / (1.0 - r * r)
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t_squared))
    return r, p


# --- ranking -----------------------------------------------------------------------


def rank_systems(scores: Sequence[SystemScore]) -> list[SystemScore]:
    """Descending by mean score; ties broken lexicographically by id."""
    ids = [s.system_id for s in scores]
    if len(set(ids)) != len(ids):
        raise DuplicateSystemId("system ids must be distinct")
    return sorted(scores, key=lambda s: (-s.mean_f1_at_k, s.system_id))


# --- the full meta-evaluation --------------------------------------------------------


@dataclass
class MetaEvalReport:
    claim_precision: float
    claim_recall: float
    pct_correct: float
    pct_incorrect_label: float
    pct_missing: float
    pct_erroneous: float
    pearson_r: Optional[float]
    p_value: Optional[float]
    n_pairs: int
    pred_claims: int
    gold_claims: int
    matcher: str
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "claim_precision": self.claim_precision,
            "claim_recall": self.claim_recall,
            "pct_correct": self.pct_correct,
            "pct_incorrect_label": self.pct_incorrect_label,
            "pct_missing": self.pct_missing,
            "pct_erroneous": self.pct_erroneous,
            "pearson_r": self.pearson_r,
            "p_value": self.p_value,
            "n_pairs": self.n_pairs,
            "pred_claims": self.pred_claims,
            "gold_claims": self.gold_claims,
            "matcher": self.matcher,
            "warnings": list(self.warnings),
        }

    def render_table(self) -> str:
        r = f"{self.pearson_r:.4f}" if self.pearson_r is not None else "n/a"
        p = f"{self.p_value:.2e}" if self.p_value is not None else "n/a"
        lines = [
            f"{'Precision':>10} {'Recall':>8} {'Correct%':>9} {'Incorrect%':>11} "
            f"{'Missing%':>9} {'Erroneous%':>11} {'Pearson r':>10} {'p':>9}",
            f"{self.claim_precision:>10.4f} {self.claim_recall:>8.4f} {self.pct_correct:>9.2f} "
            f"{self.pct_incorrect_label:>11.2f} {self.pct_missing:>9.2f} "
            f"{self.pct_erroneous:>11.2f} {r:>10} {p:>9}",
        ]
        return "\n".join(lines)


def meta_evaluate(
    pairs: Sequence[tuple[FactList, FactList]],
    matcher: str = "exact",
    judge_backend=None,
    judge_cache: Optional[JudgeCache] = None,
    parallelism: int = 8,
    k_pred: Optional[float] = None,
    k_gold: Optional[float] = None,
) -> MetaEvalReport:
    """Pool claim agreement over (pred, gold) fact-list pairs and correlate
    the two sides' per-response factuality scores."""
    if matcher not in ("exact", "judge"):
        raise ContractViolation(f"unknown matcher {matcher!r}")
    if matcher == "judge" and judge_backend is None:
        raise ContractViolation("judge matcher needs a judge backend")
    if not pairs:
        raise ContractViolation("no pairs to meta-evaluate")

    totals = {"matched_pred": 0, "pred": 0, "matched_gold": 0, "gold": 0,
              "correct": 0, "incorrect": 0, "missing": 0, "erroneous": 0}
    warnings: list[str] = []
    for pred, gold in pairs:
        if matcher == "exact":
            alignment = match_exact(pred, gold)
        else:
            alignment = match_judge(
                pred, gold, judge_backend, judge_cache=judge_cache, parallelism=parallelism
            )
        warnings.extend(alignment.warnings)
        totals["matched_pred"] += len(alignment.matched)
        totals["pred"] += len(pred.claims)
        totals["matched_gold"] += len(alignment.gold_matches)
        totals["gold"] += len(gold.claims)
        totals["correct"] += sum(1 for m in alignment.gold_matches if m.labels_agree)
        totals["incorrect"] += sum(1 for m in alignment.gold_matches if not m.labels_agree)
        totals["missing"] += len(alignment.unmatched_gold)
        totals["erroneous"] += len(alignment.erroneous)

    precision = totals["matched_pred"] / totals["pred"] if totals["pred"] else 0.0
    recall = totals["matched_gold"] / totals["gold"] if totals["gold"] else 0.0
    if totals["pred"] == 0:
        warnings.append("no predicted claims: precision denominator is zero")
    gold_total = totals["gold"]
    if gold_total:
        pcts = (
            100.0 * totals["correct"] / gold_total,
            100.0 * totals["incorrect"] / gold_total,
            100.0 * totals["missing"] / gold_total,
            100.0 * totals["erroneous"] / gold_total,
        )
    else:
        pcts = (0.0, 0.0, 0.0, 0.0)
        warnings.append("no gold claims: accuracy partition is empty")

    pearson_r: Optional[float] = None
    p_value: Optional[float] = None
    try:
        kp = k_pred if k_pred is not None else median_k([len(p.claims) for p, _g in pairs])
        kg = k_gold if k_gold is not None else median_k([len(g.claims) for _p, g in pairs])
        pred_scores = [score_response(p, kp).f1_at_k for p, _g in pairs]
        gold_scores = [score_response(g, kg).f1_at_k for _p, g in pairs]
        pearson_r, p_value = pearson(pred_scores, gold_scores)
    except (ConstantInput, ContractViolation, DegenerateK) as e:
        warnings.append(f"correlation unavailable: {e}")

    return MetaEvalReport(
        claim_precision=precision,
        claim_recall=recall,
        pct_correct=pcts[0],
        pct_incorrect_label=pcts[1],
        pct_missing=pcts[2],
        pct_erroneous=pcts[3],
        pearson_r=pearson_r,
        p_value=p_value,
        n_pairs=len(pairs),
        pred_claims=totals["pred"],
        gold_claims=totals["gold"],
        matcher=matcher,
        warnings=warnings,
    )
