"""Synthetic training-data generation and prompt sieving.

Responses run through the staged pipeline to get labeled claims; each
response is then serialized twice, once with consolidated claim-level
evidence and once with sentence-level evidence, into training records. A
seeded mixer picks one granularity per response at a configurable fraction
(default 60% claim-level). A judge-backed sieve screens prompts likely to
elicit verifiable claims before any of this spends money.
"""
from __future__ import annotations

import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ContractViolation, EmptyQuerySet, UnparseableJudgement, UnpairedRecord
from .gateway import (
    DEFAULT_PROMPT_VERSION,
    FactList,
    Label,
    PromptPayload,
    VerifiedClaim,
    generate,
    load_prompt,
    serialize_facts,
)
from .records import Response
from .retrieval import SearchClient, consolidate
from .segmenter import split_sentences
from .staged import run_staged


@dataclass
class TrainingRecord:
    """One (response, evidence, labeled facts) example.

    Fact labels always come from the staged pipeline's claim-level
    verification; ``evidence_granularity`` only records which evidence text
    was attached for training.
    """

    id: str
    prompt_source: str
    response: str
    evidence_granularity: str  # "claim" or "sentence"
    evidence_text: str
    facts: list[VerifiedClaim]
    no_verifiable_claim: bool
    token_estimates: dict = field(default_factory=dict)
    split: str = "train"

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "prompt_source": self.prompt_source,
            "split": self.split,
            "response": self.response,
            "evidence_granularity": self.evidence_granularity,
            "evidence_text": self.evidence_text,
            "facts": [{"text": c.text, "label": c.label.value} for c in self.facts],
            "no_verifiable_claim": self.no_verifiable_claim,
            "token_estimates": dict(self.token_estimates),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainingRecord":
        return cls(
            id=d["id"],
            prompt_source=d["prompt_source"],
            split=d.get("split", "train"),
            response=d["response"],
            evidence_granularity=d["evidence_granularity"],
            evidence_text=d["evidence_text"],
            facts=[VerifiedClaim(f["text"], Label(f["label"])) for f in d["facts"]],
            no_verifiable_claim=d["no_verifiable_claim"],
            token_estimates=dict(d.get("token_estimates", {})),
        )


# --- prompt sieve ------------------------------------------------------------


def build_sieve_prompt(prompt: str, prompt_version: str = DEFAULT_PROMPT_VERSION) -> PromptPayload:
    system = load_prompt("sieve_system", prompt_version)
    user = load_prompt("sieve_user", prompt_version).format(prompt=prompt)
    return PromptPayload(
        system=system,
        user=user,
        decode_params={"temperature": 0, "max_output_tokens": 256},
        kind="sieve",
        fields={"prompt": prompt},
    )


_JUDGEMENT_SECTION = re.compile(r"^###\s*judgement\s*$", re.I | re.M)


def parse_sieve_judgement(raw: str) -> bool:
    """True for a Yes judgement, False for No; anything else is an error."""
    text = (raw or "").strip()
    m = _JUDGEMENT_SECTION.search(text)
    token = text[m.end():].strip() if m else text
    token = token.split("\n", 1)[0].strip().strip(".!").casefold()
    if token == "yes":
        return True
    if token == "no":
        return False
    raise UnparseableJudgement(f"judgement is neither Yes nor No: {raw[:80]!r}")


def sieve_prompt(
    prompt: str, judge_backend, prompt_version: str = DEFAULT_PROMPT_VERSION
) -> bool:
    """True iff the judge expects a response to this prompt to carry
    verifiable claims."""
    raw = generate(judge_backend, build_sieve_prompt(prompt, prompt_version))
    return parse_sieve_judgement(raw)


# --- record building -----------------------------------------------------------


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def build_record(
    response,
    facts: FactList,
    evidence,
    source: str,
    granularity: str = "claim",
    split: str = "train",
) -> TrainingRecord:
    """Serialize one example. Token estimates use whitespace tokens, a
    documented proxy for tokenizer-based counts."""
    response_text = getattr(response, "response", response)
    response_id = getattr(response, "id", "")
    evidence_text = getattr(evidence, "text", evidence)
    return TrainingRecord(
        id=response_id,
        prompt_source=source,
        split=split,
        response=response_text,
        evidence_granularity=granularity,
        evidence_text=evidence_text,
        facts=list(facts.claims),
        no_verifiable_claim=facts.no_verifiable_claim or not facts.claims,
        token_estimates={
            "response": whitespace_tokens(response_text),
            "evidence": whitespace_tokens(evidence_text),
            "facts": whitespace_tokens(serialize_facts(facts)),
        },
    )


def save_records(path: str | Path, records: Sequence[TrainingRecord]) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), ensure_ascii=False) + "\n")
    return len(records)


def load_records(path: str | Path) -> list[TrainingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrainingRecord.from_json_dict(json.loads(line)))
    return out


def render_training_text(
    record: TrainingRecord, prompt_version: str = DEFAULT_PROMPT_VERSION
) -> str:
    """The full training-text form: System, Response, Evidence, Facts blocks."""
    system = load_prompt("joint_system", prompt_version)
    body = load_prompt("joint_user", prompt_version).format(
        response=record.response, evidence=record.evidence_text
    )
    facts = FactList(
        claims=list(record.facts),
        no_verifiable_claim=record.no_verifiable_claim,
        raw="",
    )
    return f"### System\n{system.strip()}\n\n{body.strip()}\n\n### Facts\n{serialize_facts(facts)}\n"


# --- evidence mixing -------------------------------------------------------------


def mix_evidence(
    records: Sequence[TrainingRecord],
    claim_fraction: float = 0.6,
    seed: int = 0,
    stratify_by_source: bool = False,
) -> list[TrainingRecord]:
    """Pick one granularity per response id: a seeded shuffle assigns
    round(claim_fraction * n) ids claim-level evidence and the rest
    sentence-level. Every id must come in both granularities. With
    ``stratify_by_source`` the fraction is enforced within each
    prompt_source group instead of globally."""
    if not 0.0 <= claim_fraction <= 1.0:
        raise ContractViolation(f"claim_fraction {claim_fraction} outside [0, 1]")
    by_id: dict[str, dict[str, TrainingRecord]] = {}
    order: list[str] = []
    for rec in records:
        slot = by_id.setdefault(rec.id, {})
        if rec.evidence_granularity in slot:
            raise UnpairedRecord(f"duplicate {rec.evidence_granularity} record for id {rec.id!r}")
        slot[rec.evidence_granularity] = rec
        if rec.id not in order:
            order.append(rec.id)
    for rid, slot in by_id.items():
        if set(slot) != {"claim", "sentence"}:
            raise UnpairedRecord(f"id {rid!r} lacks one granularity (has {sorted(slot)})")

    rng = random.Random(seed)
    if stratify_by_source:
        groups: dict[str, list[str]] = {}
        for rid in order:
            groups.setdefault(by_id[rid]["claim"].prompt_source, []).append(rid)
        claim_ids: set[str] = set()
        for _source, rids in sorted(groups.items()):
            claim_ids.update(rng.sample(sorted(rids), round(claim_fraction * len(rids))))
    else:
        claim_ids = set(rng.sample(sorted(order), round(claim_fraction * len(order))))
    return [by_id[rid]["claim" if rid in claim_ids else "sentence"] for rid in order]


# --- dataset statistics ------------------------------------------------------------


def dataset_stats(records: Sequence[TrainingRecord]) -> list[dict]:
    """Per (source, split) rows: sizes, average claims, average token
    lengths, and the Supported/Unsupported label balance."""
    if not records:
        raise ContractViolation("no records to summarize")
    groups: dict[tuple[str, str], list[TrainingRecord]] = {}
    for rec in records:
        groups.setdefault((rec.prompt_source, rec.split), []).append(rec)
    rows = []
    for (source, split), group in sorted(groups.items()):
        n = len(group)
        claim_counts = [len(r.facts) for r in group]
        labels = [c.label for r in group for c in r.facts]
        supported = sum(1 for lb in labels if lb == Label.SUPPORTED)
        rows.append(
            {
                "prompt_source": source,
                "split": split,
                "n_responses": n,
                "avg_claims_per_response": sum(claim_counts) / n,
                "avg_response_tokens": sum(r.token_estimates.get("response", 0) for r in group) / n,
                "avg_evidence_tokens": sum(r.token_estimates.get("evidence", 0) for r in group) / n,
                "avg_facts_tokens": sum(r.token_estimates.get("facts", 0) for r in group) / n,
                "pct_supported": 100.0 * supported / len(labels) if labels else 0.0,
                "pct_unsupported": 100.0 * (len(labels) - supported) / len(labels) if labels else 0.0,
            }
        )
    return rows


def render_stats_table(rows: Sequence[dict]) -> str:
    header = (
        f"{'Source':<20} {'Split':<6} {'N':>6} {'Claims/Resp':>12} "
        f"{'RespTok':>8} {'EvidTok':>8} {'FactTok':>8} {'Sup%':>6} {'Unsup%':>7}"
    )
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['prompt_source']:<20} {r['split']:<6} {r['n_responses']:>6} "
            f"{r['avg_claims_per_response']:>12.1f} {r['avg_response_tokens']:>8.0f} "
            f"{r['avg_evidence_tokens']:>8.0f} {r['avg_facts_tokens']:>8.0f} "
            f"{r['pct_supported']:>6.1f} {r['pct_unsupported']:>7.1f}"
        )
    return "\n".join(lines)


# --- full generation driver -----------------------------------------------------------


def forge_records(
    responses: Sequence[Response],
    backend,
    search_client: SearchClient,
    source: str,
    split: str = "train",
    parallelism: int = 4,
    staged_parallelism: int = 1,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
) -> list[TrainingRecord]:
    """Run the staged pipeline per response and emit the claim-level and
    sentence-level record pair for each (labels come from the staged run
    either way). The search cache makes the second consolidation free."""

    def one(response: Response) -> list[TrainingRecord]:
        facts, _trace = run_staged(
            response, backend, search_client,
            parallelism=staged_parallelism, prompt_version=prompt_version,
        )
        claim_texts = [c.text for c in facts.claims]
        try:
            claim_ctx = consolidate(search_client.retrieve_claim_evidence(claim_texts))
            claim_evidence = claim_ctx
        except EmptyQuerySet:
            claim_evidence = ""
        sentences = split_sentences(response.response)
        sentence_evidence = (
            consolidate(search_client.retrieve_sentence_evidence(sentences)) if sentences else ""
        )
        return [
            build_record(response, facts, claim_evidence, source, "claim", split),
            build_record(response, facts, sentence_evidence, source, "sentence", split),
        ]

    if parallelism <= 1 or len(responses) == 1:
        nested = [one(r) for r in responses]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            nested = list(pool.map(one, responses))
    return [rec for pair in nested for rec in pair]
