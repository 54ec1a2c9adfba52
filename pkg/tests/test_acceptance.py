"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines inline.
"""
import functools
import json
import random
import time
from decimal import Decimal
from fractions import Fraction

from conftest import seed_query_cache, staged_world
from factpipe.bench import SimulatedLatency, benchmark, speedup
from factpipe.cli import main as cli_main
from factpipe.datagen import mix_evidence
from factpipe.errors import WhollyUnparseable
from factpipe.gateway import (
    FactList,
    Label,
    MockBackend,
    VerifiedClaim,
    parse_facts,
    serialize_facts,
)
from factpipe.integrated import results_hash, run_integrated
from factpipe.meta_eval import (
    build_judge_prompt,
    claim_accuracy,
    claim_metrics,
    match_exact,
    match_judge,
    pearson,
    regularized_incomplete_beta,
)
from factpipe.records import read_jsonl
from factpipe.retrieval import query_cost
from factpipe.scorer import score_response
from factpipe.segmenter import split_sentences
from factpipe.staged import run_staged

S, U = Label.SUPPORTED, Label.UNSUPPORTED


def criterion(number, name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number:>2}] {name}: FAIL")
                raise
            print(f"[criterion {number:>2}] {name}: PASS")
        return run
    return wrap


def facts_of(pairs):
    return FactList(
        claims=[VerifiedClaim(t, lb) for t, lb in pairs],
        no_verifiable_claim=not pairs,
        raw="",
    )


@criterion(1, "score-formula oracle equivalence, |C|<=6, K in 1..6, 1e-12")
def test_criterion_1_score_oracle():
    start = time.perf_counter()
    for total in range(0, 7):
        for supported in range(0, total + 1):
            for k in range(1, 7):
                p = Fraction(supported, total) if total else Fraction(0)
                r = min(Fraction(1), Fraction(total, k))
                f1 = Fraction(0) if supported == 0 else 2 * p * r / (p + r)
                pairs = [(f"c{i}", S if i < supported else U) for i in range(total)]
                rep = score_response(facts_of(pairs), k=k)
                assert abs(rep.precision - float(p)) <= 1e-12
                assert abs(rep.recall_k - float(r)) <= 1e-12
                assert abs(rep.f1_at_k - float(f1)) <= 1e-12
                if supported == 0:
                    assert rep.f1_at_k == 0.0  # exactly
    assert time.perf_counter() - start < 1.0


@criterion(2, "cost reproduction: 23 -> $0.01725, 14 -> $0.0105, exact decimal")
def test_criterion_2_cost():
    assert query_cost(23).total_usd == Decimal("0.01725")
    assert query_cost(14).total_usd == Decimal("0.0105")


@criterion(3, "call counts: staged 14+23+23 = 60 touches; integrated 1 call + 14 searches")
def test_criterion_3_call_counts(tmp_path):
    response, backend, client, _claims = staged_world(tmp_path)
    _facts, trace = run_staged(response, backend, client)
    assert trace.extraction_calls == 14
    assert trace.search_queries == 23
    assert trace.verification_calls == 23
    assert trace.total_touches() == 60

    fresh = MockBackend()
    client.reset_counters()
    report, _facts = run_integrated(response, fresh, client, k=14)
    assert fresh.call_count == 1
    assert report.telemetry.model_calls == 1
    assert report.telemetry.search_queries == 14


@criterion(4, "meta-eval partition (60,20,20,0), recall 0.8; sums to 100 on 1000 fixtures")
def test_criterion_4_partition():
    correct = [(f"correct {i}", S) for i in range(6)]
    wrong = [(f"wrong {i}", S) for i in range(2)]
    missing = [(f"missing {i}", S) for i in range(2)]
    gold = facts_of(correct + wrong + missing)
    pred = facts_of(correct + [(t, U) for t, _lb in wrong])
    alignment = match_exact(pred, gold)
    assert claim_accuracy(alignment, 10) == (60.0, 20.0, 20.0, 0.0)
    assert claim_metrics(alignment, len(pred.claims), 10).recall == 0.8

    rng = random.Random(2024)
    for _ in range(1000):
        n_gold = rng.randint(1, 15)
        gold_pairs = [(f"g{i}", rng.choice([S, U])) for i in range(n_gold)]
        pred_pairs = []
        for text, label in gold_pairs:
            roll = rng.random()
            if roll < 0.45:
                pred_pairs.append((text, rng.choice([S, U])))
            elif roll < 0.65:
                pred_pairs.append((text + " reworded", label))
        rng.shuffle(pred_pairs)
        pcts = claim_accuracy(match_exact(facts_of(pred_pairs), facts_of(gold_pairs)), n_gold)
        assert abs(sum(pcts) - 100.0) <= 0.01


@criterion(5, "pearson: affine=1, -x=-1, hand fixture 0.7746, p(n=20, r=.8) < 0.001")
def test_criterion_5_pearson():
    xs = [0.1, 0.4, 0.2, 0.9, 0.5, 0.7]
    r_affine, _p = pearson(xs, [2 * x + 3 for x in xs])
    assert abs(r_affine - 1.0) <= 1e-12
    r_neg, _p = pearson(xs, [-x for x in xs])
    assert abs(r_neg - (-1.0)) <= 1e-12
    r_hand, _p = pearson([1, 2, 3, 4, 5], [2, 4, 5, 4, 5])
    assert abs(r_hand - 0.7746) <= 1e-3
    df = 18  # n = 20
    t_squared = 0.8 * 0.8 * df / (1 - 0.8 * 0.8)
    p_value = regularized_incomplete_beta(df / 2, 0.5, df / (df + t_squared))
    assert p_value < 0.001


@criterion(6, "determinism: two full CLI score runs over 100 instances hash-identical")
def test_criterion_6_determinism(tmp_path):
    start = time.perf_counter()
    cache_path = tmp_path / "cache.jsonl"
    in_path = tmp_path / "responses.jsonl"
    rng = random.Random(5)
    with open(in_path, "w", encoding="utf-8") as fh:
        for i in range(100):
            n_sentences = rng.randint(1, 5)
            text = " ".join(
                f"Instance {i} statement {j} covers year {1800 + i + j}."
                for j in range(n_sentences)
            )
            fh.write(json.dumps(
                {"id": f"r{i:03d}", "system_id": f"sys{i % 4}", "response": text}) + "\n")
            seeds = {}
            for j, s in enumerate(split_sentences(text)):
                seeds[s.text] = [f"evidence: {s.text}" if (i + j) % 2 == 0 else "noise"]
            seed_query_cache(cache_path, seeds)
    out1, out2 = tmp_path / "run1.jsonl", tmp_path / "run2.jsonl"
    base = ["score", "--pipeline", "integrated", "--in", str(in_path), "--backend", "mock",
            "--cache", str(cache_path), "--offline"]
    assert cli_main(base + ["--out", str(out1)]) == 0
    assert cli_main(base + ["--out", str(out2)]) == 0
    records1 = list(read_jsonl(out1))
    records2 = list(read_jsonl(out2))
    assert len(records1) == 100
    assert results_hash(records1) == results_hash(records2)
    assert time.perf_counter() - start < 30.0


@criterion(7, "parallelism invariance: run_staged 1 vs 8 byte-identical on 50 fixtures")
def test_criterion_7_parallelism(tmp_path):
    rng = random.Random(11)
    for i in range(50):
        response, backend, client, _claims = staged_world(
            tmp_path,
            n_sentences=rng.randint(1, 5),
            n_claims=rng.randint(1, 8),
            cache_name=f"c{i}.jsonl",
        )
        serial, _t = run_staged(response, backend, client, parallelism=1)
        parallel, _t = run_staged(response, backend, client, parallelism=8)
        assert serialize_facts(serial).encode() == serialize_facts(parallel).encode()


@criterion(8, "simulated speedup: staged/integrated total ratio >= 3.0 on the 14/23 fixture")
def test_criterion_8_speedup(tmp_path):
    response, backend, client, _claims = staged_world(tmp_path)
    sim = SimulatedLatency(search_s=0.05, model_s_per_call=0.2)
    staged_report = benchmark("staged", [response], backend, client, latency=sim)
    integrated_report = benchmark("integrated", [response], MockBackend(), client, latency=sim)
    ratios = speedup(staged_report, integrated_report)
    assert ratios["total_ratio"] >= 3.0


@criterion(9, "judge rules: tainted justifier => Unsupported; grammar violation => erroneous")
def test_criterion_9_judge_rules():
    conforming = 0
    for case in range(30):
        kind = case % 3
        gold_pairs = [("gold zero", S), ("gold one", U if kind == 0 else S), ("gold two", S)]
        gold = facts_of(gold_pairs)
        pred = facts_of([(f"composite {case}", S)])
        backend = MockBackend(oracle=True)
        gold_texts = [c.text for c in gold.claims]
        pred_texts = [c.text for c in pred.claims]
        good = "### Thoughts\n.\n\n### Justifying Facts\n{j}\n\n### Judgement\n{v}"
        backend.record(build_judge_prompt(pred_texts[0], gold_texts),
                       good.format(j="1, 2", v="Supported"))
        violations = [
            "no grammar at all",
            good.format(j="1, 9", v="Supported"),     # out-of-range justifier
            good.format(j="one", v="Supported"),      # non-numeric justifier
            good.format(j="None", v="Supported"),     # supported without justifiers
            good.format(j="1", v="Perhaps"),          # judgement is neither label
        ]
        for g_i, g_text in enumerate(gold_texts):
            if kind == 2 and g_i == 1:
                backend.record(build_judge_prompt(g_text, pred_texts),
                               violations[case % len(violations)])
            else:
                backend.record(build_judge_prompt(g_text, pred_texts),
                               good.format(j="None", v="Unsupported"))
        alignment = match_judge(pred, gold, backend)
        matched = {m.pred_index: m for m in alignment.matched}
        if kind == 0:
            # minimal subset contains one Unsupported gold claim
            if matched[0].labels_agree is False and matched[0].gold_indices == (0, 1):
                conforming += 1
        elif kind == 1:
            if matched[0].labels_agree is True:
                conforming += 1
        else:
            if alignment.erroneous == [1]:
                conforming += 1
    assert conforming == 30


@criterion(10, "parser totality: 100k random unicode strings, zero crashes; round-trips exact")
def test_criterion_10_parser_fuzz():
    rng = random.Random(1234)
    codepoints = []
    while len(codepoints) < 4000:
        cp = rng.randrange(1, 0x110000)
        if not 0xD800 <= cp <= 0xDFFF:
            codepoints.append(chr(cp))
    structural = list(".:0123456789\n Supported Unsupported No verifiable claim")
    pool = codepoints + structural * 40
    for _ in range(100_000):
        n = rng.randrange(0, 60)
        raw = "".join(rng.choice(pool) for _ in range(n))
        try:
            parse_facts(raw)
        except WhollyUnparseable:
            pass  # the single declared failure mode is not a crash

    for _ in range(500):
        n_claims = rng.randrange(0, 9)
        fl = facts_of([
            ("claim " + "".join(rng.choice("abcdef: ") for _ in range(rng.randrange(1, 12))).strip()
             or "x",
             rng.choice([S, U]))
            for _ in range(n_claims)
        ])
        assert serialize_facts(parse_facts(serialize_facts(fl))) == serialize_facts(fl)


@criterion(11, "dataset mixture: 1000 pairs at 0.6 -> 600 +/- 1 claim-level, seed-stable")
def test_criterion_11_mixture():
    from test_datagen import record_fixture

    records = []
    for i in range(1000):
        records.append(record_fixture(f"id{i:04d}", "claim"))
        records.append(record_fixture(f"id{i:04d}", "sentence"))
    mixed = mix_evidence(records, claim_fraction=0.6, seed=7)
    n_claim = sum(1 for r in mixed if r.evidence_granularity == "claim")
    assert abs(n_claim - 600) <= 1
    again = mix_evidence(records, claim_fraction=0.6, seed=7)
    assert [(r.id, r.evidence_granularity) for r in mixed] == [
        (r.id, r.evidence_granularity) for r in again
    ]
