import math
import random

import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from factpipe.errors import (
    ConstantInput,
    ContractViolation,
    DuplicateSystemId,
    JudgeGrammarError,
    LengthMismatch,
)
from factpipe.gateway import FactList, Label, MockBackend, VerifiedClaim
from factpipe.meta_eval import (
    JudgeCache,
    build_judge_prompt,
    claim_accuracy,
    claim_metrics,
    match_exact,
    match_judge,
    meta_evaluate,
    parse_judge_response,
    pearson,
    rank_systems,
    regularized_incomplete_beta,
)
from factpipe.scorer import SystemScore

S, U = Label.SUPPORTED, Label.UNSUPPORTED


def facts(*pairs):
    return FactList(
        claims=[VerifiedClaim(text, label) for text, label in pairs],
        no_verifiable_claim=not pairs,
        raw="",
    )


def judge_reply(justifiers, judgement):
    jf = ", ".join(str(j) for j in justifiers) if justifiers else "None"
    return f"### Thoughts\nfixture\n\n### Justifying Facts\n{jf}\n\n### Judgement\n{judgement}"


# --- exact matcher ----------------------------------------------------------


def test_exact_identical_lists():
    fl = facts(("A is B", S), ("C is D", U))
    alignment = match_exact(fl, fl)
    assert len(alignment.matched) == 2
    assert all(m.labels_agree for m in alignment.matched)
    assert alignment.unmatched_pred == [] and alignment.unmatched_gold == []
    assert alignment.matcher == "exact"


def test_exact_paraphrase_is_blind():
    pred = facts(("The city of Paris lies in France", S))
    gold = facts(("Paris is located in France", S))
    alignment = match_exact(pred, gold)
    assert alignment.matched == []
    assert alignment.unmatched_pred == [0]
    assert alignment.unmatched_gold == [0]


def test_exact_normalization():
    pred = facts(("Paris is in France.", S))
    gold = facts(("paris is in  france", S))
    alignment = match_exact(pred, gold)
    assert len(alignment.matched) == 1


def test_exact_greedy_one_to_one():
    pred = facts(("Same", S), ("Same", S))
    gold = facts(("Same", U),)
    alignment = match_exact(pred, gold)
    assert len(alignment.matched) == 1
    assert alignment.matched[0].pred_index == 0
    assert alignment.unmatched_pred == [1]
    assert alignment.matched[0].labels_agree is False


# --- claim metrics -------------------------------------------------------------


def test_claim_metrics_all_matched():
    fl = facts(("A", S), ("B", S))
    m = claim_metrics(match_exact(fl, fl), 2, 2)
    assert m == (1.0, 1.0, False)


def test_claim_metrics_6_of_10_vs_6_of_12():
    shared = [(f"shared {i}", S) for i in range(6)]
    pred = facts(*(shared + [(f"pred only {i}", S) for i in range(4)]))
    gold = facts(*(shared + [(f"gold only {i}", S) for i in range(6)]))
    alignment = match_exact(pred, gold)
    m = claim_metrics(alignment, 10, 12)
    assert m.precision == pytest.approx(0.6)
    assert m.recall == pytest.approx(0.5)
    assert m.flagged is False


def test_claim_metrics_zero_denominator_flagged():
    pred = facts()
    gold = facts(("A", S))
    m = claim_metrics(match_exact(pred, gold), 0, 1)
    assert m.precision == 0.0 and m.flagged is True


# --- accuracy partition -----------------------------------------------------------


def planted_partition():
    """gold(10): 6 matched-correct, 2 matched-wrong-label, 2 missing."""
    correct = [(f"correct {i}", S) for i in range(6)]
    wrong = [(f"wrong {i}", S) for i in range(2)]
    missing = [(f"missing {i}", S) for i in range(2)]
    gold = facts(*(correct + wrong + missing))
    pred = facts(*(correct + [(t, U) for t, _l in wrong]))
    return pred, gold


def test_accuracy_partition_fixture():
    pred, gold = planted_partition()
    alignment = match_exact(pred, gold)
    pcts = claim_accuracy(alignment, 10)
    assert pcts == (60.0, 20.0, 20.0, 0.0)
    m = claim_metrics(alignment, len(pred.claims), 10)
    assert m.recall == pytest.approx(0.8)


def test_accuracy_perfect_agreement():
    fl = facts(*[(f"c{i}", S) for i in range(5)])
    assert claim_accuracy(match_exact(fl, fl), 5) == (100.0, 0.0, 0.0, 0.0)


def test_accuracy_partition_sums_to_100_randomized():
    rng = random.Random(42)
    for _ in range(1000):
        n_gold = rng.randint(1, 12)
        gold_pairs = [(f"g{i}", rng.choice([S, U])) for i in range(n_gold)]
        pred_pairs = []
        for text, label in gold_pairs:
            roll = rng.random()
            if roll < 0.5:
                pred_pairs.append((text, rng.choice([S, U])))  # match, maybe wrong label
            elif roll < 0.7:
                pred_pairs.append((text + " paraphrased", label))  # miss
        rng.shuffle(pred_pairs)
        alignment = match_exact(facts(*pred_pairs), facts(*gold_pairs))
        pcts = claim_accuracy(alignment, n_gold)
        assert abs(sum(pcts) - 100.0) < 0.01
        # recall equals (correct + incorrect) / 100 under exact matching
        m = claim_metrics(alignment, len(pred_pairs), n_gold)
        assert m.recall * 100 == pytest.approx(pcts[0] + pcts[1])


def test_accuracy_rejects_bad_gold_count():
    fl = facts(("A", S))
    with pytest.raises(ContractViolation):
        claim_accuracy(match_exact(fl, fl), 0)
    with pytest.raises(ContractViolation):
        claim_accuracy(match_exact(fl, fl), 5)  # partition does not cover 5


# --- judge grammar ------------------------------------------------------------------


def test_parse_judge_response_ok():
    assert parse_judge_response(judge_reply([2, 5], "Supported"), 6) == (True, [2, 5])
    assert parse_judge_response(judge_reply([], "Unsupported"), 6) == (False, [])


def test_parse_judge_grammar_violations():
    with pytest.raises(JudgeGrammarError):
        parse_judge_response("free-form text", 3)
    with pytest.raises(JudgeGrammarError):
        parse_judge_response(judge_reply([7], "Supported"), 3)  # out of range
    with pytest.raises(JudgeGrammarError):
        parse_judge_response(judge_reply(["x"], "Supported").replace("x", "two"), 3)
    with pytest.raises(JudgeGrammarError):
        parse_judge_response(judge_reply([], "Supported"), 3)  # supported needs justifiers
    with pytest.raises(JudgeGrammarError):
        parse_judge_response(
            "### Thoughts\n.\n\n### Justifying Facts\n1\n\n### Judgement\nMaybe", 3
        )


# --- judge matcher ------------------------------------------------------------------


def judge_world():
    gold = facts(
        ("gold fact zero", S),
        ("gold fact one", S),
        ("gold fact two", U),
        ("gold fact three", S),
    )
    pred = facts(
        ("composite of zero and one", S),
        ("tainted composite", S),
        ("unmatched pred", S),
    )
    backend = MockBackend(oracle=True)
    gold_texts = [c.text for c in gold.claims]
    pred_texts = [c.text for c in pred.claims]
    # Precision pass fixtures: composite matches
    backend.record(build_judge_prompt("composite of zero and one", gold_texts),
                   judge_reply([1, 2], "Supported"))
    backend.record(build_judge_prompt("tainted composite", gold_texts),
                   judge_reply([3, 4], "Supported"))  # includes the Unsupported gold
    # Recall pass fixtures
    backend.record(build_judge_prompt("gold fact zero", pred_texts),
                   judge_reply([1], "Supported"))
    backend.record(build_judge_prompt("gold fact one", pred_texts),
                   judge_reply([1], "Supported"))
    backend.record(build_judge_prompt("gold fact two", pred_texts),
                   judge_reply([], "Unsupported"))
    backend.record(build_judge_prompt("gold fact three", pred_texts),
                   "justifying gibberish with no sections")  # grammar violation
    return pred, gold, backend


def test_judge_composite_match_supported():
    pred, gold, backend = judge_world()
    alignment = match_judge(pred, gold, backend)
    by_pred = {m.pred_index: m for m in alignment.matched}
    assert by_pred[0].gold_indices == (0, 1)
    assert by_pred[0].labels_agree is True  # both justifiers Supported


def test_judge_unsupported_justifier_forces_unsupported():
    pred, gold, backend = judge_world()
    alignment = match_judge(pred, gold, backend)
    by_pred = {m.pred_index: m for m in alignment.matched}
    # justifiers include gold 2 (Unsupported) -> effective label Unsupported,
    # pred said Supported -> labels disagree
    assert by_pred[1].gold_indices == (2, 3)
    assert by_pred[1].labels_agree is False


def test_judge_grammar_violation_routes_gold_to_erroneous():
    pred, gold, backend = judge_world()
    alignment = match_judge(pred, gold, backend)
    assert alignment.erroneous == [3]
    assert 2 in alignment.unmatched_gold
    pcts = claim_accuracy(alignment, 4)
    assert pcts[3] == pytest.approx(25.0)
    assert abs(sum(pcts) - 100.0) < 0.01


def test_judge_out_of_range_justifier_is_erroneous():
    gold = facts(("only gold", S))
    pred = facts(("only pred", S))
    backend = MockBackend(oracle=True)
    backend.record(build_judge_prompt("only gold", ["only pred"]),
                   judge_reply([4], "Supported"))
    backend.record(build_judge_prompt("only pred", ["only gold"]),
                   judge_reply([], "Unsupported"))
    alignment = match_judge(pred, gold, backend)
    assert alignment.erroneous == [0]


def test_judge_cache_avoids_second_call(tmp_path):
    pred, gold, backend = judge_world()
    cache = JudgeCache(tmp_path / "judge.jsonl")
    match_judge(pred, gold, backend, judge_cache=cache)
    first_calls = backend.call_count
    match_judge(pred, gold, backend, judge_cache=cache)
    assert backend.call_count == first_calls  # all served from cache
    reloaded = JudgeCache(tmp_path / "judge.jsonl")
    alignment = match_judge(pred, gold, backend, judge_cache=reloaded)
    assert backend.call_count == first_calls
    assert alignment.erroneous == [3]


# --- pearson ---------------------------------------------------------------------


def test_pearson_identity():
    xs = [1.0, 2.0, 3.0, 4.0]
    r, p = pearson(xs, xs)
    assert r == pytest.approx(1.0, abs=1e-12)
    assert p == pytest.approx(0.0, abs=1e-9)


def test_pearson_sign_symmetry():
    xs = [1.0, 2.0, 5.0, 3.0]
    r, _p = pearson(xs, [-x for x in xs])
    assert r == pytest.approx(-1.0, abs=1e-12)


def test_pearson_hand_fixture():
    # Oracle (computed by hand from the covariance formula before the build):
    # xs=[1..5], ys=[2,4,5,4,5]: cov=6, sxx=10, syy=6 -> r = 6/sqrt(60) = 0.774597
    r, p = pearson([1, 2, 3, 4, 5], [2, 4, 5, 4, 5])
    assert r == pytest.approx(0.7746, abs=1e-3)
    assert r == pytest.approx(6 / math.sqrt(60), abs=1e-12)
    r_scipy, p_scipy = scipy.stats.pearsonr([1, 2, 3, 4, 5], [2, 4, 5, 4, 5])
    assert r == pytest.approx(r_scipy, abs=1e-12)
    assert p == pytest.approx(p_scipy, abs=1e-10)


def test_pearson_p_value_below_0_001_for_r08_n20():
    # r = 0.8, n = 20 -> t = 0.8*sqrt(18/0.36) = 5.657, df 18
    df = 18
    t2 = 0.8 * 0.8 * df / (1 - 0.64)
    p = regularized_incomplete_beta(df / 2, 0.5, df / (df + t2))
    assert p < 0.001
    assert p == pytest.approx(2 * scipy.stats.t.sf(math.sqrt(t2), df), rel=1e-9)


def test_pearson_errors():
    with pytest.raises(LengthMismatch):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(ConstantInput):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractViolation):
        pearson([1, 2], [1, 2])


def test_incomplete_beta_against_scipy_grid():
    for a in (0.5, 1.0, 2.5, 9.0, 50.0):
        for b in (0.5, 1.0, 3.0, 20.0):
            for x in (0.001, 0.1, 0.35, 0.5, 0.77, 0.92, 0.999):
                ours = regularized_incomplete_beta(a, b, x)
                ref = float(scipy.special.betainc(a, b, x))
                assert ours == pytest.approx(ref, abs=1e-10)


@given(
    st.lists(st.integers(-100, 100), min_size=3, max_size=30),
    st.floats(0.1, 50),
    st.floats(-100, 100),
)
@settings(max_examples=200)
def test_pearson_affine_invariance(xs, a, b):
    ys = [(i * 7 + 3) % 11 for i in range(len(xs))]
    try:
        base_r, _base_p = pearson(xs, ys)
    except ConstantInput:
        return
    mapped_r, _p = pearson([a * x + b for x in xs], ys)
    assert mapped_r == pytest.approx(base_r, abs=1e-9)


# --- ranking ------------------------------------------------------------------------


def test_rank_descending():
    scores = [SystemScore("A", 0.5, 10), SystemScore("B", 0.7, 10)]
    assert [s.system_id for s in rank_systems(scores)] == ["B", "A"]


def test_rank_tie_lexicographic():
    scores = [SystemScore("zeta", 0.5, 1), SystemScore("alpha", 0.5, 1)]
    assert [s.system_id for s in rank_systems(scores)] == ["alpha", "zeta"]


def test_rank_permutation_invariant():
    rng = random.Random(3)
    scores = [SystemScore(f"s{i}", rng.random(), 5) for i in range(8)]
    baseline = [s.system_id for s in rank_systems(scores)]
    for _ in range(10):
        shuffled = scores[:]
        rng.shuffle(shuffled)
        assert [s.system_id for s in rank_systems(shuffled)] == baseline


def test_rank_duplicate_id():
    with pytest.raises(DuplicateSystemId):
        rank_systems([SystemScore("A", 0.5, 1), SystemScore("A", 0.6, 1)])


# --- meta_evaluate ----------------------------------------------------------------


def test_meta_evaluate_identical_sides():
    lists = [
        facts(("a", S), ("b", U)),
        facts(("c", S), ("d", S), ("e", U)),
        facts(("f", S),),
        facts(("g", S), ("h", S), ("i", S), ("j", U)),
    ]
    report = meta_evaluate([(fl, fl) for fl in lists])
    assert report.claim_precision == 1.0
    assert report.claim_recall == 1.0
    assert report.pct_correct == 100.0
    assert report.pearson_r == pytest.approx(1.0)
    total = (report.pct_correct + report.pct_incorrect_label
             + report.pct_missing + report.pct_erroneous)
    assert total == pytest.approx(100.0, abs=0.01)


def test_meta_evaluate_requires_judge_backend():
    with pytest.raises(ContractViolation):
        meta_evaluate([(facts(("a", S)), facts(("a", S)))], matcher="judge")


def test_meta_evaluate_constant_scores_warns():
    fl = facts(("a", S))
    report = meta_evaluate([(fl, fl), (fl, fl), (fl, fl)])
    assert report.pearson_r is None
    assert any("correlation unavailable" in w for w in report.warnings)
