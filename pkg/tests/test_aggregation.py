import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privadapt.accounting import PrivacyLedger, basic_composition
from privadapt.aggregation import (
    EmptyHistogramError,
    GenerationBudget,
    KeywordExtraction,
    ProtocolError,
    StudentConstructionError,
    TeacherEnsemble,
    TokenEnsemble,
    fewshotgen_generate,
    fewshotgen_next_token,
    keyword_histogram,
    ksa_select,
    pate_label,
    promptpate_build_student,
    promptpategen_build_student,
)
from privadapt.mechanisms import CandidateDomain, InvalidInputError, PrivacyBudget
from privadapt.rng import RngStream
from privadapt.simharness import SimTeacherModel, majority_vote_accuracy, sample_votes


def voting(n, domain_size, vote):
    return TeacherEnsemble(n, lambda q, t: vote(q, t), CandidateDomain(domain_size))


# -- pate_label -------------------------------------------------------------

def test_pate_unanimous():
    ens = voting(10, 4, lambda q, t: 2)
    root = RngStream(1)
    hits = sum(pate_label(ens, None, 1.0, root.substream(i)) == 2 for i in range(5000))
    assert hits / 5000 >= 0.999


def test_pate_split_is_fair():
    ens = voting(2, 2, lambda q, t: t)
    root = RngStream(2)
    zeros = sum(pate_label(ens, None, 1.0, root.substream(i)) == 0 for i in range(20000))
    assert abs(zeros / 20000 - 0.5) <= 0.02


def test_pate_single_teacher_single_class():
    ens = voting(1, 1, lambda q, t: 0)
    assert all(pate_label(ens, None, 5.0, RngStream(3).substream(i)) == 0 for i in range(50))


def test_pate_rejects_out_of_domain_vote():
    ens = voting(3, 2, lambda q, t: 5 if t == 1 else 0)
    with pytest.raises(ProtocolError) as err:
        pate_label(ens, None, 1.0, RngStream(4))
    assert err.value.teacher_index == 1


def test_pate_callback_failure_carries_index():
    def boom(q, t):
        if t == 2:
            raise RuntimeError("offline")
        return 0

    with pytest.raises(ProtocolError) as err:
        pate_label(voting(4, 2, boom), None, 1.0, RngStream(5))
    assert err.value.teacher_index == 2


def test_pate_converges_to_majority_vote():
    model = SimTeacherModel(accuracy=0.4, n_classes=4)
    n_teachers, n_queries = 9, 4000
    gen = RngStream(6).generator()
    truth, votes = sample_votes(model, n_teachers, n_queries, gen)
    ens = voting(n_teachers, 4, lambda q, t: int(votes[q, t]))
    root = RngStream(7)
    acc = np.mean([pate_label(ens, q, 1e-6, root.substream(q)) == truth[q] for q in range(n_queries)])
    assert abs(acc - majority_vote_accuracy(model.confusion_matrix(), n_teachers)) <= 0.03


def test_pate_charges_ledger():
    led = PrivacyLedger()
    pate_label(voting(3, 2, lambda q, t: 0), None, 2.0, RngStream(8), led)
    assert len(led) == 1 and led.entries[0].rdp.value_at(2) == pytest.approx(2 / 8)


# -- PromptPATE student -------------------------------------------------------

def test_student_exhaustive():
    ens = voting(5, 3, lambda q, t: q % 3)
    s = promptpate_build_student(ens, list(range(6)), 0.5, 6, lambda shots: 0.0, RngStream(9))
    assert sorted(s.provenance) == list(range(6))


def test_student_constant_scorer_takes_first_inputs():
    ens = voting(5, 3, lambda q, t: 0)
    s = promptpate_build_student(ens, list("abcdef"), 1.0, 3, lambda shots: 1.0, RngStream(10))
    assert [x for x, _ in s.shots] == ["a", "b", "c"]
    assert s.provenance == [0, 1, 2]


def test_student_labels_match_perfect_teachers():
    truth = {i: i % 4 for i in range(20)}
    ens = voting(25, 4, lambda q, t: truth[q])
    root = RngStream(11)
    ok = 0
    for rep in range(200):
        s = promptpate_build_student(ens, list(range(20)), 1.0, 4, lambda shots: 0.0, root.substream(rep))
        ok += all(label == truth[x] for x, label in s.shots)
    assert ok / 200 >= 0.99


def test_student_rejects_empty_public_set():
    with pytest.raises(InvalidInputError):
        promptpate_build_student(voting(1, 2, lambda q, t: 0), [], 1.0, 0, lambda s: 0.0, RngStream(0))


def test_student_ledger_counts_every_label():
    s = promptpate_build_student(voting(3, 2, lambda q, t: 0), list(range(7)), 1.5, 2, lambda x: 0, RngStream(12))
    assert len(s.ledger) == 7


# -- keywords -----------------------------------------------------------------

@given(st.lists(st.lists(st.sampled_from("abcdefghij"), max_size=12), min_size=1, max_size=8), st.integers(1, 5))
def test_clamping_bounds_each_teacher(texts, cap):
    extraction = KeywordExtraction(lambda seq: seq, cap)
    if not any(texts):
        with pytest.raises(EmptyHistogramError):
            keyword_histogram(texts, extraction)
        return
    hist = keyword_histogram(texts, extraction)
    for t in texts:
        kws = extraction.keywords(t)
        assert len(kws) <= cap and len(set(kws)) == len(kws)
    assert hist.counts.sum() == sum(len(extraction.keywords(t)) for t in texts)
    assert hist.counts.max() <= len(texts)


def test_whitespace_tokeniser_dedupes():
    hist = keyword_histogram(["Paris paris PARIS", "paris lyon"], KeywordExtraction())
    assert dict(zip(hist.domain.labels, hist.counts)) == {"paris": 2, "lyon": 1}


# -- KSA ------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["ptr", "gumbel_topk"])
def test_ksa_unanimous(method):
    texts = ["paris"] * 100
    root = RngStream(13)
    hits = sum(
        ksa_select(texts, KeywordExtraction(), 1, PrivacyBudget(8.0, 1e-5), method, root.substream(i)) == ["paris"]
        for i in range(2000)
    )
    assert hits / 2000 >= 0.99


def test_ksa_gumbel_symmetric():
    texts = ["alpha"] * 5 + ["beta"] * 5
    root = RngStream(14)
    picks = [ksa_select(texts, KeywordExtraction(), 1, PrivacyBudget(1.0), "gumbel_topk", root.substream(i))[0]
             for i in range(20000)]
    assert abs(picks.count("alpha") / 20000 - 0.5) <= 0.02


def test_ksa_ptr_abstains_on_zero_gap():
    texts = ["alpha"] * 5 + ["beta"] * 5
    root = RngStream(15)
    abst = sum(ksa_select(texts, KeywordExtraction(), 1, PrivacyBudget(1.0, 1e-5), "ptr", root.substream(i)) is None
               for i in range(2000))
    assert abst / 2000 >= 0.99


def test_ksa_errors():
    with pytest.raises(EmptyHistogramError):
        ksa_select(["", ""], KeywordExtraction(), 1, PrivacyBudget(1.0, 1e-5), "ptr", RngStream(0))
    with pytest.raises(InvalidInputError):
        ksa_select(["a"], KeywordExtraction(), 1, PrivacyBudget(1.0, 1e-5), "esa", RngStream(0))


def test_ksa_charges_full_budget_once():
    led = PrivacyLedger()
    ksa_select(["a b c"] * 4, KeywordExtraction(), 2, PrivacyBudget(3.0, 1e-6), "gumbel_topk", RngStream(16), led)
    assert led.basic_total().epsilon == 3.0 and len(led) == 1


# -- per-token generation -------------------------------------------------------

def test_next_token_unanimous():
    root = RngStream(17)
    hits = sum(fewshotgen_next_token([17] * 20, 1.0, root.substream(i)) == 17 for i in range(5000))
    assert hits / 5000 >= 0.99


def test_next_token_two_subsets_fair():
    root = RngStream(18)
    picks = [fewshotgen_next_token([3, 9], 2.0, root.substream(i)) for i in range(20000)]
    assert abs(picks.count(3) / 20000 - 0.5) <= 0.02


def test_next_token_single_subset():
    root = RngStream(19)
    assert all(fewshotgen_next_token([42], 8.0, root.substream(i)) == 42 for i in range(1000))


def test_next_token_empty():
    with pytest.raises(InvalidInputError):
        fewshotgen_next_token([], 1.0, RngStream(0))


def test_generate_zero_tokens():
    ens = TokenEnsemble(3, lambda prefix, t: 1)
    res = fewshotgen_generate(ens, GenerationBudget(PrivacyBudget(1.0), 1.0, 0), None, RngStream(20))
    assert res.tokens == [] and res.spent.epsilon == 0.0


def test_generate_reproduces_common_sequence():
    target = [5, 8, 13, 21, 34, 55, 89, 144, 233, 377]
    ens = TokenEnsemble(50, lambda prefix, t: target[len(prefix)])
    root = RngStream(21)
    ok = sum(
        fewshotgen_generate(ens, GenerationBudget.per_token(8.0, 10), None, root.substream(i)).tokens == target
        for i in range(500)
    )
    assert ok / 500 >= 0.95


def test_every_teacher_sees_the_released_prefix():
    seen: dict = {}

    def nxt(prefix, t):
        seen.setdefault(len(prefix), set()).add(prefix)
        return t % 3

    res = fewshotgen_generate(TokenEnsemble(6, nxt), GenerationBudget.per_token(0.5, 6), None, RngStream(22))
    for step, prefixes in seen.items():
        assert prefixes == {tuple(res.tokens[:step])}


@given(st.integers(0, 12), st.floats(0.1, 4.0), st.integers(0, 3))
def test_spent_equals_tokens_times_per_token(t_max, eps, stop):
    ens = TokenEnsemble(4, lambda prefix, t: (len(prefix) + t) % 4)
    res = fewshotgen_generate(ens, GenerationBudget.per_token(eps, t_max), stop, RngStream(23))
    assert res.spent.epsilon == basic_composition(PrivacyBudget(eps), len(res.tokens)).epsilon
    assert len(res.ledger) == len(res.tokens) <= t_max


def test_five_tokens_at_one():
    ens = TokenEnsemble(4, lambda prefix, t: 0)
    res = fewshotgen_generate(ens, GenerationBudget.per_token(1.0, 5), None, RngStream(24))
    assert res.spent.epsilon == 5.0


def test_generation_budget_rejects_overspend():
    with pytest.raises(InvalidInputError):
        GenerationBudget(PrivacyBudget(1.0), 0.5, 3)


def test_generate_callback_failure():
    def nxt(prefix, t):
        if t == 3 and prefix:
            raise ValueError("bad")
        return 0

    with pytest.raises(ProtocolError) as err:
        fewshotgen_generate(TokenEnsemble(5, nxt), GenerationBudget.per_token(1.0, 4), None, RngStream(25))
    assert err.value.teacher_index == 3


# -- PromptPATEGen ---------------------------------------------------------------

def keyword_ensemble(outputs):
    return TeacherEnsemble(100, lambda q, t: outputs[q](t))


def test_gen_student_single_unanimous_input():
    ens = keyword_ensemble({"q": lambda t: "paris"})
    s = promptpategen_build_student(ens, ["q"], KeywordExtraction(), 1, PrivacyBudget(8.0, 1e-5), 1, RngStream(26))
    assert s.shots == [("q", "paris")]


def test_gen_student_zero_shots():
    ens = keyword_ensemble({"q": lambda t: "paris"})
    s = promptpategen_build_student(ens, ["q"], KeywordExtraction(), 1, PrivacyBudget(8.0, 1e-5), 0, RngStream(27))
    assert s.shots == [] and s.spent.epsilon == 0.0


def test_gen_student_skips_abstains_and_charges_exactly():
    outputs = {
        "x1": lambda t: "rome",
        "x2": lambda t: "alpha" if t % 2 else "beta",
        "x3": lambda t: "oslo",
    }
    budget = PrivacyBudget(8.0, 1e-5)
    s = promptpategen_build_student(keyword_ensemble(outputs), ["x1", "x2", "x3"], KeywordExtraction(), 1, budget, 2,
                                    RngStream(28))
    assert s.provenance == [0, 2]
    assert s.shots == [("x1", "rome"), ("x3", "oslo")]
    spent = basic_composition(budget, 3)
    assert (s.spent.epsilon, s.spent.delta) == (spent.epsilon, spent.delta)


def test_gen_student_all_abstain():
    ens = keyword_ensemble({"q": lambda t: "a" if t % 2 else "b"})
    with pytest.raises(StudentConstructionError):
        promptpategen_build_student(ens, ["q"], KeywordExtraction(), 1, PrivacyBudget(1.0, 1e-5), 1, RngStream(29))


# -- reference data -----------------------------------------------------------------

def test_reference_sigma_table():
    from privadapt.aggregation import fewshotgen_reference_sigma, reference_hyperparameters

    assert fewshotgen_reference_sigma("sst2") == {0.1: 1.0, 1.0: 0.61, 3.0: 0.48, 8.0: 0.34}
    for name in ("sst2", "trec", "mpqa", "disaster"):
        sig = list(fewshotgen_reference_sigma(name).values())
        assert sig == sorted(sig, reverse=True)
    assert reference_hyperparameters()["promptpategen"]["samsum"]["sigma"] == 1.15
    with pytest.raises(InvalidInputError):
        fewshotgen_reference_sigma("epsilons")
