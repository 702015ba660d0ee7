import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgekit.autodiff import Tensor
from edgekit.conllu import Treebank
from edgekit.edge_model import (
    EdgeConfig,
    StaleSupportError,
    edge_rep,
    head_distribution,
    head_mask,
    label_distribution,
    precompute_support,
    similarity,
)
from edgekit.inference import explicit_scores, summary_scores
from edgekit.edge_model import ExplainIndex, SupportSummary

from conftest import tiny_model


def make_index(vecs, task="edge", label_ids=None, tau=64.0):
    n = len(vecs)
    label_ids = np.zeros(n, dtype=np.int64) if label_ids is None else np.asarray(label_ids)
    return ExplainIndex(task, vecs, np.linalg.norm(vecs, axis=1), np.zeros(n, dtype=np.int64),
                        np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64), label_ids,
                        [f"l{k}" for k in range(int(label_ids.max()) + 1 if n else 1)], "h", tau)


def summary_for(index, kind):
    sums = index.summarize(kind)
    return SupportSummary(index.task, kind, index.tau, sums, np.array([len(index)]), "h", index.labels)


# -- representations and similarity ------------------------------------------


def test_edge_rep_identity_and_zero():
    rng = np.random.default_rng(0)
    hd, hh = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    hd[2] = 1.0
    np.testing.assert_array_equal(edge_rep(hd, hh, 1, 2, np.eye(3)), hh[1])
    hd[3] = 0.0
    np.testing.assert_array_equal(edge_rep(hd, hh, 0, 3, rng.normal(size=(3, 3))), 0.0)


def test_edge_rep_loop_oracle():
    rng = np.random.default_rng(1)
    hd, hh, W = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    got = edge_rep(hd, hh, 0, 3, W)
    ref = [sum(W[r, c] * hd[3, c] * hh[0, c] for c in range(4)) for r in range(4)]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_edge_rep_index_errors():
    hd = np.ones((3, 2))
    for j, i in [(1, 1), (0, 0), (5, 1), (0, 3)]:
        with pytest.raises((ValueError, IndexError)):
            edge_rep(hd, hd, j, i, np.eye(2))


def test_model_edge_reps_match_formula(toy_train):
    m = tiny_model(toy_train)
    b = m.encoder.batch(toy_train.sentences[:2])
    hd, hh = m.encode(b)
    reps = m.edge_reps(hd, hh, np.array([0, 1]), np.array([0, 2]), np.array([1, 3])).data
    W = m.params["comp"].data
    np.testing.assert_allclose(reps[1], edge_rep(hd.data[1], hh.data[1], 2, 3, W), atol=1e-12)
    allr = m.all_edge_reps(hd, hh).data
    np.testing.assert_allclose(allr[1, 3, 2], reps[1], atol=1e-12)


def test_similarity_examples():
    assert similarity(np.array([1.0, 2.0]), np.array([3.0, 4.0]), "dot") == 11.0
    a = np.array([0.3, -2.0, 5.0])
    assert similarity(a, a, "cos", 64.0) == pytest.approx(64.0)
    with pytest.raises(ValueError):
        similarity(a, np.zeros(3), "cos")


def test_cos_bounded_by_tau():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert abs(similarity(a, b, "cos", 16.0)) <= 16.0 + 1e-12


# -- summed support vs explicit per-edge sums --------------------------------


def test_fast_equals_explicit_on_random_configurations():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(1000):
        d = int(rng.integers(2, 12))
        n_sup = int(rng.integers(1, 40))
        n_q = int(rng.integers(1, 8))
        kind = "cos" if trial % 2 else "dot"
        task = "label" if trial % 4 >= 2 else "edge"
        R = int(rng.integers(1, 5)) if task == "label" else 1
        sup = rng.normal(scale=rng.uniform(0.1, 5), size=(n_sup, d))
        q = rng.normal(size=(n_q, d))
        lab = rng.integers(0, R, n_sup) if task == "label" else None
        idx = make_index(sup, task, lab, tau=float(rng.choice([16, 32, 64, 128])))
        sums = idx.summarize(kind, R)
        summ = SupportSummary(task, kind, idx.tau, sums, np.bincount(idx.label_ids, minlength=R), "h", [])
        fast = summary_scores(q, summ)
        slow = explicit_scores(q, idx, kind, R)
        # literal per-pair loop as a third reference
        ref = np.zeros((n_q, R))
        for a in range(n_q):
            for e in range(n_sup):
                ref[a, idx.label_ids[e]] += similarity(q[a], sup[e], kind, idx.tau)
        for got in (fast, slow):
            err = np.abs(got - ref) / (np.abs(ref) + 1e-12)
            worst = max(worst, float(err.max()))
        assert (np.argmax(fast, axis=1) == np.argmax(ref, axis=1)).all() or np.isclose(
            np.sort(ref, axis=1)[:, -1], np.sort(ref, axis=1)[:, -2] if R > 1 else 0).any()
    assert worst < 1e-4


def test_singleton_support_equals_pairwise():
    rng = np.random.default_rng(4)
    e, q = rng.normal(size=(1, 5)), rng.normal(size=(3, 5))
    for kind in ("dot", "cos"):
        idx = make_index(e)
        s = summary_scores(q, summary_for(idx, kind))[:, 0]
        for a in range(3):
            assert s[a] == pytest.approx(similarity(q[a], e[0], kind, 64.0), rel=1e-12)


def test_cos_explicit_bound():
    rng = np.random.default_rng(5)
    sup, q = rng.normal(size=(25, 4)), rng.normal(size=(10, 4))
    idx = make_index(sup, tau=32.0)
    assert (np.abs(explicit_scores(q, idx, "cos", 1)) <= 32.0 * 25 + 1e-9).all()


def test_identical_singleton_support_gives_identical_label_scores():
    rng = np.random.default_rng(6)
    e = rng.normal(size=4)
    idx = make_index(np.stack([e, e, e]), "label", [0, 1, 2])
    s = summary_scores(rng.normal(size=(2, 4)), SupportSummary("label", "cos", 64.0, idx.summarize("cos"),
                                                              np.ones(3), "h", []))
    assert np.allclose(s, s[:, :1])


# -- model scoring paths ------------------------------------------------------


def test_weight_zero_scores_zero(toy_train):
    m = tiny_model(toy_train, scoring="weight", similarity="dot")
    m.params["head_weight"].data[:] = 0.0
    b = m.encoder.batch(toy_train.sentences[:2])
    hd, hh = m.encode(b)
    np.testing.assert_array_equal(m.head_scores_weight(hd, hh).data, 0.0)


def test_onehot_label_weights_recover_coordinates(toy_train):
    m = tiny_model(toy_train, task="label", scoring="weight", similarity="dot")
    R, d = m.params["label_weight"].shape
    W = np.zeros((R, d))
    for r in range(min(R, d)):
        W[r, r] = 1.0
    m.params["label_weight"].data[:] = W
    reps = Tensor(np.random.default_rng(7).normal(size=(4, d)))
    got = m.label_scores_weight(reps).data
    np.testing.assert_allclose(got[:, : min(R, d)], reps.data[:, : min(R, d)])


@pytest.mark.parametrize("kind", ["dot", "cos"])
def test_dense_head_scores_match_explicit_reps(toy_train, kind):
    m = tiny_model(toy_train, similarity=kind)
    b = m.encoder.batch(toy_train.sentences[:2])
    hd, hh = m.encode(b)
    v = np.random.default_rng(8).normal(size=m.d)
    dense = m.head_scores_instance(hd, hh, Tensor(v)).data
    reps = m.all_edge_reps(hd, hh).data
    if kind == "cos":
        ref = m.cfg.tau * (reps / np.linalg.norm(reps, axis=-1, keepdims=True)) @ v
    else:
        ref = reps @ v
    np.testing.assert_allclose(dense, ref, rtol=1e-10, atol=1e-10)


# -- distributions --------------------------------------------------------------


def test_head_distribution_examples():
    p = head_distribution(np.zeros((2, 2)))
    assert p[1, 0] == 1.0 and p[1, 1] == 0.0
    p = head_distribution(np.zeros((4, 4)))
    np.testing.assert_allclose(p[1:], np.where(head_mask(4)[1:], 1 / 3, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_head_distribution_oracle(T, seed):
    S = np.random.default_rng(seed).normal(scale=5, size=(T + 1, T + 1))
    P = head_distribution(S)
    for i in range(1, T + 1):
        cands = [k for k in range(T + 1) if k != i]
        e = np.exp(S[i, cands] - S[i, cands].max())
        np.testing.assert_allclose(P[i, cands], e / e.sum(), atol=1e-9)
        assert P[i, i] == 0.0
        assert P[i].sum() == pytest.approx(1.0)


def test_label_distribution():
    np.testing.assert_allclose(label_distribution(np.array([[3.0]])), [[1.0]])
    np.testing.assert_allclose(label_distribution(np.zeros((2, 4))), 0.25)
    s = np.array([[1.0, 2.0, 0.5]])
    e = np.exp(s - 2.0)
    np.testing.assert_allclose(label_distribution(s), e / e.sum(), atol=1e-12)


# -- precomputation -------------------------------------------------------------


def test_precompute_counts_and_sums(toy_train):
    m = tiny_model(toy_train, task="label")
    summ, idx = precompute_support(m, toy_train)
    freq = {}
    for s in toy_train.sentences:
        for t in s.tokens:
            freq[t.deprel] = freq.get(t.deprel, 0) + 1
    assert summ.counts.tolist() == [freq.get(r, 0) for r in m.labels]
    assert len(idx) == toy_train.n_tokens
    np.testing.assert_allclose(summ.sums, idx.summarize("cos"), atol=1e-12)


def test_precompute_single_sentence_two_edges(toy_train):
    m = tiny_model(toy_train, similarity="dot")
    one = Treebank([s for s in toy_train.sentences if len(s) == 2][:1] or toy_train.sentences[:1])
    summ, idx = precompute_support(m, one)
    np.testing.assert_allclose(summ.head_sum, idx.vectors.sum(axis=0))
    assert summ.counts.tolist() == [len(one[0])]


def test_precompute_order_invariant(toy_train):
    m = tiny_model(toy_train)
    a, _ = precompute_support(m, toy_train)
    perm = np.random.default_rng(9).permutation(len(toy_train))
    b, _ = precompute_support(m, Treebank([toy_train[int(k)] for k in perm], toy_train.labels))
    np.testing.assert_allclose(a.sums, b.sums, atol=1e-6)


def test_precompute_zero_count_label_warns(toy_train, caplog):
    m = tiny_model(toy_train, task="label")
    subset = Treebank([s for s in toy_train.sentences if "obj" not in s.deprels], toy_train.labels)
    with caplog.at_level(logging.WARNING):
        summ, _ = precompute_support(m, subset)
    k = m.labels.index("obj")
    assert summ.counts[k] == 0 and (summ.sums[k] == 0).all()
    assert "obj" in caplog.text


def test_stale_summary_rejected(toy_train):
    m = tiny_model(toy_train)
    summ, idx = precompute_support(m, toy_train)
    summ.check(m)
    m.params["comp"].data[0, 0] += 1.0
    m.touch()
    with pytest.raises(StaleSupportError, match="precompute"):
        summ.check(m)
    with pytest.raises(StaleSupportError):
        idx.check(m)


def test_edge_config_validation():
    with pytest.raises(ValueError):
        EdgeConfig("edge", "instance", "cos", tau=0.0)
    with pytest.raises(ValueError):
        EdgeConfig("tree", "instance", "cos")
