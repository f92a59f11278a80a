from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasheng_mae import kernels
from dasheng_mae.embedder import ArchiveRecord
from dasheng_mae.errors import ContractError, DomainError, FormatError
from dasheng_mae.evaluate import (
    LabeledEmbeddings,
    ProbeSpec,
    cross_validate,
    kfold_split,
    knn_classify,
    knn_predict,
    labeled_from_records,
    probe_train,
    read_labels,
)
from dasheng_mae.numerics import Rng


def brute_force_knn(train_x, train_y, test_x, k):
    """Straight loops over exact rational cosines (integer inputs): stable rank, majority, nearest tied class wins."""

    def exact_cos(q, t):
        dot = int(np.dot(q, t))
        qq, tt = int(np.dot(q, q)), int(np.dot(t, t))
        if qq == 0 or tt == 0:
            return Fraction(0)
        # monotone in the cosine: sign(dot) * dot^2 / (|q|^2 |t|^2)
        return Fraction(dot * abs(dot), qq * tt)

    preds = []
    for q in test_x:
        ranked = sorted(range(len(train_x)), key=lambda j: (-exact_cos(q, train_x[j]), j))[:k]
        votes = {}
        for j in ranked:
            votes[train_y[j]] = votes.get(train_y[j], 0) + 1
        top = max(votes.values())
        preds.append(next(train_y[j] for j in ranked if votes[train_y[j]] == top))
    return np.array(preds)


def _labeled(x, y, n=None):
    n = n or int(np.max(y)) + 1
    return LabeledEmbeddings(x, y, [f"c{i}" for i in range(n)])


def test_exact_match_recovers_label():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 5))
    y = np.repeat([0, 1, 2], 10)
    x[y == 1] += 8.0
    rep = knn_classify(_labeled(x, y), _labeled(x[12:13], y[12:13], 3), k=10)
    assert rep.accuracy == 1.0


def test_separable_two_class():
    rng = np.random.default_rng(1)
    e1 = np.eye(4)[0]
    x = np.concatenate([e1 + 0.05 * rng.normal(size=(20, 4)), -e1 + 0.05 * rng.normal(size=(20, 4))])
    y = np.repeat([0, 1], 20)
    idx = rng.permutation(40)
    tr, te = idx[:30], idx[30:]
    rep = knn_classify(_labeled(x[tr], y[tr], 2), _labeled(x[te], y[te], 2))
    assert rep.accuracy == 1.0
    assert np.trace(rep.confusion) == 10


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(10, 400))
    q = int(rng.integers(1, 100))
    d = int(rng.integers(1, 6))
    c = int(rng.integers(2, 5))
    # a coarse grid forces exact similarity ties and vote ties
    train_x = rng.integers(-2, 3, size=(m, d)).astype(np.float64)
    test_x = rng.integers(-2, 3, size=(q, d)).astype(np.float64)
    train_y = rng.integers(0, c, m)
    k = int(rng.integers(1, min(m, 12) + 1))
    got, _ = knn_predict(train_x, train_y, test_x, k, c)
    np.testing.assert_array_equal(got, brute_force_knn(train_x, train_y, test_x, k))


def test_vote_tie_goes_to_nearest_member():
    sims = np.array([[0.9, 0.8, 0.7, 0.6]])
    labels = np.array([1, 0, 0, 1])
    for f in (kernels.knn_vote_np, kernels.knn_vote_nb):
        assert f(sims, labels, 4, 2)[0] == 1
        assert f(sims, labels, 3, 2)[0] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x, q = rng.normal(size=(40, 6)), rng.normal(size=(15, 6))
    y = rng.integers(0, 3, 40)
    a, _ = knn_predict(x, y, q, 10, 3)
    b, _ = knn_predict(c * x, y, c * q, 10, 3)
    np.testing.assert_array_equal(a, b)


def test_zero_norm_flagged():
    x = np.array([[1.0, 0], [0, 1.0], [0, 0]])
    rep = knn_classify(_labeled(x, np.array([0, 1, 1])), _labeled(np.zeros((1, 2)), np.array([1]), 2), k=1)
    assert rep.zero_norm == 2
    assert rep.accuracy in (0.0, 1.0)


def test_k_out_of_range():
    with pytest.raises(DomainError):
        knn_predict(np.ones((3, 2)), [0, 1, 0], np.ones((1, 2)), k=4)


def test_report_consistency():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(60, 3)), rng.integers(0, 3, 60)
    rep = knn_classify(_labeled(x[:40], y[:40], 3), _labeled(x[40:], y[40:], 3))
    conf = np.array(rep.confusion)
    assert rep.accuracy == np.trace(conf) / conf.sum()
    assert conf.sum(axis=1).tolist() == np.bincount(y[40:], minlength=3).tolist()
    assert '"accuracy"' in rep.to_json()


# -- folds -------------------------------------------------------------------


def test_kfold_plain_sizes():
    f = kfold_split(10, 5, Rng(0))
    assert np.bincount(f).tolist() == [2, 2, 2, 2, 2]


def test_kfold_stratified():
    labels = np.repeat([0, 1], 25)
    f = kfold_split(labels, 5, Rng(1))
    for k in range(5):
        assert np.bincount(labels[f == k]).tolist() == [5, 5]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(2, 10), st.integers(1, 6), st.integers(0, 1000))
def test_kfold_partition_property(m, folds, classes, seed):
    if m < folds:
        return
    labels = np.random.default_rng(seed).integers(0, classes, m)
    f = kfold_split(m, folds, Rng(seed), labels=labels)
    counts = np.bincount(f, minlength=folds)
    assert counts.sum() == m and counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(f, kfold_split(m, folds, Rng(seed), labels=labels))


def test_kfold_small_class_warns(caplog):
    labels = np.array([0] * 9 + [1])
    kfold_split(labels, 3, Rng(0))
    assert "not stratified" in caplog.text


def test_kfold_invalid():
    with pytest.raises(DomainError):
        kfold_split(3, 5, Rng(0))
    with pytest.raises(DomainError):
        kfold_split(10, 1, Rng(0))


def test_cross_validate_knn():
    rng = np.random.default_rng(2)
    y = np.repeat([0, 1], 30)
    x = 0.2 * rng.normal(size=(60, 4)) + np.eye(4)[y]
    reports = cross_validate(_labeled(x, y), 3)
    assert [r.fold for r in reports] == [0, 1, 2]
    assert sum(r.n for r in reports) == 60
    assert all(r.accuracy == 1.0 for r in reports)


# -- probes ------------------------------------------------------------------


def _xor(n, rng):
    c = rng.integers(0, 2, (n, 2))
    return _labeled((2 * c - 1) + rng.normal(0, 0.3, (n, 2)), c[:, 0] ^ c[:, 1], 2)


def test_probe_linear_separable():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.normal(size=(200, 2)) + 4 * (2 * y[:, None] - 1)
    _, rep = probe_train(_labeled(x[:150], y[:150], 2), _labeled(x[150:], y[150:], 2), ProbeSpec(kind="linear"))
    assert rep.accuracy == 1.0


def test_probe_chance_on_shuffled_labels():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 16))
    y = rng.permutation(np.arange(400) % 4)
    _, rep = probe_train(_labeled(x[:300], y[:300], 4), _labeled(x[300:], y[300:], 4))
    assert abs(rep.accuracy - 0.25) <= 0.1


def test_probe_xor():
    rng = np.random.default_rng(2)
    tr, va = _xor(400, rng), _xor(200, rng)
    _, lin = probe_train(tr, va, ProbeSpec(kind="linear"))
    _, mlp = probe_train(tr, va, ProbeSpec(kind="mlp"))
    assert lin.accuracy <= 0.75
    assert mlp.accuracy >= 0.95


def test_probe_leaves_inputs_untouched():
    rng = np.random.default_rng(3)
    tr, va = _xor(100, rng), _xor(50, rng)
    before = (tr.vectors.tobytes(), va.vectors.tobytes())
    probe_train(tr, va, ProbeSpec(epochs=3))
    assert (tr.vectors.tobytes(), va.vectors.tobytes()) == before


def test_probe_single_class():
    x = np.zeros((5, 2))
    with pytest.raises(DomainError):
        probe_train(_labeled(x, np.zeros(5, int), 2), _labeled(x, np.zeros(5, int), 2))


def test_probe_early_stops():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, 100)
    x = rng.normal(size=(100, 2)) + 5 * y[:, None]
    _, rep = probe_train(_labeled(x[:80], y[:80], 2), _labeled(x[80:], y[80:], 2), ProbeSpec(kind="linear", patience=3))
    assert rep.params["epochs_run"] < 100


# -- file inputs -------------------------------------------------------------


def test_labels_and_records(tmp_path):
    p = tmp_path / "l.jsonl"
    p.write_text('{"id": "a", "label": "dog"}\n{"id": "b", "label": "cat"}\n\n')
    labels = read_labels(p)
    assert labels == {"a": "dog", "b": "cat"}
    recs = [
        ArchiveRecord("a", 2, 2, False, np.array([[1.0, 0.0], [3.0, 2.0]], np.float32)),
        ArchiveRecord("b", 1, 2, True, np.array([[5.0, 5.0]], np.float32)),
        ArchiveRecord("z", 1, 2, True, np.zeros((1, 2), np.float32)),
    ]
    data = labeled_from_records(recs, labels)
    assert data.class_names == ["cat", "dog"]
    np.testing.assert_array_equal(data.labels, [1, 0])
    np.testing.assert_array_equal(data.vectors, [[2.0, 1.0], [5.0, 5.0]])
    p.write_text('{"id": "a"}\n')
    with pytest.raises(FormatError, match=":1:"):
        read_labels(p)


def test_mismatched_class_lists():
    a = LabeledEmbeddings(np.zeros((2, 2)), [0, 1], ["x", "y"])
    b = LabeledEmbeddings(np.zeros((2, 2)), [0, 1], ["y", "x"])
    with pytest.raises(ContractError):
        knn_classify(a, b, k=1)
