import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from mtda.errors import NumericError
from mtda.metrics import (
    MetricsReport,
    cosine_domain_shift,
    equal_weight_accuracy,
    export_features,
    per_target_accuracy,
    read_features,
    report_from_accuracies,
    weighted_accuracy,
)
from mtda.models import build_backbone

accs_st = st.lists(st.floats(0, 100), min_size=1, max_size=8)


class Oracle(torch.nn.Module):
    """Predicts a fixed class sequence regardless of input."""

    def __init__(self, classes, k=10):
        super().__init__()
        self.classes = torch.tensor(np.array(classes))
        self.k = k

    def forward(self, x):
        logits = torch.nn.functional.one_hot(self.classes[: len(x)], self.k).float()
        return logits, logits


def test_equal_weight_examples():
    assert equal_weight_accuracy([34.1, 52.6, 59.7]) == pytest.approx(48.8, abs=0.05)
    assert equal_weight_accuracy([7.25]) == 7.25
    assert equal_weight_accuracy([3.3, 3.3, 3.3]) == pytest.approx(3.3, abs=1e-12)
    with pytest.raises(ValueError):
        equal_weight_accuracy([])


def test_weighted_examples():
    assert weighted_accuracy([100.0, 0.0], [1, 3]) == 25.0
    assert weighted_accuracy([61.0], [17]) == 61.0
    assert weighted_accuracy([10.0, 20.0, 60.0], [5, 5, 5]) == pytest.approx(30.0, abs=1e-9)
    with pytest.raises(ValueError):
        weighted_accuracy([1.0, 2.0], [1])
    with pytest.raises(ValueError):
        weighted_accuracy([1.0], [0])


@settings(max_examples=300)
@given(accs_st, st.integers(1, 1000))
def test_equal_counts_weighted_equals_equal_weight(accs, c):
    assert abs(weighted_accuracy(accs, [c] * len(accs)) - equal_weight_accuracy(accs)) <= 1e-9


@settings(max_examples=300)
@given(accs_st, st.data())
def test_aggregates_permutation_invariant_and_bounded(accs, data):
    counts = data.draw(st.lists(st.integers(1, 500), min_size=len(accs), max_size=len(accs)))
    perm = data.draw(st.permutations(range(len(accs))))
    eq, wt = equal_weight_accuracy(accs), weighted_accuracy(accs, counts)
    assert abs(eq - equal_weight_accuracy([accs[i] for i in perm])) <= 1e-9
    assert abs(wt - weighted_accuracy([accs[i] for i in perm], [counts[i] for i in perm])) <= 1e-9
    for v in (eq, wt):
        assert min(accs) - 1e-9 <= v <= max(accs) + 1e-9


@settings(max_examples=200)
@given(accs_st, st.data())
def test_report_invariants(accs, data):
    counts = data.draw(st.lists(st.integers(1, 500), min_size=len(accs), max_size=len(accs)))
    rep = report_from_accuracies([f"t{i}" for i in range(len(accs))], accs, counts)
    rep.check(1e-9)
    back = MetricsReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()


def test_report_paper_row_and_schema(tmp_path):
    rep = report_from_accuracies(["Cl", "Pr", "Rw"], [34.1, 52.6, 59.7], [100, 100, 100])
    assert round(rep.equal_weight, 1) == 48.8
    d = rep.to_dict()
    assert d["schema"] == "mtda-report" and d["schema_version"] == 1
    assert d["weights_uniform"] is True
    assert not report_from_accuracies(["a", "b"], [1.0, 2.0], [1, 2]).weights_uniform
    path = rep.save(tmp_path / "r.json")
    assert MetricsReport.load(path).equal_weight == rep.equal_weight
    with pytest.raises(ValueError):
        MetricsReport.from_dict({**d, "schema_version": 99})


def test_report_check_detects_tampering():
    rep = report_from_accuracies(["a", "b"], [10.0, 30.0], [1, 1])
    rep.equal_weight = 21.0
    with pytest.raises(AssertionError):
        rep.check()


def test_per_target_accuracy_examples():
    ds = make_dataset(8, role="target")
    assert per_target_accuracy(Oracle(ds.labels), [ds]) == [100.0]
    wrong = (np.asarray(ds.labels) + 1) % 10
    half = np.where(np.arange(8) < 4, ds.labels, wrong)
    assert per_target_accuracy(Oracle(half), [ds]) == [50.0]
    assert per_target_accuracy(Oracle(ds.labels), []) == []
    with pytest.raises(ValueError):
        per_target_accuracy(Oracle(ds.labels), [ds.without_labels()])


def test_per_target_chance_level():
    rng = np.random.default_rng(0)
    n = 2000
    ds = make_dataset(n, shape=(1, 1, 1), num_classes=2, role="target")
    acc = per_target_accuracy(Oracle(rng.integers(0, 2, n), k=2), [ds])[0]
    assert abs(acc - 50.0) < 100 * 4 * math.sqrt(0.25 / n)


def test_cosine_examples():
    f = np.random.default_rng(0).normal(size=(5, 3)) + 2
    assert cosine_domain_shift(f, f) == pytest.approx(0.0, abs=1e-12)
    assert cosine_domain_shift([[1.0, 0.0]], [[0.0, 2.0]]) == pytest.approx(1.0)
    assert cosine_domain_shift([[1.0, 0.0]], [[-3.0, 0.0]]) == pytest.approx(2.0)
    with pytest.raises(NumericError):
        cosine_domain_shift([[1.0, 0.0], [-1.0, 0.0]], [[1.0, 1.0]])
    with pytest.raises(ValueError):
        cosine_domain_shift(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 6)) + 1, rng.normal(size=(3, 6))
    assume(np.linalg.norm(y.mean(0)) > 1e-3)
    d = cosine_domain_shift(x, y)
    assert 0 <= d <= 2
    assert d == pytest.approx(cosine_domain_shift(y, x), abs=1e-12)
    assert d == pytest.approx(cosine_domain_shift(a * x, b * y), abs=1e-9)


def test_export_features_roundtrip(tmp_path):
    net = build_backbone("student_compact", (8, 8, 3), 10, seed=0)
    ds = make_dataset(7, role="target", domain_id="t0")
    path = export_features(net, ds, tmp_path / "f.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["domain_id", "label", "f0"] and len(header) == net.feature_dim + 2
    ids, labels, feats = read_features(path)
    assert ids == ["t0"] * 7 and labels == [int(v) for v in ds.labels]
    with torch.no_grad():
        ref = net.features(torch.from_numpy(np.array(ds.samples))).double().numpy()
    np.testing.assert_allclose(feats, ref, atol=1e-6)
    _, unl, _ = read_features(export_features(net, ds.without_labels(), tmp_path / "g.csv"))
    assert unl == [None] * 7
