import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtda.errors import ConfigurationError, NumericError
from mtda.models import (
    DomainClassifier,
    build_backbone,
    grl_apply,
    parameter_checksum,
    predict,
    temperature_softmax,
)


def test_temperature_softmax_examples():
    assert torch.allclose(temperature_softmax(torch.zeros(3), 7.0), torch.full((3,), 1 / 3))
    e = math.e
    out = temperature_softmax(torch.tensor([2.0, 0.0], dtype=torch.float64), 2.0)
    assert out.tolist() == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)
    z = torch.tensor([5.0, 1.0, 1.0], dtype=torch.float64)
    assert torch.allclose(temperature_softmax(z, 1.0), torch.softmax(z, -1), atol=1e-15)


def test_temperature_softmax_errors():
    with pytest.raises(ValueError):
        temperature_softmax(torch.zeros(2), 0.0)
    with pytest.raises(NumericError):
        temperature_softmax(torch.tensor([1.0, float("nan")]), 1.0)


def test_temperature_softmax_no_overflow():
    out = temperature_softmax(torch.tensor([1e4, 0.0], dtype=torch.float64), 1.0)
    assert out.tolist() == [1.0, 0.0]


logit_rows = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(0.05, 50), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(z, tau, c):
    p = temperature_softmax(torch.from_numpy(z), tau)
    assert abs(float(p.sum()) - 1) <= 1e-6
    q = temperature_softmax(torch.from_numpy(z + c), tau)
    assert float((p - q).abs().max()) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(logit_rows)
def test_softmax_large_temperature_uniform(z):
    p = temperature_softmax(torch.from_numpy(z), 1e6)
    assert float((p - 1 / len(z)).abs().max()) <= 1e-4


def test_grl_forward_identity_and_backward():
    x = torch.tensor([[1.5, -2.0]], requires_grad=True)
    y = grl_apply(x, 0.5)
    assert torch.equal(y, x.detach())
    y.backward(torch.tensor([[1.0, -2.0]]))
    assert x.grad.tolist() == [[-0.5, 1.0]]


def test_grl_negative_lambda_rejected():
    with pytest.raises(ValueError):
        grl_apply(torch.zeros(1), -1.0)


def _toy_pipeline(w, lam, use_grl):
    # two parameters: feature = w0 * x, head = w1 * feature, loss = softplus(head)
    x = torch.tensor([0.7, -1.3, 2.1], dtype=torch.float64)
    feat = w[0] * x
    if use_grl:
        feat = grl_apply(feat, lam)
    return torch.nn.functional.softplus(w[1] * feat).mean()


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 3))
def test_grl_finite_difference(w0, w1, lam):
    """d loss / d w0 through the GRL equals -lam times the finite-difference gradient without it."""
    w = torch.tensor([w0, w1], dtype=torch.float64, requires_grad=True)
    _toy_pipeline(w, lam, True).backward()
    h = 1e-6
    fd = []
    for k in range(2):
        wp, wm = w.detach().clone(), w.detach().clone()
        wp[k] += h
        wm[k] -= h
        fd.append((_toy_pipeline(wp, lam, False) - _toy_pipeline(wm, lam, False)).item() / (2 * h))
    expected_w0 = -lam * fd[0]
    assert w.grad[0].item() == pytest.approx(expected_w0, rel=1e-3, abs=1e-9)
    # the head sits downstream of the GRL and keeps its ordinary gradient
    assert w.grad[1].item() == pytest.approx(fd[1], rel=1e-3, abs=1e-9)


def test_grl_forward_bit_exact_random():
    x = torch.randn(5, 7, dtype=torch.float64)
    assert torch.equal(grl_apply(x, 3.3), x)


def test_backbone_determinism_and_sizes(deterministic):
    a = build_backbone("student_compact", (32, 32, 3), 10, seed=4)
    b = build_backbone("student_compact", (32, 32, 3), 10, seed=4)
    assert parameter_checksum(a) == parameter_checksum(b)
    t = build_backbone("teacher_wide", (32, 32, 3), 10, seed=4)
    assert t.parameter_count > a.parameter_count
    feats, logits = a(torch.rand(4, 32, 32, 3, dtype=torch.float64))
    assert logits.shape == (4, 10) and feats.shape == (4, a.feature_dim)
    assert next(a.parameters()).dtype == torch.float64


def test_backbone_accepts_nchw():
    net = build_backbone("student_compact", (12, 12, 3), 10, seed=0)
    x = torch.rand(2, 12, 12, 3)
    assert torch.equal(net.logits(x), net.logits(x.permute(0, 3, 1, 2)))


def test_backbone_inference_deterministic():
    net = build_backbone("teacher_wide", (12, 12, 3), 10, seed=0)
    x = torch.rand(6, 12, 12, 3)
    assert torch.equal(net.logits(x), net.logits(x))


@pytest.mark.parametrize("shape", [(10, 10, 3), (4, 4, 1), (12, 12)])
def test_backbone_bad_shape(shape):
    with pytest.raises(ConfigurationError):
        build_backbone("student_compact", shape, 10)


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        build_backbone("resnet50", (12, 12, 3), 10)


def test_domain_classifier_shape():
    d = DomainClassifier(20, seed=1)
    assert d(torch.zeros(5, 20, dtype=next(d.parameters()).dtype)).shape == (5, 2)
    assert d.head[0].out_features == 10


class _FixedLogits(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits)

    def forward(self, x):
        return None, self.logits[: len(x)]


def test_predict_argmax_and_ties():
    assert predict(_FixedLogits([[0.1, 0.9, 0.3]]), torch.zeros(1)).tolist() == [1]
    assert predict(_FixedLogits([[0.5, 0.5]]), torch.zeros(1)).tolist() == [0]
    out = predict(_FixedLogits(torch.randn(7, 4)), torch.zeros(7))
    assert out.shape == (7,)
