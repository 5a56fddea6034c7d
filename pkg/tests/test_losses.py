"""Loss tests: contrast semantics, angular-margin reductions against
independent oracles, finite differences, and the combined objective."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from aarlogo import losses
from aarlogo import numeric as nm
from aarlogo.numeric import Tensor


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


# -- contrasts ---------------------------------------------------------------


def test_d_pos_trivial_cases():
    v = t([1.0, 2.0, 3.0])
    assert abs(losses.d_pos(v, v).item() + 1.0) < 1e-6
    assert abs(losses.d_pos(t([1.0, 0.0]), t([0.0, 1.0])).item()) < 1e-7
    assert abs(losses.d_pos(v, nm.mul(v, -1.0)).item() - 1.0) < 1e-6


def test_d_pos_batch_mean():
    z1 = t([[1.0, 0.0], [1.0, 0.0]])
    z2 = t([[1.0, 0.0], [0.0, 1.0]])  # cos = 1 and 0 -> mean -0.5
    assert abs(losses.d_pos(z1, z2).item() + 0.5) < 1e-6


def test_d_neg_is_negated_d_pos(rng):
    for _ in range(50):
        a = t(rng.normal(size=(4, 8)))
        b = t(rng.normal(size=(4, 8)))
        dp = losses.d_pos(a, b).item()
        dn = losses.d_neg(a, b).item()
        assert dn == -dp  # same path, exact sign flip


def test_contrasts_push_and_pull_gradients(rng):
    # both arguments must receive gradient: no stop-gradient anywhere
    a = t(rng.normal(size=(3, 5)))
    b = t(rng.normal(size=(3, 5)))
    nm.backward(losses.d_pos(a, b))
    assert a.grad is not None and b.grad is not None
    assert np.abs(a.grad).max() > 0 and np.abs(b.grad).max() > 0


def test_contrast_bounds(rng):
    for _ in range(20):
        v = losses.d_pos(t(rng.normal(size=(6, 4))),
                         t(rng.normal(size=(6, 4)))).item()
        assert -1.0 - 1e-6 <= v <= 1.0 + 1e-6


# -- angular-margin loss -------------------------------------------------------


def _softmax_ce_oracle(emb, weights, labels):
    """Plain softmax cross-entropy over cosine logits, float64."""
    e = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
    w = weights / np.linalg.norm(weights, axis=-1, keepdims=True)
    logits = e @ w.T
    lse = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) \
        + logits.max(-1)
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def _arcface_oracle(emb, weights, labels, s, m):
    """Direct float64 transcription of the margin formula."""
    e = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
    w = weights / np.linalg.norm(weights, axis=-1, keepdims=True)
    cos = e @ w.T
    ct = cos[np.arange(len(labels)), labels]
    st = np.sqrt(np.clip(1 - ct ** 2, 0, 1))
    phi = ct * math.cos(m) - st * math.sin(m)
    adj = np.where(ct > math.cos(math.pi - m), phi, ct - m * math.sin(m))
    logits = cos.copy()
    logits[np.arange(len(labels)), labels] = adj
    logits *= s
    lse = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) \
        + logits.max(-1)
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def _head(weights, s, m):
    return losses.ArcFaceHead(weights=Tensor(np.asarray(weights),
                                             requires_grad=True), s=s, m=m)


def test_arcface_zero_margin_is_softmax_ce(rng):
    # m=0, s=1 must reduce exactly to softmax CE over cosine logits
    for _ in range(100):
        emb = rng.normal(size=(4, 8))
        w = rng.normal(size=(5, 8))
        labels = rng.integers(0, 5, size=4)
        got = losses.arcface_loss(Tensor(emb), labels,
                                  _head(w, s=1.0, m=0.0)).item()
        want = _softmax_ce_oracle(emb, w, labels)
        assert abs(got - want) < 1e-6


def test_arcface_matches_margin_oracle(rng):
    for _ in range(50):
        emb = rng.normal(size=(6, 8))
        w = rng.normal(size=(7, 8))
        labels = rng.integers(0, 7, size=6)
        got = losses.arcface_loss(Tensor(emb), labels,
                                  _head(w, s=30.0, m=0.3)).item()
        want = _arcface_oracle(emb, w, labels, s=30.0, m=0.3)
        assert abs(got - want) < 1e-6 * max(1.0, abs(want))


def test_arcface_hand_worked_two_class():
    # one sample at 60 degrees from class-0 weight, orthogonal to class-1
    emb = np.array([[math.cos(math.pi / 3), math.sin(math.pi / 3)]])
    w = np.eye(2)
    s, m = 4.0, 0.3
    adj = math.cos(math.pi / 3 + m)  # within the monotone region
    other = math.sin(math.pi / 3)    # cos against class 1
    want = math.log(math.exp(s * adj) + math.exp(s * other)) - s * adj
    got = losses.arcface_loss(Tensor(emb), [0], _head(w, s=s, m=m)).item()
    assert abs(got - want) < 1e-6


def test_arcface_monotone_in_angle():
    w = np.eye(2)
    head = _head(w, s=30.0, m=0.3)
    angles = [0.0, 0.4, 0.9, 1.4, 2.0]
    vals = [losses.arcface_loss(
        Tensor(np.array([[math.cos(a), math.sin(a)]])), [0], head).item()
        for a in angles]
    assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))


def test_arcface_guard_region_finite():
    # embedding nearly opposite its class weight: guard path, still finite
    emb = np.array([[-0.999, 0.01]])
    head = _head(np.eye(2), s=30.0, m=0.3)
    val = losses.arcface_loss(Tensor(emb), [0], head).item()
    assert np.isfinite(val)
    want = _arcface_oracle(emb, np.eye(2), np.array([0]), 30.0, 0.3)
    assert abs(val - want) < 1e-5


def test_arcface_label_validation():
    head = _head(np.eye(2), s=30.0, m=0.3)
    with pytest.raises(ValueError):
        losses.arcface_loss(Tensor(np.ones((1, 2))), [2], head)
    with pytest.raises(ValueError):
        losses.ArcFaceHead(weights=Tensor(np.eye(2)), m=2.0)


def test_arcface_grad_check(rng):
    labels = np.array([0, 2, 1])
    w0 = rng.normal(size=(3, 6)).astype(np.float32)

    def closure(inputs):
        head = losses.ArcFaceHead(weights=inputs[1], s=8.0, m=0.3)
        return losses.arcface_loss(inputs[0], labels, head)

    emb = rng.normal(size=(3, 6)).astype(np.float32)
    assert nm.grad_check(closure, [emb, w0]) < 1e-3


def test_arcface_large_logits_stable():
    head = _head(np.eye(2), s=64.0, m=0.3)
    v = losses.arcface_loss(Tensor(np.array([[1e3, 0.0]])), [0], head)
    assert np.isfinite(v.item())


# -- combined objective --------------------------------------------------------


def _fake_outputs(rng, b=4, c=8, d=6):
    def mk():
        return Tensor(rng.normal(size=(b, c)).astype(np.float32),
                      requires_grad=True)
    p1 = Tensor(rng.normal(size=(b, d)).astype(np.float32), requires_grad=True)
    p2 = Tensor(rng.normal(size=(b, d)).astype(np.float32), requires_grad=True)
    return SimpleNamespace(z0_o1=mk(), z17_o1=mk(), z0_o2=mk(), z17_o2=mk(),
                           p1=p1, p2=p2)


def test_total_loss_identities(rng):
    head = _head(rng.normal(size=(3, 6)), s=30.0, m=0.3)
    labels = rng.integers(0, 3, size=4)
    for lam in (0.0, 0.5, 1.0, 2.0):
        out = _fake_outputs(rng)
        br = losses.total_loss(out, labels, head, lam)
        s = br.scalars()
        assert abs(s["l_con"] - (s["d_pos"] + lam * s["d_neg"])) < 1e-6
        assert abs(s["l_metr"] - (s["l_arc_p1"] + s["l_arc_p2"])) < 1e-6
        assert abs(s["l_aar"] - (s["l_metr"] + s["l_con"])) < 1e-6
        assert br.lam_neg == lam


def test_total_loss_lam_zero_drops_push(rng):
    head = _head(rng.normal(size=(3, 6)), s=30.0, m=0.3)
    labels = rng.integers(0, 3, size=4)
    out = _fake_outputs(rng)
    br = losses.total_loss(out, labels, head, 0.0)
    assert abs(br.l_con.item() - br.d_pos.item()) < 1e-7


def test_total_loss_grad_check(rng):
    labels = np.array([0, 1])
    w0 = rng.normal(size=(2, 4)).astype(np.float32)

    def closure(inputs):
        out = SimpleNamespace(z0_o1=inputs[0], z17_o1=inputs[1],
                              z0_o2=inputs[2], z17_o2=inputs[3],
                              p1=inputs[4], p2=inputs[5])
        head = losses.ArcFaceHead(weights=Tensor(w0), s=8.0, m=0.3)
        return losses.total_loss(out, labels, head, 1.0).l_aar

    ins = [rng.normal(size=(2, 4)).astype(np.float32) for _ in range(6)]
    assert nm.grad_check(closure, ins) < 1e-3


def test_total_loss_backward_reaches_all_inputs(rng):
    head = _head(rng.normal(size=(3, 6)), s=30.0, m=0.3)
    out = _fake_outputs(rng)
    br = losses.total_loss(out, rng.integers(0, 3, size=4), head, 1.0)
    nm.backward(br.l_aar)
    for name in ("z0_o1", "z17_o1", "z0_o2", "z17_o2", "p1", "p2"):
        g = getattr(out, name).grad
        assert g is not None and np.abs(g).max() > 0, name
    assert head.weights.grad is not None
