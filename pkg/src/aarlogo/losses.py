"""Pull/push cosine contrasts, additive-angular-margin loss, and the
combined training objective.

The pull contrast minimizes -cos between the two cls outputs of the
positive block; the push contrast minimizes +cos between those of the
negative block. Both fused embeddings share one angular-margin head.
Everything is a pure function of tensors; no stop-gradients anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import Tensor


@dataclass
class ArcFaceHead:
    """Class-weight matrix plus the angular-margin hyperparameters."""
    weights: Tensor  # (num_classes, d_embed)
    s: float = 30.0
    m: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.m < math.pi / 2:
            raise ValueError(f"margin must be in [0, pi/2), got {self.m}")

    @property
    def num_classes(self):
        return self.weights.shape[0]


def init_arcface(num_classes: int, d_embed: int, rng: np.random.Generator,
                 s: float = 30.0, m: float = 0.3) -> ArcFaceHead:
    a = math.sqrt(6.0 / (num_classes + d_embed))
    w = Tensor(rng.uniform(-a, a, size=(num_classes, d_embed)).astype(nm.DTYPE),
               requires_grad=True)
    return ArcFaceHead(weights=w, s=s, m=m)


@dataclass
class LossBreakdown:
    d_pos: Tensor
    d_neg: Tensor
    l_con: Tensor
    l_arc_p1: Tensor
    l_arc_p2: Tensor
    l_metr: Tensor
    l_aar: Tensor
    lam_neg: float

    def scalars(self) -> dict:
        return {
            "d_pos": self.d_pos.item(), "d_neg": self.d_neg.item(),
            "l_con": self.l_con.item(), "l_arc_p1": self.l_arc_p1.item(),
            "l_arc_p2": self.l_arc_p2.item(), "l_metr": self.l_metr.item(),
            "l_aar": self.l_aar.item(),
        }


def d_pos(z1, z2):
    """Pull loss: -cos(z1, z2), batch-averaged for 2-D inputs."""
    c = nm.cosine_similarity(z1, z2)
    if c.ndim > 0:
        c = c.mean()
    return nm.mul(c, -1.0)


def d_neg(z3, z4):
    """Push loss: +cos(z3, z4) = -d_pos(z3, z4)."""
    return nm.mul(d_pos(z3, z4), -1.0)


def _logsumexp(logits):
    # constant shift for stability; gradient is unaffected
    mx = logits.data.max(axis=-1, keepdims=True)
    z = nm.add(logits, Tensor(-mx))
    return nm.add(nm.log(nm.tensor_sum(nm.exp(z), axis=-1)),
                  Tensor(mx[..., 0]))


def arcface_loss(embedding, labels, head: ArcFaceHead):
    """Cross-entropy over margin-shifted cosine logits, batch-averaged.

    Target logit is s*cos(theta+m) via the identity cos(theta)cos(m) -
    sin(theta)sin(m); outside the monotone region it falls back to
    cos(theta) - m*sin(m).
    """
    e = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    squeeze = e.ndim == 1
    if squeeze:
        e = e.reshape((1,) + e.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = head.num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels}")

    en = nm.l2_normalize(e)
    wn = nm.l2_normalize(head.weights)
    cos = nm.matmul(en, nm.transpose(wn))  # (B, K)
    onehot = np.zeros((labels.size, k), dtype=e.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    oh = Tensor(onehot)

    cos_t = nm.tensor_sum(nm.mul(cos, oh), axis=-1)
    sin_t = nm.sqrt(nm.clip(nm.add(nm.mul(nm.mul(cos_t, cos_t), -1.0), 1.0), 0.0, 1.0))
    cos_m, sin_m = math.cos(head.m), math.sin(head.m)
    phi = nm.add(nm.mul(cos_t, cos_m), nm.mul(sin_t, -sin_m))
    # easy-margin guard: cos(theta+m) is non-monotone past pi-m
    guard = (cos_t.data > math.cos(math.pi - head.m)).astype(e.dtype)
    fallback = nm.add(cos_t, -head.m * sin_m)
    target_logit = nm.add(nm.mul(phi, Tensor(guard)),
                          nm.mul(fallback, Tensor(1.0 - guard)))

    shift = nm.add(target_logit, nm.mul(cos_t, -1.0))  # replaces target column
    logits = nm.mul(nm.add(cos, nm.mul(oh, nm.reshape(shift, shift.shape + (1,)))),
                    head.s)
    ce = nm.add(_logsumexp(logits),
                nm.mul(nm.tensor_sum(nm.mul(logits, oh), axis=-1), -1.0))
    return ce.mean()


def total_loss(outputs, labels, head: ArcFaceHead, lam_neg: float) -> LossBreakdown:
    """Combined objective over one batch of dual-branch outputs."""
    # the scalar components are combined in float64 so the logged
    # decomposition identities hold to well below 1e-6
    dp = nm.astype(d_pos(outputs.z0_o1, outputs.z17_o1), np.float64)
    dn = nm.astype(d_neg(outputs.z0_o2, outputs.z17_o2), np.float64)
    l_con = nm.add(dp, nm.mul(dn, lam_neg))
    l_arc_p1 = nm.astype(arcface_loss(outputs.p1, labels, head), np.float64)
    l_arc_p2 = nm.astype(arcface_loss(outputs.p2, labels, head), np.float64)
    l_metr = nm.add(l_arc_p1, l_arc_p2)
    l_aar = nm.add(l_metr, l_con)
    return LossBreakdown(dp, dn, l_con, l_arc_p1, l_arc_p2, l_metr, l_aar,
                         lam_neg)
