"""Dual adversarial attention over the joint two-scale token sequence.

Both attention blocks consume the same 34-token sequence (cls00 + 16
patches of the tight crop, cls03 + 16 patches of the enlarged crop, plus
one shared learned position embedding). Block A feeds the pull contrast,
block B the push contrast; their cls outputs are added and projected by
one shared linear layer into the final embeddings p1 (scale00) and p2
(scale03). Retrieval uses L2-normalized p2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import numeric as nm
from .numeric import Tensor

SEQ_LEN = 34
CLS_IDX = (0, 17)
GRID = 4  # feature maps are 4x4
NUM_HEADS = 8
DEPTH = 2
MLP_RATIO = 4


@dataclass
class ModelConfig:
    backbone: bb.BackboneConfig
    d_embed: int = 128

    @property
    def c(self):
        return self.backbone.c_out


@dataclass
class AarOutputs:
    z0_o1: Tensor
    z17_o1: Tensor
    z0_o2: Tensor
    z17_o2: Tensor
    p1: Tensor
    p2: Tensor
    # block sequences kept for gradient-based heatmaps: the final outputs
    # and the penultimate-layer outputs (the last layer's inputs, where
    # patch tokens still feed the cls positions through attention)
    seq_out_a: Tensor = None
    seq_out_b: Tensor = None
    seq_mid_a: Tensor = None
    seq_mid_b: Tensor = None


def _init_block(prefix: str, c: int, rng: np.random.Generator, params: dict):
    hidden = MLP_RATIO * c
    for layer in range(DEPTH):
        p = f"{prefix}.l{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.{name}"] = bb.uniform_init(rng, (c, c), c, c)
            params[f"{p}.{name}_b"] = Tensor(
                np.zeros(c, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.ln1_g"] = Tensor(np.ones(c, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.ln1_b"] = Tensor(np.zeros(c, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.ln2_g"] = Tensor(np.ones(c, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.ln2_b"] = Tensor(np.zeros(c, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.w1"] = bb.uniform_init(rng, (c, hidden), c, hidden)
        params[f"{p}.b1"] = Tensor(np.zeros(hidden, dtype=nm.DTYPE), requires_grad=True)
        params[f"{p}.w2"] = bb.uniform_init(rng, (hidden, c), hidden, c)
        params[f"{p}.b2"] = Tensor(np.zeros(c, dtype=nm.DTYPE), requires_grad=True)


def init_model(config: ModelConfig, rng: np.random.Generator) -> dict:
    """All learnable state: backbone, tokens, two blocks, shared projection."""
    c, d = config.c, config.d_embed
    if c % NUM_HEADS != 0:
        raise ValueError(f"channel count {c} not divisible by {NUM_HEADS} heads")
    params = bb.init_backbone(config.backbone, rng)
    params["cls00"] = Tensor(
        (0.02 * rng.standard_normal((1, c))).astype(nm.DTYPE), requires_grad=True)
    params["cls03"] = Tensor(
        (0.02 * rng.standard_normal((1, c))).astype(nm.DTYPE), requires_grad=True)
    params["pos"] = Tensor(
        (0.02 * rng.standard_normal((SEQ_LEN, c))).astype(nm.DTYPE),
        requires_grad=True)
    _init_block("block_a", c, rng, params)
    _init_block("block_b", c, rng, params)
    params["proj.w"] = bb.uniform_init(rng, (c, d), c, d)
    params["proj.b"] = Tensor(np.zeros(d, dtype=nm.DTYPE), requires_grad=True)
    return params


def build_sequence(fmap, cls_token):
    """4x4xC feature map -> 17-token sequence [cls; patch_1..16], row-major.

    Patch token 1+4r+c corresponds to feature-map cell (r, c). Position
    embeddings are NOT added here; the joint builder adds them once.
    """
    f = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    batched = f.ndim == 4
    if f.shape[-3] != GRID or f.shape[-2] != GRID:
        raise nm.ShapeError(f"build_sequence: expected ..x{GRID}x{GRID}xC, got {f.shape}")
    c = f.shape[-1]
    if batched:
        b = f.shape[0]
        patches = f.reshape((b, GRID * GRID, c))
        cls = nm.reshape(cls_token, (1, 1, c))
        cls = nm.add(cls, Tensor(np.zeros((b, 1, c), dtype=nm.DTYPE)))
        return nm.concat([cls, patches], axis=1)
    patches = f.reshape((GRID * GRID, c))
    return nm.concat([cls_token, patches], axis=0)


def build_joint_sequence(f00, f03, params: dict):
    """Two feature maps -> 34-token joint sequence with positions added."""
    c00 = f00.shape[-1]
    c03 = f03.shape[-1]
    if c00 != c03:
        raise nm.ShapeError(
            f"build_joint_sequence: channel mismatch {c00} vs {c03}")
    seq00 = build_sequence(f00, params["cls00"])
    seq03 = build_sequence(f03, params["cls03"])
    joint = nm.concat([seq00, seq03], axis=-2)
    return nm.add(joint, params["pos"])


def _attn_layer(x, params: dict, prefix: str, heads: int):
    c = x.shape[-1]
    hd = c // heads
    batched = x.ndim == 3
    h = nm.layer_norm(x, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    q = nm.add(nm.matmul(h, params[f"{prefix}.wq"]), params[f"{prefix}.wq_b"])
    k = nm.add(nm.matmul(h, params[f"{prefix}.wk"]), params[f"{prefix}.wk_b"])
    v = nm.add(nm.matmul(h, params[f"{prefix}.wv"]), params[f"{prefix}.wv_b"])
    L = x.shape[-2]
    if batched:
        b = x.shape[0]
        split = lambda t: nm.transpose(t.reshape((b, L, heads, hd)), (0, 2, 1, 3))
        merge = lambda t: nm.transpose(t, (0, 2, 1, 3)).reshape((b, L, c))
    else:
        split = lambda t: nm.transpose(t.reshape((L, heads, hd)), (1, 0, 2))
        merge = lambda t: nm.transpose(t, (1, 0, 2)).reshape((L, c))
    qh, kh, vh = split(q), split(k), split(v)
    scores = nm.mul(nm.matmul(qh, nm.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                    1.0 / math.sqrt(hd))
    attn = nm.softmax(scores, axis=-1)
    ctx = merge(nm.matmul(attn, vh))
    ctx = nm.add(nm.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.wo_b"])
    x = nm.add(x, ctx)

    h = nm.layer_norm(x, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    h = nm.gelu(nm.add(nm.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = nm.add(nm.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return nm.add(x, h)


def attention_forward(seq, params: dict, block: str, heads: int = NUM_HEADS,
                      return_penultimate=False):
    """Two pre-norm transformer encoder layers; shape-preserving."""
    c = seq.shape[-1]
    if c % heads != 0:
        raise nm.ShapeError(f"attention_forward: C={c} not divisible by {heads} heads")
    x = seq
    mid = seq
    for layer in range(DEPTH):
        if layer == DEPTH - 1:
            mid = x
        x = _attn_layer(x, params, f"{block}.l{layer}", heads)
    if return_penultimate:
        return x, mid
    return x


def aar_forward(img00, img03, params: dict, config: ModelConfig) -> AarOutputs:
    """Shared backbone, one joint sequence, both blocks, fused embeddings."""
    f00 = bb.encode(img00, params, config.backbone)
    f03 = bb.encode(img03, params, config.backbone)
    joint = build_joint_sequence(f00, f03, params)
    out_a, mid_a = attention_forward(joint, params, "block_a",
                                     return_penultimate=True)
    out_b, mid_b = attention_forward(joint, params, "block_b",
                                     return_penultimate=True)
    batched = joint.ndim == 3
    if batched:
        z0_o1, z17_o1 = out_a[:, 0, :], out_a[:, 17, :]
        z0_o2, z17_o2 = out_b[:, 0, :], out_b[:, 17, :]
    else:
        z0_o1, z17_o1 = out_a[0], out_a[17]
        z0_o2, z17_o2 = out_b[0], out_b[17]
    w, b = params["proj.w"], params["proj.b"]
    p1 = nm.add(nm.matmul(nm.add(z0_o1, z0_o2), w), b)
    p2 = nm.add(nm.matmul(nm.add(z17_o1, z17_o2), w), b)
    return AarOutputs(z0_o1, z17_o1, z0_o2, z17_o2, p1, p2,
                      seq_out_a=out_a, seq_out_b=out_b,
                      seq_mid_a=mid_a, seq_mid_b=mid_b)


def embed(img00, img03, params: dict, config: ModelConfig):
    """Unit-norm retrieval embedding (the scale03 fused output)."""
    return nm.l2_normalize(aar_forward(img00, img03, params, config).p2)


# -- single-scale baseline (Arcface-only reference path) ------------------


def init_baseline(config: ModelConfig, rng: np.random.Generator) -> dict:
    c, d = config.c, config.d_embed
    if c % NUM_HEADS != 0:
        raise ValueError(f"channel count {c} not divisible by {NUM_HEADS} heads")
    params = bb.init_backbone(config.backbone, rng)
    params["cls00"] = Tensor(
        (0.02 * rng.standard_normal((1, c))).astype(nm.DTYPE), requires_grad=True)
    params["pos"] = Tensor(
        (0.02 * rng.standard_normal((17, c))).astype(nm.DTYPE), requires_grad=True)
    _init_block("block_a", c, rng, params)
    params["proj.w"] = bb.uniform_init(rng, (c, d), c, d)
    params["proj.b"] = Tensor(np.zeros(d, dtype=nm.DTYPE), requires_grad=True)
    return params


def baseline_forward(img, params: dict, config: ModelConfig):
    """backbone -> 17-token sequence -> one block -> cls -> projection."""
    f = bb.encode(img, params, config.backbone)
    seq = build_sequence(f, params["cls00"])
    seq = nm.add(seq, params["pos"])
    out = attention_forward(seq, params, "block_a")
    cls = out[:, 0, :] if seq.ndim == 3 else out[0]
    return nm.add(nm.matmul(cls, params["proj.w"]), params["proj.b"])


def baseline_embed(img, params: dict, config: ModelConfig):
    return nm.l2_normalize(baseline_forward(img, params, config))
