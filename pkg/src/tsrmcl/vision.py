"""Detector-side feature operators.

Feature maps are H x W x C tensors. All operators here are pure
functions built from differentiable tensor primitives, so gradients
flow through them wherever the inputs carry ``requires_grad``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, matmul, softmax

__all__ = [
    "spd_rearrange",
    "spd_inverse",
    "info_loss",
    "conv2d_nostride",
    "tcsp_gate",
    "ipool_attention",
    "max_pool_3x3",
]


def _check_map(x: Tensor, op: str) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise DimensionError(f"{op} expects an H x W x C map, got shape {x.shape}")
    return x.shape


def _check_stride(h: int, w: int, s: int, op: str) -> None:
    if s < 1:
        raise ContractError(f"{op} stride must be >= 1, got {s}")
    if h % s or w % s:
        raise DimensionError(f"{op}: spatial dims ({h}, {w}) not divisible by stride {s}")


def spd_rearrange(x: Tensor, s: int) -> Tensor:
    """Space-to-depth: move each s x s neighborhood into s^2 channel blocks.

    Output is (H/s) x (W/s) x (C*s^2); channel blocks are ordered
    row-major over the phase offset (a, b), so block a*s+b holds
    x[a::s, b::s, :]. Lossless by construction.
    """
    h, w, c = _check_map(x, "spd_rearrange")
    _check_stride(h, w, s, "spd_rearrange")
    if s == 1:
        return x.reshape(h, w, c)
    y = x.reshape(h // s, s, w // s, s, c)
    y = y.transpose(0, 2, 1, 3, 4)  # (H/s, W/s, a, b, C)
    return y.reshape(h // s, w // s, s * s * c)


def spd_inverse(y: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`spd_rearrange`."""
    hs, ws, cs = _check_map(y, "spd_inverse")
    if s < 1:
        raise ContractError(f"spd_inverse stride must be >= 1, got {s}")
    if cs % (s * s):
        raise DimensionError(f"spd_inverse: channel dim {cs} not divisible by s^2={s * s}")
    c = cs // (s * s)
    if s == 1:
        return y.reshape(hs, ws, c)
    x = y.reshape(hs, ws, s, s, c)
    x = x.transpose(0, 2, 1, 3, 4)  # (H/s, a, W/s, b, C)
    return x.reshape(hs * s, ws * s, c)


def info_loss(x: Tensor, s: int) -> float:
    """Strided-downsampling information loss.

    The retained phase is (0, 0); the result is the sum of the L2 norms
    of the s^2 - 1 dropped phase sub-grids. Zero when s = 1.
    """
    h, w, c = _check_map(x, "info_loss")
    _check_stride(h, w, s, "info_loss")
    if s == 1:
        return 0.0
    total = 0.0
    data = x.data
    for a in range(s):
        for b in range(s):
            if a == 0 and b == 0:
                continue
            total += float(np.linalg.norm(data[a::s, b::s, :]))
    return total


def conv2d_nostride(x: Tensor, kernel: Tensor, bias: Tensor,
                    negative_slope: float = 0.01) -> Tensor:
    """Same-padded stride-1 convolution followed by LeakyReLU.

    ``kernel`` is k x k x Cin x Cout with k odd; padding is zeros, so
    the output spatial dims equal the input's.
    """
    h, w, cin = _check_map(x, "conv2d_nostride")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be k x k x Cin x Cout, got {kernel.shape}")
    k, k2, kin, cout = kernel.shape
    if k != k2:
        raise DimensionError(f"kernel spatial dims must be square, got {kernel.shape}")
    if k % 2 == 0:
        raise ContractError(f"kernel size must be odd, got {k}")
    if kin != cin:
        raise DimensionError(f"kernel input channels {kin} != map channels {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")

    pad = k // 2
    xp = x.pad(((pad, pad), (pad, pad), (0, 0)))
    # im2col via k^2 shifted slices: column order matches kernel reshape
    cols = []
    for dy in range(k):
        for dx in range(k):
            cols.append(xp[dy:dy + h, dx:dx + w, :].reshape(h * w, cin))
    patches = concat(cols, axis=1)  # (H*W, k*k*Cin)
    weights = kernel.reshape(k * k * cin, cout)
    out = matmul(patches, weights) + bias
    return out.reshape(h, w, cout).leaky_relu(negative_slope)


def tcsp_gate(x: Tensor, text: Tensor) -> Tensor:
    """Text-guided channel gate: concat(x, sigmoid(max-text-score) * x).

    ``text`` is a T x d bank; requires C == d. Per pixel the guidance is
    the sigmoid of the maximum inner product against the text rows, and
    the output doubles the channels: the first C channels are ``x``
    untouched, the next C are the gated copy.
    """
    h, w, c = _check_map(x, "tcsp_gate")
    if text.ndim != 2:
        raise DimensionError(f"text bank must be T x d, got {text.shape}")
    t, d = text.shape
    if t < 1:
        raise ContractError("text bank must contain at least one row")
    if c != d:
        raise DimensionError(f"channel dim {c} != text embedding dim {d}")
    scores = matmul(x.reshape(h * w, c), text.transpose())  # (H*W, T)
    gate = scores.max(axis=1).sigmoid().reshape(h, w, 1)
    return concat([x, gate * x], axis=2)


def max_pool_3x3(x: Tensor) -> Tensor:
    """Max-pool a map onto a 3 x 3 grid of tokens -> (9, C).

    The spatial extent is partitioned into 3 near-even bands per axis
    (boundaries at floor(i*H/3)); each cell reduces by max.
    """
    h, w, c = _check_map(x, "max_pool_3x3")
    if h < 3 or w < 3:
        raise DimensionError(f"max_pool_3x3 needs H, W >= 3, got ({h}, {w})")
    hb = [h * i // 3 for i in range(4)]
    wb = [w * i // 3 for i in range(4)]
    cells = []
    for i in range(3):
        for j in range(3):
            cell = x[hb[i]:hb[i + 1], wb[j]:wb[j + 1], :]
            cells.append(cell.reshape(-1, c).max(axis=0, keepdims=True))
    return concat(cells, axis=0)


def ipool_attention(scales, text: Tensor, heads: int,
                    wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Update a text bank from 3x3-pooled multi-scale image tokens.

    Each scale is max-pooled to 9 tokens; the pooled tokens of all
    scales form the keys and values of a multi-head cross-attention with
    the text rows as queries. Returns W + MHA(W, pooled, pooled). With a
    zero output projection this is the identity on the bank.
    """
    if text.ndim != 2:
        raise DimensionError(f"text bank must be T x d, got {text.shape}")
    t, d = text.shape
    if d % heads:
        raise DimensionError(f"embedding dim {d} not divisible by heads {heads}")
    if not scales:
        raise ContractError("ipool_attention needs at least one scale")
    for s in scales:
        _, _, c = _check_map(s, "ipool_attention")
        if c != d:
            raise DimensionError(f"scale channel dim {c} != text dim {d}")
    for name, wmat in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if wmat.shape != (d, d):
            raise DimensionError(f"{name} must be {d} x {d}, got {wmat.shape}")

    tokens = concat([max_pool_3x3(s) for s in scales], axis=0)  # (9*S, d)
    n_kv = tokens.shape[0]
    dh = d // heads

    q = matmul(text, wq).reshape(t, heads, dh).transpose(1, 0, 2)      # (h, T, dh)
    k = matmul(tokens, wk).reshape(n_kv, heads, dh).transpose(1, 0, 2)  # (h, N, dh)
    v = matmul(tokens, wv).reshape(n_kv, heads, dh).transpose(1, 0, 2)
    scores = matmul(q, k.transpose(0, 2, 1)) / np.sqrt(dh)              # (h, T, N)
    mixed = matmul(softmax(scores, axis=-1), v)                         # (h, T, dh)
    mixed = mixed.transpose(1, 0, 2).reshape(t, d)
    return text + matmul(mixed, wo)
