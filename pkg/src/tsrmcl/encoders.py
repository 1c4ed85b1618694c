"""Toy-scale dual encoders: a ViT image encoder and a transformer text
encoder, both post-norm exactly as the block equations print them, both
pooled at the [CLS] position and projected into the shared space.

The image blocks run attention then MLP, each as
LayerNorm(sublayer(Z) + Z); the text blocks are attention-only
residual+norm. Positional encodings are a fixed sinusoidal table, so
(config, seed, input) fully determines every output.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, l2_normalize, layer_norm, matmul, softmax, uniform_init
from .tokenizer import TokenSequence

__all__ = [
    "ViTConfig",
    "TextEncoderConfig",
    "EncoderParams",
    "init_vit_params",
    "init_text_params",
    "init_projection_params",
    "sinusoidal_positions",
    "patchify",
    "encode_image",
    "encode_images",
    "encode_text",
    "encode_texts",
    "project_to_shared",
]

MASK_OFF = -1e9  # additive score for masked keys; exp underflows to exactly 0


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 32
    layers: int = 2
    heads: int = 2
    mlp_factor: int = 4

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ContractError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    max_len: int = 64
    width: int = 32
    layers: int = 2
    heads: int = 2
    pad_id: int = 2

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")
        if self.vocab_size < 5:
            raise ContractError("vocab must at least hold the reserved tokens")


@dataclass
class EncoderParams:
    """Weight tensors plus the (config, seed) that reproduce them."""

    config: object
    seed: int
    tensors: dict[str, Tensor] = dc_field(default_factory=dict)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.tensors.items()}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional table, shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _attention_layer_params(d: int, rng) -> dict[str, Tensor]:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = uniform_init((d, d), d, rng)
    for name in ("bq", "bk", "bv", "bo"):
        p[name] = Tensor(np.zeros(d), requires_grad=True)
    p["ln1.g"] = Tensor(np.ones(d), requires_grad=True)
    p["ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
    return p


def init_vit_params(config: ViTConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d = config.width
    patch_dim = config.patch * config.patch * config.channels
    hidden = config.mlp_factor * d
    t: dict[str, Tensor] = {}
    t["patch.w"] = uniform_init((patch_dim, d), patch_dim, rng)
    t["patch.b"] = Tensor(np.zeros(d), requires_grad=True)
    t["cls"] = uniform_init((d,), d, rng)
    for i in range(config.layers):
        for k, v in _attention_layer_params(d, rng).items():
            t[f"blk{i}.{k}"] = v
        t[f"blk{i}.mlp.w1"] = uniform_init((d, hidden), d, rng)
        t[f"blk{i}.mlp.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        t[f"blk{i}.mlp.w2"] = uniform_init((hidden, d), hidden, rng)
        t[f"blk{i}.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
        t[f"blk{i}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        t[f"blk{i}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
    return EncoderParams(config=config, seed=seed, tensors=t)


def init_text_params(config: TextEncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d = config.width
    t: dict[str, Tensor] = {}
    t["tok.w"] = uniform_init((config.vocab_size, d), d, rng)
    for i in range(config.layers):
        for k, v in _attention_layer_params(d, rng).items():
            t[f"blk{i}.{k}"] = v
    return EncoderParams(config=config, seed=seed, tensors=t)


def init_projection_params(d_in: int, d_out: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {"w": uniform_init((d_in, d_out), d_in, rng),
            "b": Tensor(np.zeros(d_out), requires_grad=True)}


# -- patch extraction --------------------------------------------------------


def patchify(image: Tensor, p: int) -> Tensor:
    """Cut an image into non-overlapping p x p patches.

    (H, W, C) -> (N, p*p*C) with N = HW/p^2, patches in row-major order
    and each patch flattened row-major. A leading batch axis is allowed:
    (B, H, W, C) -> (B, N, p*p*C).
    """
    image = Tensor._coerce(image)
    batched = image.ndim == 4
    if image.ndim not in (3, 4):
        raise DimensionError(f"patchify expects (H,W,C) or (B,H,W,C), got {image.shape}")
    h, w, c = image.shape[-3:]
    if h % p or w % p:
        raise DimensionError(f"image dims ({h}, {w}) not divisible by patch {p}")
    n = (h // p) * (w // p)
    if batched:
        b = image.shape[0]
        x = image.reshape(b, h // p, p, w // p, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, n, p * p * c)
    x = image.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(n, p * p * c)


# -- shared attention machinery ----------------------------------------------


def _mha(z: Tensor, t: dict[str, Tensor], prefix: str, heads: int,
         mask: Tensor | None = None) -> Tensor:
    b, n, d = z.shape
    dh = d // heads
    q = (matmul(z, t[f"{prefix}.wq"]) + t[f"{prefix}.bq"]).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    k = (matmul(z, t[f"{prefix}.wk"]) + t[f"{prefix}.bk"]).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    v = (matmul(z, t[f"{prefix}.wv"]) + t[f"{prefix}.bv"]).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    mixed = matmul(softmax(scores, axis=-1), v)
    mixed = mixed.transpose(0, 2, 1, 3).reshape(b, n, d)
    return matmul(mixed, t[f"{prefix}.wo"]) + t[f"{prefix}.bo"]


def _vit_block(z: Tensor, t: dict[str, Tensor], i: int, heads: int) -> Tensor:
    attn = _mha(z, t, f"blk{i}", heads)
    z = layer_norm(attn + z, t[f"blk{i}.ln1.g"], t[f"blk{i}.ln1.b"])
    mlp = matmul(z, t[f"blk{i}.mlp.w1"]) + t[f"blk{i}.mlp.b1"]
    mlp = matmul(mlp.gelu(), t[f"blk{i}.mlp.w2"]) + t[f"blk{i}.mlp.b2"]
    return layer_norm(mlp + z, t[f"blk{i}.ln2.g"], t[f"blk{i}.ln2.b"])


def _text_block(z: Tensor, t: dict[str, Tensor], i: int, heads: int,
                mask: Tensor | None) -> Tensor:
    attn = _mha(z, t, f"blk{i}", heads, mask)
    return layer_norm(attn + z, t[f"blk{i}.ln1.g"], t[f"blk{i}.ln1.b"])


# -- encoders ------------------------------------------------------------------


def encode_images(images: Tensor, params: EncoderParams) -> Tensor:
    """Encode a (B, H, W, C) stack; returns the (B, d) [CLS] rows."""
    cfg: ViTConfig = params.config
    images = Tensor._coerce(images)
    if images.ndim == 3:
        images = images.reshape(1, *images.shape)
    if images.shape[1:] != (cfg.image_side, cfg.image_side, cfg.channels):
        raise DimensionError(
            f"image batch shape {images.shape} does not match config "
            f"({cfg.image_side}, {cfg.image_side}, {cfg.channels})"
        )
    t = params.tensors
    b = images.shape[0]
    patches = patchify(images, cfg.patch)
    z = matmul(patches, t["patch.w"]) + t["patch.b"]  # (B, N, d)
    cls_row = t["cls"].reshape(1, 1, cfg.width).broadcast_to((b, 1, cfg.width))
    z = concat([cls_row, z], axis=1)  # (B, N+1, d)
    pos = Tensor(sinusoidal_positions(cfg.n_patches + 1, cfg.width)[None, :, :])
    z = z + pos
    for i in range(cfg.layers):
        z = _vit_block(z, t, i, cfg.heads)
    return z[:, 0, :]


def encode_image(image: Tensor, params: EncoderParams) -> Tensor:
    """Encode one (H, W, C) image to its d-dim [CLS] feature."""
    image = Tensor._coerce(image)
    if image.ndim != 3:
        raise DimensionError(f"encode_image expects (H,W,C), got {image.shape}")
    return encode_images(image.reshape(1, *image.shape), params).reshape(-1)


def _ids_and_mask(sequences, cfg: TextEncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for seq in sequences:
        ids = list(seq.ids) if isinstance(seq, TokenSequence) else list(seq)
        if len(ids) > cfg.max_len:
            raise ContractError(f"sequence length {len(ids)} exceeds max {cfg.max_len}")
        rows.append(ids)
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), cfg.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids == cfg.pad_id


def encode_texts(sequences, params: EncoderParams) -> Tensor:
    """Encode a batch of token sequences; returns (B, d) [CLS] rows.

    Sequences are right-padded to the batch maximum and pad keys are
    masked out of every attention row, so pads never leak into [CLS].
    """
    cfg: TextEncoderConfig = params.config
    t = params.tensors
    ids, pad = _ids_and_mask(sequences, cfg)
    b, n = ids.shape
    z = t["tok.w"][ids]  # gather -> (B, L, d)
    pos = Tensor(sinusoidal_positions(n, cfg.width)[None, :, :])
    z = z + pos
    mask = None
    if pad.any():
        mask = Tensor(np.where(pad, MASK_OFF, 0.0)[:, None, None, :])
    for i in range(cfg.layers):
        z = _text_block(z, t, i, cfg.heads, mask)
    return z[:, 0, :]


def encode_text(tokens: TokenSequence, params: EncoderParams) -> Tensor:
    """Encode one token sequence to its d-dim [CLS] feature."""
    return encode_texts([tokens], params).reshape(-1)


def project_to_shared(f: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Linear projection followed by L2 normalization to unit length."""
    f = Tensor._coerce(f)
    single = f.ndim == 1
    if single:
        f = f.reshape(1, -1)
    out = matmul(f, params["w"]) + params["b"]
    out = l2_normalize(out)
    return out.reshape(-1) if single else out
