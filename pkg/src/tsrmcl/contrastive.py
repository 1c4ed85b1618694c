"""Similarity matrix, temperature, bidirectional contrastive loss,
softmax classification, and the training loop that ties the dual
encoders together.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DimensionError
from .encoders import (
    EncoderParams,
    TextEncoderConfig,
    ViTConfig,
    encode_image,
    encode_images,
    encode_text,
    encode_texts,
    init_projection_params,
    init_text_params,
    init_vit_params,
    project_to_shared,
)
from .tensor import AdamState, Tensor, adam_step, logsumexp, matmul, tensor_from_bytes, tensor_to_bytes
from .tokenizer import Vocab, build_vocab, tokenize

__all__ = [
    "Temperature",
    "TrainConfig",
    "DualEncoderModel",
    "similarity",
    "contrastive_loss",
    "classify",
    "classify_image",
    "train",
    "write_loss_trace",
]

log = logging.getLogger(__name__)

UNIT_TOL = 1e-9


@dataclass
class Temperature:
    """Learnable temperature tau = exp(gamma), positive by construction.

    ``ceiling`` caps tau to guard long runs against saturation-driven
    overflow; the exp parameterization itself keeps tau > 0.
    """

    gamma: Tensor
    ceiling: float = 100.0

    @classmethod
    def init(cls, gamma_init: float = math.log(14.0), ceiling: float = 100.0) -> "Temperature":
        return cls(gamma=Tensor(gamma_init, requires_grad=True), ceiling=ceiling)

    def tau_tensor(self) -> Tensor:
        return self.gamma.exp().minimum(Tensor(self.ceiling))

    @property
    def tau(self) -> float:
        return min(math.exp(float(self.gamma.data)), self.ceiling)


def similarity(fv: Tensor, ft: Tensor) -> Tensor:
    """Cosine similarity matrix S[i, j] = fv_i . ft_j of unit embeddings."""
    fv = Tensor._coerce(fv)
    ft = Tensor._coerce(ft)
    if fv.ndim != 2 or ft.ndim != 2 or fv.shape[1] != ft.shape[1]:
        raise DimensionError(f"similarity expects B x d stacks, got {fv.shape} and {ft.shape}")
    for name, t in (("image", fv), ("text", ft)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError(f"{name} embeddings must be unit norm within {UNIT_TOL}")
    return matmul(fv, ft.transpose())


def contrastive_loss(s: Tensor, temperature: Temperature) -> Tensor:
    """Bidirectional InfoNCE over a square similarity matrix.

    -(1/2B) * [ sum_i log softmax_row(tau S)_ii + sum_i log softmax_col(tau S)_ii ],
    computed with log-sum-exp stabilization; differentiable with respect
    to S and gamma.
    """
    s = Tensor._coerce(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    b = s.shape[0]
    if b < 1:
        raise ContractError("similarity matrix must be at least 1 x 1")
    z = temperature.tau_tensor() * s
    eye = Tensor(np.eye(b))
    diag = (z * eye).sum()
    row_lse = logsumexp(z, axis=1).sum()
    col_lse = logsumexp(z, axis=0).sum()
    return (-1.0 / (2.0 * b)) * (2.0 * diag - row_lse - col_lse)


def classify(f_v: np.ndarray, class_embeddings: np.ndarray, temperature: Temperature) -> np.ndarray:
    """Softmax over tau-scaled similarities against K class texts.

    Returns a length-K probability vector; the argmax is always the
    nearest class text by cosine similarity.
    """
    f_v = np.asarray(f_v, dtype=np.float64)
    cls = np.asarray(class_embeddings, dtype=np.float64)
    if cls.ndim != 2 or cls.shape[0] == 0:
        raise ContractError("classify needs at least one class embedding")
    if abs(np.linalg.norm(f_v) - 1.0) > UNIT_TOL or np.any(
        np.abs(np.linalg.norm(cls, axis=1) - 1.0) > UNIT_TOL
    ):
        raise ContractError("classify expects unit-norm embeddings")
    sims = cls @ f_v
    scores = temperature.tau * sims
    scores = scores - scores.max()
    e = np.exp(scores)
    return e / e.sum()


# -- the bundled model ---------------------------------------------------------


@dataclass
class DualEncoderModel:
    """Both encoders, their projections, the temperature, and the vocab."""

    vit: EncoderParams
    text: EncoderParams
    proj_v: dict
    proj_t: dict
    temperature: Temperature
    vocab: Vocab
    number_protection: bool = True
    seed: int = 0

    # flat parameter dict <-> structured views ---------------------------

    def flat_params(self) -> dict[str, Tensor]:
        flat: dict[str, Tensor] = {}
        flat.update(self.vit.named("vit"))
        flat.update(self.text.named("txt"))
        flat["pv.w"] = self.proj_v["w"]
        flat["pv.b"] = self.proj_v["b"]
        flat["pt.w"] = self.proj_t["w"]
        flat["pt.b"] = self.proj_t["b"]
        flat["gamma"] = self.temperature.gamma
        return flat

    def with_params(self, flat: dict[str, Tensor]) -> "DualEncoderModel":
        vit_t = {k[4:]: v for k, v in flat.items() if k.startswith("vit.")}
        txt_t = {k[4:]: v for k, v in flat.items() if k.startswith("txt.")}
        return DualEncoderModel(
            vit=EncoderParams(self.vit.config, self.vit.seed, vit_t),
            text=EncoderParams(self.text.config, self.text.seed, txt_t),
            proj_v={"w": flat["pv.w"], "b": flat["pv.b"]},
            proj_t={"w": flat["pt.w"], "b": flat["pt.b"]},
            temperature=Temperature(flat["gamma"], self.temperature.ceiling),
            vocab=self.vocab,
            number_protection=self.number_protection,
            seed=self.seed,
        )

    # inference-side embedding ------------------------------------------

    def embed_image(self, image) -> np.ndarray:
        f = encode_image(Tensor(image), self.vit)
        return project_to_shared(f, self.proj_v).to_numpy()

    def embed_images(self, images) -> np.ndarray:
        f = encode_images(Tensor(images), self.vit)
        return project_to_shared(f, self.proj_v).to_numpy()

    def tokenize(self, text: str):
        return tokenize(text, self.vocab, number_protection=self.number_protection)

    def embed_text(self, text: str) -> np.ndarray:
        f = encode_text(self.tokenize(text), self.text)
        return project_to_shared(f, self.proj_t).to_numpy()

    def text_fingerprint(self) -> int:
        """64-bit digest over everything the text embedding depends on."""
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        for name in sorted(self.text.tensors):
            h.update(name.encode())
            h.update(self.text.tensors[name].data.tobytes())
        for name in ("w", "b"):
            h.update(self.proj_t[name].data.tobytes())
        h.update(json.dumps(self.vocab.tokens, ensure_ascii=False).encode())
        h.update(b"np1" if self.number_protection else b"np0")
        return int.from_bytes(h.digest(), "little")

    # checkpointing -------------------------------------------------------

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        flat = self.flat_params()
        names = sorted(flat)
        blob = bytearray()
        entries = []
        for name in names:
            raw = tensor_to_bytes(flat[name])
            entries.append({
                "name": name,
                "offset": len(blob),
                "nbytes": len(raw),
                "shape": list(flat[name].shape),
            })
            blob.extend(raw)
        with open(os.path.join(directory, "params.bin"), "wb") as fh:
            fh.write(bytes(blob))
        vit_cfg: ViTConfig = self.vit.config
        txt_cfg: TextEncoderConfig = self.text.config
        manifest = {
            "vit_config": vit_cfg.__dict__,
            "text_config": txt_cfg.__dict__,
            "vit_seed": self.vit.seed,
            "text_seed": self.text.seed,
            "seed": self.seed,
            "tau_ceiling": self.temperature.ceiling,
            "number_protection": self.number_protection,
            "params": entries,
        }
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
        self.vocab.save(os.path.join(directory, "vocab.json"))

    @classmethod
    def load(cls, directory) -> "DualEncoderModel":
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(directory, "params.bin"), "rb") as fh:
            blob = fh.read()
        flat: dict[str, Tensor] = {}
        for entry in manifest["params"]:
            t, _ = tensor_from_bytes(blob, entry["offset"])
            t.requires_grad = True
            flat[entry["name"]] = t
        vocab = Vocab.load(os.path.join(directory, "vocab.json"))
        vit_cfg = ViTConfig(**manifest["vit_config"])
        txt_cfg = TextEncoderConfig(**manifest["text_config"])
        shell = cls(
            vit=EncoderParams(vit_cfg, manifest["vit_seed"], {}),
            text=EncoderParams(txt_cfg, manifest["text_seed"], {}),
            proj_v={"w": flat["pv.w"], "b": flat["pv.b"]},
            proj_t={"w": flat["pt.w"], "b": flat["pt.b"]},
            temperature=Temperature(flat["gamma"], manifest["tau_ceiling"]),
            vocab=vocab,
            number_protection=manifest["number_protection"],
            seed=manifest["seed"],
        )
        return shell.with_params(flat)


def classify_image(model: DualEncoderModel, image, class_texts, cache=None) -> np.ndarray:
    """Probability vector of an image against the class text list."""
    if not class_texts:
        raise ContractError("classify_image needs at least one class text")
    f_v = model.embed_image(image)
    if cache is not None:
        from .cache import get_or_encode

        cls = np.stack([get_or_encode(t, model, cache) for t in class_texts])
    else:
        cls = np.stack([model.embed_text(t) for t in class_texts])
    return classify(f_v, cls, model.temperature)


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    lr: float = 3e-4
    seed: int = 0
    gamma_init: float = math.log(14.0)
    tau_ceiling: float = 100.0
    number_protection: bool = True
    vocab_target: int = 2048
    image_side: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 32
    vit_layers: int = 2
    text_layers: int = 2
    heads: int = 2
    mlp_factor: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")


def init_model(config: TrainConfig, vocab: Vocab) -> DualEncoderModel:
    vit_cfg = ViTConfig(
        image_side=config.image_side,
        channels=config.channels,
        patch=config.patch,
        width=config.width,
        layers=config.vit_layers,
        heads=config.heads,
        mlp_factor=config.mlp_factor,
    )
    txt_cfg = TextEncoderConfig(
        vocab_size=len(vocab),
        max_len=config.max_len,
        width=config.width,
        layers=config.text_layers,
        heads=config.heads,
        pad_id=vocab.pad_id,
    )
    return DualEncoderModel(
        vit=init_vit_params(vit_cfg, config.seed),
        text=init_text_params(txt_cfg, config.seed + 1),
        proj_v=init_projection_params(config.width, config.width, config.seed + 2),
        proj_t=init_projection_params(config.width, config.width, config.seed + 3),
        temperature=Temperature.init(config.gamma_init, config.tau_ceiling),
        vocab=vocab,
        number_protection=config.number_protection,
        seed=config.seed,
    )


def train(pairs, config: TrainConfig):
    """Contrastive training over (image, text) pairs.

    Shuffled seeded mini-batches; both encoders, the projections, and
    gamma update through Adam each step. The final partial batch is
    kept (loss already normalizes by the actual batch size). Returns
    (model, trace) where trace rows are (epoch, mean_loss, tau).
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ContractError("training needs at least 2 pairs for meaningful negatives")

    texts = [t for _, t in pairs]
    vocab = build_vocab(texts, target_size=config.vocab_target,
                        number_protection=config.number_protection)
    model = init_model(config, vocab)
    sequences = [tokenize(t, vocab, number_protection=config.number_protection) for t in texts]
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in pairs])

    params = model.flat_params()
    state = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    trace: list[tuple[int, float, float]] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        model = model.with_params(params)
        for start in range(0, len(pairs), config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) == 1:
                log.warning("batch of size 1 at epoch %d: contrastive loss is trivially 0", epoch)
            fv = project_to_shared(encode_images(Tensor(images[batch]), model.vit), model.proj_v)
            ft = project_to_shared(
                encode_texts([sequences[i] for i in batch], model.text), model.proj_t
            )
            loss = contrastive_loss(similarity(fv, ft), model.temperature)
            loss.backward()
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            params, state = adam_step(params, grads, state)
            model = model.with_params(params)
            total += float(loss.data) * len(batch)
        mean_loss = total / len(pairs)
        trace.append((epoch, mean_loss, model.temperature.tau))
    return model.with_params(params), trace


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "tau"])
        for epoch, mean_loss, tau in trace:
            writer.writerow([epoch, f"{mean_loss:.10f}", f"{tau:.10f}"])
