"""Toy visual backbones.

:class:`Backbone` is an affine image->detections extractor standing in for an
object detector (or a global image encoder when ``detections == 1``).
:class:`TextImaginer` maps token sequences into the same feature space so
visual features can be "imagined" from text alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_container, save_container
from .errors import InputError, ShapeError
from .model import DTYPE, SPECIAL_TOKENS, TokenizedSequence, VisualFeatureSet

DEFAULT_IMAGE_SIZE = (16, 16)
_FIRST_WORD_ID = len(SPECIAL_TOKENS)


@dataclass(eq=False)
class Image:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.array(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"image must be (height, width, 3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InputError("pixel values must be finite and within [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


def _anchor_grid(k: int) -> np.ndarray:
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    anchors = []
    for i in range(k):
        r, c = divmod(i, cols)
        anchors.append([c / cols, r / rows, (c + 1) / cols, (r + 1) / rows])
    return np.array(anchors)


@dataclass(eq=False)
class Backbone:
    """Affine extractor: flattened pixels -> K rows of ``visual_dim`` features.

    All weights are drawn from ``seed``, so two backbones with the same
    arguments are identical.
    """

    detections: int = 4
    visual_dim: int = 16
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    emit_boxes: bool = False
    seed: int = 0
    weight: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)
    box_weight: np.ndarray = field(init=False, repr=False)
    box_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        rng = np.random.default_rng(self.seed)
        p = self.pixel_count
        k, dv = self.detections, self.visual_dim
        self.weight = rng.normal(0.0, 1.0 / math.sqrt(p), size=(k, dv, p))
        self.bias = rng.normal(0.0, 1.0, size=(k, dv))
        self.box_weight = rng.normal(0.0, 1.0 / math.sqrt(p), size=(k, 4, p))
        self.box_bias = rng.normal(0.0, 1.0, size=(k, 4))

    @property
    def pixel_count(self) -> int:
        h, w = self.image_size
        return h * w * 3

    def boxes_for(self, flat: np.ndarray) -> np.ndarray:
        raw = _anchor_grid(self.detections) + 0.05 * np.tanh(self.box_weight @ flat + self.box_bias)
        raw = np.clip(raw, 0.0, 1.0)
        x = np.sort(raw[:, [0, 2]], axis=1)
        y = np.sort(raw[:, [1, 3]], axis=1)
        return np.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], axis=1)

    def to_container(self) -> tuple[dict, dict]:
        meta = {
            "detections": self.detections,
            "visual_dim": self.visual_dim,
            "image_size": list(self.image_size),
            "emit_boxes": self.emit_boxes,
            "seed": self.seed,
        }
        tensors = {"weight": self.weight, "bias": self.bias,
                   "box_weight": self.box_weight, "box_bias": self.box_bias}
        return meta, tensors

    def save(self, path):
        meta, tensors = self.to_container()
        return save_container(path, "backbone", meta, tensors)

    @classmethod
    def load(cls, path) -> "Backbone":
        meta, tensors = load_container(path, "backbone")
        bb = cls(meta["detections"], meta["visual_dim"], tuple(meta["image_size"]), meta["emit_boxes"], meta["seed"])
        for name, value in tensors.items():
            setattr(bb, name, value)
        return bb


def black_image(backbone: Backbone) -> Image:
    h, w = backbone.image_size
    return Image(np.zeros((h, w, 3)))


def extract_features(backbone: Backbone, img: Image) -> VisualFeatureSet:
    if img.size != backbone.image_size:
        raise ShapeError(f"image size {img.size} does not match backbone {backbone.image_size}")
    flat = img.pixels.reshape(-1)
    feats = backbone.weight @ flat + backbone.bias
    boxes = backbone.boxes_for(flat) if backbone.emit_boxes else None
    return VisualFeatureSet(feats, boxes)


@dataclass(eq=False)
class TextImaginer:
    """Mean-pooled token embeddings projected to the visual feature space."""

    vocab_size: int
    visual_dim: int = 16
    detections: int = 1
    embed_dim: int = 32
    seed: int = 0
    embeddings: np.ndarray = field(init=False, repr=False)
    proj: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.embeddings = rng.normal(0.0, 1.0, size=(self.vocab_size, self.embed_dim))
        self.proj = rng.normal(0.0, 1.0 / math.sqrt(self.embed_dim), size=(self.visual_dim, self.embed_dim))
        self.bias = np.zeros(self.visual_dim)

    def pooled(self, seq: TokenizedSequence) -> np.ndarray:
        ids = [i for i in seq.ids if i >= _FIRST_WORD_ID]
        if not ids:
            raise InputError("cannot imagine features from a sequence without word tokens")
        return self.embeddings[ids].mean(axis=0)

    def save(self, path):
        meta = {"vocab_size": self.vocab_size, "visual_dim": self.visual_dim,
                "detections": self.detections, "embed_dim": self.embed_dim, "seed": self.seed}
        return save_container(path, "imaginer", meta,
                              {"embeddings": self.embeddings, "proj": self.proj, "bias": self.bias})

    @classmethod
    def load(cls, path) -> "TextImaginer":
        meta, tensors = load_container(path, "imaginer")
        im = cls(**meta)
        for name, value in tensors.items():
            setattr(im, name, value)
        return im


def imagine_features(imaginer: TextImaginer, text: TokenizedSequence,
                     detections: Optional[int] = None) -> VisualFeatureSet:
    """One global feature vector, replicated to ``detections`` rows."""
    k = imaginer.detections if detections is None else detections
    row = imaginer.proj @ imaginer.pooled(text) + imaginer.bias
    return VisualFeatureSet(np.tile(row, (k, 1)))


def align_imaginer(imaginer: TextImaginer, texts: Sequence[TokenizedSequence], targets: np.ndarray,
                   steps: int = 200, lr: float = 0.05, temperature: float = 0.1,
                   batch_size: int = 32, seed: int = 0) -> list[float]:
    """Contrastively align imagined features with paired image features, in place.

    ``targets`` has one ``visual_dim`` row per text.  The loss is the symmetric
    cross-entropy over the cosine-similarity matrix of a batch, computed on
    mean-centred targets since cosine similarity cannot see a shared offset.
    Afterwards the map is calibrated so imagined vectors for ``texts`` have the
    targets' mean and mean centred norm.
    Returns the per-step losses.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(texts) != len(targets):
        raise InputError("texts and targets must have equal length")
    pooled = np.stack([imaginer.pooled(t) for t in texts])
    emb = torch.tensor(pooled, dtype=DTYPE)
    tgt = torch.tensor(targets, dtype=DTYPE)
    tgt_mean = tgt.mean(dim=0)
    tgt = tgt - tgt_mean
    proj = torch.tensor(imaginer.proj, dtype=DTYPE, requires_grad=True)
    bias = torch.tensor(imaginer.bias, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([proj, bias], lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(texts), size=min(batch_size, len(texts)), replace=False))
        pred = F.normalize(emb[idx] @ proj.T + bias, dim=-1)
        real = F.normalize(tgt[idx], dim=-1)
        sim = pred @ real.T / temperature
        labels = torch.arange(len(idx))
        loss = (F.cross_entropy(sim, labels) + F.cross_entropy(sim.T, labels)) / 2
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    with torch.no_grad():
        out = emb @ proj.T
        centred = out - out.mean(dim=0)
        scale = tgt.norm(dim=-1).mean() / centred.norm(dim=-1).mean().clamp_min(1e-12)
        new_proj = proj * scale
        new_bias = tgt_mean - emb.mean(dim=0) @ new_proj.T
    imaginer.proj = new_proj.numpy()
    imaginer.bias = new_bias.numpy()
    return losses
