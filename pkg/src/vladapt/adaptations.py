"""The seven ways of making a VL encoder usable on text-only input.

Every strategy resolves to an :class:`AdaptedModel`: the (possibly fine-tuned)
encoder, a forward mode, and a visual provider that is either absent, a
constant feature set, or a per-text imaginer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .backbone import Backbone, TextImaginer, black_image, extract_features, imagine_features
from .errors import ConfigError, InputError, ResolutionError, ShapeError
from .model import (
    DTYPE, ForwardMode, ModelConfig, TokenizedSequence, VisualFeatureSet, VLEncoder, Vocab,
    forward_mlm, text_only_mode, tokenize,
)
from .training import (
    TrainConfig, TrainResult, fit, fixed_dev_rows, mask_tokens, masked_batch_loss, mlm_dev_loss,
    tokenize_corpus, train_mlm,
)

log = logging.getLogger(__name__)

DEFAULT = "default"
NO_VISUAL_FINETUNED = "no-visual-features-finetuned"
AVG_FEATURES = "avg-visual-features"
ZERO_IMAGE = "zero-image-visual-features"
ZEROED = "zeroed-visual-features"
FINETUNED_FEATURES = "finetuned-visual-features"
IMAGINED = "imagined-visual-features"

KINDS = (DEFAULT, NO_VISUAL_FINETUNED, AVG_FEATURES, ZERO_IMAGE, ZEROED, FINETUNED_FEATURES, IMAGINED)

_REQUIRED = {
    NO_VISUAL_FINETUNED: ("corpus", "train"),
    FINETUNED_FEATURES: ("corpus", "train"),
    ZERO_IMAGE: ("backbone",),
    AVG_FEATURES: ("visual_dataset",),
    IMAGINED: ("imaginer",),
}


@dataclass
class AdaptationSpec:
    """One strategy plus the names of the resources it needs.

    ``corpus``/``dev_corpus``, ``backbone``, ``imaginer`` and ``visual_dataset``
    are keys into :class:`Resources`.  ``label`` overrides the display name
    (e.g. ``finetuned-LXMERT-visual-features``).  For the two tuned kinds,
    ``pretuned`` names an already fine-tuned model (in ``Resources.models``) or
    tuned feature set (in ``Resources.features``) and skips training.
    """

    kind: str
    corpus: Optional[str] = None
    dev_corpus: Optional[str] = None
    backbone: Optional[str] = None
    imaginer: Optional[str] = None
    visual_dataset: Optional[str] = None
    train: Optional[TrainConfig] = None
    label: Optional[str] = None
    pretuned: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adaptation kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if isinstance(self.train, Mapping):
            self.train = TrainConfig.from_dict(dict(self.train))
        if self.pretuned is not None and self.kind in (NO_VISUAL_FINETUNED, FINETUNED_FEATURES):
            return
        for name in _REQUIRED.get(self.kind, ()):
            if getattr(self, name) is None:
                raise ConfigError(f"adaptation {self.kind!r} requires {name!r}")

    @property
    def name(self) -> str:
        return self.label or self.kind

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if v is not None and k != "train"}
        if self.train is not None:
            out["train"] = self.train.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdaptationSpec":
        return cls(**dict(data))


@dataclass
class Resources:
    corpora: dict[str, Sequence[str]] = field(default_factory=dict)
    backbones: dict[str, Backbone] = field(default_factory=dict)
    imaginers: dict[str, TextImaginer] = field(default_factory=dict)
    visual_datasets: dict[str, Iterable[VisualFeatureSet]] = field(default_factory=dict)
    models: dict[str, VLEncoder] = field(default_factory=dict)
    features: dict[str, VisualFeatureSet] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Visual providers
# ---------------------------------------------------------------------------


class NoVisual:
    def __call__(self, seq: TokenizedSequence) -> None:
        return None

    def describe(self) -> dict:
        return {"provider": "none"}


@dataclass(eq=False)
class ConstantVisual:
    features: VisualFeatureSet

    def __call__(self, seq: TokenizedSequence) -> VisualFeatureSet:
        return self.features

    def describe(self) -> dict:
        return {"provider": "constant", **self.features.to_dict()}


@dataclass(eq=False)
class ImaginedVisual:
    imaginer: TextImaginer
    detections: int

    def __call__(self, seq: TokenizedSequence) -> VisualFeatureSet:
        return imagine_features(self.imaginer, seq, self.detections)

    def describe(self) -> dict:
        return {"provider": "imagined", "detections": self.detections}


@dataclass(eq=False)
class AdaptedModel:
    model: VLEncoder
    vocab: Vocab
    mode: ForwardMode
    provider: object
    kind: str = DEFAULT
    training: Optional[TrainResult] = None

    def __post_init__(self):
        if isinstance(self.provider, NoVisual) == self.mode.visual_input:
            raise ConfigError("provider must be 'none' exactly when the mode has no visual input")

    def visual_for(self, seq: TokenizedSequence) -> Optional[VisualFeatureSet]:
        return self.provider(seq)

    def encode_text(self, text: str) -> TokenizedSequence:
        return tokenize(text, self.vocab, self.model.cfg.max_len)

    def mlm_logits(self, seq: TokenizedSequence) -> torch.Tensor:
        with torch.no_grad():
            return forward_mlm(self.model, seq, self.visual_for(seq), self.mode)


# ---------------------------------------------------------------------------
# Constant feature builders
# ---------------------------------------------------------------------------


def compute_avg_visual_features(dataset: Iterable[VisualFeatureSet]) -> VisualFeatureSet:
    """Per-detection arithmetic mean (and mean boxes) over a dataset."""
    items = list(dataset)
    if not items:
        raise InputError("cannot average an empty visual dataset")
    shape, has_boxes = items[0].shape, items[0].boxes is not None
    for v in items:
        if v.shape != shape or (v.boxes is not None) != has_boxes:
            raise ShapeError(f"mixed visual shapes in dataset: {v.shape} vs {shape}")
    feats = np.mean(np.stack([v.features for v in items]), axis=0)
    boxes = np.mean(np.stack([v.boxes for v in items]), axis=0) if has_boxes else None
    return VisualFeatureSet(feats, boxes)


def zeroed_visual_features(cfg: ModelConfig) -> VisualFeatureSet:
    boxes = np.zeros((cfg.detections, 4)) if cfg.use_boxes else None
    return VisualFeatureSet(np.zeros((cfg.detections, cfg.visual_dim)), boxes)


# ---------------------------------------------------------------------------
# Tuned adaptations
# ---------------------------------------------------------------------------


def tune_visual_features(model: VLEncoder, vocab: Vocab, corpus: Sequence[str], train: TrainConfig,
                         init: Optional[VisualFeatureSet] = None, dev: Optional[Sequence[str]] = None
                         ) -> tuple[VisualFeatureSet, TrainResult]:
    """Optimize one constant feature set against the frozen model's MLM loss.

    Only the features are trained; boxes (when the config uses them) stay at
    their initial value.  Initialization defaults to zeros.
    """
    corpus = list(corpus)
    if not corpus:
        raise InputError("tuning corpus is empty")
    cfg = model.cfg
    init = init or zeroed_visual_features(cfg)
    init.check_against(cfg)
    mode = ForwardMode(visual_input=True, cross_modality_ablated=False)
    feats = torch.tensor(init.features, dtype=DTYPE, requires_grad=True)
    boxes = torch.tensor(init.boxes, dtype=DTYPE) if init.boxes is not None else None
    seqs = tokenize_corpus(corpus, vocab, cfg.max_len)

    def expand(t, n):
        return None if t is None else t.unsqueeze(0).expand(n, -1, -1)

    def batch_loss(idx, rng):
        rows = [mask_tokens(seqs[i], train.mask_rate, rng, cfg.vocab_size, ensure_one=True) for i in idx]
        return masked_batch_loss(model, rows, None, mode, expand(feats, len(rows)), expand(boxes, len(rows)))

    dev_fn = None
    if dev:
        dev_rows = fixed_dev_rows(tokenize_corpus(dev, vocab, cfg.max_len), cfg.vocab_size, train.mask_rate)
        dev_fn = lambda: mlm_dev_loss(model, dev_rows, [None] * len(dev_rows), mode,  # noqa: E731
                                      feats.detach().unsqueeze(0), expand(boxes, 1))

    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        result = fit([feats], len(seqs), batch_loss, train, dev_fn)
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
    tuned = VisualFeatureSet(feats.detach().numpy().copy(), init.boxes)
    return tuned, result


def finetune_text_only(model: VLEncoder, vocab: Vocab, corpus: Sequence[str], train: TrainConfig,
                       dev: Optional[Sequence[str]] = None) -> tuple[VLEncoder, TrainResult]:
    """MLM fine-tuning of all weights with visual input removed."""
    return train_mlm(model, vocab, corpus, train, dev=dev, mode=text_only_mode(model.cfg))


def constant_dev_loss(model: VLEncoder, vocab: Vocab, dev: Sequence[str], visual: Optional[VisualFeatureSet],
                      rate: float = 0.15, seed: int = 12345) -> float:
    """Dev MLM loss with a fixed masking draw, for comparing adaptations."""
    rows = fixed_dev_rows(tokenize_corpus(dev, vocab, model.cfg.max_len), model.cfg.vocab_size, rate, seed)
    if visual is None:
        return mlm_dev_loss(model, rows, [None] * len(rows), text_only_mode(model.cfg))
    return mlm_dev_loss(model, rows, [visual] * len(rows), ForwardMode())


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------


def _lookup(spec: AdaptationSpec, table: Mapping, key: Optional[str], what: str):
    if key is None or key not in table:
        raise ResolutionError(spec.kind, f"{what} {key!r}")
    return table[key]


def resolve_adaptation(spec: AdaptationSpec, model: VLEncoder, vocab: Vocab,
                       resources: Optional[Resources] = None) -> AdaptedModel:
    resources = resources or Resources()
    cfg = model.cfg
    present = ForwardMode(visual_input=True, cross_modality_ablated=False)

    if spec.kind == DEFAULT:
        return AdaptedModel(model, vocab, text_only_mode(cfg), NoVisual(), spec.kind)

    if spec.kind == NO_VISUAL_FINETUNED and spec.pretuned is not None:
        tuned = _lookup(spec, resources.models, spec.pretuned, "fine-tuned model")
        return AdaptedModel(tuned, vocab, text_only_mode(cfg), NoVisual(), spec.kind)

    if spec.kind == NO_VISUAL_FINETUNED:
        corpus = _lookup(spec, resources.corpora, spec.corpus, "corpus")
        dev = _lookup(spec, resources.corpora, spec.dev_corpus, "dev corpus") if spec.dev_corpus else None
        tuned, result = finetune_text_only(model, vocab, corpus, spec.train, dev)
        return AdaptedModel(tuned, vocab, text_only_mode(cfg), NoVisual(), spec.kind, result)

    if spec.kind == ZEROED:
        visual = zeroed_visual_features(cfg)
    elif spec.kind == ZERO_IMAGE:
        backbone = _lookup(spec, resources.backbones, spec.backbone, "backbone")
        visual = extract_features(backbone, black_image(backbone))
    elif spec.kind == AVG_FEATURES:
        dataset = _lookup(spec, resources.visual_datasets, spec.visual_dataset, "visual dataset")
        visual = compute_avg_visual_features(dataset)
    elif spec.kind == FINETUNED_FEATURES and spec.pretuned is not None:
        visual = _lookup(spec, resources.features, spec.pretuned, "tuned features")
    elif spec.kind == FINETUNED_FEATURES:
        corpus = _lookup(spec, resources.corpora, spec.corpus, "corpus")
        dev = _lookup(spec, resources.corpora, spec.dev_corpus, "dev corpus") if spec.dev_corpus else None
        visual, result = tune_visual_features(model, vocab, corpus, spec.train, dev=dev)
        visual.check_against(cfg)
        return AdaptedModel(model, vocab, present, ConstantVisual(visual), spec.kind, result)
    elif spec.kind == IMAGINED:
        imaginer = _lookup(spec, resources.imaginers, spec.imaginer, "imaginer")
        if imaginer.visual_dim != cfg.visual_dim:
            raise ShapeError(f"imaginer emits {imaginer.visual_dim}-dim features, model expects {cfg.visual_dim}")
        return AdaptedModel(model, vocab, present, ImaginedVisual(imaginer, cfg.detections), spec.kind)
    else:  # pragma: no cover - guarded by AdaptationSpec
        raise ConfigError(spec.kind)

    visual.check_against(cfg)
    return AdaptedModel(model, vocab, present, ConstantVisual(visual), spec.kind)
