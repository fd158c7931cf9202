"""Toy vision-and-language encoders with masked-LM and classification heads.

Two architectures share one module:

* ``single-stream``: visual detections are projected into the word-embedding
  space and concatenated after the text tokens; one encoder sees both.
* ``dual-stream``: text and visual detections run through separate encoders and
  meet in a cross-modality encoder whose language-side cross-attention adds a
  residual.  Ablating the cross-modality path zeroes exactly that residual, so
  language outputs no longer depend on visual input.

Everything runs in float64 on CPU.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, ModeError, ShapeError

DTYPE = torch.float64

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
MASK_LITERAL = "[MASK]"
IGNORE_INDEX = -100

SINGLE_STREAM = "single-stream"
DUAL_STREAM = "dual-stream"
BOX_DIM = 4

_TOKEN_RE = re.compile(r"\[mask\]|\w+|[^\w\s]")


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------


class Vocab:
    """Dense token<->id map; ids 0-4 are the special tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(SPECIAL_TOKENS)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    def id_of(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def to_list(self) -> list[str]:
        return list(self._itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocab":
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError("vocab must start with the five special tokens")
        vocab = cls(tokens[len(SPECIAL_TOKENS):])
        if len(vocab) != len(tokens):
            raise ConfigError("vocab contains duplicate tokens")
        return vocab


def word_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; ``[MASK]`` stays whole."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class TokenizedSequence:
    ids: list[int]
    mask_positions: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def _ids_for(tokens: list[str], vocab: Vocab) -> list[int]:
    return [MASK if t == "[mask]" else vocab.id_of(t) for t in tokens]


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenizedSequence:
    """Map ``text`` to ``[CLS] ... [SEP]`` ids, truncating the body to fit ``max_len``."""
    if max_len < 2:
        raise ConfigError(f"max_len must be at least 2, got {max_len}")
    body = _ids_for(word_tokens(text), vocab)[: max_len - 2]
    ids = [CLS, *body, SEP]
    return TokenizedSequence(ids, [i for i, t in enumerate(ids) if t == MASK])


def tokenize_pair(text_a: str, text_b: Optional[str], vocab: Vocab, max_len: int) -> TokenizedSequence:
    """Encode ``[CLS] a [SEP] b [SEP]``; falls back to :func:`tokenize` when ``text_b`` is None."""
    if text_b is None:
        return tokenize(text_a, vocab, max_len)
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3 for sentence pairs, got {max_len}")
    a = _ids_for(word_tokens(text_a), vocab)
    b = _ids_for(word_tokens(text_b), vocab)
    budget = max_len - 3
    # trim the longer side first, as BERT does
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = [CLS, *a, SEP, *b, SEP]
    return TokenizedSequence(ids, [i for i, t in enumerate(ids) if t == MASK])


# ---------------------------------------------------------------------------
# Configuration and visual inputs
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    architecture: str = SINGLE_STREAM
    hidden: int = 64
    text_layers: int = 2
    visual_layers: int = 1
    cross_layers: int = 1
    heads: int = 4
    vocab_size: int = 1000
    visual_dim: int = 16
    detections: int = 4
    use_boxes: bool = False
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.architecture not in (SINGLE_STREAM, DUAL_STREAM):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.hidden < 1 or self.heads < 1 or self.visual_dim < 1:
            raise ConfigError("hidden, heads and visual_dim must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.detections < 1:
            raise ConfigError("detections must be >= 1")
        if self.use_boxes and self.architecture != DUAL_STREAM:
            raise ConfigError("use_boxes requires the dual-stream architecture")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ConfigError("vocab_size must leave room beyond the special tokens")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.text_layers < 0 or self.visual_layers < 0 or self.cross_layers < 0:
            raise ConfigError("layer counts must be non-negative")

    @property
    def dual(self) -> bool:
        return self.architecture == DUAL_STREAM

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass(frozen=True)
class ForwardMode:
    visual_input: bool = True
    cross_modality_ablated: bool = False


TEXT_ONLY = ForwardMode(visual_input=False, cross_modality_ablated=True)


def text_only_mode(cfg: "ModelConfig") -> ForwardMode:
    """Mode for querying with text only; dual-stream models need the ablation."""
    return ForwardMode(visual_input=False, cross_modality_ablated=cfg.dual)


@dataclass(eq=False)
class VisualFeatureSet:
    """K detection feature rows, with optional normalized (x1, y1, x2, y2) boxes."""

    features: np.ndarray
    boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D (K, Dv), got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise InputError("visual features contain non-finite values")
        if self.boxes is not None:
            self.boxes = np.array(self.boxes, dtype=np.float64)
            if self.boxes.shape != (self.features.shape[0], BOX_DIM):
                raise ShapeError(f"boxes must have shape ({self.features.shape[0]}, 4), got {self.boxes.shape}")
            if not np.all(np.isfinite(self.boxes)):
                raise InputError("boxes contain non-finite values")
            if np.any(self.boxes < 0.0) or np.any(self.boxes > 1.0):
                raise InputError("boxes must be normalized to [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, VisualFeatureSet):
            return NotImplemented
        if (self.boxes is None) != (other.boxes is None):
            return False
        same = np.array_equal(self.features, other.features)
        return same and (self.boxes is None or np.array_equal(self.boxes, other.boxes))

    def check_against(self, cfg: ModelConfig) -> None:
        if self.features.shape != (cfg.detections, cfg.visual_dim):
            raise ShapeError(
                f"visual features shape {self.features.shape} does not match "
                f"config ({cfg.detections}, {cfg.visual_dim})"
            )
        if cfg.use_boxes and self.boxes is None:
            raise ShapeError("config uses boxes but the feature set has none")
        if not cfg.use_boxes and self.boxes is not None:
            raise ShapeError("feature set carries boxes but the config does not use them")

    def to_dict(self) -> dict:
        out = {"features": self.features.tolist()}
        if self.boxes is not None:
            out["boxes"] = self.boxes.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VisualFeatureSet":
        return cls(data["features"], data.get("boxes"))


# ---------------------------------------------------------------------------
# Transformer building blocks
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context, key_mask=None, probs_out: Optional[list] = None):
        q, k, v = self._split(self.query(x)), self._split(self.key(context)), self._split(self.value(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        if probs_out is not None:
            probs_out.append(probs)
        ctx = (probs @ v).transpose(1, 2).reshape(x.shape)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.up = nn.Linear(hidden, 4 * hidden)
        self.down = nn.Linear(4 * hidden, hidden)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    """Post-LN BERT layer."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.attn = Attention(hidden, heads)
        self.attn_norm = nn.LayerNorm(hidden)
        self.ffn = FeedForward(hidden)
        self.ffn_norm = nn.LayerNorm(hidden)

    def forward(self, x, key_mask=None, probs_out=None):
        x = self.attn_norm(x + self.attn(x, x, key_mask, probs_out))
        return self.ffn_norm(x + self.ffn(x))


class CrossModalityLayer(nn.Module):
    """Cross-attention (residual), then self-attention, then feed-forward, per stream."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.lang_cross = Attention(hidden, heads)
        self.lang_cross_norm = nn.LayerNorm(hidden)
        self.visn_cross = Attention(hidden, heads)
        self.visn_cross_norm = nn.LayerNorm(hidden)
        self.lang = EncoderLayer(hidden, heads)
        self.visn = EncoderLayer(hidden, heads)

    def forward(self, lang, lang_mask, visn, ablated: bool, probs_out=None):
        if ablated:
            # the cross-attention residual addend is exactly zero
            new_lang = self.lang_cross_norm(lang)
        else:
            new_lang = self.lang_cross_norm(lang + self.lang_cross(lang, visn, None, probs_out))
        new_visn = None
        if visn is not None:
            new_visn = self.visn_cross_norm(visn + self.visn_cross(visn, lang, lang_mask, probs_out))
            new_visn = self.visn(new_visn, None, probs_out)
        return self.lang(new_lang, lang_mask, probs_out), new_visn


class MLMHead(nn.Module):
    def __init__(self, hidden: int, vocab_size: int):
        super().__init__()
        self.transform = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.decoder = nn.Linear(hidden, vocab_size)

    def forward(self, h):
        return self.decoder(self.norm(F.gelu(self.transform(h))))


BINARY, MULTICLASS, REGRESSION = "binary", "multiclass", "regression"


class ClassifierHead(nn.Module):
    """CLS pooling (dense + tanh) followed by an affine map to the task outputs."""

    def __init__(self, hidden: int, kind: str, num_classes: int = 2, seed: int = 0):
        super().__init__()
        if kind == BINARY:
            num_classes = 2
        elif kind == REGRESSION:
            num_classes = 1
        elif kind != MULTICLASS:
            raise ConfigError(f"unknown head kind {kind!r}")
        if num_classes < 1 or (kind == MULTICLASS and num_classes < 2):
            raise ConfigError(f"invalid number of outputs {num_classes} for {kind}")
        self.kind = kind
        self.num_outputs = num_classes
        self.pooler = nn.Linear(hidden, hidden)
        self.output = nn.Linear(hidden, num_classes)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.pooler, self.output):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen) * 0.02)
                lin.bias.zero_()
        self.to(DTYPE)

    def forward(self, cls_hidden: torch.Tensor) -> torch.Tensor:
        return self.output(torch.tanh(self.pooler(cls_hidden)))


# ---------------------------------------------------------------------------
# The encoder
# ---------------------------------------------------------------------------


class VLEncoder(nn.Module):
    """Parameters plus forward logic of a toy VL encoder (``ModelParams``)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        h = cfg.hidden
        self.word_emb = nn.Embedding(cfg.vocab_size, h)
        self.pos_emb = nn.Embedding(cfg.max_len, h)
        # row 0 = text, row 1 = visual; dual-stream and text-only use keep row 1 allocated
        self.seg_emb = nn.Embedding(2, h)
        self.emb_norm = nn.LayerNorm(h)
        self.visual_proj = nn.Linear(cfg.visual_dim, h)
        self.text_layers = nn.ModuleList(EncoderLayer(h, cfg.heads) for _ in range(cfg.text_layers))
        if cfg.dual:
            self.visual_norm = nn.LayerNorm(h)
            if cfg.use_boxes:
                self.box_proj = nn.Linear(BOX_DIM, h)
                self.box_norm = nn.LayerNorm(h)
            self.visual_layers = nn.ModuleList(EncoderLayer(h, cfg.heads) for _ in range(cfg.visual_layers))
            self.cross_layers = nn.ModuleList(CrossModalityLayer(h, cfg.heads) for _ in range(cfg.cross_layers))
        self.mlm_head = MLMHead(h, cfg.vocab_size)
        self._init_weights(cfg.seed)
        self.to(DTYPE)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)

    # -- input handling -----------------------------------------------------

    def _check_inputs(self, feats, boxes, mode: ForwardMode, batch: int) -> None:
        cfg = self.cfg
        if cfg.dual and not mode.visual_input and not mode.cross_modality_ablated:
            raise ModeError("dual-stream model without visual input requires cross_modality_ablated=True")
        if not mode.visual_input:
            if feats is not None or boxes is not None:
                raise InputError("visual input supplied although mode.visual_input is absent")
            return
        if feats is None:
            raise InputError("mode.visual_input is present but no visual features were supplied")
        if tuple(feats.shape) != (batch, cfg.detections, cfg.visual_dim):
            raise ShapeError(
                f"visual features shape {tuple(feats.shape)} does not match "
                f"({batch}, {cfg.detections}, {cfg.visual_dim})"
            )
        if cfg.use_boxes:
            if boxes is None or tuple(boxes.shape) != (batch, cfg.detections, BOX_DIM):
                raise ShapeError(f"boxes must have shape ({batch}, {cfg.detections}, 4)")
        elif boxes is not None:
            raise ShapeError("boxes supplied to a config without use_boxes")

    def _text_embeddings(self, input_ids):
        t = input_ids.shape[1]
        if t > self.cfg.max_len:
            raise ShapeError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(t)
        return self.word_emb(input_ids) + self.pos_emb(pos)[None] + self.seg_emb.weight[0]

    def encode(self, input_ids, attention_mask=None, feats=None, boxes=None,
               mode: ForwardMode = ForwardMode(), probs_out: Optional[list] = None) -> torch.Tensor:
        """Return language hidden states ``(B, T, H)``.

        ``feats``/``boxes`` are float tensors of shape ``(B, K, Dv)`` and ``(B, K, 4)``.
        ``probs_out``, when given, collects every attention probability tensor.
        """
        b, t = input_ids.shape
        self._check_inputs(feats, boxes, mode, b)
        if attention_mask is None:
            attention_mask = torch.ones(b, t, dtype=torch.bool)
        attention_mask = attention_mask.bool()
        text = self._text_embeddings(input_ids)

        if not self.cfg.dual:
            if mode.visual_input:
                visn = self.visual_proj(feats) + self.seg_emb.weight[1]
                x = self.emb_norm(torch.cat([text, visn], dim=1))
                key_mask = torch.cat([attention_mask, torch.ones(b, feats.shape[1], dtype=torch.bool)], dim=1)
            else:
                x = self.emb_norm(text)
                key_mask = attention_mask
            for layer in self.text_layers:
                x = layer(x, key_mask, probs_out)
            return x[:, :t]

        lang = self.emb_norm(text)
        for layer in self.text_layers:
            lang = layer(lang, attention_mask, probs_out)
        visn = None
        if mode.visual_input:
            visn = self.visual_norm(self.visual_proj(feats))
            if self.cfg.use_boxes:
                visn = (visn + self.box_norm(self.box_proj(boxes))) / 2
            for layer in self.visual_layers:
                visn = layer(visn, None, probs_out)
        for layer in self.cross_layers:
            lang, visn = layer(lang, attention_mask, visn, mode.cross_modality_ablated, probs_out)
        return lang

    def mlm_logits(self, input_ids, attention_mask=None, feats=None, boxes=None,
                   mode: ForwardMode = ForwardMode()) -> torch.Tensor:
        return self.mlm_head(self.encode(input_ids, attention_mask, feats, boxes, mode))


# ---------------------------------------------------------------------------
# Single-sequence entry points
# ---------------------------------------------------------------------------


def visual_tensors(visual: Optional[VisualFeatureSet], batch: int = 1):
    """Broadcast a feature set to ``(batch, K, Dv)`` (and boxes) tensors."""
    if visual is None:
        return None, None
    feats = torch.as_tensor(visual.features, dtype=DTYPE).expand(batch, -1, -1)
    boxes = None
    if visual.boxes is not None:
        boxes = torch.as_tensor(visual.boxes, dtype=DTYPE).expand(batch, -1, -1)
    return feats, boxes


def _single(model: VLEncoder, seq: TokenizedSequence, visual, mode):
    if visual is not None:
        visual.check_against(model.cfg)
    elif mode.visual_input:
        raise InputError("mode.visual_input is present but no visual features were supplied")
    ids = torch.tensor([seq.ids], dtype=torch.long)
    feats, boxes = visual_tensors(visual)
    return ids, feats, boxes


def forward_mlm(model: VLEncoder, seq: TokenizedSequence, visual: Optional[VisualFeatureSet] = None,
                mode: ForwardMode = ForwardMode()) -> torch.Tensor:
    """MLM logits ``(T, V)`` for the language positions of one sequence."""
    ids, feats, boxes = _single(model, seq, visual, mode)
    return model.mlm_logits(ids, None, feats, boxes, mode)[0]


def forward_classify(model: VLEncoder, head: ClassifierHead, seq: TokenizedSequence,
                     visual: Optional[VisualFeatureSet] = None, mode: ForwardMode = ForwardMode()) -> torch.Tensor:
    """Class logits (or a one-element regression output) from the pooled CLS state."""
    ids, feats, boxes = _single(model, seq, visual, mode)
    hidden = model.encode(ids, None, feats, boxes, mode)
    return head(hidden[0, 0])


def param_hash(*modules: nn.Module) -> str:
    """SHA-256 over every parameter/buffer, in state-dict order."""
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            digest.update(name.encode())
            digest.update(tensor.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()
