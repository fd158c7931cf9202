"""MLM (continued) pretraining, BERT-style masking and classification fine-tuning."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, TrainingDivergence
from .glue import REGRESSION_KIND, GlueTask, compute_metric
from .model import (
    DTYPE, IGNORE_INDEX, MASK, PAD, SPECIAL_TOKENS, ClassifierHead, ForwardMode,
    TokenizedSequence, VisualFeatureSet, VLEncoder, Vocab, param_hash, text_only_mode,
    tokenize, tokenize_pair,
)

log = logging.getLogger(__name__)

_FIRST_WORD_ID = len(SPECIAL_TOKENS)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    max_steps: Optional[int] = None
    epochs: Optional[int] = None
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 50
    patience: int = 3
    min_delta: float = 1e-4
    optimizer: str = "sgd"
    mask_rate: float = 0.15

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigError("eval_every and patience must be >= 1")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("mask_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        # no warmup or decay is published, so the rate is held constant; reports say so
        return {**asdict(self), "lr_schedule": "constant"}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if data.pop("lr_schedule", "constant") != "constant":
            raise ConfigError("only a constant learning rate schedule is supported")
        return cls(**data)


# Published hyperparameters.  "paper-appendix-b" keeps the published
# batch sizes; "desk" scales the batch sizes down to something a CPU can run.
PRESETS: dict[str, dict[str, dict]] = {
    "paper-appendix-b": {
        "pretrain": {"lr": 5e-5, "batch_size": 16384, "optimizer": "adam"},
        "finetune-text": {"lr": 5e-5, "batch_size": 256, "optimizer": "adam"},
        "tune-features": {"lr": 0.05, "batch_size": 64},
        "glue": {"lr": 3e-5, "batch_size": 32, "epochs": 4, "weight_decay": 0.01, "optimizer": "adam"},
    },
    "desk": {
        "pretrain": {"lr": 5e-5, "batch_size": 32, "optimizer": "adam"},
        "finetune-text": {"lr": 5e-5, "batch_size": 32, "optimizer": "adam"},
        "tune-features": {"lr": 0.05, "batch_size": 64},
        "glue": {"lr": 3e-5, "batch_size": 8, "epochs": 4, "weight_decay": 0.01, "optimizer": "adam"},
    },
}


def preset(purpose: str, name: str = "desk", **overrides) -> TrainConfig:
    try:
        values = dict(PRESETS[name][purpose])
    except KeyError:
        raise ConfigError(f"no preset {name!r}/{purpose!r}") from None
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Masking and losses
# ---------------------------------------------------------------------------


@dataclass
class MaskedRow:
    input_ids: list[int]
    labels: list[int]


@dataclass
class MaskedBatch:
    input_ids: torch.Tensor
    labels: torch.Tensor
    attention_mask: torch.Tensor


def mask_tokens(seq: TokenizedSequence, rate: float, rng: np.random.Generator, vocab_size: int,
                branch_probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
                ensure_one: bool = False) -> MaskedRow:
    """BERT masking: select non-special positions with probability ``rate``;
    a selected token becomes [MASK], a random word or stays unchanged
    according to ``branch_probs``.

    With ``ensure_one`` a single position is forced when the draw selects none
    (rows without labels contribute nothing to a training batch).
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"mask rate must be within [0, 1], got {rate}")
    ids = list(seq.ids)
    labels = [IGNORE_INDEX] * len(ids)
    candidates = [i for i, t in enumerate(ids) if t >= _FIRST_WORD_ID]
    if not candidates or rate == 0.0:
        return MaskedRow(ids, labels)
    draws = rng.random(len(candidates))
    selected = [pos for pos, u in zip(candidates, draws) if u < rate]
    if ensure_one and not selected:
        selected = [candidates[int(rng.integers(len(candidates)))]]
    p_mask, p_random, _ = branch_probs
    for pos in selected:
        labels[pos] = ids[pos]
        u = rng.random()
        if u < p_mask:
            ids[pos] = MASK
        elif u < p_mask + p_random:
            ids[pos] = int(rng.integers(_FIRST_WORD_ID, vocab_size))
    return MaskedRow(ids, labels)


def pad_ids(rows: Sequence[Sequence[int]], fill: int = PAD) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), fill, dtype=torch.long)
    attn = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        attn[i, : len(r)] = True
    return ids, attn


def collate(rows: Sequence[MaskedRow]) -> MaskedBatch:
    ids, attn = pad_ids([r.input_ids for r in rows])
    labels, _ = pad_ids([r.labels for r in rows], fill=IGNORE_INDEX)
    return MaskedBatch(ids, labels, attn)


def mlm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over labeled positions (``labels != IGNORE_INDEX``)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_labels = labels.reshape(-1)
    if not bool((flat_labels != IGNORE_INDEX).any()):
        raise InputError("mlm_loss needs at least one labeled position")
    return F.cross_entropy(flat_logits, flat_labels, ignore_index=IGNORE_INDEX)


# ---------------------------------------------------------------------------
# Visual inputs for batches
# ---------------------------------------------------------------------------

VisualSource = Union[None, VisualFeatureSet, Sequence[VisualFeatureSet], Callable[[TokenizedSequence], VisualFeatureSet]]


def stack_visual(visuals: Sequence[Optional[VisualFeatureSet]]):
    if not visuals or visuals[0] is None:
        return None, None
    feats = torch.tensor(np.stack([v.features for v in visuals]), dtype=DTYPE)
    boxes = None
    if visuals[0].boxes is not None:
        boxes = torch.tensor(np.stack([v.boxes for v in visuals]), dtype=DTYPE)
    return feats, boxes


def resolve_visuals(source: VisualSource, seqs: Sequence[TokenizedSequence]) -> list[Optional[VisualFeatureSet]]:
    """Materialize one feature set (or None) per sequence."""
    if source is None:
        return [None] * len(seqs)
    if isinstance(source, VisualFeatureSet):
        return [source] * len(seqs)
    if callable(source):
        return [source(s) for s in seqs]
    if len(source) != len(seqs):
        raise InputError(f"{len(source)} visual inputs for {len(seqs)} samples")
    return list(source)


def _default_mode(cfg, visuals) -> ForwardMode:
    return ForwardMode() if visuals and visuals[0] is not None else text_only_mode(cfg)


# ---------------------------------------------------------------------------
# Generic optimization loop with early stopping
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    step: int
    split: str
    value: float


@dataclass
class TrainResult:
    curve: list[CurvePoint] = field(default_factory=list)
    best_step: int = 0
    best_dev: Optional[float] = None
    stopped_early: bool = False
    steps_run: int = 0


def write_curve_csv(path, curve: Sequence[CurvePoint], metric: str = "loss") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "split", metric])
        for p in curve:
            writer.writerow([p.step, p.split, repr(p.value)])
    return path


def make_optimizer(params, train: TrainConfig) -> torch.optim.Optimizer:
    if train.optimizer == "adam":
        return torch.optim.AdamW(params, lr=train.lr, weight_decay=train.weight_decay)
    return torch.optim.SGD(params, lr=train.lr, weight_decay=train.weight_decay)


def fit(params: list[torch.Tensor], n_train: int, batch_loss: Callable[[np.ndarray, np.random.Generator], torch.Tensor],
        train: TrainConfig, dev_loss: Optional[Callable[[], float]] = None, steps: Optional[int] = None) -> TrainResult:
    """Minimize ``batch_loss`` over ``params`` in place.

    Batches are drawn by epoch-wise shuffling.  When ``dev_loss`` is given it is
    evaluated at step 0 and every ``eval_every`` steps; training stops after
    ``patience`` evaluations without a ``min_delta`` improvement and the best
    evaluated parameters are restored.
    """
    if steps is None:
        steps = train.max_steps
    if steps is None:
        per_epoch = math.ceil(n_train / train.batch_size)
        steps = per_epoch * (train.epochs if train.epochs is not None else 1)
    result = TrainResult()
    if steps == 0 or not params:
        return result
    if n_train == 0:
        raise InputError("training data is empty")
    rng = np.random.default_rng(train.seed)
    opt = make_optimizer(params, train)

    best_state = [p.detach().clone() for p in params]
    if dev_loss is not None:
        result.best_dev = dev_loss()
        result.curve.append(CurvePoint(0, "dev", result.best_dev))
    bad_evals = 0
    order = rng.permutation(n_train)
    cursor = 0
    for step in range(1, steps + 1):
        if cursor >= n_train:
            order, cursor = rng.permutation(n_train), 0
        idx = order[cursor: cursor + train.batch_size]
        cursor += train.batch_size
        loss = batch_loss(idx, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(step, value, result.curve)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.curve.append(CurvePoint(step, "train", value))
        result.steps_run = step
        if dev_loss is not None and (step % train.eval_every == 0 or step == steps):
            current = dev_loss()
            if not math.isfinite(current):
                raise TrainingDivergence(step, current, result.curve)
            result.curve.append(CurvePoint(step, "dev", current))
            if current < result.best_dev - train.min_delta:
                result.best_dev, result.best_step, bad_evals = current, step, 0
                best_state = [p.detach().clone() for p in params]
            else:
                bad_evals += 1
                if bad_evals >= train.patience:
                    result.stopped_early = True
                    log.info("early stop at step %d (best dev %.4f at %d)", step, result.best_dev, result.best_step)
                    break
    if dev_loss is not None:
        with torch.no_grad():
            for p, saved in zip(params, best_state):
                p.copy_(saved)
    else:
        result.best_step = result.steps_run
    return result


# ---------------------------------------------------------------------------
# MLM training
# ---------------------------------------------------------------------------


def tokenize_corpus(samples: Sequence[str], vocab: Vocab, max_len: int) -> list[TokenizedSequence]:
    return [tokenize(s, vocab, max_len) for s in samples]


def masked_batch_loss(model: VLEncoder, rows: Sequence[MaskedRow], visuals, mode: ForwardMode,
                      feats: Optional[torch.Tensor] = None, boxes: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Loss of one masked batch; ``feats``/``boxes`` override ``visuals`` when given."""
    batch = collate(rows)
    if feats is None and mode.visual_input:
        feats, boxes = stack_visual(visuals)
    logits = model.mlm_logits(batch.input_ids, batch.attention_mask, feats, boxes, mode)
    return mlm_loss(logits, batch.labels)


def fixed_dev_rows(seqs: Sequence[TokenizedSequence], vocab_size: int, rate: float = 0.15,
                   seed: int = 12345) -> list[MaskedRow]:
    """Deterministic masking of a dev set so losses are comparable across runs."""
    rng = np.random.default_rng(seed)
    return [mask_tokens(s, rate, rng, vocab_size, ensure_one=True) for s in seqs]


def mlm_dev_loss(model: VLEncoder, rows: Sequence[MaskedRow], visuals: Sequence[Optional[VisualFeatureSet]],
                 mode: ForwardMode, feats: Optional[torch.Tensor] = None, boxes: Optional[torch.Tensor] = None,
                 chunk: int = 128) -> float:
    """Token-weighted mean MLM loss over pre-masked rows."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(rows), chunk):
            keep = [i for i in range(start, min(start + chunk, len(rows)))
                    if any(l != IGNORE_INDEX for l in rows[i].labels)]
            if not keep:
                continue
            part = [rows[i] for i in keep]
            n = sum(sum(l != IGNORE_INDEX for l in r.labels) for r in part)
            f = b = None
            if feats is not None:
                f = feats.expand(len(part), -1, -1)
                b = boxes.expand(len(part), -1, -1) if boxes is not None else None
            loss = masked_batch_loss(model, part, [visuals[i] for i in keep], mode, f, b)
            total += loss.item() * n
            count += n
    if count == 0:
        raise InputError("dev set has no maskable tokens")
    return total / count


def train_mlm(model: VLEncoder, vocab: Vocab, corpus: Sequence[str], train: TrainConfig,
              dev: Optional[Sequence[str]] = None, visual: VisualSource = None,
              dev_visual: VisualSource = None, mode: Optional[ForwardMode] = None,
              from_scratch: bool = False) -> tuple[VLEncoder, TrainResult]:
    """Train a copy of ``model`` with the MLM objective; ``model`` itself is untouched.

    ``visual`` pairs each sample with visual features (paired VL pretraining);
    without it training is text-only.  ``from_scratch`` re-seeds every weight
    from ``train.seed`` first.
    """
    corpus = list(corpus)
    if not corpus:
        raise InputError("training corpus is empty")
    trainee = copy.deepcopy(model)
    if from_scratch:
        trainee._init_weights(train.seed)
    max_len = trainee.cfg.max_len
    seqs = tokenize_corpus(corpus, vocab, max_len)
    visuals = resolve_visuals(visual, seqs)
    if mode is None:
        mode = _default_mode(trainee.cfg, visuals)
    v = trainee.cfg.vocab_size

    def batch_loss(idx, rng):
        rows = [mask_tokens(seqs[i], train.mask_rate, rng, v, ensure_one=True) for i in idx]
        return masked_batch_loss(trainee, rows, [visuals[i] for i in idx], mode)

    dev_fn = None
    if dev:
        dev_seqs = tokenize_corpus(dev, vocab, max_len)
        dev_rows = fixed_dev_rows(dev_seqs, v, train.mask_rate)
        dev_vis = resolve_visuals(dev_visual, dev_seqs)
        dev_fn = lambda: mlm_dev_loss(trainee, dev_rows, dev_vis, mode)  # noqa: E731

    trainee.train()
    result = fit(list(trainee.parameters()), len(seqs), batch_loss, train, dev_fn)
    trainee.eval()
    return trainee, result


# ---------------------------------------------------------------------------
# Classification fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_score: float
    params_hash: str


@dataclass
class FinetuneResult:
    head: ClassifierHead
    model: VLEncoder
    curve: list[EpochRecord]
    best_epoch: int
    best_score: float


def encode_examples(adapted, examples) -> tuple[list[TokenizedSequence], list[Optional[VisualFeatureSet]]]:
    max_len = adapted.model.cfg.max_len
    seqs = [tokenize_pair(ex.text_a, ex.text_b, adapted.vocab, max_len) for ex in examples]
    return seqs, [adapted.visual_for(s) for s in seqs]


def _classifier_outputs(model, head, seqs, visuals, mode) -> torch.Tensor:
    ids, attn = pad_ids([s.ids for s in seqs])
    feats, boxes = stack_visual(visuals) if mode.visual_input else (None, None)
    hidden = model.encode(ids, attn, feats, boxes, mode)
    return head(hidden[:, 0])


def predict(model, head, seqs, visuals, mode, chunk: int = 256) -> list:
    outs = []
    with torch.no_grad():
        for start in range(0, len(seqs), chunk):
            outs.append(_classifier_outputs(model, head, seqs[start: start + chunk],
                                            visuals[start: start + chunk], mode))
    out = torch.cat(outs)
    if head.kind == REGRESSION_KIND:
        return out[:, 0].tolist()
    return out.argmax(dim=-1).tolist()


def _dev_score(model, head, seqs, visuals, mode, task: GlueTask) -> float:
    preds = predict(model, head, seqs, visuals, mode)
    return compute_metric(task.metric, preds, [ex.label for ex in task.dev])


def finetune_classification(adapted, task: GlueTask, train: TrainConfig) -> FinetuneResult:
    """Fine-tune head and all model weights; return the best-dev-score epoch snapshot.

    The adapted model's visual provider supplies features identically during
    training and evaluation.  ``adapted.model`` is not modified.
    """
    if not task.train:
        raise InputError(f"task {task.name}: empty training set")
    if not task.dev:
        raise InputError(f"task {task.name}: empty dev set")
    model = copy.deepcopy(adapted.model)
    head = ClassifierHead(model.cfg.hidden, task.head_kind, task.num_classes, seed=train.seed)
    mode = adapted.mode
    seqs, visuals = encode_examples(adapted, task.train)
    dev_seqs, dev_visuals = encode_examples(adapted, task.dev)
    if task.head_kind == REGRESSION_KIND:
        targets = torch.tensor([float(ex.label) for ex in task.train], dtype=DTYPE)
    else:
        targets = torch.tensor([int(ex.label) for ex in task.train], dtype=torch.long)

    params = list(model.parameters()) + list(head.parameters())
    opt = make_optimizer(params, train)
    rng = np.random.default_rng(train.seed)
    epochs = train.epochs if train.epochs is not None else 4

    curve: list[EpochRecord] = []
    best = (-math.inf, 0, copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        model.train()
        for start in range(0, len(order), train.batch_size):
            idx = order[start: start + train.batch_size]
            out = _classifier_outputs(model, head, [seqs[i] for i in idx], [visuals[i] for i in idx], mode)
            if task.head_kind == REGRESSION_KIND:
                loss = F.mse_loss(out[:, 0], targets[idx])
            else:
                loss = F.cross_entropy(out, targets[idx])
            step += 1
            if not math.isfinite(loss.item()):
                raise TrainingDivergence(step, loss.item(), curve)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        score = _dev_score(model, head, dev_seqs, dev_visuals, mode, task)
        curve.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), score,
                                 param_hash(model, head)))
        if score > best[0]:
            best = (score, epoch, copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
    score, epoch, model_state, head_state = best
    if epochs == 0:
        score = _dev_score(model, head, dev_seqs, dev_visuals, mode, task)
    model.load_state_dict(model_state)
    head.load_state_dict(head_state)
    return FinetuneResult(head, model, curve, epoch, score)
