"""Zero-shot visual property probing with masked-LM templates, scored by mAP."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import InputError, ParseError, UnsupportedRelation
from .model import MASK_LITERAL, SPECIAL_TOKENS, Vocab, word_tokens
from .training import pad_ids, stack_visual

log = logging.getLogger(__name__)

PF_MIN, PF_MAX = 2, 30
NORMS_HEADER = ["concept", "relation", "feature", "pf"]
RELATION_PHRASES = {"is": "is", "has": "has", "has_a": "has a", "made_of": "is made of", "does": "does"}
ANY_RELATION = "*"


@dataclass(frozen=True)
class PropertyNormEntry:
    concept: str
    relation: str
    feature: str
    pf: int


@dataclass(frozen=True)
class VpnQuery:
    concept: str
    relation: str
    gold: tuple[str, ...]
    candidates: tuple[str, ...]

    def __post_init__(self):
        if not self.gold:
            raise InputError(f"query {self.concept}/{self.relation} has no gold features")
        missing = set(self.gold) - set(self.candidates)
        if missing:
            raise InputError(f"gold features {sorted(missing)} not among the candidates")


@dataclass
class PropertyNorms:
    """Queries loaded from a norms file, plus what was dropped on the way."""

    queries: list[VpnQuery]
    candidates: tuple[str, ...]
    rows_read: int = 0
    rows_below_threshold: int = 0
    skipped_multi_token: int = 0
    skipped_out_of_vocab: int = 0
    dropped_queries: int = 0

    def __iter__(self):
        return iter(self.queries)

    def __len__(self) -> int:
        return len(self.queries)

    def __getitem__(self, i):
        return self.queries[i]


def read_property_norms(path) -> list[PropertyNormEntry]:
    path = Path(path)
    entries = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != NORMS_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(NORMS_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(path, line, f"expected 4 fields, got {len(row)}")
            concept, relation, feature, pf = (c.strip() for c in row)
            if not concept or not relation or not feature:
                raise ParseError(path, line, "empty concept, relation or feature")
            try:
                pf_value = int(pf)
            except ValueError:
                raise ParseError(path, line, f"production frequency {pf!r} is not an integer") from None
            if not PF_MIN <= pf_value <= PF_MAX:
                raise ParseError(path, line, f"production frequency {pf_value} outside [{PF_MIN}, {PF_MAX}]")
            entries.append(PropertyNormEntry(concept, relation, feature, pf_value))
    return entries


def load_property_norms(path, pf_threshold: int, vocab: Optional[Vocab] = None,
                        candidate_mode: str = "closed") -> PropertyNorms:
    """Filter by production frequency and group into (concept, relation) queries.

    Candidates are, in ``closed`` mode, every single-token feature surviving
    the threshold; in ``full`` mode, every non-special vocabulary token.
    Features that are multi-token, or unknown to ``vocab``, are dropped.
    """
    if candidate_mode not in ("closed", "full"):
        raise InputError(f"unknown candidate mode {candidate_mode!r}")
    if candidate_mode == "full" and vocab is None:
        raise InputError("full-vocabulary candidates need a vocab")
    entries = read_property_norms(path)
    kept = [e for e in entries if e.pf >= pf_threshold]
    result = PropertyNorms([], (), rows_read=len(entries), rows_below_threshold=len(entries) - len(kept))

    grouped: dict[tuple[str, str], list[str]] = defaultdict(list)
    order: list[tuple[str, str]] = []
    features: list[str] = []
    for e in kept:
        key = (e.concept.lower(), e.relation)
        if key not in grouped:
            order.append(key)
            grouped[key]  # noqa: B018 - materialize the group even if every feature is dropped
        toks = word_tokens(e.feature)
        if len(toks) != 1:
            result.skipped_multi_token += 1
            continue
        tok = toks[0]
        if vocab is not None and tok not in vocab:
            result.skipped_out_of_vocab += 1
            continue
        if tok not in grouped[key]:
            grouped[key].append(tok)
        if tok not in features:
            features.append(tok)

    if candidate_mode == "full":
        candidates = tuple(vocab.tokens[len(SPECIAL_TOKENS):])
    else:
        candidates = tuple(sorted(features))
    result.candidates = candidates
    for concept, relation in order:
        gold = tuple(sorted(grouped[(concept, relation)]))
        if not gold:
            result.dropped_queries += 1
            continue
        result.queries.append(VpnQuery(concept, relation, gold, candidates))
    return result


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass
class Template:
    """Query phrasings sharing one template id, keyed by relation (``*`` = any)."""

    id: int
    patterns: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for relation, pattern in self.patterns.items():
            if pattern.count(MASK_LITERAL) != 1:
                raise InputError(f"template {self.id}/{relation} must contain exactly one {MASK_LITERAL}")

    def pattern_for(self, relation: str) -> str:
        if relation in self.patterns:
            return self.patterns[relation]
        if ANY_RELATION in self.patterns:
            return self.patterns[ANY_RELATION]
        raise UnsupportedRelation(self.id, relation)


def relation_phrase(relation: str) -> str:
    return RELATION_PHRASES.get(relation, relation.replace("_", " "))


def render_query(template: Template, query: VpnQuery) -> str:
    pattern = template.pattern_for(query.relation)
    return pattern.replace("{concept}", query.concept).replace("{relation}", relation_phrase(query.relation))


def parse_templates(lines: Iterable[str], source="<templates>") -> list[Template]:
    by_id: dict[int, dict[str, str]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(source, lineno, "expected id<TAB>relation<TAB>pattern")
        try:
            tid = int(parts[0])
        except ValueError:
            raise ParseError(source, lineno, f"template id {parts[0]!r} is not an integer") from None
        if parts[2].count(MASK_LITERAL) != 1:
            raise ParseError(source, lineno, f"pattern must contain exactly one {MASK_LITERAL}")
        by_id.setdefault(tid, {})[parts[1].strip()] = parts[2]
    return [Template(tid, pats) for tid, pats in sorted(by_id.items())]


def load_templates(path=None) -> list[Template]:
    """Load a template file; without a path, the nine bundled defaults."""
    if path is None:
        text = resources.files("vladapt").joinpath("resources/templates.tsv").read_text(encoding="utf-8")
        return parse_templates(text.splitlines(), "templates.tsv")
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_templates(fh, path)


# ---------------------------------------------------------------------------
# Ranking and scoring
# ---------------------------------------------------------------------------


def _candidate_ids(vocab: Vocab, candidates: Sequence[str]) -> list[int]:
    ids = []
    for c in candidates:
        if c not in vocab:
            raise InputError(f"candidate {c!r} is not in the model vocabulary")
        ids.append(vocab.id_of(c))
    return ids


def order_by_logits(logits: np.ndarray, candidates: Sequence[str], cand_ids: Sequence[int]) -> list[str]:
    """Descending logit, ties broken by ascending vocabulary id."""
    keyed = sorted(zip(candidates, cand_ids), key=lambda ci: (-float(logits[ci[1]]), ci[1]))
    return [c for c, _ in keyed]


def rank_candidates(adapted, masked_text: str, candidates: Sequence[str]) -> list[str]:
    seq = adapted.encode_text(masked_text)
    if len(seq.mask_positions) != 1:
        raise InputError(f"expected exactly one {MASK_LITERAL} in {masked_text!r}, found {len(seq.mask_positions)}")
    cand_ids = _candidate_ids(adapted.vocab, candidates)
    logits = adapted.mlm_logits(seq)[seq.mask_positions[0]].numpy()
    return order_by_logits(logits, list(candidates), cand_ids)


def average_precision(ranking: Sequence[str], gold: Iterable[str]) -> float:
    """Mean over gold items of precision at the rank where each is hit."""
    gold = set(gold)
    if not gold:
        raise InputError("gold set is empty")
    missing = gold - set(ranking)
    if missing:
        raise InputError(f"gold items {sorted(missing)} missing from the ranking")
    hits, total = 0, 0.0
    for rank, item in enumerate(ranking, start=1):
        if item in gold:
            hits += 1
            total += hits / rank
    return total / len(gold)


@dataclass
class TemplateSummary:
    median: float
    std: float
    minimum: float
    q1: float
    q3: float
    maximum: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def summarize_templates(values: Sequence[float]) -> TemplateSummary:
    """Median, population std and box-plot quartiles of per-template scores."""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        raise InputError("no template scores to summarize")
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return TemplateSummary(float(med), float(arr.std(ddof=0)), float(arr.min()), float(q1), float(q3),
                           float(arr.max()))


@dataclass
class VpnReport:
    template_ids: list[int]
    per_template_map: list[float]
    median: float
    std: float
    box: TemplateSummary
    skipped_multi_token: int = 0
    per_query: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_scores(cls, template_ids: Sequence[int], scores: Sequence[float], **kwargs) -> "VpnReport":
        summary = summarize_templates(scores)
        return cls(list(template_ids), [float(s) for s in scores], summary.median, summary.std, summary, **kwargs)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "template_ids": self.template_ids,
            "per_template_map": [clean(v) for v in self.per_template_map],
            "median": self.median,
            "std": self.std,
            "box": self.box.to_dict(),
            "skipped_multi_token": self.skipped_multi_token,
            "per_query": self.per_query,
            "warnings": self.warnings,
        }


def _mask_logit_rows(adapted, texts: Sequence[str], chunk: int = 256) -> list[np.ndarray]:
    seqs = [adapted.encode_text(t) for t in texts]
    for text, s in zip(texts, seqs):
        if len(s.mask_positions) != 1:
            raise InputError(f"expected exactly one {MASK_LITERAL} in {text!r}")
    rows = []
    with torch.no_grad():
        for start in range(0, len(seqs), chunk):
            part = seqs[start: start + chunk]
            ids, attn = pad_ids([s.ids for s in part])
            feats, boxes = (stack_visual([adapted.visual_for(s) for s in part])
                            if adapted.mode.visual_input else (None, None))
            logits = adapted.model.mlm_logits(ids, attn, feats, boxes, adapted.mode)
            for i, s in enumerate(part):
                rows.append(logits[i, s.mask_positions[0]].numpy())
    return rows


def evaluate_vpn(adapted, queries: Sequence[VpnQuery], templates: Sequence[Template]) -> VpnReport:
    """Per-template mAP over all queries, with median/std across templates.

    A query whose relation a template cannot phrase is skipped for that
    template only and noted in the warnings.
    """
    skipped = getattr(queries, "skipped_multi_token", 0)
    queries = list(queries)
    if not queries:
        raise InputError("no queries to evaluate")
    report_warnings = []
    per_query = []
    scores = []
    id_cache: dict[tuple[str, ...], list[int]] = {}
    for template in templates:
        texts, todo = [], []
        for q in queries:
            try:
                texts.append(render_query(template, q))
                todo.append(q)
            except UnsupportedRelation as exc:
                log.warning("%s; skipping %s", exc, q.concept)
                report_warnings.append(f"{exc}; skipped query {q.concept}/{q.relation}")
        aps = []
        for q, text, logits in zip(todo, texts, _mask_logit_rows(adapted, texts)):
            if q.candidates not in id_cache:
                id_cache[q.candidates] = _candidate_ids(adapted.vocab, q.candidates)
            ranking = order_by_logits(logits, q.candidates, id_cache[q.candidates])
            ap = average_precision(ranking, q.gold)
            aps.append(ap)
            per_query.append({"template": template.id, "concept": q.concept, "relation": q.relation,
                              "query": text, "gold": list(q.gold), "top": ranking[: len(q.gold)], "ap": ap})
        if aps:
            scores.append(float(math.fsum(aps) / len(aps)))
        else:
            report_warnings.append(f"template {template.id} evaluated no queries")
            scores.append(float("nan"))
    return VpnReport.from_scores([t.id for t in templates], scores, per_query=per_query,
                                 warnings=report_warnings, skipped_multi_token=skipped)


# Published median/std (x100) per model and adaptation, for side-by-side display only.
REFERENCE_VPN = {
    "note": "published full-scale numbers; not reproducible at this scale",
    "BERT-base": {"trained-LXMERT": (49.1, 13.2), "trained-LXMERT-scratch": (44.3, 13.2),
                  "trained-Wikipedia": (35.5, 9.5), "default": (39.0, 12.4)},
    "FLAVA": {"default": (30.7, 6.9)},
    "CLIP-BERT": {"default": (44.3, 4.7), "no-visual-features-finetuned-LXMERT": (44.5, 7.0),
                  "no-visual-features-finetuned-Wikipedia": (41.5, 5.4), "avg-visual-features": (33.1, 5.0),
                  "zero-image-visual-features": (41.8, 5.8), "zeroed-visual-features": (39.3, 4.9),
                  "finetuned-LXMERT-visual-features": (48.2, 4.2),
                  "finetuned-Wikipedia-visual-features": (33.3, 4.8), "imagined-visual-features": (31.4, 10.2)},
    "LXMERT": {"default": (42.8, 10.8), "no-visual-features-finetuned-LXMERT": (41.0, 7.5),
               "no-visual-features-finetuned-Wikipedia": (34.6, 10.0), "avg-visual-features": (37.3, 12.9),
               "zero-image-visual-features": (42.1, 11.0), "zeroed-visual-features": (35.2, 12.0),
               "finetuned-LXMERT-visual-features": (37.2, 13.9),
               "finetuned-Wikipedia-visual-features": (28.5, 11.7)},
    "VisualBERT": {"default": (29.0, 10.9), "no-visual-features-finetuned-LXMERT": (38.1, 9.1),
                   "no-visual-features-finetuned-Wikipedia": (21.6, 9.0), "avg-visual-features": (29.8, 11.0),
                   "zero-image-visual-features": (25.6, 10.2), "zeroed-visual-features": (7.1, 3.1),
                   "finetuned-LXMERT-visual-features": (34.5, 10.3),
                   "finetuned-Wikipedia-visual-features": (20.1, 9.9)},
}
