"""Corpus, vocabulary and visual-dataset I/O, plus a synthetic concept world.

The synthetic world is a scaled-down stand-in for the real training data: a
set of concepts with ground-truth visual properties, a short-caption corpus
and a long-sentence "wiki" corpus about them (matched in token count), images
whose backbone features encode the properties, and a property-norms file.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .backbone import Backbone, Image, extract_features
from .errors import ConfigError, InputError, ShapeError
from .glue import BINARY_KIND, GlueExample, GlueTask, write_task_tsv
from .model import SPECIAL_TOKENS, VisualFeatureSet, Vocab, word_tokens
from .vpn import NORMS_HEADER


# ---------------------------------------------------------------------------
# Corpora and vocabularies
# ---------------------------------------------------------------------------


@dataclass
class CorpusStats:
    samples: int
    tokens: int

    @property
    def tokens_per_sample(self) -> float:
        return round(self.tokens / self.samples, 1) if self.samples else 0.0

    def to_dict(self) -> dict:
        return {"samples": self.samples, "tokens": self.tokens, "tokens_per_sample": self.tokens_per_sample}


def corpus_stats(samples: Iterable[str]) -> CorpusStats:
    n = tokens = 0
    for s in samples:
        n += 1
        tokens += len(word_tokens(s))
    return CorpusStats(n, tokens)


@dataclass
class Corpus:
    samples: list[str]
    split: str = "train"
    stats: CorpusStats = field(init=False)

    def __post_init__(self):
        self.stats = corpus_stats(self.samples)

    def __iter__(self) -> Iterator[str]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def load_corpus(path, split: str = "train") -> Corpus:
    """One sample per non-blank line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read corpus {path}: {exc}") from exc
    samples = [line.strip() for line in text.splitlines() if line.strip()]
    if not samples and split == "train":
        raise InputError(f"training corpus {path} is empty")
    return Corpus(samples, split)


def write_corpus(path, samples: Iterable[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(s + "\n" for s in samples), encoding="utf-8")
    return path


def build_vocab(corpora: Union[Iterable[str], Sequence[Iterable[str]]], size: int) -> Vocab:
    """Specials, then the ``size - 5`` most frequent tokens (ties: lexicographic)."""
    if size <= len(SPECIAL_TOKENS):
        raise ConfigError(f"vocab size must exceed {len(SPECIAL_TOKENS)}, got {size}")
    if isinstance(corpora, (str, Corpus)):
        corpora = [corpora]
    counts: Counter = Counter()
    for corpus in corpora:
        samples = [corpus] if isinstance(corpus, str) else corpus
        for sample in samples:
            counts.update(t for t in word_tokens(sample) if t not in SPECIAL_TOKENS and t != "[mask]")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(tok for tok, _ in ranked[: size - len(SPECIAL_TOKENS)])


# ---------------------------------------------------------------------------
# Paired visual datasets
# ---------------------------------------------------------------------------


@dataclass
class PairedVisualDataset:
    """Text records referencing a feature store; iterates per-record features."""

    records: list[tuple[str, str]]
    store: dict[str, VisualFeatureSet]

    def __post_init__(self):
        shapes = {(v.shape, v.boxes is not None) for v in self.store.values()}
        if len(shapes) > 1:
            raise ShapeError(f"inconsistent feature shapes in store: {sorted(shapes)}")
        for _, image_id in self.records:
            if image_id not in self.store:
                raise InputError(f"record references unknown image id {image_id!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[VisualFeatureSet]:
        return (self.store[i] for _, i in self.records)

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.records]

    @property
    def visuals(self) -> list[VisualFeatureSet]:
        return list(self)


def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def _write_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def load_feature_store(path) -> dict[str, VisualFeatureSet]:
    store = {}
    for row in _read_jsonl(path):
        try:
            store[str(row["image_id"])] = VisualFeatureSet(row["features"], row.get("boxes"))
        except KeyError as exc:
            raise InputError(f"{path}: feature row missing {exc}") from None
    return store


def write_feature_store(path, store: dict[str, VisualFeatureSet]) -> Path:
    return _write_jsonl(path, ({"image_id": k, **v.to_dict()} for k, v in store.items()))


def load_visual_dataset(records_path, features_path) -> PairedVisualDataset:
    store = load_feature_store(features_path)
    records = []
    for row in _read_jsonl(records_path):
        try:
            records.append((str(row["text"]), str(row["image_id"])))
        except KeyError as exc:
            raise InputError(f"{records_path}: record missing {exc}") from None
    return PairedVisualDataset(records, store)


def write_records(path, records: Iterable[tuple[str, str]]) -> Path:
    return _write_jsonl(path, ({"text": t, "image_id": i} for t, i in records))


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

_CONCEPTS = [
    "cow", "mug", "apple", "banana", "zebra", "swan", "crow", "frog", "lemon", "tomato", "pumpkin",
    "tiger", "bicycle", "kettle", "pine", "rose", "owl", "duck", "car", "sheep", "penguin", "bus",
    "cherry", "elephant",
]
_IS_PROPERTIES = [
    "black", "white", "red", "yellow", "green", "brown", "orange", "round", "striped", "small",
    "large", "furry", "shiny", "tall",
]
_HAS_PROPERTIES = [
    ("handle", "has_a"), ("tail", "has_a"), ("beak", "has_a"), ("stem", "has_a"), ("trunk", "has_a"),
    ("wheels", "has"), ("legs", "has"), ("leaves", "has"), ("seeds", "has"), ("feathers", "has"),
    ("horns", "has"), ("spots", "has"), ("wings", "has"), ("petals", "has"),
]
_PHRASE = {"is": "is", "has": "has", "has_a": "has a"}

_CAPTION_TEMPLATES = {
    "is": ["a {c} is {p}", "the {c} is {p}", "this {c} is {p}", "a {p} {c}", "the {p} {c}"],
    "has": ["a {c} has {p}", "the {c} has {p}", "a {c} with {p}"],
    "has_a": ["a {c} has a {p}", "the {c} has a {p}", "a {c} with a {p}"],
}
_WIKI_TEMPLATES = [
    "according to many old books the {c} {r} {p} in most regions of the world",
    "everybody knows that a {c} usually {r} {p} , as field guides often explain",
    "in general , scholars agree that the typical {c} {r} {p} throughout its life",
    "it is widely reported in the literature that a {c} {r} {p} and this is notable",
    "historically , writers have described the {c} as something that {r} {p} quite often",
]


@dataclass(frozen=True)
class Property:
    word: str
    relation: str


@dataclass
class SyntheticWorld:
    seed: int
    concepts: dict[str, list[Property]]
    properties: list[Property]
    captions: dict[str, list[tuple[str, str]]]  # split -> (text, image_id)
    wiki: dict[str, list[str]]
    store: dict[str, VisualFeatureSet]
    norms: list[tuple[str, str, str, int]]
    backbone: Backbone
    images: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def caption_texts(self, split: str = "train") -> list[str]:
        return [t for t, _ in self.captions[split]]

    def paired(self, split: str = "train") -> PairedVisualDataset:
        return PairedVisualDataset(list(self.captions[split]), self.store)

    def property_vector(self, concept: str) -> np.ndarray:
        vec = np.zeros(len(self.properties))
        for p in self.concepts[concept]:
            vec[self.properties.index(p)] = 1.0
        return vec

    def concept_of_image(self, image_id: str) -> str:
        return image_id.rsplit("_", 1)[0]

    def all_texts(self) -> list[str]:
        return [*self.caption_texts("train"), *self.caption_texts("dev"), *self.wiki["train"], *self.wiki["dev"]]

    def write(self, directory) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "captions_train": write_corpus(d / "captions.train.txt", self.caption_texts("train")),
            "captions_dev": write_corpus(d / "captions.dev.txt", self.caption_texts("dev")),
            "wiki_train": write_corpus(d / "wiki.train.txt", self.wiki["train"]),
            "wiki_dev": write_corpus(d / "wiki.dev.txt", self.wiki["dev"]),
            "records_train": write_records(d / "records.train.jsonl", self.captions["train"]),
            "records_dev": write_records(d / "records.dev.jsonl", self.captions["dev"]),
            "features": write_feature_store(d / "features.jsonl", self.store),
            "norms": d / "norms.csv",
            "backbone": self.backbone.save(d / "backbone.json"),
        }
        task = make_property_type_task(self)
        paths["prop_type_train"] = write_task_tsv(d / "prop-type.train.tsv", task.train)
        paths["prop_type_dev"] = write_task_tsv(d / "prop-type.dev.tsv", task.dev)
        with paths["norms"].open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(NORMS_HEADER)
            writer.writerows(self.norms)
        return paths


def _concept_names(n: int) -> list[str]:
    return _CONCEPTS[:n] + [f"thing{i}" for i in range(max(0, n - len(_CONCEPTS)))]


def _property_pool(n: int) -> list[Property]:
    n_is = math.ceil(n / 2)
    is_words = _IS_PROPERTIES[:n_is] + [f"hue{i}" for i in range(max(0, n_is - len(_IS_PROPERTIES)))]
    n_has = n - n_is
    has = _HAS_PROPERTIES[:n_has] + [(f"part{i}", "has") for i in range(max(0, n_has - len(_HAS_PROPERTIES)))]
    return [Property(w, "is") for w in is_words] + [Property(w, r) for w, r in has]


def _fill_tokens(rng, make_sentence, target_tokens: int) -> list[str]:
    out, count = [], 0
    while count < target_tokens:
        s = make_sentence(rng)
        out.append(s)
        count += len(word_tokens(s))
    return out


def generate_synthetic_world(seed: int = 0, n_concepts: int = 16, n_properties: int = 12,
                             caption_samples: int = 2000, dev_samples: int = 400,
                             images_per_concept: int = 4, detections: int = 4, visual_dim: int = 16,
                             image_size: tuple[int, int] = (16, 16), emit_boxes: bool = False,
                             signal: float = 0.9, noise: float = 0.02) -> SyntheticWorld:
    """Deterministic per ``seed``.

    Each concept gets two "is" properties and one or two part properties.
    Images are ``0.5 + signal * (pattern @ properties) / 8 + noise`` with a
    +/-1 pattern; a concept has at most four properties, so pixels stay inside
    [0, 1] without clipping whenever ``signal / 2 + noise <= 0.5``. The
    stored features are the backbone's affine read-out of those images, so
    properties are affinely recoverable from features.
    """
    if n_concepts < 2 or n_properties < 2:
        raise ConfigError("n_concepts and n_properties must be >= 2")
    rng = np.random.default_rng(seed)
    names = _concept_names(n_concepts)
    props = _property_pool(n_properties)
    is_props = [p for p in props if p.relation == "is"]
    has_props = [p for p in props if p.relation != "is"]

    concepts: dict[str, list[Property]] = {}
    for name in names:
        chosen = list(rng.choice(len(is_props), size=min(2, len(is_props)), replace=False))
        picked = [is_props[i] for i in sorted(chosen)]
        if has_props:
            k = int(rng.integers(1, min(2, len(has_props)) + 1))
            picked += [has_props[i] for i in sorted(rng.choice(len(has_props), size=k, replace=False))]
        concepts[name] = picked

    backbone = Backbone(detections, visual_dim, image_size, emit_boxes, seed=seed + 1)
    n_pix = backbone.pixel_count
    pattern = rng.choice([-1.0, 1.0], size=(n_pix, len(props)))
    images, store = {}, {}
    for name in names:
        vec = np.array([1.0 if p in concepts[name] else 0.0 for p in props])
        for j in range(images_per_concept):
            flat = 0.5 + signal * (pattern @ vec) / 8.0 + rng.uniform(-noise, noise, size=n_pix)
            pixels = np.clip(flat, 0.0, 1.0).reshape(*image_size, 3)
            image_id = f"{name}_{j}"
            images[image_id] = pixels
            store[image_id] = extract_features(backbone, Image(pixels))

    def caption(r):
        name = names[int(r.integers(len(names)))]
        prop = concepts[name][int(r.integers(len(concepts[name])))]
        tmpl = _CAPTION_TEMPLATES[prop.relation]
        text = tmpl[int(r.integers(len(tmpl)))].format(c=name, p=prop.word)
        return text, f"{name}_{int(r.integers(images_per_concept))}"

    def wiki_sentence(r):
        name = names[int(r.integers(len(names)))]
        prop = concepts[name][int(r.integers(len(concepts[name])))]
        tmpl = _WIKI_TEMPLATES[int(r.integers(len(_WIKI_TEMPLATES)))]
        return tmpl.format(c=name, r=_PHRASE[prop.relation], p=prop.word)

    captions = {"train": [caption(rng) for _ in range(caption_samples)],
                "dev": [caption(rng) for _ in range(dev_samples)]}
    wiki = {split: _fill_tokens(rng, wiki_sentence, corpus_stats(t for t, _ in caps).tokens)
            for split, caps in captions.items()}

    norms = []
    for name in names:
        for prop in concepts[name]:
            pf = int(rng.integers(10, 31)) if rng.random() < 0.85 else int(rng.integers(2, 10))
            norms.append((name, prop.relation, prop.word, pf))

    return SyntheticWorld(seed, concepts, props, captions, wiki, store, norms, backbone, images)


def make_property_type_task(world: SyntheticWorld, n_train: int = 2000, n_dev: int = 400, seed: int = 0,
                            name: str = "PROP-TYPE") -> GlueTask:
    """Binary task: does the sentence state an appearance property (1) or a part (0)?

    Linearly separable by construction: the label is a function of which
    property word appears.
    """
    rng = np.random.default_rng(seed)
    names = list(world.concepts)
    frames = ["the {c} we saw {r} {p}", "i think this {c} {r} {p}", "my {c} {r} {p}", "that {c} {r} {p} today"]

    def example(r):
        prop = world.properties[int(r.integers(len(world.properties)))]
        c = names[int(r.integers(len(names)))]
        text = frames[int(r.integers(len(frames)))].format(c=c, r=_PHRASE[prop.relation], p=prop.word)
        return GlueExample(text, None, int(prop.relation == "is"))

    return GlueTask(name, BINARY_KIND, [example(rng) for _ in range(n_train)],
                    [example(rng) for _ in range(n_dev)])
