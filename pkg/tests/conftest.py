import numpy as np
import pytest
import torch

from vladapt.data import build_vocab, generate_synthetic_world
from vladapt.model import ModelConfig, VisualFeatureSet, VLEncoder, Vocab

WORDS = ["a", "the", "cow", "mug", "is", "has", "black", "white", "handle", "usually", "brown", "red"]


@pytest.fixture
def vocab():
    return Vocab(WORDS)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(hidden=16, heads=2, text_layers=1, visual_layers=1, cross_layers=1,
                vocab_size=len(WORDS) + 5, visual_dim=6, detections=3, max_len=16, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def random_visual(cfg: ModelConfig, rng: np.random.Generator) -> VisualFeatureSet:
    boxes = None
    if cfg.use_boxes:
        lo = rng.uniform(0, 0.5, size=(cfg.detections, 2))
        boxes = np.concatenate([lo, lo + rng.uniform(0, 0.5, size=(cfg.detections, 2))], axis=1)
    return VisualFeatureSet(rng.normal(size=(cfg.detections, cfg.visual_dim)), boxes)


def well_conditioned(model: VLEncoder, scale: float = 0.3) -> VLEncoder:
    """Re-draw weights at a scale where attention is far from uniform, so no gradient is vanishingly small."""
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def single_model(vocab):
    return VLEncoder(tiny_config(vocab_size=len(vocab)))


@pytest.fixture
def dual_model(vocab):
    return VLEncoder(tiny_config(vocab_size=len(vocab), architecture="dual-stream"))


@pytest.fixture(scope="session")
def small_world():
    return generate_synthetic_world(seed=3, n_concepts=6, n_properties=6, caption_samples=200, dev_samples=40,
                                    detections=2, visual_dim=8, image_size=(8, 8))


@pytest.fixture(scope="session")
def small_world_vocab(small_world):
    return build_vocab(small_world.all_texts(), 200)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 10


def pytest_terminal_summary(terminalreporter):
    ran = [r for rs in terminalreporter.stats.values() for r in rs
           if "test_acceptance.py" in getattr(r, "nodeid", "")]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            line = f"{'PASS' if ok else 'FAIL'}  {detail}"
        elif any(f"test_c{n}_" in r.nodeid and getattr(r, "failed", False) for r in ran):
            line = "FAIL  (errored before measuring)"
        else:
            line = "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d}: {line}")
