import numpy as np
import pytest

from vladapt.backbone import (
    Backbone, Image, TextImaginer, align_imaginer, black_image, extract_features, imagine_features,
)
from vladapt.errors import InputError, ShapeError
from vladapt.model import Vocab, tokenize


@pytest.fixture
def backbone():
    return Backbone(detections=4, visual_dim=16, image_size=(8, 8), seed=5)


def test_black_image_is_all_zero(backbone):
    img = black_image(backbone)
    assert img.pixels.shape == (8, 8, 3)
    assert np.all(img.pixels == 0.0) and img.pixels.sum() == 0


def test_black_image_gives_bias(backbone):
    feats = extract_features(backbone, black_image(backbone))
    np.testing.assert_array_equal(feats.features, backbone.bias)


def test_row_count_and_determinism(backbone):
    img = Image(np.random.default_rng(0).uniform(size=(8, 8, 3)))
    a, b = extract_features(backbone, img), extract_features(backbone, img)
    assert a.shape == (4, 16)
    assert a == b


def test_affine_in_pixels(backbone):
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    f = lambda p: extract_features(backbone, Image(p)).features  # noqa: E731
    np.testing.assert_allclose(f((x + y) / 2), (f(x) + f(y)) / 2, atol=1e-12)


def test_same_seed_same_weights():
    a, b = Backbone(seed=2), Backbone(seed=2)
    np.testing.assert_array_equal(a.weight, b.weight)


def test_boxes_are_valid():
    bb = Backbone(detections=4, visual_dim=4, image_size=(4, 4), emit_boxes=True)
    boxes = extract_features(bb, Image(np.full((4, 4, 3), 0.7))).boxes
    assert boxes.shape == (4, 4)
    assert np.all((boxes >= 0) & (boxes <= 1))
    assert np.all(boxes[:, 2] >= boxes[:, 0]) and np.all(boxes[:, 3] >= boxes[:, 1])


@pytest.mark.parametrize("pixels", [np.zeros((4, 4)), np.full((4, 4, 3), 1.5), np.full((4, 4, 3), np.nan)])
def test_bad_image(pixels):
    with pytest.raises(InputError):
        Image(pixels)


def test_image_size_mismatch(backbone):
    with pytest.raises(ShapeError):
        extract_features(backbone, Image(np.zeros((4, 4, 3))))


def test_backbone_save_load(tmp_path, backbone):
    loaded = Backbone.load(backbone.save(tmp_path / "bb.json"))
    img = Image(np.full((8, 8, 3), 0.3))
    assert extract_features(loaded, img) == extract_features(backbone, img)


class TestImaginer:
    vocab = Vocab(["a", "cow", "is", "black", "mug"])

    def seq(self, text):
        return tokenize(text, self.vocab, 16)

    def test_shape_and_determinism(self):
        im = TextImaginer(len(self.vocab), visual_dim=16, seed=0)
        a = imagine_features(im, self.seq("a cow is black"))
        assert a.shape == (1, 16)
        assert a == imagine_features(im, self.seq("a cow is black"))

    def test_bag_of_tokens(self):
        im = TextImaginer(len(self.vocab), visual_dim=8)
        np.testing.assert_allclose(imagine_features(im, self.seq("a cow is black")).features,
                                   imagine_features(im, self.seq("black is cow a")).features, atol=1e-12)

    def test_tiles_to_detections(self):
        im = TextImaginer(len(self.vocab), visual_dim=8)
        f = imagine_features(im, self.seq("cow"), detections=3).features
        assert f.shape == (3, 8) and np.all(f == f[0])

    def test_no_words(self):
        im = TextImaginer(len(self.vocab))
        with pytest.raises(InputError):
            imagine_features(im, self.seq("[MASK]"))

    def test_alignment_reduces_loss(self):
        rng = np.random.default_rng(0)
        im = TextImaginer(len(self.vocab), visual_dim=8, seed=1)
        words = ["cow", "mug", "black", "a"]
        targets = {w: rng.normal(size=8) for w in words}
        texts = [self.seq(w) for w in words * 8]
        losses = align_imaginer(im, texts, np.stack([targets[w] for w in words * 8]), steps=150, batch_size=4)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        pred = imagine_features(im, self.seq("cow")).features[0]
        sims = {w: pred @ t / (np.linalg.norm(pred) * np.linalg.norm(t)) for w, t in targets.items()}
        assert max(sims, key=sims.get) == "cow"

    def test_alignment_matches_target_offset_and_spread(self):
        # cosine similarity ignores a shared offset; calibration has to restore it
        rng = np.random.default_rng(0)
        im = TextImaginer(len(self.vocab), visual_dim=8, seed=1)
        words = ["cow", "mug", "black", "a"]
        offset = np.full(8, 5.0)
        targets = np.stack([offset + rng.normal(size=8) for _ in words * 8])
        texts = [self.seq(w) for w in words * 8]
        align_imaginer(im, texts, targets, steps=50, batch_size=4)
        pred = np.stack([imagine_features(im, t).features[0] for t in texts])
        np.testing.assert_allclose(pred.mean(axis=0), targets.mean(axis=0), atol=1e-10)
        spread = lambda x: np.linalg.norm(x - x.mean(axis=0), axis=1).mean()  # noqa: E731
        assert spread(pred) == pytest.approx(spread(targets), rel=1e-10)

    def test_save_load(self, tmp_path):
        im = TextImaginer(len(self.vocab), visual_dim=8, seed=4)
        loaded = TextImaginer.load(im.save(tmp_path / "im.json"))
        assert imagine_features(loaded, self.seq("cow")) == imagine_features(im, self.seq("cow"))
