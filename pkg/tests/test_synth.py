from collections import Counter

import numpy as np
import pytest

from rddlab import synth
from rddlab.synth import SceneConfig, Shape


def test_generate_is_deterministic():
    cfg = SceneConfig(seed=3)
    a, b = synth.generate(cfg, "train", 17), synth.generate(cfg, "train", 17)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_splits_and_indices_differ():
    cfg = SceneConfig()
    assert not np.array_equal(synth.generate(cfg, "train", 0)[0], synth.generate(cfg, "val", 0)[0])
    assert not np.array_equal(synth.generate(cfg, "train", 0)[0], synth.generate(cfg, "train", 1)[0])


def test_no_hidden_global_state():
    cfg = SceneConfig()
    first = synth.generate(cfg, "val", 5)[0]
    np.random.seed(123)
    synth.generate(cfg, "val", 9)
    assert synth.generate(cfg, "val", 5)[0].tobytes() == first.tobytes()


def test_value_ranges():
    cfg = SceneConfig()
    img, noisy, clean = synth.generate(cfg, "train", 2)
    assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1
    assert noisy.max() < cfg.num_classes and clean.max() < cfg.num_classes


def test_zero_noise_keeps_labels():
    img, noisy, clean = synth.generate(SceneConfig(noise_rate=0.0), "train", 4)
    np.testing.assert_array_equal(noisy, clean)


def test_full_frame_rectangle():
    cfg = SceneConfig(num_classes=2, image_size=16)
    shape = Shape("rectangle", 1, cy=8, cx=8, ry=20, rx=20)
    _, labels = synth.render_scene([shape], cfg, np.random.default_rng(0))
    assert Counter(labels.ravel().tolist()) == {1: 256}


def test_blur_touches_image_not_labels():
    cfg = SceneConfig(num_classes=3, image_size=16, texture_noise=0.0, boundary_blur=1)
    shape = Shape("rectangle", 1, cy=8, cx=8, ry=4, rx=4)
    img, labels = synth.render_scene([shape], cfg, np.random.default_rng(0))
    assert set(np.unique(labels)) == {0, 1}
    # a boundary pixel mixes object and background colour
    inside = img[:, 8, 8]
    edge = img[:, 8, 4]
    assert not np.allclose(inside, edge)


class TestLabelNoise:
    def test_zero_rate_identity(self):
        labels = np.random.default_rng(0).integers(0, 5, (8, 8))
        np.testing.assert_array_equal(synth.inject_label_noise(labels, 0.0, 1, 5), labels)

    def test_rate_must_be_below_half(self):
        with pytest.raises(ValueError):
            synth.inject_label_noise(np.zeros((2, 2), int), 0.5, 0, 5)

    def test_flip_fraction_and_disjointness(self):
        labels = np.random.default_rng(1).integers(0, 5, (1000, 1000))
        noisy = synth.inject_label_noise(labels, 0.05, 42, 5)
        flipped = noisy != labels
        # binomial sd at n = 1e6 is ~2.2e-4, so 0.002 is a ~9 sigma band
        assert abs(flipped.mean() - 0.05) <= 0.002
        assert noisy.min() >= 0 and noisy.max() < 5

    def test_wrong_class_uniform(self):
        labels = np.zeros((400, 400), dtype=int)
        noisy = synth.inject_label_noise(labels, 0.4, 7, 5)
        counts = np.bincount(noisy[noisy != 0], minlength=5)[1:]
        assert counts.min() / counts.max() > 0.95

    def test_deterministic(self):
        labels = np.zeros((20, 20), dtype=int)
        a = synth.inject_label_noise(labels, 0.2, 3, 4)
        b = synth.inject_label_noise(labels, 0.2, 3, 4)
        np.testing.assert_array_equal(a, b)


class TestDataset:
    def test_val_order_stable(self):
        cfg = SceneConfig(image_size=16)
        a = [b.indices.tolist() for b in synth.dataset(cfg, "val", 10, batch_size=4)]
        b = [b.indices.tolist() for b in synth.dataset(cfg, "val", 10, batch_size=4)]
        assert a == b == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]

    def test_train_epochs_reshuffle(self):
        cfg = SceneConfig(image_size=16)
        e1 = np.concatenate([b.indices for b in synth.dataset(cfg, "train", 12, 4, epoch=1)])
        e2 = np.concatenate([b.indices for b in synth.dataset(cfg, "train", 12, 4, epoch=2)])
        assert sorted(e1) == sorted(e2) == list(range(12))
        assert e1.tolist() != e2.tolist()

    def test_partial_batch(self):
        batches = list(synth.dataset(SceneConfig(image_size=16), "train", 1, batch_size=4))
        assert len(batches) == 1 and batches[0].images.shape[0] == 1

    def test_batches_match_generate(self):
        cfg = SceneConfig(image_size=16)
        b = next(synth.dataset(cfg, "train", 5, batch_size=5))
        for k, idx in enumerate(b.indices):
            img, noisy, clean = synth.generate(cfg, "train", int(idx))
            np.testing.assert_array_equal(b.images[k], img)
            np.testing.assert_array_equal(b.labels[k], noisy)

    def test_hflip(self):
        cfg = SceneConfig(image_size=16, hflip=True)
        b = next(synth.dataset(cfg, "train", 8, batch_size=8))
        flipped = 0
        for k, idx in enumerate(b.indices):
            img, *_ = synth.generate(cfg, "train", int(idx))
            if not np.array_equal(b.images[k], img):
                np.testing.assert_array_equal(b.images[k], img[..., ::-1])
                flipped += 1
        assert 0 < flipped < 8


def test_class_coverage():
    cfg = SceneConfig()
    batch = synth.materialize(cfg, "train", 500)
    frac = np.bincount(batch.clean_labels.ravel(), minlength=cfg.num_classes) / batch.clean_labels.size
    assert frac.min() >= 0.01, frac


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(noise_rate=0.5), dict(shapes_min=4, shapes_max=2)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        synth.generate(SceneConfig(**kw), "train", 0)


def test_invalid_split():
    with pytest.raises(ValueError):
        synth.generate(SceneConfig(), "test", 0)


def test_dump(tmp_path):
    from PIL import Image

    synth.dump_dataset(SceneConfig(image_size=16), "val", 2, tmp_path)
    img = Image.open(tmp_path / "val_00001.png")
    lab = np.asarray(Image.open(tmp_path / "val_00001_label.pgm"))
    assert img.size == (16, 16) and img.mode == "RGB"
    np.testing.assert_array_equal(lab, synth.generate(SceneConfig(image_size=16), "val", 1)[1])
