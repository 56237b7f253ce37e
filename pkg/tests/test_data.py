import numpy as np
import pytest

from byol.data import ImageBatch, SynthSpec, load_cifar10, synth_clusters, write_cifar10
from byol.evaluate import linear_probe


def cifar_like(n, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.integers(0, 256, size=(n, 3, 32, 32)) / 255.0, rng.integers(0, 10, size=n))


def test_cifar_round_trip(tmp_path):
    batch = cifar_like(10_000)
    path = tmp_path / "data_batch_1.bin"
    write_cifar10(path, batch)
    assert path.stat().st_size == 10_000 * 3073
    back = load_cifar10(path)
    assert back.images.shape == (10_000, 3, 32, 32)
    assert back.labels.min() >= 0 and back.labels.max() <= 9
    assert np.array_equal(back.labels, batch.labels)
    assert np.allclose(back.images, batch.images)


def test_cifar_plane_order(tmp_path):
    rec = np.zeros(3073, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 255  # first red pixel
    rec[1 + 1024 + 1] = 255  # second green pixel
    path = tmp_path / "one.bin"
    rec.tofile(path)
    b = load_cifar10(path)
    assert b.labels[0] == 7 and b.images[0, 0, 0, 0] == 1.0 and b.images[0, 1, 0, 1] == 1.0
    assert b.images.sum() == 2.0


def test_cifar_truncated_reports_offset(tmp_path):
    path = tmp_path / "bad.bin"
    np.zeros(3073 * 2 + 100, dtype=np.uint8).tofile(path)
    with pytest.raises(ValueError, match="offset 6146"):
        load_cifar10(path)


def test_cifar_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(load_cifar10(path)) == 0


def test_cifar_directory(tmp_path):
    write_cifar10(tmp_path / "a.bin", cifar_like(3, 0))
    write_cifar10(tmp_path / "b.bin", cifar_like(4, 1))
    assert len(load_cifar10(tmp_path)) == 7


def test_synth_deterministic_and_shapes():
    a = synth_clusters(4, 10, 16, seed=3)
    b = synth_clusters(4, 10, 16, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (40, 3, 16, 16)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [10] * 4
    assert not np.array_equal(a.images, synth_clusters(4, 10, 16, seed=4).images)


def test_synth_empty_and_errors():
    assert len(synth_clusters(4, 0)) == 0
    with pytest.raises(ValueError):
        synth_clusters(0, 5)


def test_raw_pixel_probe_separates_well_separated_classes():
    train = synth_clusters(4, 200, 16, seed=0)
    test = synth_clusters(4, 100, 16, seed=1)
    flat = lambda b: b.images.reshape(len(b), -1)  # noqa: E731
    res = linear_probe(flat(train), train.labels, test_features=flat(test), test_labels=test.labels)
    assert res.top1 > 0.9


def test_rows_layout_is_flip_symmetric():
    spec = SynthSpec(layout="rows", position_jitter=0.0, hue_noise=0.0, background_noise=0.0,
                     radius_range=(0.2, 0.2))
    imgs = synth_clusters(4, 1, 16, 0, spec).images
    mask = lambda im: im.std(axis=0)  # noqa: E731
    for im in imgs:
        assert np.abs(im.mean(axis=0)[:, :8].sum() - im.mean(axis=0)[:, 8:].sum()) < 5.0


def test_channel_stats():
    b = ImageBatch(np.stack([np.zeros((3, 2, 2)), np.ones((3, 2, 2))]), np.array([0, 1]))
    m, s = b.channel_stats()
    assert m == [0.5] * 3 and s == [0.5] * 3
