import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from byol import augment as A

seeds = st.integers(0, 2**31 - 1)


def rand_img(seed, C=3, H=12, W=12):
    return np.random.default_rng(seed).uniform(size=(C, H, W))


def test_view_defaults():
    t, tp = A.AugmentationParams.view_one(), A.AugmentationParams.view_two()
    assert (t.blur_prob, t.solarize_prob) == (1.0, 0.0)
    assert (tp.blur_prob, tp.solarize_prob) == (0.1, 0.2)
    for p in (t, tp):
        assert (p.crop_prob, p.flip_prob, p.jitter_prob, p.grayscale_prob) == (1.0, 0.5, 0.8, 0.2)
        assert (p.brightness_max, p.contrast_max, p.saturation_max, p.hue_max) == (0.4, 0.4, 0.2, 0.1)
        assert p.area_range == (0.08, 1.0) and p.blur_sigma_range == (0.1, 2.0)


@pytest.mark.parametrize("kw", [dict(flip_prob=1.5), dict(blur_prob=-0.1), dict(area_range=(0.0, 1.0)),
                                dict(area_range=(0.5, 1.2)), dict(aspect_ratio_range=(2.0, 1.0)),
                                dict(aspect_ratio_range=(-1.0, 1.0)), dict(hue_max=-0.1)])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        A.AugmentationParams(**kw)


def test_without_switches_primitives_off():
    p = A.AugmentationParams.view_two().without("blur", "solarize", "flip")
    assert (p.blur_prob, p.solarize_prob, p.flip_prob) == (0.0, 0.0, 0.0)
    assert p.jitter_prob == 0.8


def test_full_area_crop_is_plain_resize():
    img = rand_img(0, H=8, W=8)
    p = A.AugmentationParams(area_range=(1.0, 1.0), aspect_ratio_range=(1.0, 1.0), target_size=(8, 8))
    out = A.random_resized_crop(img, np.random.default_rng(0), p)
    assert np.allclose(out, img, atol=1e-12)


@given(seed=seeds, H=st.integers(1, 20), W=st.integers(1, 20))
def test_crop_output_shape_is_target(seed, H, W):
    p = A.AugmentationParams(target_size=(7, 5))
    out = A.random_resized_crop(rand_img(seed, H=H, W=W), np.random.default_rng(seed), p)
    assert out.shape == (3, 7, 5)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_crop_area_is_uniform():
    rng = np.random.default_rng(0)
    fracs = [np.prod(A.sample_crop_box(rng, 64, 64)[2:]) / 64**2 for _ in range(10_000)]
    ks = scipy.stats.kstest(fracs, scipy.stats.uniform(0.08, 0.92).cdf).statistic
    assert ks < 0.02


def test_crop_aspect_in_range():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        y0, x0, h, w = A.sample_crop_box(rng, 30, 40)
        assert 3 / 4 - 1e-9 <= w / h <= 4 / 3 + 1e-9
        assert y0 >= 0 and x0 >= 0 and y0 + h <= 30 + 1e-9 and x0 + w <= 40 + 1e-9


def test_crop_fallback_on_extreme_image():
    # a 1 x 50 strip admits no box with ratio in [3/4, 4/3] of most areas
    box = A.sample_crop_box(np.random.default_rng(0), 1, 50, area_range=(0.9, 1.0))
    y0, x0, h, w = box
    assert w / h == pytest.approx(4 / 3)
    assert x0 == pytest.approx((50 - w) / 2)


def test_jitter_zero_intensity_is_identity():
    p = A.AugmentationParams(brightness_max=0, contrast_max=0, saturation_max=0, hue_max=0)
    img = rand_img(2)
    assert np.allclose(A.color_jitter(img, np.random.default_rng(0), p), img, atol=1e-12)


@given(v=st.floats(0, 1), d=st.floats(-0.4, 0.4))
def test_brightness_on_constant_image(v, d):
    out = A.adjust_brightness(np.full((3, 4, 4), v), d)
    assert np.allclose(out, np.clip(v + d, 0, 1))


@given(seed=seeds)
def test_full_hue_cycle_round_trips(seed):
    img = rand_img(seed)
    assert np.abs(A.adjust_hue(img, 1.0) - img).max() < 1e-6
    assert np.abs(A.adjust_hue(img, 0.0) - img).max() < 1e-6


def test_hsv_round_trip_matches_colorsys():
    import colorsys
    img = rand_img(3, H=2, W=2)
    hsv = A.rgb_to_hsv(img)
    for i in range(2):
        for j in range(2):
            assert np.allclose(hsv[:, i, j], colorsys.rgb_to_hsv(*img[:, i, j]))
    assert np.allclose(A.hsv_to_rgb(hsv), img)


def test_grayscale_examples():
    red = np.zeros((3, 1, 1))
    red[0] = 1.0
    assert np.allclose(A.to_grayscale(red), 0.2989)
    assert np.allclose(A.to_grayscale(np.ones((3, 2, 2))), 0.9999)
    assert np.allclose(A.to_grayscale(np.full((3, 2, 2), 0.6)), 0.6 * 0.9999)
    with pytest.raises(ValueError):
        A.to_grayscale(np.ones((1, 2, 2)))


@given(sigma=st.floats(0.1, 2.0), size=st.sampled_from([3, 5, 23]))
def test_gaussian_kernel_normalized(sigma, size):
    assert A.gaussian_kernel(size, sigma).sum() == pytest.approx(1.0, abs=1e-6)


def test_blur_kernel_size_scaling():
    assert A.blur_kernel_size(224) == 23
    assert A.blur_kernel_size(32) == 3 and A.blur_kernel_size(16) == 3
    assert A.blur_kernel_size(96) % 2 == 1


@given(seed=seeds)
def test_small_sigma_blur_is_near_identity(seed):
    img = rand_img(seed, H=32, W=32)
    assert np.abs(A.blur_with_sigma(img, 0.1) - img).max() < 1e-3


@given(v=st.floats(0, 1), sigma=st.floats(0.1, 2.0))
def test_blur_preserves_constant(v, sigma):
    img = np.full((3, 16, 16), v)
    assert np.allclose(A.blur_with_sigma(img, sigma), img)


def test_solarize_examples():
    assert np.allclose(A.solarize(np.array([0.2, 0.7, 0.5])), [0.2, 0.3, 0.5])


def test_pipeline_all_off_is_normalization_only():
    p = A.AugmentationParams(crop_prob=0, flip_prob=0, jitter_prob=0, grayscale_prob=0, blur_prob=0,
                             solarize_prob=0, target_size=(12, 12))
    img = rand_img(4)
    out = A.apply_pipeline(img, p, np.random.default_rng(0), mean=[0.5, 0.4, 0.3], std=[0.2, 0.2, 0.1])
    expect = (img - np.array([0.5, 0.4, 0.3])[:, None, None]) / np.array([0.2, 0.2, 0.1])[:, None, None]
    assert np.allclose(out, expect, atol=1e-12)


def test_pipeline_deterministic_per_seed():
    p = A.AugmentationParams.view_two(target_size=(10, 10))
    img = rand_img(5)
    a = A.apply_pipeline(img, p, np.random.default_rng(9))
    b = A.apply_pipeline(img, p, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_flip_only_mirrors():
    p = A.AugmentationParams(crop_prob=0, flip_prob=1, jitter_prob=0, grayscale_prob=0, blur_prob=0,
                             target_size=(12, 12))
    img = rand_img(6)
    assert np.allclose(A.apply_pipeline(img, p, np.random.default_rng(0)), img[:, :, ::-1], atol=1e-12)


@given(seed=seeds, view=st.integers(0, 1))
def test_values_stay_in_unit_interval(seed, view):
    p = (A.AugmentationParams.view_one if view == 0 else A.AugmentationParams.view_two)(target_size=(9, 9))
    imgs = np.random.default_rng(seed).uniform(size=(6, 3, 12, 12))
    t = [A.sample_transform(np.random.default_rng([seed, i]), p, 12, 12) for i in range(6)]
    out = A.render(imgs, t, p)
    assert out.min() >= 0.0 and out.max() <= 1.0


@given(seed=seeds)
def test_batch_rendering_matches_single_images(seed):
    p = A.AugmentationParams.view_two(target_size=(8, 8))
    imgs = np.random.default_rng(seed).uniform(size=(5, 3, 10, 10))
    ts = [A.sample_transform(np.random.default_rng([seed, i]), p, 10, 10) for i in range(5)]
    batch = A.render(imgs, ts, p)
    for i in range(5):
        assert np.allclose(batch[i], A.render(imgs[i:i + 1], [ts[i]], p)[0], atol=1e-12)


def test_reordering_batch_does_not_change_augmentations():
    p = A.AugmentationParams.view_one(target_size=(8, 8))
    imgs = np.random.default_rng(0).uniform(size=(6, 3, 10, 10))
    idx = np.arange(6)
    stream = A.RngStream(3)
    a = A.augment_batch(imgs, idx, p, stream, step=4, view=1)
    perm = np.array([5, 2, 0, 4, 1, 3])
    b = A.augment_batch(imgs[perm], idx[perm], p, stream, step=4, view=1)
    assert np.array_equal(a[perm], b)


def test_eval_batch_center_crop_shape():
    out = A.eval_batch(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)), (16, 16))
    assert out.shape == (2, 3, 16, 16)
