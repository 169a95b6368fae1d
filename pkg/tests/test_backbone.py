import numpy as np
import pytest

from dynamite import autodiff as ad
from dynamite.autodiff import Tensor
from dynamite.backbone import ConvBackbone, FeaturePyramid, ImageDimensionError, standardize_image


def make_backbone(strides=(4, 8, 16), width=64, seed=0):
    return ConvBackbone(strides, width, np.random.default_rng(seed))


def rand_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return standardize_image(rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8))


def test_pyramid_shapes_toy_strides():
    bb = make_backbone()
    pyr = bb.extract_pyramid(rand_image(64, 64))
    shapes = [(s, f.shape) for s, f in pyr.levels]
    assert shapes == [(4, (64, 16, 16)), (8, (64, 8, 8)), (16, (64, 4, 4))]


def test_pyramid_shapes_paper_strides():
    bb = make_backbone(strides=(8, 16, 32), width=48)
    pyr = bb.extract_pyramid(rand_image(128, 128))
    shapes = [(s, f.shape) for s, f in pyr.levels]
    assert shapes == [(8, (48, 16, 16)), (16, (48, 8, 8)), (32, (48, 4, 4))]


def test_pyramid_deterministic():
    bb = make_backbone()
    img = rand_image(64, 64, seed=3)
    p1 = bb.extract_pyramid(img)
    p2 = bb.extract_pyramid(img)
    for (s1, f1), (s2, f2) in zip(p1.levels, p2.levels):
        assert s1 == s2
        assert np.array_equal(f1.data, f2.data)


def test_non_divisible_dims_rejected():
    bb = make_backbone()
    with pytest.raises(ImageDimensionError, match="resize"):
        bb.extract_pyramid(rand_image(60, 64))


def test_fuse_output_at_finest_stride():
    bb = make_backbone()
    pyr = bb.extract_pyramid(rand_image(64, 64))
    fused = bb.fuse(pyr)
    assert fused.shape == (64, 16, 16)


def test_fuse_single_level_pyramid():
    bb = make_backbone()
    pyr = bb.extract_pyramid(rand_image(64, 64))
    single = FeaturePyramid([pyr.levels[-1]], bb.width)
    fused = bb.fuse(single)
    assert fused.shape == (64, 4, 4)


def test_fuse_gradient_reaches_every_level():
    bb = make_backbone(strides=(4, 8), width=16)
    rng = np.random.default_rng(1)
    levels = [
        (4, Tensor(rng.standard_normal((16, 8, 8)).astype(np.float32), requires_grad=True)),
        (8, Tensor(rng.standard_normal((16, 4, 4)).astype(np.float32), requires_grad=True)),
    ]
    pyr = FeaturePyramid(levels, 16)
    out = bb.fuse(pyr)
    ad.sum_(ad.mul(out, out)).backward()
    for _, level in levels:
        assert level.grad is not None
        assert np.abs(level.grad).max() > 0


def test_invocation_counters():
    bb = make_backbone()
    img = rand_image(64, 64)
    assert bb.extract_calls == 0
    pyr = bb.extract_pyramid(img)
    bb.fuse(pyr)
    assert bb.extract_calls == 1
    assert bb.fuse_calls == 1


def test_pyramid_strides_must_increase():
    with pytest.raises(ValueError):
        FeaturePyramid([(8, None), (4, None)], 16)


def test_standardize_image_shape_and_stats():
    img = np.random.default_rng(0).integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
    chw = standardize_image(img)
    assert chw.shape == (3, 32, 32)
    assert abs(chw.mean()) < 1e-4
    with pytest.raises(ImageDimensionError):
        standardize_image(np.zeros((32, 32)))
