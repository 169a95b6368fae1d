"""Convolutional multi-scale feature extractor and top-down feature fusion.

A 4-stage strided convnet (widths 32/64/96/128, channel layernorm, GELU)
produces the pyramid; fusion walks coarse to fine with upsample + lateral
concat + 3x3 merge, yielding one map at the finest stride. Both run exactly
once per image in a session; everything downstream reuses the cached maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STAGE_WIDTHS = (32, 64, 96, 128)


class ImageDimensionError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Ordered (stride, features[d, H/s, W/s]) levels, strides increasing."""

    levels: list
    width: int

    def __post_init__(self):
        strides = [s for s, _ in self.levels]
        if strides != sorted(set(strides)):
            raise ValueError(f"pyramid strides must strictly increase, got {strides}")

    @property
    def strides(self):
        return [s for s, _ in self.levels]

    def features(self, stride: int) -> Tensor:
        for s, f in self.levels:
            if s == stride:
                return f
        raise KeyError(f"no pyramid level at stride {stride}")


def _conv_init(rng, co, ci, kh, kw):
    fan_in = ci * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(co, ci, kh, kw)).astype(np.float32)


class ConvBackbone:
    """Feature pyramid network over strides that must be powers of two."""

    def __init__(self, strides, width: int, rng):
        for s in strides:
            if s < 2 or (s & (s - 1)) != 0:
                raise ValueError(f"strides must be powers of two >= 2, got {strides}")
        self.strides = tuple(sorted(strides))
        self.width = width
        self.n_stages = int(np.log2(max(self.strides)))
        self._params: dict = {}
        p = self._param

        ci = 3
        self._stage_widths = []
        for i in range(self.n_stages):
            co = STAGE_WIDTHS[min(i, len(STAGE_WIDTHS) - 1)]
            p(f"stage{i}.down.w", _conv_init(rng, co, ci, 3, 3))
            p(f"stage{i}.down.b", np.zeros(co, dtype=np.float32))
            p(f"stage{i}.ln1.g", np.ones(co, dtype=np.float32))
            p(f"stage{i}.ln1.b", np.zeros(co, dtype=np.float32))
            p(f"stage{i}.conv.w", _conv_init(rng, co, co, 3, 3))
            p(f"stage{i}.conv.b", np.zeros(co, dtype=np.float32))
            p(f"stage{i}.ln2.g", np.ones(co, dtype=np.float32))
            p(f"stage{i}.ln2.b", np.zeros(co, dtype=np.float32))
            self._stage_widths.append(co)
            ci = co

        for s in self.strides:
            ci = self._stage_widths[int(np.log2(s)) - 1]
            p(f"proj{s}.w", _conv_init(rng, width, ci, 1, 1))
            p(f"proj{s}.b", np.zeros(width, dtype=np.float32))

        # fusion: lateral 1x1 per finer level, 3x3 merge per step
        for s in self.strides[:-1]:
            p(f"fuse{s}.lat.w", _conv_init(rng, width, width, 1, 1))
            p(f"fuse{s}.lat.b", np.zeros(width, dtype=np.float32))
            p(f"fuse{s}.merge.w", _conv_init(rng, width, 2 * width, 3, 3))
            p(f"fuse{s}.merge.b", np.zeros(width, dtype=np.float32))
        p("fuse_top.w", _conv_init(rng, width, width, 3, 3))
        p("fuse_top.b", np.zeros(width, dtype=np.float32))

        self.extract_calls = 0
        self.fuse_calls = 0

    def _param(self, name, value):
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def params(self) -> dict:
        return dict(self._params)

    def _p(self, name) -> Tensor:
        return self._params[name]

    def _stage(self, x, i):
        x = ad.conv2d(x, self._p(f"stage{i}.down.w"), self._p(f"stage{i}.down.b"), stride=2, padding=1)
        x = ad.layernorm(x, self._p(f"stage{i}.ln1.g"), self._p(f"stage{i}.ln1.b"), axis=0)
        x = ad.gelu(x)
        x = ad.conv2d(x, self._p(f"stage{i}.conv.w"), self._p(f"stage{i}.conv.b"), stride=1, padding=1)
        x = ad.layernorm(x, self._p(f"stage{i}.ln2.g"), self._p(f"stage{i}.ln2.b"), axis=0)
        return ad.gelu(x)

    def extract_pyramid(self, image) -> FeaturePyramid:
        """image: Tensor or array [3, H, W], already standardized."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        _, h, w = image.shape
        smax = max(self.strides)
        if h % smax or w % smax:
            raise ImageDimensionError(
                f"image {h}x{w} not divisible by the largest stride {smax}; resize required"
            )
        self.extract_calls += 1
        levels = []
        x = image
        for i in range(self.n_stages):
            x = self._stage(x, i)
            stride = 2 ** (i + 1)
            if stride in self.strides:
                f = ad.conv2d(x, self._p(f"proj{stride}.w"), self._p(f"proj{stride}.b"))
                levels.append((stride, f))
        return FeaturePyramid(levels, self.width)

    def fuse(self, pyramid: FeaturePyramid) -> Tensor:
        """Single map at the finest pyramid stride."""
        self.fuse_calls += 1
        levels = list(reversed(pyramid.levels))  # coarse to fine
        x = levels[0][1]
        for stride, finer in levels[1:]:
            up = ad.bilinear_upsample(x, 2)
            lat = ad.conv2d(finer, self._p(f"fuse{stride}.lat.w"), self._p(f"fuse{stride}.lat.b"))
            x = ad.concat([up, lat], axis=0)
            x = ad.conv2d(x, self._p(f"fuse{stride}.merge.w"), self._p(f"fuse{stride}.merge.b"), padding=1)
            x = ad.gelu(x)
        return ad.conv2d(x, self._p("fuse_top.w"), self._p("fuse_top.b"), padding=1)


def standardize_image(rgb: np.ndarray) -> np.ndarray:
    """uint8 or float [H, W, 3] -> standardized float32 [3, H, W]."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageDimensionError(f"expected [H, W, 3] RGB input, got shape {arr.shape}")
    arr = arr.astype(np.float32)
    if arr.max() > 1.0:
        arr = arr / 255.0
    chw = arr.transpose(2, 0, 1)
    mu = chw.mean(axis=(1, 2), keepdims=True)
    sd = chw.std(axis=(1, 2), keepdims=True) + 1e-6
    return (chw - mu) / sd
