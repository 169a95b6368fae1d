"""Full segmenter: backbone + fusion + interactive transformer, one parameter
namespace, checkpoint save/load."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .backbone import ConvBackbone, FeaturePyramid, standardize_image
from .transformer import ForwardResult, InteractiveTransformer


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    ffn_mult: int = 2
    encoder_layers: int = 9
    decoder_layers: int = 5
    bg_query_count: int = 9  # the background-query count, not an attention key matrix
    mask_threshold: float = 0.5
    strides: tuple = (4, 8, 16)
    aux_loss: bool = False

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.width < 6:
            raise ValueError("width must be >= 6 for the 3D positional encoding")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.encoder_layers % len(self.strides):
            raise ValueError(
                f"encoder_layers {self.encoder_layers} not divisible by "
                f"{len(self.strides)} pyramid levels"
            )
        if self.bg_query_count < 1:
            raise ValueError("at least one background query is required")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask_threshold must be in (0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class DynamiteModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.backbone = ConvBackbone(self.config.strides, self.config.width, rng)
        self.transformer = InteractiveTransformer(self.config, rng)

    def params(self) -> dict:
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out.update({f"transformer.{k}": v for k, v in self.transformer.params().items()})
        return out

    # -- inference ------------------------------------------------------------

    def prepare_image(self, rgb: np.ndarray):
        return standardize_image(rgb)

    def extract_features(self, image_chw) -> tuple:
        pyramid = self.backbone.extract_pyramid(image_chw)
        fused = self.backbone.fuse(pyramid)
        return pyramid, fused

    def forward(self, pyramid: FeaturePyramid, fused, clicks, collect_aux=None) -> ForwardResult:
        return self.transformer.forward(pyramid, fused, clicks, collect_aux=collect_aux)

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        checkpoint.save(path, self.params(), meta={"config": self.config.to_json()})

    @classmethod
    def load(cls, path) -> "DynamiteModel":
        values, meta = checkpoint.load(path)
        config = ModelConfig.from_json(meta["config"])
        model = cls(config, seed=0)
        params = model.params()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise checkpoint.CheckpointError(
                f"checkpoint does not match model: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}"
            )
        for name, tensor in params.items():
            if tuple(values[name].shape) != tensor.shape:
                raise checkpoint.CheckpointError(
                    f"shape mismatch for {name}: {values[name].shape} vs {tensor.shape}"
                )
            tensor.data = values[name].astype(np.float32)
        return model
