"""
Convolutional feature extractor and precomputed feature files.

The backbone is a stack of conv+ReLU stages whose final activation is
flattened to ``[batch, positions, channels]``. Its first convolution is
exposed as a hook: Conv1S adds a depth branch to the stage-1
pre-activation, Conv1E widens the stage-1 kernel with a depth slice.
"""

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from autograd import functional as F
from autograd.functional import conv_output_extent
from autograd.nn import Conv2d, Module, ModuleList, Parameter
from autograd.tensor import ShapeError, Tensor

from .errors import ConfigError, DataError

logger = structlog.get_logger(__name__)

FEATURE_MAGIC = b"FCF1\n"
SOURCES = ("backbone", "precomputed")


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1


DEFAULT_STAGES = (StageConfig(16), StageConfig(32), StageConfig(64))


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stages: Tuple[StageConfig, ...] = DEFAULT_STAGES
    frozen_through: Optional[int] = None  # None freezes every layer

    def __post_init__(self):
        if self.frozen_through is None:
            self.frozen_through = len(self.stages)
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.stages)

    def validate(self) -> None:
        if self.in_channels not in (3, 4):
            raise ConfigError(f"backbone in_channels must be 3 or 4, got {self.in_channels}")
        if len(self.stages) < 2:
            raise ConfigError(f"backbone needs at least 2 stages, got {len(self.stages)}")
        if not 0 <= self.frozen_through <= self.num_layers:
            raise ConfigError(f"frozen_through must lie in [0, {self.num_layers}], got {self.frozen_through}")

    def stage_extents(self, image_size: int) -> List[int]:
        """Spatial extent after each stage for a square input."""
        extents, extent = [], image_size
        for stage in self.stages:
            extent = conv_output_extent(extent, stage.kernel, stage.stride, stage.padding)
            extents.append(extent)
        return extents

    def output_positions(self, image_size: int) -> int:
        return self.stage_extents(image_size)[-1] ** 2

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels


@dataclass
class FeatureMap:
    data: Tensor
    source: str = "backbone"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be [batch, positions, channels], got {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def positions(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        convs = []
        in_channels = 3
        for stage in config.stages:
            convs.append(Conv2d(in_channels, stage.out_channels, stage.kernel, rng, stage.stride, stage.padding))
            in_channels = stage.out_channels
        self.stages = ModuleList(convs)
        self.depth_slice: Optional[Parameter] = None
        if config.in_channels == 4:
            self.augment_first_conv()
        self.freeze(config.frozen_through)

    @property
    def in_channels(self) -> int:
        return 4 if self.depth_slice is not None else 3

    def freeze(self, frozen_through: int) -> None:
        """Freeze stages 1..frozen_through; the Conv1E depth slice stays trainable."""
        if not 0 <= frozen_through <= len(self.stages):
            raise ConfigError(f"frozen_through must lie in [0, {len(self.stages)}], got {frozen_through}")
        for index, stage in enumerate(self.stages):
            stage.set_trainable(index >= frozen_through)
        self.config = replace(self.config, frozen_through=frozen_through)
        logger.debug("backbone freeze applied", frozen_through=frozen_through, layers=len(self.stages))

    def augment_first_conv(self) -> None:
        from .pixel_fusion import conv1e_depth_slice

        first = self.stages[0]
        self.depth_slice = Parameter(conv1e_depth_slice(first.weight.data))
        self.config = replace(self.config, in_channels=4)

    def first_conv_weight(self) -> Tensor:
        first = self.stages[0]
        if self.depth_slice is None:
            return first.weight
        return F.concat([first.weight, self.depth_slice], axis=2)

    def first_conv_forward(self, image: Tensor) -> Tensor:
        """Stage-1 pre-activation (before ReLU)."""
        if image.ndim != 4 or image.shape[-1] != self.in_channels:
            raise ShapeError(f"backbone expects [B,H,W,{self.in_channels}] input, got {image.shape}")
        first = self.stages[0]
        return F.conv2d(image, self.first_conv_weight(), first.bias, stride=first.stride, padding=first.padding)

    def forward_from_first(self, pre_activation: Tensor) -> FeatureMap:
        x = F.relu(pre_activation)
        for stage in list(self.stages)[1:]:
            x = F.relu(stage(x))
        batch, height, width, channels = x.shape
        return FeatureMap(F.reshape(x, (batch, height * width, channels)), source="backbone")

    def forward(self, image: Tensor) -> FeatureMap:
        return self.forward_from_first(self.first_conv_forward(image))

    def layer_of(self, parameter_name: str) -> Optional[int]:
        """1-based backbone layer owning ``parameter_name`` (``stages.<i>.*``)."""
        parts = parameter_name.split(".")
        if "stages" in parts:
            return int(parts[parts.index("stages") + 1]) + 1
        return None


def backbone_forward(image: Tensor, backbone: Backbone) -> FeatureMap:
    return backbone(image)


def write_features(path: Union[str, os.PathLike], values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 3:
        raise DataError(f"feature arrays must be [batch, positions, channels], got {values.shape}")
    header = " ".join(str(n) for n in values.shape).encode("ascii") + b"\n"
    Path(path).write_bytes(FEATURE_MAGIC + header + values.astype("<f4").tobytes())


def read_features(path: Union[str, os.PathLike]) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if not raw.startswith(FEATURE_MAGIC):
        raise DataError(f"{path}: missing FCF1 magic")
    end = raw.find(b"\n", len(FEATURE_MAGIC))
    if end < 0:
        raise DataError(f"{path}: missing dimension header")
    try:
        dims = tuple(int(token) for token in raw[len(FEATURE_MAGIC) : end].split())
    except ValueError:
        raise DataError(f"{path}: malformed dimension header") from None
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"{path}: header must hold three positive extents, got {dims}")
    payload = raw[end + 1 :]
    expected = int(np.prod(dims)) * 4
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise DataError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def load_precomputed_features(
    path: Union[str, os.PathLike], expected_dims: Sequence[Optional[int]] = (None, None, None)
) -> FeatureMap:
    """Read an FCF1 file; ``None`` entries of ``expected_dims`` accept any extent."""
    values = read_features(path)
    for axis, (actual, expected) in enumerate(zip(values.shape, expected_dims)):
        if expected is not None and actual != expected:
            raise DataError(f"{path}: axis {axis} holds {actual} entries, expected {expected}")
    return FeatureMap(Tensor(values), source="precomputed")
