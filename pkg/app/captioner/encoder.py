"""
Transformer-based encoder block.

Layer order is fixed: normalization, dense+ReLU, dropout, multi-head
self-attention, then layer normalization over the self-attention input plus
its output. There is no positional encoding, so the block is
permutation-equivariant over positions.
"""

import contextlib
from dataclasses import dataclass
from typing import Iterator, List, Optional, Union

import numpy as np

from autograd import functional as F
from autograd.nn import Dropout, LayerNorm, Linear, Module
from autograd.tensor import ShapeError, Tensor

from .attention import MultiHeadAttention
from .backbone import FeatureMap
from .errors import ConfigError

LAYER_ORDER = ("normalization", "dense_relu", "dropout", "self_attention", "residual_layer_norm")


@dataclass
class EncoderConfig:
    d_model: int = 128
    heads: int = 4
    dropout: float = 0.1
    stack_count: int = 1

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"encoder d_model {self.d_model} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"encoder dropout must lie in [0, 1), got {self.dropout}")
        if self.stack_count < 1:
            raise ConfigError(f"encoder stack_count must be >= 1, got {self.stack_count}")


def _data(features: Union[FeatureMap, Tensor]) -> Tensor:
    return features.data if isinstance(features, FeatureMap) else features


class _Traced(Module):
    """Optional recording of the layer sequence a forward pass runs through."""

    _trace: Optional[List[str]] = None

    @contextlib.contextmanager
    def recording(self) -> Iterator[List[str]]:
        self._trace = []
        try:
            yield self._trace
        finally:
            self._trace = None

    def _mark(self, layer: str) -> None:
        if self._trace is not None:
            self._trace.append(layer)


class EncoderBlock(_Traced):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_dim: Optional[int] = None):
        super().__init__()
        d = cfg.d_model
        self.d_model = d
        self.projection = Linear(in_dim, d, rng) if in_dim is not None and in_dim != d else None
        self.norm = LayerNorm(d)
        self.dense = Linear(d, d, rng)
        self.dropout = Dropout(cfg.dropout)
        self.attention = MultiHeadAttention(d, cfg.heads, rng)
        self.out_norm = LayerNorm(d)

    def forward(self, features: Union[FeatureMap, Tensor]) -> FeatureMap:
        x = _data(features)
        if self.projection is not None:
            x = self.projection(x)
        elif x.shape[-1] != self.d_model:
            raise ShapeError(f"encoder expects width {self.d_model}, got {x.shape[-1]}")
        h = self.norm(x)
        self._mark("normalization")
        h = F.relu(self.dense(h))
        self._mark("dense_relu")
        h = self.dropout(h)
        self._mark("dropout")
        attended = self.attention(h, h)
        self._mark("self_attention")
        out = self.out_norm(F.add(h, attended))
        self._mark("residual_layer_norm")
        return FeatureMap(out)


class StreamBranch(Module):
    """Per-stream front half of the middle-fusion block: norm, dense+ReLU, dropout."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_dim: Optional[int] = None):
        super().__init__()
        d = cfg.d_model
        self.projection = Linear(in_dim, d, rng) if in_dim is not None and in_dim != d else None
        self.norm = LayerNorm(d)
        self.dense = Linear(d, d, rng)
        self.dropout = Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        if self.projection is not None:
            x = self.projection(x)
        return self.dropout(F.relu(self.dense(self.norm(x))))


class MiddleFusionEncoder(_Traced):
    """
    Dual-input encoder block. ``fusion`` is a two-input layer
    (``ConcatFusion`` or ``CrossAttentionFusion``) applied between the
    per-stream branches and the shared self-attention.
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        fusion: Module,
        rng: np.random.Generator,
        in_dims: tuple = (None, None),
    ):
        super().__init__()
        d = cfg.d_model
        self.d_model = d
        self.branch_a = StreamBranch(cfg, rng, in_dims[0])
        self.branch_b = StreamBranch(cfg, rng, in_dims[1])
        self.fusion = fusion
        self.attention = MultiHeadAttention(d, cfg.heads, rng)
        self.out_norm = LayerNorm(d)

    def forward(self, a: Union[FeatureMap, Tensor], b: Union[FeatureMap, Tensor]) -> FeatureMap:
        ha = self.branch_a(_data(a))
        hb = self.branch_b(_data(b))
        self._mark("stream_branches")
        fused = _data(self.fusion(ha, hb))
        self._mark("fusion")
        attended = self.attention(fused, fused)
        self._mark("self_attention")
        out = self.out_norm(F.add(fused, attended))
        self._mark("residual_layer_norm")
        return FeatureMap(out)


def encoder_forward(features: FeatureMap, encoder: EncoderBlock) -> FeatureMap:
    return encoder(features)


def middle_fusion_encoder_forward(a: FeatureMap, b: FeatureMap, encoder: MiddleFusionEncoder) -> FeatureMap:
    return encoder(a, b)
