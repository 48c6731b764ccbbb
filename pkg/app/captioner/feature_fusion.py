"""
Feature-level and hybrid fusion.

A ``FusionSpec`` names one architecture point (family, method, position,
input modalities). ``place_fusion`` turns a validated spec into a
``FusionGraph``: the pixel stage, backbone, per-stream projections to
``d_model``, encoder blocks and the fusion layer wired for early, middle or
late placement.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from autograd import functional as F
from autograd.nn import Conv2d, Linear, Module, ModuleList
from autograd.tensor import ShapeError, Tensor

from .attention import MultiHeadAttention
from .backbone import Backbone, BackboneConfig, FeatureMap
from .encoder import EncoderBlock, EncoderConfig, MiddleFusionEncoder
from .errors import ConfigError
from .pixel_fusion import DmfLayer, RgbdStack, make_hsd, make_rgbd_image

logger = structlog.get_logger(__name__)

FAMILIES = ("pixel", "feature", "hybrid")
METHODS = ("dmf", "conv1e", "hsd", "rgbd", "concat", "cross_attention", "conv1s", "none")
POSITIONS = ("early", "middle", "late", "n/a")
MODALITIES = ("RGB", "Depth", "RGBD", "HSD", "MAE_CD")
PIXEL_METHODS = ("dmf", "conv1e", "hsd", "rgbd", "none")
FUSION_LAYERS = ("concat", "cross_attention")
IMAGE_STREAMS = ("RGB", "Depth", "RGBD", "HSD")
DEPTH_SOURCES = ("Depth", "RGBD", "HSD")


def parse_modalities(value: Union[str, Sequence[str]]) -> Tuple[str, ...]:
    """Accepts ``"RGB+Depth"``, ``"RGB,Depth"`` or a sequence; returns canonical order."""
    if isinstance(value, str):
        items = [v.strip() for v in value.replace("+", ",").split(",") if v.strip()]
    else:
        items = list(value)
    lookup = {m.lower(): m for m in MODALITIES}
    out = []
    for item in items:
        key = item.lower()
        if key not in lookup:
            raise ConfigError(f"fusion.inputs: unknown modality {item!r}, expected a subset of {', '.join(MODALITIES)}")
        if lookup[key] not in out:
            out.append(lookup[key])
    return tuple(m for m in MODALITIES if m in out)


@dataclass(frozen=True)
class FusionSpec:
    family: str = "feature"
    method: str = "none"
    position: str = "n/a"
    inputs: Tuple[str, ...] = ("RGB",)
    query: str = "rgb"

    def validate(self) -> "FusionSpec":
        def reject(rule: str) -> None:
            raise ConfigError(f"invalid fusion spec {self.label}: {rule}")

        if self.family not in FAMILIES:
            reject(f"family must be one of {', '.join(FAMILIES)}")
        if self.method not in METHODS:
            reject(f"method must be one of {', '.join(METHODS)}")
        if self.position not in POSITIONS:
            reject(f"position must be one of {', '.join(POSITIONS)}")
        if self.query not in ("rgb", "other"):
            reject("query must be 'rgb' or 'other'")
        inputs = set(self.inputs)
        if not inputs or not inputs <= set(MODALITIES) or len(inputs) != len(self.inputs):
            reject(f"inputs must be a non-empty subset of {', '.join(MODALITIES)}")

        if self.family == "pixel":
            if self.position != "n/a":
                reject("pixel family forbids a fusion position")
            if self.method not in PIXEL_METHODS:
                reject(f"pixel family accepts methods {', '.join(PIXEL_METHODS)}")
        elif self.family == "feature" and self.method not in ("concat", "cross_attention", "conv1s", "none"):
            reject("feature family accepts methods concat, cross_attention, conv1s, none")
        elif self.family == "hybrid" and self.method not in FUSION_LAYERS:
            reject("hybrid family combines streams with concat or cross_attention")

        if self.method in FUSION_LAYERS:
            if self.position not in ("early", "middle", "late"):
                reject(f"{self.method} requires position early, middle or late")
            if inputs == {"RGB", "Depth", "MAE_CD"}:
                if self.family != "hybrid":
                    reject("RGB+Depth+MAE_CD composes Conv1S with a second fusion and belongs to the hybrid family")
            elif len(inputs) != 2 or "RGB" not in inputs:
                reject("two-stream fusion needs RGB plus exactly one of Depth, RGBD, HSD, MAE_CD")
            if self.family == "feature" and inputs & {"RGBD", "HSD"}:
                reject("fusing a pixel-fused RGBD/HSD stream with features is hybrid fusion")
            if self.family == "hybrid" and inputs == {"RGB", "Depth"}:
                reject("hybrid fusion needs a pixel-fused (RGBD/HSD) or precomputed (MAE_CD) stream")
        elif self.position != "n/a":
            reject(f"method {self.method} takes no fusion position")

        if self.method in ("dmf", "conv1e", "conv1s") and inputs != {"RGB", "Depth"}:
            reject(f"{self.method} needs inputs RGB+Depth")
        if self.method == "hsd" and inputs != {"HSD"}:
            reject("hsd needs inputs HSD")
        if self.method == "rgbd" and inputs != {"RGBD"}:
            reject("rgbd needs inputs RGBD")
        if self.method == "none" and len(inputs) != 1:
            reject("method none takes exactly one input stream")
        return self

    @property
    def label(self) -> str:
        return f"{self.family}/{self.method}/{self.position}/{'+'.join(self.inputs)}"

    @property
    def conv1s(self) -> bool:
        return self.method == "conv1s" or set(self.inputs) == {"RGB", "Depth", "MAE_CD"}

    @property
    def streams(self) -> Tuple[str, ...]:
        """Streams reaching the encoder stage, primary (RGB) first."""
        if self.method in ("dmf", "conv1e", "conv1s"):
            return ("RGB",)
        if self.method in ("hsd", "rgbd", "none"):
            return self.inputs
        if self.conv1s:
            return ("RGB", "MAE_CD")
        return ("RGB",) + tuple(m for m in self.inputs if m != "RGB")

    @property
    def needs_rgb(self) -> bool:
        return any(m in IMAGE_STREAMS and m != "Depth" for m in self.inputs) or "RGB" in self.inputs

    @property
    def needs_depth(self) -> bool:
        return bool(set(self.inputs) & set(DEPTH_SOURCES))

    @property
    def needs_features(self) -> bool:
        return "MAE_CD" in self.inputs


@dataclass
class StreamInputs:
    rgb: Optional[np.ndarray] = None  # [B, H, W, 3]
    depth: Optional[np.ndarray] = None  # [B, H, W, 1]
    features: Optional[np.ndarray] = None  # [B, P, C]

    @property
    def batch(self) -> int:
        for values in (self.rgb, self.depth, self.features):
            if values is not None:
                return values.shape[0]
        return 0

    def stack(self) -> RgbdStack:
        if self.rgb is None or self.depth is None:
            raise ConfigError("this fusion needs both RGB and depth inputs")
        return RgbdStack(self.rgb, self.depth)


class ConcatFusion(Module):
    """Channel concatenation to 2d followed by a trainable projection back to d."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.d_model = d_model
        self.projection = Linear(2 * d_model, d_model, rng)

    def forward(self, a: Union[FeatureMap, Tensor], b: Union[FeatureMap, Tensor]) -> FeatureMap:
        a, b = _data(a), _data(b)
        if a.shape[:2] != b.shape[:2]:
            raise ShapeError(f"concat fusion needs equal batch and position counts, got {a.shape[:2]} and {b.shape[:2]}")
        return FeatureMap(self.projection(F.concat([a, b], axis=-1)))


class CrossAttentionFusion(Module):
    """Queries from one stream, keys/values from the other, residual from the query stream."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ConfigError(f"cross-attention width {d_model} is not divisible by {heads} heads")
        self.attention = MultiHeadAttention(d_model, heads, rng)

    def forward(self, query_src: Union[FeatureMap, Tensor], kv_src: Union[FeatureMap, Tensor]) -> FeatureMap:
        query = _data(query_src)
        return FeatureMap(F.add(query, self.attention(query, _data(kv_src))))

    @property
    def weights(self) -> Optional[np.ndarray]:
        return self.attention.last_weights


def _data(features: Union[FeatureMap, Tensor]) -> Tensor:
    return features.data if isinstance(features, FeatureMap) else features


def concat_fuse(a: FeatureMap, b: FeatureMap, layer: ConcatFusion) -> FeatureMap:
    return layer(a, b)


def cross_attention_fuse(query_src: FeatureMap, kv_src: FeatureMap, layer: CrossAttentionFusion) -> FeatureMap:
    return layer(query_src, kv_src)


class Conv1sBranch(Module):
    """Depth convolution shaped like the backbone's first stage."""

    def __init__(self, backbone_cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        first = backbone_cfg.stages[0]
        self.conv = Conv2d(1, first.out_channels, first.kernel, rng, first.stride, first.padding)

    def forward(self, depth: Tensor) -> Tensor:
        return self.conv(depth)


def conv1s_inject(depth: Tensor, image: Tensor, backbone: Backbone, branch: Conv1sBranch) -> FeatureMap:
    """Add the depth branch to the stage-1 pre-activation, then run the remaining stages."""
    pre = backbone.first_conv_forward(image)
    side = branch(depth)
    if side.shape != pre.shape:
        raise ShapeError(f"Conv1S branch output {side.shape} does not match first-conv output {pre.shape}")
    return backbone.forward_from_first(F.add(pre, side))


class FusionGraph(Module):
    def __init__(
        self,
        spec: FusionSpec,
        backbone_cfg: BackboneConfig,
        encoder_cfg: EncoderConfig,
        feature_channels: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.d_model = encoder_cfg.d_model
        self.stack_count = encoder_cfg.stack_count
        d = self.d_model

        self.dmf = DmfLayer(rng) if spec.method == "dmf" else None
        self.backbone = None
        if any(s in IMAGE_STREAMS for s in spec.streams):
            self.backbone = Backbone(backbone_cfg, rng)
            if spec.method == "conv1e" and self.backbone.depth_slice is None:
                self.backbone.augment_first_conv()
        self.conv1s = Conv1sBranch(backbone_cfg, rng) if spec.conv1s else None

        widths = [feature_channels if s == "MAE_CD" else backbone_cfg.out_channels for s in spec.streams]
        self.projections = ModuleList(Linear(w, d, rng) for w in widths)

        self.fusion: Optional[Module] = None
        self.middle: Optional[MiddleFusionEncoder] = None
        position = spec.position
        if position == "middle":
            self.middle = MiddleFusionEncoder(encoder_cfg, self._fusion_layer(encoder_cfg, rng), rng)
            extra = self.stack_count - 1
            self.encoders = ModuleList(EncoderBlock(encoder_cfg, rng) for _ in range(extra))
        elif position == "late":
            self.encoders = ModuleList(
                EncoderBlock(encoder_cfg, rng) for _ in range(self.stack_count * len(spec.streams))
            )
            self.fusion = self._fusion_layer(encoder_cfg, rng)
        else:
            if position == "early":
                self.fusion = self._fusion_layer(encoder_cfg, rng)
            self.encoders = ModuleList(EncoderBlock(encoder_cfg, rng) for _ in range(self.stack_count))
        logger.debug(
            "fusion graph placed",
            spec=spec.label,
            streams=list(spec.streams),
            encoder_blocks=len(self.encoder_blocks()),
        )

    def _fusion_layer(self, encoder_cfg: EncoderConfig, rng: np.random.Generator) -> Module:
        if self.spec.method == "concat":
            return ConcatFusion(encoder_cfg.d_model, rng)
        return CrossAttentionFusion(encoder_cfg.d_model, encoder_cfg.heads, rng)

    def encoder_blocks(self) -> List[Module]:
        blocks: List[Module] = [self.middle] if self.middle is not None else []
        return blocks + list(self.encoders)

    def _image_features(self, stream: str, inputs: StreamInputs) -> FeatureMap:
        method = self.spec.method
        if stream == "RGB":
            if method == "dmf":
                image = self.dmf(inputs.stack())
            elif method == "conv1e":
                image = Tensor(inputs.stack().channels())
            else:
                image = Tensor(inputs.rgb)
            if self.conv1s is not None:
                return conv1s_inject(Tensor(inputs.depth), image, self.backbone, self.conv1s)
            return self.backbone(image)
        if stream == "Depth":
            return self.backbone(Tensor(np.repeat(inputs.depth, 3, axis=-1)))
        if stream == "HSD":
            return self.backbone(Tensor(make_hsd(inputs.stack())))
        return self.backbone(Tensor(make_rgbd_image(inputs.stack())))

    def stream_features(self, inputs: StreamInputs) -> List[Tensor]:
        """Per-stream feature maps projected to d_model."""
        out = []
        for stream, projection in zip(self.spec.streams, self.projections):
            if stream == "MAE_CD":
                if inputs.features is None:
                    raise ConfigError("this fusion needs precomputed MAE_CD features")
                features = FeatureMap(Tensor(inputs.features), source="precomputed")
            else:
                features = self._image_features(stream, inputs)
            out.append(projection(features.data))
        return out

    def _ordered(self, streams: List[Tensor]) -> Tuple[Tensor, Tensor]:
        primary, other = streams
        if self.spec.method == "cross_attention" and self.spec.query == "other":
            return other, primary
        return primary, other

    def forward(self, inputs: StreamInputs) -> FeatureMap:
        streams = self.stream_features(inputs)
        position = self.spec.position
        if position == "late":
            outputs = []
            for index, x in enumerate(streams):
                features = FeatureMap(x)
                for block in list(self.encoders)[index * self.stack_count : (index + 1) * self.stack_count]:
                    features = block(features)
                outputs.append(features.data)
            return self.fusion(*self._ordered(outputs))
        if position == "middle":
            features = self.middle(*self._ordered(streams))
        elif position == "early":
            features = self.fusion(*self._ordered(streams))
        else:
            features = FeatureMap(streams[0])
        for block in self.encoders:
            features = block(features)
        return features


def place_fusion(
    spec: FusionSpec,
    backbone_cfg: BackboneConfig,
    encoder_cfg: EncoderConfig,
    feature_channels: int,
    rng: np.random.Generator,
) -> FusionGraph:
    return FusionGraph(spec, backbone_cfg, encoder_cfg, feature_channels, rng)
