"""
Run configuration.

A run config is flat ``key = value`` text with dotted keys; ``#`` starts a
comment and lists are comma-separated::

    fusion.family = feature
    fusion.method = cross_attention
    fusion.position = late
    fusion.inputs = RGB+Depth
    train.steps = 500
    grid.lr = 0.001, 0.0003

Defaults come from ``SCHEMA`` and may be overridden per deployment through
``settings.FUSECAP_RUN_DEFAULTS``. Relative paths resolve against the config
file's directory.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import structlog
from django.conf import settings

from autograd.tensor import ShapeError

from .backbone import BackboneConfig, StageConfig
from .caption_metrics import MULTI_REF_MODES, MetricOptions
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .feature_fusion import FusionSpec, parse_modalities

logger = structlog.get_logger(__name__)


def _floats(value: str) -> List[float]:
    return [float(v) for v in value.split(",") if v.strip()]


def _ints(value: str) -> List[int]:
    return [int(v) for v in value.split(",") if v.strip()]


# key -> (default, parser)
SCHEMA: Dict[str, Tuple[str, Callable[[str], object]]] = {
    "fusion.family": ("feature", str),
    "fusion.method": ("none", str),
    "fusion.position": ("n/a", str),
    "fusion.inputs": ("RGB", parse_modalities),
    "fusion.query": ("rgb", str),
    "model.d_model": ("128", int),
    "model.heads": ("4", int),
    "model.encoder_dropout": ("0.1", float),
    "model.stack_count": ("1", int),
    "model.decoder_layers": ("2", int),
    "model.decoder_heads": ("4", int),
    "model.decoder_dropout": ("0.1", float),
    "model.ff_width": ("256", int),
    "model.max_len": ("64", int),
    "model.backbone_channels": ("16,32,64", _ints),
    "model.kernel": ("4", int),
    "model.stride": ("2", int),
    "model.padding": ("1", int),
    "model.feature_channels": ("32", int),
    "model.vocab_size": ("0", int),
    "train.lr": ("0.001", float),
    "train.batch_size": ("16", int),
    "train.steps": ("2000", int),
    "train.seed": ("0", int),
    "train.unfreeze_last_k": ("0", int),
    "train.weight_decay": ("0.01", float),
    "train.beta1": ("0.9", float),
    "train.beta2": ("0.999", float),
    "train.eps": ("1e-8", float),
    "train.log_every": ("50", int),
    "train.out_dir": ("runs/default", str),
    "grid.lr": ("", _floats),
    "grid.heads": ("", _ints),
    "grid.encoder_dropout": ("", _floats),
    "grid.decoder_dropout": ("", _floats),
    "data.train": ("", str),
    "data.val": ("", str),
    "data.test": ("", str),
    "data.image_size": ("32", int),
    "data.features": ("", str),
    "data.min_count": ("1", int),
    "eval.batch_size": ("16", int),
    "eval.rouge_multi_ref": ("max", str),
    "eval.rouge_l_beta": ("1.2", float),
    "eval.meteor_alpha": ("0.9", float),
    "eval.meteor_beta": ("3.0", float),
    "eval.meteor_gamma": ("0.5", float),
    "eval.cider_sigma": ("6.0", float),
    "ablation.seeds": ("0,1,2", _ints),
    "ablation.freeze_k": ("0,1,3", _ints),
    "ablation.modality_features": ("", str),
}

GRID_AXES = ("grid.lr", "grid.heads", "grid.encoder_dropout", "grid.decoder_dropout")
PATH_KEYS = ("data.train", "data.val", "data.test", "data.features", "train.out_dir", "ablation.modality_features")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: {key} already set on line {lines[key]}")
        values[key] = value.strip()
        lines[key] = line_no
    return values


@dataclass
class TrainConfig:
    lr: float
    batch_size: int
    steps: int
    seed: int
    unfreeze_last_k: int
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    log_every: int
    out_dir: Path


@dataclass
class DataConfig:
    train: Optional[Path]
    val: Optional[Path]
    test: Optional[Path]
    image_size: int
    features: Optional[Path]
    min_count: int


@dataclass
class GridConfig:
    lr: List[float]
    heads: List[int]
    encoder_dropout: List[float]
    decoder_dropout: List[float]

    def require(self) -> None:
        empty = [axis for axis in GRID_AXES if not getattr(self, axis.split(".", 1)[1])]
        if empty:
            raise ConfigError(f"grid search needs non-empty lists for {', '.join(empty)}")


@dataclass
class AblationConfig:
    seeds: List[int]
    freeze_k: List[int]
    modality_features: Optional[Path]


@dataclass
class RunConfig:
    fusion: FusionSpec
    backbone: BackboneConfig
    encoder: EncoderConfig
    decoder: DecoderConfig
    feature_channels: int
    vocab_size: int
    train: TrainConfig
    data: DataConfig
    grid: GridConfig
    eval: MetricOptions
    eval_batch_size: int
    ablation: AblationConfig
    values: Dict[str, str] = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_values(cls, values: Dict[str, str], base_dir: Union[str, os.PathLike] = ".") -> "RunConfig":
        base_dir = Path(base_dir)
        merged = {key: default for key, (default, _) in SCHEMA.items()}
        merged.update({k: str(v) for k, v in getattr(settings, "FUSECAP_RUN_DEFAULTS", {}).items() if k in SCHEMA})
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        merged.update(values)

        typed = {}
        for key, raw in merged.items():
            try:
                typed[key] = SCHEMA[key][1](raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None

        def path(key: str) -> Optional[Path]:
            return base_dir / typed[key] if typed[key] else None

        fusion = FusionSpec(
            family=typed["fusion.family"],
            method=typed["fusion.method"],
            position=typed["fusion.position"],
            inputs=typed["fusion.inputs"],
            query=typed["fusion.query"],
        ).validate()

        stages = tuple(
            StageConfig(c, typed["model.kernel"], typed["model.stride"], typed["model.padding"])
            for c in typed["model.backbone_channels"]
        )
        k = typed["train.unfreeze_last_k"]
        if not 0 <= k <= len(stages):
            raise ConfigError(f"train.unfreeze_last_k must lie in [0, {len(stages)}], got {k}")
        backbone = BackboneConfig(
            in_channels=4 if fusion.method == "conv1e" else 3, stages=stages, frozen_through=len(stages) - k
        )
        try:
            backbone.stage_extents(typed["data.image_size"])
        except ShapeError as exc:
            raise ConfigError(f"data.image_size {typed['data.image_size']} does not fit the backbone: {exc}") from None

        d_model = typed["model.d_model"]
        encoder = EncoderConfig(
            d_model=d_model,
            heads=typed["model.heads"],
            dropout=typed["model.encoder_dropout"],
            stack_count=typed["model.stack_count"],
        )
        decoder = DecoderConfig(
            layers=typed["model.decoder_layers"],
            heads=typed["model.decoder_heads"],
            d_model=d_model,
            max_len=typed["model.max_len"],
            dropout=typed["model.decoder_dropout"],
            ff_width=typed["model.ff_width"],
        )
        train = TrainConfig(
            lr=typed["train.lr"],
            batch_size=typed["train.batch_size"],
            steps=typed["train.steps"],
            seed=typed["train.seed"],
            unfreeze_last_k=k,
            weight_decay=typed["train.weight_decay"],
            beta1=typed["train.beta1"],
            beta2=typed["train.beta2"],
            eps=typed["train.eps"],
            log_every=typed["train.log_every"],
            out_dir=base_dir / typed["train.out_dir"],
        )
        if train.batch_size < 1 or train.steps < 0 or train.lr <= 0:
            raise ConfigError("train.batch_size must be >= 1, train.steps >= 0 and train.lr > 0")
        if typed["eval.rouge_multi_ref"] not in MULTI_REF_MODES:
            raise ConfigError(f"eval.rouge_multi_ref must be one of {', '.join(MULTI_REF_MODES)}")

        return cls(
            fusion=fusion,
            backbone=backbone,
            encoder=encoder,
            decoder=decoder,
            feature_channels=typed["model.feature_channels"],
            vocab_size=typed["model.vocab_size"],
            train=train,
            data=DataConfig(
                train=path("data.train"),
                val=path("data.val"),
                test=path("data.test"),
                image_size=typed["data.image_size"],
                features=path("data.features"),
                min_count=typed["data.min_count"],
            ),
            grid=GridConfig(
                lr=typed["grid.lr"],
                heads=typed["grid.heads"],
                encoder_dropout=typed["grid.encoder_dropout"],
                decoder_dropout=typed["grid.decoder_dropout"],
            ),
            eval=MetricOptions(
                rouge_multi_ref=typed["eval.rouge_multi_ref"],
                rouge_l_beta=typed["eval.rouge_l_beta"],
                meteor_alpha=typed["eval.meteor_alpha"],
                meteor_beta=typed["eval.meteor_beta"],
                meteor_gamma=typed["eval.meteor_gamma"],
                cider_sigma=typed["eval.cider_sigma"],
            ),
            eval_batch_size=typed["eval.batch_size"],
            ablation=AblationConfig(
                seeds=typed["ablation.seeds"],
                freeze_k=typed["ablation.freeze_k"],
                modality_features=path("ablation.modality_features"),
            ),
            values={key: merged[key] for key in SCHEMA},
            base_dir=base_dir,
        )

    def override(self, **changes: object) -> "RunConfig":
        """New config with dotted keys replaced, e.g. ``override(**{"train.lr": 0.01})``."""
        values = dict(self.values)
        for key, value in changes.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            values[key] = str(value)
        return RunConfig.from_values(values, self.base_dir)

    def resolved_values(self) -> Dict[str, str]:
        """Values with relative paths made absolute, so they can be written to another directory."""
        return {
            key: str((self.base_dir / value).resolve()) if key in PATH_KEYS and value else value
            for key, value in self.values.items()
        }

    def snapshot(self) -> Dict[str, str]:
        return dict(self.values, **{"_base_dir": str(self.base_dir)})

    @classmethod
    def from_snapshot(cls, snapshot: Dict[str, str]) -> "RunConfig":
        values = {k: v for k, v in snapshot.items() if not k.startswith("_")}
        return cls.from_values(values, snapshot.get("_base_dir", "."))


def load_run_config(path: Union[str, os.PathLike]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = RunConfig.from_values(parse_config_text(text, str(path)), path.parent)
    logger.debug("run config loaded", path=str(path), fusion=config.fusion.label)
    return config
