"""Small configurations and fixtures shared by the captioner tests."""

from pathlib import Path

import numpy as np

from captioner.backbone import BackboneConfig, StageConfig
from captioner.decoder import DecoderConfig
from captioner.encoder import EncoderConfig
from captioner.feature_fusion import StreamInputs
from captioner.runconfig import RunConfig

TINY_STAGES = (StageConfig(4), StageConfig(8), StageConfig(8))
TINY_VALUES = {
    "model.d_model": "16",
    "model.heads": "2",
    "model.decoder_layers": "1",
    "model.decoder_heads": "2",
    "model.ff_width": "32",
    "model.max_len": "24",
    "model.backbone_channels": "4,8,8",
    "model.feature_channels": "32",
    "train.batch_size": "4",
    "train.steps": "2",
    "train.log_every": "0",
    "eval.batch_size": "8",
}


def tiny_backbone(in_channels=3, frozen_through=None):
    return BackboneConfig(in_channels=in_channels, stages=TINY_STAGES, frozen_through=frozen_through)


def tiny_encoder(stack_count=1, dropout=0.0):
    return EncoderConfig(d_model=16, heads=2, dropout=dropout, stack_count=stack_count)


def tiny_decoder(max_len=24, dropout=0.0):
    return DecoderConfig(layers=1, heads=2, d_model=16, max_len=max_len, dropout=dropout, ff_width=32)


def tiny_config(base_dir=".", **overrides):
    """RunConfig with tiny model widths; ``overrides`` use dotted keys."""
    values = dict(TINY_VALUES)
    values.update({k: str(v) for k, v in overrides.items()})
    return RunConfig.from_values(values, Path(base_dir))


def random_inputs(batch=2, size=32, positions=16, channels=32, seed=0):
    rng = np.random.default_rng(seed)
    return StreamInputs(
        rgb=rng.random((batch, size, size, 3)),
        depth=rng.random((batch, size, size, 1)),
        features=rng.standard_normal((batch, positions, channels)),
    )


def write_config(path, values):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return Path(path)
