"""Captioning model: fusion graph feeding the caption decoder."""

from dataclasses import dataclass
from typing import List

import numpy as np

from autograd import functional as F
from autograd.nn import Module, seed_dropout
from autograd.tensor import Tensor, no_grad

from .backbone import FeatureMap
from .data import Batch
from .decoder import PAD_ID, CaptionDecoder, TokenSequence, Vocabulary, greedy_decode
from .feature_fusion import StreamInputs, place_fusion
from .runconfig import RunConfig

PARAMETER_GROUPS = ("pixel", "backbone", "conv1s", "projection", "encoder", "fusion", "decoder")


class CaptioningModel(Module):
    def __init__(self, config: RunConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.graph = place_fusion(config.fusion, config.backbone, config.encoder, config.feature_channels, rng)
        self.decoder = CaptionDecoder(config.decoder, vocab_size, rng)

    def encode(self, inputs: StreamInputs) -> FeatureMap:
        return self.graph(inputs)

    def forward(self, batch: Batch) -> Tensor:
        return self.decoder(batch.tokens, self.encode(batch.inputs))

    def loss(self, batch: Batch) -> Tensor:
        return F.cross_entropy(self(batch), batch.targets, pad_id=PAD_ID)

    def caption(self, inputs: StreamInputs, vocab: Vocabulary) -> List[TokenSequence]:
        """Greedy captions in eval mode; training mode is restored afterwards."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                encoded = self.encode(inputs)
            return greedy_decode(encoded, self.decoder, vocab)
        finally:
            self.train(was_training)


def build_model(config: RunConfig, vocab_size: int, seed: int) -> CaptioningModel:
    """Parameters are drawn from ``seed``; dropout streams are keyed on the same seed."""
    model = CaptioningModel(config, vocab_size, np.random.default_rng(seed))
    seed_dropout(model, seed)
    return model


def parameter_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "decoder":
        return "decoder"
    section = parts[1]
    if section == "middle":
        return "fusion" if parts[2] == "fusion" else "encoder"
    return {
        "dmf": "pixel",
        "backbone": "backbone",
        "conv1s": "conv1s",
        "projections": "projection",
        "encoders": "encoder",
        "fusion": "fusion",
    }[section]


@dataclass
class GroupCount:
    group: str
    trainable: int
    total: int


def count_by_group(model: Module) -> List[GroupCount]:
    counts = {group: [0, 0] for group in PARAMETER_GROUPS}
    for name, p in model.named_parameters():
        entry = counts[parameter_group(name)]
        entry[1] += p.size
        if p.requires_grad:
            entry[0] += p.size
    rows = [GroupCount(g, t, n) for g, (t, n) in counts.items() if n]
    rows.append(GroupCount("total", sum(r.trainable for r in rows), sum(r.total for r in rows)))
    return rows
