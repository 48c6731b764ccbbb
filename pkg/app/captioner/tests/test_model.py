import numpy as np
import pytest
from django.test import SimpleTestCase

from autograd.gradcheck import check_gradients
from autograd.nn import count_parameters
from autograd.tensor import precision
from captioner.data import Batch
from captioner.decoder import BOS_ID, EOS_ID, PAD_ID, build_vocabulary
from captioner.model import PARAMETER_GROUPS, build_model, count_by_group, parameter_group

from .helpers import random_inputs, tiny_config

VOCAB = build_vocabulary(["a b c d e f"])
TOY_VOCAB = build_vocabulary(["a b c d e f g h i j k l"])

ARCHITECTURES = [
    ("feature", "none", "n/a", "RGB"),
    ("feature", "none", "n/a", "Depth"),
    ("feature", "none", "n/a", "MAE_CD"),
    ("pixel", "dmf", "n/a", "RGB+Depth"),
    ("pixel", "conv1e", "n/a", "RGB+Depth"),
    ("pixel", "hsd", "n/a", "HSD"),
    ("pixel", "rgbd", "n/a", "RGBD"),
    ("feature", "conv1s", "n/a", "RGB+Depth"),
    ("feature", "concat", "early", "RGB+Depth"),
    ("feature", "concat", "middle", "RGB+Depth"),
    ("feature", "concat", "late", "RGB+Depth"),
    ("feature", "cross_attention", "early", "RGB+Depth"),
    ("feature", "cross_attention", "middle", "RGB+Depth"),
    ("feature", "cross_attention", "late", "RGB+Depth"),
    ("feature", "concat", "late", "RGB+MAE_CD"),
    ("feature", "cross_attention", "middle", "RGB+MAE_CD"),
    ("hybrid", "concat", "early", "RGB+RGBD"),
    ("hybrid", "cross_attention", "late", "RGB+HSD"),
    ("hybrid", "concat", "middle", "RGB+Depth+MAE_CD"),
    ("hybrid", "cross_attention", "late", "RGB+Depth+MAE_CD"),
]


def fusion(family, method, position, inputs, **extra):
    values = {"fusion.family": family, "fusion.method": method, "fusion.position": position, "fusion.inputs": inputs}
    values.update(extra)
    return tiny_config(**values)


def batch_of(inputs):
    tokens = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 7, PAD_ID, PAD_ID]])
    targets = np.array([[4, 5, 6, EOS_ID], [7, EOS_ID, PAD_ID, PAD_ID]])
    return Batch(ids=["x", "y"], inputs=inputs, tokens=tokens, targets=targets)


@pytest.mark.parametrize("architecture", ARCHITECTURES, ids=lambda a: "/".join(a))
def test_every_architecture_trains_one_step(architecture):
    """Forward, loss and backward run end to end for every supported combination."""
    config = fusion(*architecture)
    model = build_model(config, len(VOCAB), seed=0)
    batch = batch_of(random_inputs())
    encoded = model.encode(batch.inputs).data
    assert encoded.ndim == 3 and encoded.shape[0] == 2
    assert encoded.shape[-1] == config.encoder.d_model == 16
    logits = model(batch)
    assert logits.shape == (2, 4, len(VOCAB))
    loss = model.loss(batch)
    assert np.isfinite(loss.data).all()
    loss.backward()
    assert model.graph.projections[0].weight.grad is not None
    assert model.decoder.output.weight.grad is not None


@pytest.mark.parametrize("architecture", ARCHITECTURES[:3] + ARCHITECTURES[8:11], ids=lambda a: "/".join(a))
def test_every_parameter_has_a_group(architecture):
    model = build_model(fusion(*architecture), len(VOCAB), seed=0)
    for name, _ in model.named_parameters():
        assert parameter_group(name) in PARAMETER_GROUPS


class FullGraphGradientTests(SimpleTestCase):
    """Analytic gradients of whole captioning graphs agree with central differences."""

    TOY_DIMS = {
        "model.d_model": "32",
        "model.ff_width": "64",
        "data.image_size": "16",
        "model.encoder_dropout": "0",
        "model.decoder_dropout": "0",
    }

    def check(self, architecture):
        with precision("float64"):
            config = fusion(*architecture, **self.TOY_DIMS)
            model = build_model(config, len(TOY_VOCAB), seed=1)
            batch = batch_of(random_inputs(size=16, positions=4, seed=4))
            named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
            checks = check_gradients(
                lambda: model.loss(batch),
                [p for _, p in named],
                samples=100,
                rng=np.random.default_rng(0),
                names=[n for n, _ in named],
            )
        failures = [p for p in checks if not p.ok(1e-5, 1e-8)]
        self.assertEqual(failures, [])

    def test_early_fusion(self):
        self.check(("feature", "concat", "early", "RGB+Depth"))

    def test_late_fusion(self):
        self.check(("feature", "cross_attention", "late", "RGB+Depth"))


class ParameterGroupTests(SimpleTestCase):
    def test_names_map_to_groups(self):
        cases = {
            "decoder.embedding.weight": "decoder",
            "graph.dmf.weight": "pixel",
            "graph.backbone.stages.0.weight": "backbone",
            "graph.backbone.depth_slice": "backbone",
            "graph.conv1s.conv.weight": "conv1s",
            "graph.projections.1.bias": "projection",
            "graph.encoders.0.attention.query.weight": "encoder",
            "graph.fusion.projection.weight": "fusion",
            "graph.middle.fusion.attention.query.weight": "fusion",
            "graph.middle.self_attention.query.weight": "encoder",
        }
        for name, group in cases.items():
            self.assertEqual(parameter_group(name), group, name)

    def test_totals_row(self):
        model = build_model(fusion("feature", "concat", "early", "RGB+Depth"), len(VOCAB), seed=0)
        rows = count_by_group(model)
        self.assertEqual(rows[-1].group, "total")
        self.assertEqual(rows[-1].total, count_parameters(model))
        self.assertEqual(rows[-1].trainable, count_parameters(model, trainable_only=True))

    def test_frozen_backbone_counts_as_untrainable(self):
        model = build_model(fusion("feature", "none", "n/a", "RGB"), len(VOCAB), seed=0)
        backbone = next(r for r in count_by_group(model) if r.group == "backbone")
        self.assertEqual(backbone.trainable, 0)
        self.assertGreater(backbone.total, 0)

        unfrozen = build_model(fusion("feature", "none", "n/a", "RGB", **{"train.unfreeze_last_k": 1}), len(VOCAB), 0)
        backbone = next(r for r in count_by_group(unfrozen) if r.group == "backbone")
        self.assertEqual(backbone.trainable, 8 * 8 * 16 + 8)


class ParameterEqualizationTests(SimpleTestCase):
    """Parameter accounting that comparisons between placements rely on."""

    def groups(self, config):
        return {r.group: r.total for r in count_by_group(build_model(config, len(VOCAB), seed=0))}

    def test_late_fusion_doubles_the_encoder(self):
        early = self.groups(fusion("feature", "concat", "early", "RGB+Depth"))
        late = self.groups(fusion("feature", "concat", "late", "RGB+Depth"))
        self.assertEqual(late["encoder"], 2 * early["encoder"])
        self.assertEqual(late["fusion"], early["fusion"])
        self.assertEqual(late["projection"], early["projection"])

    def test_stacked_early_fusion_matches_late_encoder_size(self):
        early = self.groups(fusion("feature", "concat", "early", "RGB+Depth", **{"model.stack_count": 2}))
        late = self.groups(fusion("feature", "concat", "late", "RGB+Depth"))
        self.assertEqual(early["encoder"], late["encoder"])

    def test_conv1e_adds_one_depth_slice(self):
        baseline = build_model(fusion("feature", "none", "n/a", "RGB"), len(VOCAB), seed=0)
        conv1e = build_model(fusion("pixel", "conv1e", "n/a", "RGB+Depth"), len(VOCAB), seed=0)
        kernel, first_channels = 4, 4
        self.assertEqual(count_parameters(conv1e), count_parameters(baseline) + kernel * kernel * 1 * first_channels)


class CaptionTests(SimpleTestCase):
    def test_caption_restores_training_mode(self):
        model = build_model(fusion("feature", "none", "n/a", "RGB"), len(VOCAB), seed=0)
        model.train()
        captions = model.caption(random_inputs(), VOCAB)
        self.assertEqual(len(captions), 2)
        self.assertTrue(model.training)
        for caption in captions:
            self.assertTrue(set(caption.tokens) <= set(VOCAB.tokens))

    def test_same_seed_same_parameters(self):
        config = fusion("feature", "cross_attention", "late", "RGB+Depth")
        first = build_model(config, len(VOCAB), seed=3).state_dict()
        second = build_model(config, len(VOCAB), seed=3).state_dict()
        self.assertEqual(first.keys(), second.keys())
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])
