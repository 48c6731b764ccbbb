import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autograd.gradcheck import check_gradients
from autograd.tensor import ShapeError, precision
from captioner.data import Batch
from captioner.decoder import BOS_ID, EOS_ID, PAD_ID, build_vocabulary
from captioner.errors import DataError
from captioner.model import build_model
from captioner.pixel_fusion import (
    DmfLayer,
    RgbdStack,
    conv1e_augment,
    dmf_fuse,
    hsv_to_rgb,
    make_hsd,
    make_rgbd_image,
    rgb_to_hsv,
)
from captioner.synthetic import generate_synthetic_dataset
from captioner.trainer import train

from .helpers import random_inputs, tiny_config

VOCAB = build_vocabulary(["a b c d e f g h i j k l"])


def _stack(seed=0, batch=2, size=8):
    rng = np.random.default_rng(seed)
    return RgbdStack(rng.random((batch, size, size, 3)), rng.random((batch, size, size, 1)))


class RgbdStackTests(SimpleTestCase):
    def test_depth_must_match_rgb(self):
        with self.assertRaises(ShapeError):
            RgbdStack(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 5, 1)))

    def test_values_outside_unit_range(self):
        with self.assertRaises(DataError):
            RgbdStack(np.full((1, 2, 2, 3), 1.5), np.zeros((1, 2, 2, 1)))

    def test_channels_appends_depth(self):
        stack = _stack()
        channels = stack.channels()
        self.assertEqual(channels.shape, (2, 8, 8, 4))
        np.testing.assert_array_equal(channels[..., 3:], stack.depth)


class DmfTests(SimpleTestCase):
    def test_output_is_three_non_negative_channels(self):
        out = dmf_fuse(_stack(), DmfLayer(np.random.default_rng(0)))
        self.assertEqual(out.shape, (2, 8, 8, 3))
        self.assertGreaterEqual(float(out.data.min()), 0.0)

    def test_gradient_reaches_the_mixing_weights(self):
        layer = DmfLayer(np.random.default_rng(0))
        layer(_stack()).sum().backward()
        self.assertEqual(layer.weight.grad.shape, (1, 1, 4, 3))


class Conv1eTests(SimpleTestCase):
    def test_augmented_kernel_has_zero_depth_slice(self):
        weights = np.random.default_rng(0).standard_normal((4, 4, 3, 16))
        augmented = conv1e_augment(weights)
        self.assertEqual(augmented.shape, (4, 4, 4, 16))
        np.testing.assert_array_equal(augmented[:, :, :3], weights)
        np.testing.assert_array_equal(augmented[:, :, 3], 0.0)

    def test_rejects_non_rgb_kernel(self):
        with self.assertRaises(ShapeError):
            conv1e_augment(np.zeros((4, 4, 4, 16)))


class HsvTests(SimpleTestCase):
    """Hue is normalized to [0, 1); achromatic pixels have hue and saturation 0."""

    def test_primary_colours(self):
        hsv = rgb_to_hsv(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(hsv[:, 0], [0.0, 1 / 3, 2 / 3])
        np.testing.assert_allclose(hsv[:, 1:], [[1.0, 1.0]] * 3)

    def test_grey_is_achromatic(self):
        hsv = rgb_to_hsv(np.array([0.4, 0.4, 0.4]))
        np.testing.assert_allclose(hsv, [0.0, 0.0, 0.4])

    def test_black_is_all_zero(self):
        np.testing.assert_allclose(rgb_to_hsv(np.zeros(3)), np.zeros(3))

    def test_round_trip_reproduces_rgb(self):
        rgb = np.random.default_rng(3).random((64, 3))
        np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, atol=1e-9)

    def test_hsd_replaces_value_with_depth(self):
        stack = _stack()
        hsd = make_hsd(stack)
        np.testing.assert_allclose(hsd[..., 2], stack.depth[..., 0], rtol=1e-6)
        np.testing.assert_allclose(hsd[..., :2], rgb_to_hsv(stack.rgb)[..., :2], rtol=1e-5, atol=1e-6)

    def test_rgbd_image_keeps_hue_and_uses_depth_as_brightness(self):
        stack = _stack()
        image = make_rgbd_image(stack)
        self.assertEqual(image.shape, stack.rgb.shape)
        np.testing.assert_allclose(image.max(axis=-1), stack.depth[..., 0], atol=1e-5)


class Conv1eTrainingTests(SimpleTestCase):
    def test_depth_slice_learns_from_zero(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            generate_synthetic_dataset(root / "synth", n_train=4, n_test=2, seed=5)
            config = tiny_config(
                root,
                **{
                    "data.train": "synth/train.jsonl",
                    "fusion.family": "pixel",
                    "fusion.method": "conv1e",
                    "fusion.position": "n/a",
                    "fusion.inputs": "RGB+Depth",
                    "train.steps": "3",
                },
            )
            untrained = build_model(config, 8, seed=config.train.seed)
            np.testing.assert_array_equal(untrained.graph.backbone.depth_slice.data, 0.0)
            result = train(config, save=False)
        depth_slice = result.trained.model.graph.backbone.depth_slice.data
        self.assertGreater(float(np.abs(depth_slice).max()), 0.0)


class DmfGradientTests(SimpleTestCase):
    def test_captioning_loss_gradients_through_dmf(self):
        """Central differences agree with backprop for DMF weights and everything downstream."""
        with precision("float64"):
            config = tiny_config(
                **{
                    "fusion.family": "pixel",
                    "fusion.method": "dmf",
                    "fusion.position": "n/a",
                    "fusion.inputs": "RGB+Depth",
                    "model.d_model": "32",
                    "model.ff_width": "64",
                    "data.image_size": "16",
                    "model.encoder_dropout": "0",
                    "model.decoder_dropout": "0",
                }
            )
            model = build_model(config, len(VOCAB), seed=1)
            tokens = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 7, PAD_ID, PAD_ID]])
            targets = np.array([[4, 5, 6, EOS_ID], [7, EOS_ID, PAD_ID, PAD_ID]])
            inputs = random_inputs(size=16, positions=4, seed=4)
            batch = Batch(ids=["x", "y"], inputs=inputs, tokens=tokens, targets=targets)
            named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
            self.assertIn("graph.dmf.weight", [n for n, _ in named])
            checks = check_gradients(
                lambda: model.loss(batch),
                [p for _, p in named],
                samples=100,
                rng=np.random.default_rng(0),
                names=[n for n, _ in named],
            )
            dmf = [c for c in checks if c.name == "graph.dmf.weight"]
        self.assertTrue(dmf)
        self.assertEqual([c for c in checks if not c.ok(1e-5, 1e-8)], [])
