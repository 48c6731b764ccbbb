import numpy as np
from django.test import SimpleTestCase

from autograd import functional as F
from autograd.gradcheck import check_gradients
from autograd.nn import Conv2d, Dropout, LayerNorm, Linear, Module, Parameter, count_parameters, seed_dropout
from autograd.optim import AdamW, AdamWState, adamw_step
from autograd.tensor import GradientError, NonFiniteError, ShapeError, Tape, Tensor, no_grad, precision


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TensorOpTests(SimpleTestCase):
    """Forward values and shape validation of the primitive operations."""

    def test_matmul_broadcasts_batch_dimensions(self):
        """A [2,3,4] @ [4,5] product has shape [2,3,5]."""
        rng = np.random.default_rng(0)
        a, b = Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((4, 5)))
        out = F.matmul(a, b)
        self.assertEqual(out.shape, (2, 3, 5))
        np.testing.assert_allclose(out.data, a.data @ b.data, rtol=1e-6)

    def test_matmul_inner_mismatch_names_both_shapes(self):
        """Mismatched inner dimensions raise ShapeError naming both operands."""
        with self.assertRaises(ShapeError) as ctx:
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))

    def test_add_rejects_incompatible_shapes(self):
        with self.assertRaises(ShapeError):
            F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_softmax_rows_sum_to_one(self):
        """Softmax is shift invariant and normalized along the last axis."""
        x = Tensor(np.array([[1000.0, 1001.0, 1002.0], [0.0, 0.0, 0.0]]))
        out = F.softmax(x).data
        np.testing.assert_allclose(out.sum(axis=-1), [1.0, 1.0], rtol=1e-6)
        np.testing.assert_allclose(out[1], [1 / 3] * 3, rtol=1e-6)

    def test_layer_norm_normalizes_last_axis(self):
        x = Tensor(np.random.default_rng(1).standard_normal((4, 8)) * 5 + 3)
        out = F.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_conv2d_output_extent(self):
        """A 4x4 stride-2 padding-1 kernel halves a 32x32 image."""
        x = Tensor(np.zeros((2, 32, 32, 3)))
        w = Tensor(np.zeros((4, 4, 3, 16)))
        self.assertEqual(F.conv2d(x, w, stride=2, padding=1).shape, (2, 16, 16, 16))

    def test_conv2d_matches_direct_sum(self):
        """A 1x1 convolution is a per-pixel matrix product."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 3, 2))
        w = rng.standard_normal((1, 1, 2, 4))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, x @ w[0, 0] + b, rtol=1e-5)

    def test_embedding_rejects_out_of_range_ids(self):
        with self.assertRaises(ShapeError):
            F.embedding(Tensor(np.zeros((4, 2))), np.array([[0, 4]]))

    def test_cross_entropy_ignores_padding(self):
        """Padded positions contribute nothing to the mean."""
        logits = Tensor(np.log(np.array([[[0.25, 0.5, 0.25], [0.2, 0.2, 0.6]]])))
        loss = F.cross_entropy(logits, np.array([[1, 0]]), pad_id=0)
        self.assertAlmostEqual(loss.item(), -np.log(0.5), places=5)

    def test_cross_entropy_all_padding_fails(self):
        with self.assertRaises(ValueError):
            F.cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=np.int64), pad_id=0)

    def test_dropout_keep_probability_range(self):
        for keep in (0.0, 1.5):
            with self.assertRaises(ValueError):
                F.dropout(Tensor(np.ones(3)), keep, training=True, rng=np.random.default_rng(0))

    def test_dropout_keeps_the_given_share(self):
        out = F.dropout(Tensor(np.ones((200, 200))), 0.75, training=True, rng=np.random.default_rng(0)).data
        self.assertAlmostEqual(float((out > 0).mean()), 0.75, delta=0.01)
        np.testing.assert_allclose(out[out > 0], 1 / 0.75, rtol=1e-6)
        self.assertAlmostEqual(float(out.mean()), 1.0, delta=0.02)

    def test_dropout_module_rate_is_the_drop_share(self):
        layer = Dropout(0.25)
        seed_dropout(layer, 3)
        out = layer(Tensor(np.ones((200, 200)))).data
        self.assertAlmostEqual(float((out == 0).mean()), 0.25, delta=0.01)

    def test_dropout_keep_one_is_identity(self):
        x = Tensor(np.ones(4))
        self.assertIs(F.dropout(x, 1.0, training=True, rng=np.random.default_rng(0)), x)

    def test_cross_entropy_reports_the_offending_id(self):
        logits = Tensor(np.zeros((1, 3, 4)))
        with self.assertRaisesRegex(ShapeError, "target id -2 "):
            F.cross_entropy(logits, np.array([[1, -2, 3]]), pad_id=0)
        with self.assertRaisesRegex(ShapeError, "target id 9 "):
            F.cross_entropy(logits, np.array([[1, 9, 3]]), pad_id=0)


class GradientTests(SimpleTestCase):
    """Analytic gradients agree with central finite differences."""

    RTOL = 1e-4
    ATOL = 1e-6

    def _check(self, fn, tensors, samples=12, seed=0):
        failures = [
            p for p in check_gradients(fn, tensors, samples, np.random.default_rng(seed)) if not p.ok(self.RTOL, self.ATOL)
        ]
        self.assertEqual(failures, [])

    def test_elementwise_and_reductions(self):
        with precision("float64"):
            rng = np.random.default_rng(3)
            a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
            self._check(lambda: F.mean(F.relu(a * b + a)), [a, b])

    def test_matmul_and_transpose(self):
        with precision("float64"):
            rng = np.random.default_rng(4)
            a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
            self._check(lambda: F.sum(F.matmul(a, F.swap_last(b)) * F.matmul(a, F.swap_last(b))), [a, b])

    def test_softmax_and_layer_norm(self):
        with precision("float64"):
            rng = np.random.default_rng(5)
            x, gain, bias = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
            weights = Tensor(rng.standard_normal((3, 6)))
            self._check(lambda: F.sum(F.softmax(F.layer_norm(x, gain, bias)) * weights), [x, gain, bias])

    def test_conv2d(self):
        with precision("float64"):
            rng = np.random.default_rng(6)
            x, w, b = _leaf(rng, 2, 6, 6, 3), _leaf(rng, 4, 4, 3, 5), _leaf(rng, 5)
            weights = Tensor(rng.standard_normal((2, 3, 3, 5)))
            self._check(lambda: F.sum(F.conv2d(x, w, b, stride=2, padding=1) * weights), [x, w, b], samples=15)

    def test_concat_reshape_embedding(self):
        with precision("float64"):
            rng = np.random.default_rng(7)
            table, other = _leaf(rng, 5, 3), _leaf(rng, 2, 2, 3)
            ids = np.array([[1, 1], [4, 0]])

            def fn():
                joined = F.concat([F.embedding(table, ids), other], axis=-1)
                return F.sum(F.reshape(joined, (4, 6)) * F.reshape(joined, (4, 6)))

            self._check(fn, [table, other])

    def test_cross_entropy(self):
        with precision("float64"):
            rng = np.random.default_rng(8)
            logits = _leaf(rng, 2, 3, 5)
            targets = np.array([[1, 2, 0], [4, 0, 0]])
            self._check(lambda: F.cross_entropy(logits, targets, pad_id=0), [logits])

    def test_reused_tensor_accumulates(self):
        """x used twice receives the sum of both contributions."""
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        F.sum(x * x + x).backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])


class TapeTests(SimpleTestCase):
    def test_parents_precede_children(self):
        """Every node's parent indices are smaller than its own index."""
        rng = np.random.default_rng(9)
        a, b = _leaf(rng, 2, 2), _leaf(rng, 2, 2)
        loss = F.sum(F.relu(F.matmul(a, b)) + a)
        tape = Tape.record(loss)
        for position, node in enumerate(tape.nodes):
            for parent in node.parents:
                self.assertLess(parent, position)
        self.assertIs(tape.nodes[-1].tensor, loss)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(ShapeError):
            (x * 2.0).backward()

    def test_backward_on_constant_fails(self):
        with self.assertRaises(GradientError):
            Tensor(np.ones(1)).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = F.sum(x * 3.0)
        self.assertFalse(y.requires_grad)
        self.assertIsNone(y.creator)

    def test_precision_switches_leaf_dtype(self):
        with precision("float64"):
            self.assertEqual(Tensor([1.0]).dtype, np.float64)
        self.assertEqual(Tensor([1.0]).dtype, np.float32)
        with self.assertRaises(ValueError):
            with precision("float16"):
                pass


class _Pair(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = Linear(3, 4, rng)
        self.second = Linear(4, 2, rng)
        self.norm = LayerNorm(2)
        self.drop = Dropout(0.5)


class ModuleTests(SimpleTestCase):
    def test_named_parameters_are_dotted(self):
        names = [name for name, _ in _Pair(np.random.default_rng(0)).named_parameters()]
        self.assertIn("first.weight", names)
        self.assertIn("norm.gain", names)

    def test_count_parameters_respects_trainable(self):
        model = _Pair(np.random.default_rng(0))
        total = count_parameters(model)
        self.assertEqual(total, 3 * 4 + 4 + 4 * 2 + 2 + 2 + 2)
        model.first.set_trainable(False)
        self.assertEqual(count_parameters(model, trainable_only=True), total - 16)

    def test_state_dict_round_trip(self):
        source, target = _Pair(np.random.default_rng(0)), _Pair(np.random.default_rng(1))
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(target.second.weight.data, source.second.weight.data)

    def test_load_state_dict_shape_mismatch(self):
        model = _Pair(np.random.default_rng(0))
        state = model.state_dict()
        state["first.weight"] = np.zeros((2, 2))
        with self.assertRaises(ShapeError):
            model.load_state_dict(state)

    def test_dropout_mask_depends_only_on_stream_coordinates(self):
        """Same (seed, layer, step) gives the same mask; a new step changes it."""
        layer = Dropout(0.5)
        seed_dropout(layer, 11)
        x = Tensor(np.ones((8, 8)))
        first = layer(x).data.copy()
        self.assertTrue(np.array_equal(layer(x).data, first))
        layer.step = 1
        self.assertFalse(np.array_equal(layer(x).data, first))
        layer.eval()
        np.testing.assert_array_equal(layer(x).data, x.data)

    def test_conv_module_reports_in_channels(self):
        self.assertEqual(Conv2d(4, 8, 3, np.random.default_rng(0)).in_channels, 4)


class AdamWTests(SimpleTestCase):
    """Update rule of the decoupled-decay optimizer."""

    def test_first_step_moves_by_learning_rate(self):
        """After bias correction the first step is lr * sign(grad) plus decay."""
        state = AdamWState(lr=0.1, weight_decay=0.0)
        updated, state = adamw_step({"w": np.array([1.0, -1.0])}, {"w": np.array([0.5, -2.0])}, state)
        np.testing.assert_allclose(updated["w"], [0.9, -0.9], rtol=1e-6)
        self.assertEqual(state.step, 1)

    def test_decay_is_decoupled(self):
        """With a zero gradient only the decay term moves the parameter."""
        state = AdamWState(lr=0.1, weight_decay=0.5)
        updated, _ = adamw_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, state)
        np.testing.assert_allclose(updated["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_non_finite_gradient_raises(self):
        with self.assertRaises(NonFiniteError) as ctx:
            adamw_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0.0])}, AdamWState())
        self.assertEqual(ctx.exception.name, "w")

    def test_frozen_parameters_are_skipped(self):
        frozen = Parameter(np.ones(3))
        frozen.requires_grad = False
        live = Parameter(np.ones(3))
        optimizer = AdamW([("frozen", frozen), ("live", live)], lr=0.1)
        self.assertEqual([name for name, _ in optimizer.params], ["live"])
        live.grad = np.ones(3)
        optimizer.step()
        np.testing.assert_array_equal(frozen.data, np.ones(3))
        self.assertTrue(np.all(live.data < 1.0))

    def test_state_dict_round_trip(self):
        live = Parameter(np.ones(2))
        optimizer = AdamW([("live", live)], lr=0.1)
        live.grad = np.ones(2)
        optimizer.step()
        restored = AdamW([("live", Parameter(np.ones(2)))], lr=0.1)
        restored.load_state_dict(optimizer.state_dict())
        self.assertEqual(restored.state.step, 1)
        np.testing.assert_array_equal(restored.state.m["live"], optimizer.state.m["live"])
