"""
Differentiable operations.

Shapes follow the channels-last convention used across the project:
images are ``[B, H, W, C]``, convolution kernels ``[k, k, Cin, Cout]`` and
sequences ``[B, T, D]``. Broadcasting is limited to ``add`` and ``mul``
(bias rows, scalars and attention masks); every other operation checks its
operand shapes and raises ``ShapeError``.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Function, ShapeError, Tensor

Scalar = Union[int, float]
Axis = Optional[Union[int, Tuple[int, ...]]]


def as_tensor(value: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape("mul", a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = grad * self.b if self.needs_grad[0] else None
        gb = grad * self.a if self.needs_grad[1] else None
        return ga, gb


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul: inner dimensions differ, {a.shape} has K={a.shape[-1]} but {b.shape} has K={b.shape[-2]}"
            )
        _broadcast_shape("matmul batch", a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2) if self.needs_grad[0] else None
        gb = np.swapaxes(self.a, -1, -2) @ grad if self.needs_grad[1] else None
        return ga, gb


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.sum(x, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    def forward(self, x: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        out = super().forward(x, axis, keepdims)
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        return out / self.count

    def backward(self, grad):
        (expanded,) = super().backward(grad)
        return (expanded / self.count,)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Tuple[int, ...] = ()) -> np.ndarray:
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose axes {axes} are not a permutation of {x.ndim} dimensions")
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        width = x.shape[-1]
        if gain.shape != (width,) or bias.shape != (width,):
            raise ShapeError(f"layer_norm: gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat, inv_std = self.xhat, self.inv_std
        width = xhat.shape[-1]
        reduce_axes = tuple(range(grad.ndim - 1))
        gx = None
        if self.needs_grad[0]:
            gxhat = grad * self.gain
            gx = (inv_std / width) * (
                width * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        ggain = (grad * xhat).sum(axis=reduce_axes) if self.needs_grad[1] else None
        gbias = grad.sum(axis=reduce_axes) if self.needs_grad[2] else None
        return gx, ggain, gbias


class Dropout(Function):
    def forward(self, x: np.ndarray, keep: np.ndarray = None, scale: float = 1.0) -> np.ndarray:
        self.factor = (keep * scale).astype(x.dtype)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Embedding(Function):
    def forward(self, weight: np.ndarray, ids: np.ndarray = None) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
            raise ShapeError(f"embedding: token id {int(ids.max())} out of range for table of {weight.shape[0]} rows")
        self.ids = ids
        self.rows = weight.shape
        return weight[ids]

    def backward(self, grad):
        table = np.zeros(self.rows, dtype=grad.dtype)
        np.add.at(table, self.ids, grad)
        return (table,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = -1) -> np.ndarray:
        ndim = arrays[0].ndim
        axis = axis % ndim
        for arr in arrays[1:]:
            if arr.ndim != ndim or any(arr.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != axis):
                raise ShapeError(f"concat along axis {axis}: incompatible shapes {[a.shape for a in arrays]}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a convolution; rejects configurations that would need truncation."""
    padded = extent + 2 * padding
    if padded < kernel:
        raise ShapeError(f"conv2d: padded extent {padded} is smaller than kernel {kernel}")
    if (padded - kernel) % stride:
        raise ShapeError(
            f"conv2d: (extent + 2*padding - kernel) = {padded - kernel} is not divisible by stride {stride}"
        )
    return (padded - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation over ``[B, H, W, Cin]`` with ``[k, k, Cin, Cout]`` kernels."""

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects [B,H,W,C] input and [k,k,Cin,Cout] kernel, got {x.shape} and {w.shape}")
        k, k2, cin, cout = w.shape
        if k != k2 or k < 1:
            raise ShapeError(f"conv2d: kernel must be square and non-empty, got {w.shape[:2]}")
        if x.shape[3] != cin:
            raise ShapeError(f"conv2d: input has {x.shape[3]} channels but kernel expects {cin}")
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias must have shape ({cout},), got {b.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride} and {padding}")
        batch, height, width, _ = x.shape
        out_h = conv_output_extent(height, k, stride, padding)
        out_w = conv_output_extent(width, k, stride, padding)

        padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
        windows = windows[:, ::stride, ::stride]
        # [B, H', W', Cin, k, k] -> rows ordered (ki, kj, cin) to match the kernel layout
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * out_h * out_w, k * k * cin)

        self.cols = cols
        self.w = w
        self.geometry = (x.shape, padded.shape, k, stride, padding, out_h, out_w)
        out = cols @ w.reshape(k * k * cin, cout) + b
        return out.reshape(batch, out_h, out_w, cout)

    def backward(self, grad):
        x_shape, padded_shape, k, stride, padding, out_h, out_w = self.geometry
        cin, cout = self.w.shape[2], self.w.shape[3]
        flat = grad.reshape(-1, cout)
        gw = (self.cols.T @ flat).reshape(self.w.shape) if self.needs_grad[1] else None
        gb = flat.sum(axis=0) if self.needs_grad[2] else None
        gx = None
        if self.needs_grad[0]:
            gcols = (flat @ self.w.reshape(k * k * cin, cout).T).reshape(x_shape[0], out_h, out_w, k, k, cin)
            gpad = np.zeros(padded_shape, dtype=grad.dtype)
            span_h = stride * (out_h - 1) + 1
            span_w = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    gpad[:, i : i + span_h : stride, j : j + span_w : stride, :] += gcols[:, :, :, i, j, :]
            height, width = x_shape[1], x_shape[2]
            gx = gpad[:, padding : padding + height, padding : padding + width, :]
        return gx, gw, gb


class CrossEntropy(Function):
    """Mean token negative log-likelihood over non-pad positions."""

    def forward(self, logits: np.ndarray, targets: np.ndarray = None, pad_id: int = 0) -> np.ndarray:
        targets = np.asarray(targets)
        if logits.ndim != 3 or targets.shape != logits.shape[:2]:
            raise ShapeError(f"cross_entropy expects logits [B,T,V] and targets [B,T], got {logits.shape} and {targets.shape}")
        mask = targets != pad_id
        count = int(mask.sum())
        if count == 0:
            raise ValueError("cross_entropy: every target position is padding, the mean is undefined")
        vocab = logits.shape[-1]
        real = targets[mask]
        bad = real[(real < 0) | (real >= vocab)]
        if bad.size:
            raise ShapeError(f"cross_entropy: target id {int(bad[0])} out of range for {vocab} classes")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_norm
        safe_targets = np.where(mask, targets, 0)
        picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
        self.probs = np.exp(log_probs)
        self.safe_targets = safe_targets
        self.mask = mask
        self.count = count
        return np.asarray(-(picked * mask).sum() / count, dtype=logits.dtype)

    def backward(self, grad):
        g = self.probs.copy()
        np.put_along_axis(g, self.safe_targets[..., None], np.take_along_axis(g, self.safe_targets[..., None], axis=-1) - 1.0, axis=-1)
        g *= self.mask[..., None] / self.count
        return (g * grad,)


def add(a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return Softmax.apply(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def dropout(x: Tensor, keep: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: keep each element with probability ``keep`` and scale survivors by ``1/keep``."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout keep-probability must lie in (0, 1], got {keep}")
    if not training or keep == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = rng.random(x.shape) < keep
    return Dropout.apply(x, keep=mask, scale=1.0 / keep)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return Embedding.apply(weight, ids=ids)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[-1]))
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int = 0) -> Tensor:
    return CrossEntropy.apply(logits, targets=targets, pad_id=pad_id)
