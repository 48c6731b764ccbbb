"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradientCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-12)
        return abs(self.analytic - self.numeric) / scale

    def ok(self, rtol: float, atol: float) -> bool:
        return abs(self.analytic - self.numeric) <= atol + rtol * max(abs(self.analytic), abs(self.numeric))


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, index: tuple, eps: float = 1e-6) -> float:
    original = tensor.data[index].copy()
    tensor.data[index] = original + eps
    plus = fn().item()
    tensor.data[index] = original - eps
    minus = fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2.0 * eps)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: int,
    rng: np.random.Generator,
    eps: float = 1e-6,
    names: Sequence[str] = (),
) -> List[GradientCheck]:
    """
    Compare backward() against central differences at ``samples`` random
    coordinates spread over ``tensors``. Run inside ``precision("float64")``.
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]
    results = []
    for i in range(samples):
        which = i % len(tensors) if samples >= len(tensors) else int(rng.integers(len(tensors)))
        tensor = tensors[which]
        index = tuple(int(rng.integers(extent)) for extent in tensor.shape)
        grad = analytic[which]
        value = 0.0 if grad is None else float(grad[index])
        label = names[which] if names else f"tensor{which}"
        results.append(GradientCheck(label, index, value, numerical_gradient(fn, tensor, index, eps)))
    return results
