"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """
    One bias-corrected AdamW update.

    Decay is applied to the parameter directly (``p - lr*wd*p``) and never
    enters the moment estimates. Moments are created lazily as zeros.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}", name=name)
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} does not match parameter {value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        new_value = value - state.lr * state.weight_decay * value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = new_value.astype(value.dtype)
    return updated, state


class AdamW:
    """Optimizer over the trainable subset of named parameters; frozen ones are never touched."""

    def __init__(
        self,
        named_params: Iterable[Tuple[str, Parameter]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params: List[Tuple[str, Parameter]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        values = {name: p.data for name, p in self.params}
        grads = {name: p.grad for name, p in self.params if p.grad is not None}
        updated, self.state = adamw_step(values, grads, self.state)
        for name, p in self.params:
            p.data = updated[name]

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"step": np.asarray(self.state.step)}
        for name, m in self.state.m.items():
            out[f"m/{name}"] = m
            out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_dict(self, stored: Dict[str, np.ndarray]) -> None:
        self.state.step = int(stored["step"])
        self.state.m = {k[2:]: np.array(v) for k, v in stored.items() if k.startswith("m/")}
        self.state.v = {k[2:]: np.array(v) for k, v in stored.items() if k.startswith("v/")}
