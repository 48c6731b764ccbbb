"""Multi-head scaled dot-product attention shared by the encoder, fusion layers and decoder."""

from typing import Optional

import numpy as np

from autograd import functional as F
from autograd.nn import Linear, Module
from autograd.tensor import ShapeError, Tensor


def causal_mask(length: int) -> Tensor:
    """Additive mask hiding every key position after the query position."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return Tensor(np.where(upper, -1e9, 0.0))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ShapeError(f"model width {d_model} is not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng)
        # Inspection hooks for tests and ablation reports; plain arrays, never on the tape.
        self.last_weights: Optional[np.ndarray] = None
        self.last_context: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        batch, length, width = x.shape
        x = F.reshape(x, (batch, length, self.heads, width // self.heads))
        return F.transpose(x, (0, 2, 1, 3))

    def forward(self, query_src: Tensor, kv_src: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if query_src.shape[-1] != self.d_model or kv_src.shape[-1] != self.d_model:
            raise ShapeError(
                f"attention expects width {self.d_model}, got {query_src.shape[-1]} and {kv_src.shape[-1]}"
            )
        batch, length, _ = query_src.shape
        q = self._split(self.query(query_src))
        k = self._split(self.key(kv_src))
        v = self._split(self.value(kv_src))
        scores = F.mul(F.matmul(q, F.swap_last(k)), 1.0 / np.sqrt(self.d_model // self.heads))
        if mask is not None:
            scores = F.add(scores, mask)
        weights = F.softmax(scores)
        context = F.matmul(weights, v)
        context = F.reshape(F.transpose(context, (0, 2, 1, 3)), (batch, length, self.d_model))
        self.last_weights = weights.data
        self.last_context = context.data
        return self.output(context)
