"""Parameter containers and the layers the captioning models are assembled from."""

from __future__ import annotations

from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Parameter(Tensor):
    """Leaf tensor owned by a module; trainable unless frozen."""

    def __init__(self, data, requires_grad: bool = True, name: Optional[str] = None):
        super().__init__(np.array(data), requires_grad=requires_grad, name=name)


class Module:
    """Base class: tracks parameters and sub-modules through instance attributes."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.named_children():
            yield from child.named_modules(prefix + name + ".")

    def modules(self) -> List["Module"]:
        return [m for _, m in self.named_modules()]

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable
            if not trainable:
                p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} does not match {p.shape}")
            p.data = value.astype(p.dtype).copy()


class ModuleList(Module):
    def __init__(self, modules: Iterable[Module] = ()):
        super().__init__()
        self.items: List[Module] = list(modules)

    def named_children(self):
        for i, module in enumerate(self.items):
            yield str(i), module

    def named_parameters(self, prefix: str = ""):
        for i, module in enumerate(self.items):
            yield from module.named_parameters(f"{prefix}{i}.")

    def append(self, module: Module) -> None:
        self.items.append(module)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index: int) -> Module:
        return self.items[index]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects width {self.in_features}, got {x.shape[-1]}")
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    """
    Dropout with a counter-based stream: the mask depends only on
    (seed, layer_id, step), never on how many masks were drawn before.
    ``p`` is the drop rate; the functional op receives ``1 - p`` as its
    keep-probability.
    """

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.seed = 0
        self.layer_id = 0
        self.step = 0

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        rng = np.random.Generator(np.random.Philox([self.seed, self.layer_id, self.step]))
        return F.dropout(x, 1.0 - self.p, training=True, rng=rng)


class Embedding(Module):
    def __init__(self, rows: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, (rows, width), rows, width))

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.weight, ids)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        shape = (kernel, kernel, in_channels, out_channels)
        self.weight = Parameter(xavier_uniform(rng, shape, kernel * kernel * in_channels, kernel * kernel * out_channels))
        self.bias = Parameter(np.zeros(out_channels))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def seed_dropout(model: Module, seed: int) -> int:
    """Give every dropout layer of ``model`` its stream id; returns the number of layers."""
    layers = [m for m in model.modules() if isinstance(m, Dropout)]
    for layer_id, layer in enumerate(layers):
        layer.seed = seed
        layer.layer_id = layer_id
    return len(layers)


def set_dropout_step(model: Module, step: int) -> None:
    for module in model.modules():
        if isinstance(module, Dropout):
            module.step = step


def count_parameters(module: Module, trainable_only: bool = False) -> int:
    return int(sum(p.size for p in module.parameters() if p.requires_grad or not trainable_only))
