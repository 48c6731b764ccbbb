"""
Pixel-level fusion: DMF, Conv1E weight augmentation and the HSV-based
HSD / RGBD images.

HSV hue is stored normalized to [0, 1) (degrees / 360). Achromatic pixels get
hue 0 and saturation 0.
"""

from dataclasses import dataclass

import numpy as np

from autograd import functional as F
from autograd.nn import Module, Parameter, xavier_uniform
from autograd.tensor import ShapeError, Tensor

from .errors import DataError


@dataclass
class RgbdStack:
    rgb: np.ndarray  # [B, H, W, 3]
    depth: np.ndarray  # [B, H, W, 1]

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        self.depth = np.asarray(self.depth)
        if self.rgb.ndim != 4 or self.rgb.shape[-1] != 3:
            raise ShapeError(f"rgb must be [B,H,W,3], got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:3] + (1,):
            raise ShapeError(f"depth {self.depth.shape} does not match rgb {self.rgb.shape}")
        for name, values in (("rgb", self.rgb), ("depth", self.depth)):
            if values.size and (values.min() < 0.0 or values.max() > 1.0):
                raise DataError(f"{name} values must lie in [0, 1]")

    def channels(self) -> np.ndarray:
        """The 4-channel RGB+depth array."""
        return np.concatenate([self.rgb, self.depth], axis=-1)


class DmfLayer(Module):
    """Distance-maps fusion: 1x1 conv from RGB+depth to 3 channels followed by ReLU."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, (1, 1, 4, 3), 4, 3))
        self.bias = Parameter(np.zeros(3))

    def forward(self, stack: RgbdStack) -> Tensor:
        return dmf_fuse(stack, self)


def dmf_fuse(stack: RgbdStack, params: DmfLayer) -> Tensor:
    """Output range is [0, inf); it is fed to the RGB backbone without renormalization."""
    return F.relu(F.conv2d(Tensor(stack.channels()), params.weight, params.bias))


def conv1e_depth_slice(weights3: np.ndarray) -> np.ndarray:
    k, k2, cin, cout = weights3.shape
    if cin != 3:
        raise ShapeError(f"Conv1E expects a 3-channel first convolution, got {cin} input channels")
    return np.zeros((k, k2, 1, cout), dtype=weights3.dtype)


def conv1e_augment(weights3: np.ndarray) -> np.ndarray:
    """Append a zero-initialized depth input slice to a ``[k,k,3,C]`` kernel."""
    return np.concatenate([weights3, conv1e_depth_slice(weights3)], axis=2)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    chromatic = delta > 0
    safe_delta = np.where(chromatic, delta, 1.0)
    saturation = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    hue = np.zeros_like(maxc)
    red_max = chromatic & (r == maxc)
    green_max = chromatic & ~red_max & (g == maxc)
    blue_max = chromatic & ~red_max & ~green_max
    hue = np.where(red_max, ((g - b) / safe_delta) % 6.0, hue)
    hue = np.where(green_max, (b - r) / safe_delta + 2.0, hue)
    hue = np.where(blue_max, (r - g) / safe_delta + 4.0, hue)
    hue = (hue / 6.0) % 1.0
    return np.stack([hue, np.where(chromatic, saturation, 0.0), maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    sector = np.floor(h * 6.0)
    f = h * 6.0 - sector
    sector = sector.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for index, choice in enumerate(choices):
        out = np.where((sector == index)[..., None], choice, out)
    return out


def make_hsd(stack: RgbdStack) -> np.ndarray:
    """HSV of the RGB image with the value channel replaced by depth."""
    hsv = rgb_to_hsv(stack.rgb)
    hsv[..., 2] = stack.depth[..., 0]
    return hsv.astype(stack.rgb.dtype)


def make_rgbd_image(stack: RgbdStack) -> np.ndarray:
    return hsv_to_rgb(make_hsd(stack).astype(np.float64)).astype(stack.rgb.dtype)
