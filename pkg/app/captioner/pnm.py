"""Binary portable pixmap (P6) and graymap (P5) codecs."""

import os
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import DataError

PathLike = Union[str, os.PathLike]
_WHITESPACE = b" \t\r\n"


def _header(raw: bytes, path: PathLike) -> Tuple[bytes, int, int, int, int]:
    """Parse ``magic width height maxval``; returns those plus the payload offset."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1] in _WHITESPACE:
            pos += 1
        if pos >= len(raw):
            raise DataError(f"{path}: header ends after {len(fields)} of 4 fields")
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1] not in _WHITESPACE and raw[pos : pos + 1] != b"#":
            pos += 1
        fields.append(raw[start:pos])
    if pos >= len(raw) or raw[pos : pos + 1] not in _WHITESPACE:
        raise DataError(f"{path}: header must end with a single whitespace byte")
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported format {magic!r}, expected binary P5 or P6")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"{path}: malformed header {b' '.join(fields)!r}") from None
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise DataError(f"{path}: invalid header values {width}x{height} maxval {maxval}")
    return magic, width, height, maxval, pos + 1


def read_pnm(path: PathLike) -> Tuple[np.ndarray, int]:
    """Integer samples ``[H, W, C]`` and the file's maxval."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    magic, width, height, maxval, offset = _header(raw, path)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = raw[offset:]
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    samples = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width, channels)
    if samples.max(initial=0) > maxval:
        raise DataError(f"{path}: sample exceeds maxval {maxval}")
    return samples.astype(np.int64), maxval


def write_pnm(path: PathLike, samples: np.ndarray, maxval: int = 255) -> None:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples[..., None]
    height, width, channels = samples.shape
    if channels not in (1, 3):
        raise DataError(f"cannot encode {channels} channels, expected 1 or 3")
    if samples.min(initial=0) < 0 or samples.max(initial=0) > maxval:
        raise DataError(f"samples must lie in [0, {maxval}]")
    magic = b"P6" if channels == 3 else b"P5"
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + f"\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def load_image_rgb(path: PathLike) -> np.ndarray:
    samples, maxval = read_pnm(path)
    if samples.shape[-1] != 3:
        raise DataError(f"{path}: RGB images must be P6")
    return samples / maxval


def load_image_depth(path: PathLike, normalize: str = "max", depth_scale: float = None) -> np.ndarray:
    """
    Depth ``[H, W, 1]`` in [0, 1]. With ``depth_scale`` the raw integer samples
    are divided by it and clamped; otherwise samples are scaled by maxval and,
    under ``normalize="max"``, by the image maximum.
    """
    samples, maxval = read_pnm(path)
    if samples.shape[-1] != 1:
        raise DataError(f"{path}: depth maps must be P5")
    if depth_scale is not None:
        if depth_scale <= 0:
            raise DataError(f"{path}: depth_scale must be positive, got {depth_scale}")
        return np.clip(samples / depth_scale, 0.0, 1.0)
    depth = samples / maxval
    if normalize == "max":
        peak = depth.max()
        return depth / peak if peak > 0 else depth
    if normalize != "none":
        raise DataError(f"{path}: normalize must be 'max' or 'none', got {normalize!r}")
    return depth


def to_samples(values: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Quantize [0, 1] floats to integer samples."""
    return np.rint(np.clip(values, 0.0, 1.0) * maxval).astype(np.int64)
