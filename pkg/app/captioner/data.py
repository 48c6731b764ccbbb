"""
Dataset ingestion: manifests, sample loading, resizing and batching.

A manifest is a JSON-lines file, one record per line::

    {"id": "s0", "rgb": "rgb/s0.ppm", "depth": "depth/s0.pgm", "captions": ["..."]}

Optional keys are ``depth``, ``features``, ``normalize`` (``max`` | ``none``)
and ``depth_scale``. Paths are relative to the manifest's directory.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
import structlog

from .backbone import read_features
from .decoder import BOS_ID, EOS_ID, PAD_ID, Vocabulary, tokenize
from .errors import DataError
from .feature_fusion import FusionSpec, StreamInputs
from .pnm import load_image_depth, load_image_rgb

logger = structlog.get_logger(__name__)

SPLITS = ("train", "val", "test")
_KEYS = {"id", "rgb", "depth", "features", "captions", "normalize", "depth_scale"}


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    rgb: Optional[Path]
    captions: List[str]
    depth: Optional[Path] = None
    features: Optional[Path] = None
    normalize: str = "max"
    depth_scale: Optional[float] = None
    line: int = 0


@dataclass
class DatasetManifest:
    path: Path
    records: List[ManifestRecord]
    split: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def captions(self) -> List[str]:
        return [caption for record in self.records for caption in record.captions]

    def with_features_dir(self, directory: Union[str, os.PathLike]) -> "DatasetManifest":
        """Point every record's features at ``{directory}/{id}.fcf``."""
        directory = Path(directory)
        records = []
        for record in self.records:
            path = directory / f"{record.id}.fcf"
            if not path.is_file():
                raise DataError(f"{self.path}:{record.line}: feature file {path} for {record.id!r} does not exist")
            records.append(replace(record, features=path))
        return replace(self, records=records)

    def require(self, spec: FusionSpec) -> None:
        """Check every record carries the modalities ``spec`` consumes."""
        for record in self.records:
            if spec.needs_rgb and record.rgb is None:
                raise DataError(f"{self.path}:{record.line}: record {record.id!r} has no rgb image, needed by {spec.label}")
            if spec.needs_depth and record.depth is None:
                raise DataError(f"{self.path}:{record.line}: record {record.id!r} has no depth map, needed by {spec.label}")
            if spec.needs_features and record.features is None:
                raise DataError(
                    f"{self.path}:{record.line}: record {record.id!r} has no feature file, needed by {spec.label}"
                )


def _resolve(base: Path, value, key: str, where: str) -> Optional[Path]:
    if value is None:
        return None
    if not isinstance(value, str) or not value:
        raise DataError(f"{where}: {key} must be a non-empty path string")
    path = base / value
    if not path.is_file():
        raise DataError(f"{where}: {key} file {path} does not exist")
    return path


def load_manifest(path: Union[str, os.PathLike], split: Optional[str] = None) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if split is None and path.stem in SPLITS:
        split = path.stem
    base = path.parent
    records: List[ManifestRecord] = []
    seen = {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{line_no}"
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise DataError(f"{where}: each line must hold one object")
        unknown = sorted(set(raw) - _KEYS)
        if unknown:
            raise DataError(f"{where}: unknown keys {unknown}")
        record_id = raw.get("id")
        if not isinstance(record_id, str) or not record_id:
            raise DataError(f"{where}: missing id")
        if record_id in seen:
            raise DataError(f"{where}: duplicate id {record_id!r}, first defined on line {seen[record_id]}")
        seen[record_id] = line_no
        captions = raw.get("captions")
        if not isinstance(captions, list) or not captions or not all(isinstance(c, str) and c.strip() for c in captions):
            raise DataError(f"{where}: record {record_id!r} needs a non-empty list of captions")
        normalize = raw.get("normalize", "max")
        if normalize not in ("max", "none"):
            raise DataError(f"{where}: normalize must be 'max' or 'none', got {normalize!r}")
        depth_scale = raw.get("depth_scale")
        if depth_scale is not None and (not isinstance(depth_scale, (int, float)) or depth_scale <= 0):
            raise DataError(f"{where}: depth_scale must be a positive number")
        records.append(
            ManifestRecord(
                id=record_id,
                rgb=_resolve(base, raw.get("rgb"), "rgb", where),
                depth=_resolve(base, raw.get("depth"), "depth", where),
                features=_resolve(base, raw.get("features"), "features", where),
                captions=captions,
                normalize=normalize,
                depth_scale=depth_scale,
                line=line_no,
            )
        )
    logger.debug("manifest loaded", path=str(path), records=len(records), split=split)
    return DatasetManifest(path=path, records=records, split=split)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``[H, W, C]`` with half-pixel centers and edge clamping."""
    if height < 1 or width < 1:
        raise DataError(f"resize target must be at least 1x1, got {height}x{width}")
    src_h, src_w = image.shape[:2]
    if (src_h, src_w) == (height, width):
        return image.copy()

    def taps(src: int, dst: int):
        coords = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
        low = np.floor(coords).astype(np.int64)
        high = np.minimum(low + 1, src - 1)
        return low, high, coords - low

    y0, y1, wy = taps(src_h, height)
    x0, x1, wx = taps(src_w, width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass
class ImageSample:
    id: str
    captions: List[List[int]]
    texts: List[str]
    rgb: Optional[np.ndarray] = None  # [H, W, 3]
    depth: Optional[np.ndarray] = None  # [H, W, 1]
    features: Optional[np.ndarray] = None  # [P, C]


def load_sample(
    record: ManifestRecord, vocab: Vocabulary, image_size: int, spec: FusionSpec
) -> ImageSample:
    rgb = depth = features = None
    if spec.needs_rgb:
        rgb = np.clip(resize_bilinear(load_image_rgb(record.rgb), image_size, image_size), 0.0, 1.0)
    if spec.needs_depth:
        raw = load_image_depth(record.depth, record.normalize, record.depth_scale)
        depth = np.clip(resize_bilinear(raw, image_size, image_size), 0.0, 1.0)
    if spec.needs_features:
        values = read_features(record.features)
        if values.shape[0] != 1:
            raise DataError(f"{record.features}: per-record feature files hold one batch entry, got {values.shape[0]}")
        features = values[0]
    return ImageSample(
        id=record.id,
        captions=[vocab.encode(c) for c in record.captions],
        texts=list(record.captions),
        rgb=rgb,
        depth=depth,
        features=features,
    )


def load_samples(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    image_size: int,
    spec: FusionSpec,
    threads: int = 4,
) -> List[ImageSample]:
    """Decode every record; order follows the manifest regardless of ``threads``."""
    manifest.require(spec)
    with ThreadPoolExecutor(max_workers=max(1, threads), thread_name_prefix="fusecap-loader") as pool:
        samples = list(pool.map(lambda r: load_sample(r, vocab, image_size, spec), manifest.records))
    logger.info("samples loaded", manifest=str(manifest.path), samples=len(samples), image_size=image_size)
    return samples


@dataclass
class Batch:
    ids: List[str]
    inputs: StreamInputs
    tokens: np.ndarray  # [B, T] decoder input, starts with <bos>
    targets: np.ndarray  # [B, T] next-token targets, ends with <eos>, <pad> beyond
    references: List[List[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def encode_sequence(ids: Sequence[int], max_len: int) -> List[int]:
    """``<bos> + ids + <eos>``, truncated so the decoder input fits ``max_len``."""
    return [BOS_ID] + list(ids)[: max(max_len - 1, 0)] + [EOS_ID]


def collate(samples: Sequence[ImageSample], captions: Sequence[Sequence[int]], max_len: int) -> Batch:
    sequences = [encode_sequence(c, max_len) for c in captions]
    length = max(len(s) for s in sequences) - 1
    tokens = np.full((len(samples), length), PAD_ID, dtype=np.int64)
    targets = np.full((len(samples), length), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(sequences):
        tokens[row, : len(seq) - 1] = seq[:-1]
        targets[row, : len(seq) - 1] = seq[1:]

    def stack(name: str):
        values = [getattr(s, name) for s in samples]
        return None if values[0] is None else np.stack(values)

    return Batch(
        ids=[s.id for s in samples],
        inputs=StreamInputs(rgb=stack("rgb"), depth=stack("depth"), features=stack("features")),
        tokens=tokens,
        targets=targets,
        references=[[tokenize(t) for t in s.texts] for s in samples],
    )


def make_batches(
    samples: Sequence[ImageSample], batch_size: int, seed: int, epoch: int = 0, max_len: int = 64
) -> Iterator[Batch]:
    """One seeded pass: shuffled order and one sampled reference caption per record."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chosen = [samples[i] for i in order[start : start + batch_size]]
        captions = [s.captions[int(rng.integers(len(s.captions)))] for s in chosen]
        yield collate(chosen, captions, max_len)


def batch_stream(samples: Sequence[ImageSample], batch_size: int, seed: int, max_len: int = 64) -> Iterator[Batch]:
    """Endless sequence of epochs from ``make_batches``."""
    epoch = 0
    while True:
        yield from make_batches(samples, batch_size, seed, epoch, max_len)
        epoch += 1


def eval_batches(samples: Sequence[ImageSample], batch_size: int, max_len: int = 64) -> Iterator[Batch]:
    """Manifest order, first reference as target."""
    for start in range(0, len(samples), batch_size):
        chosen = list(samples[start : start + batch_size])
        yield collate(chosen, [s.captions[0] for s in chosen], max_len)
