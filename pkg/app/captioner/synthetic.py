"""
Synthetic depth-discriminative captioning set.

Each scene holds two coloured boxes, one in each half of the image. The scene
is written twice with byte-identical RGB: once with the named box nearer and
once with it farther, so the nearer/farther word is only recoverable from the
depth map. Precomputed FCF1 features are written for three sources (rgb,
depth, rgbd) to drive the MAE_CD pathways.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import structlog

from autograd.tensor import ShapeError

from .backbone import BackboneConfig, write_features
from .errors import DataError
from .pnm import to_samples, write_pnm

logger = structlog.get_logger(__name__)

PALETTE: Dict[str, tuple] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "purple": (0.6, 0.2, 0.7),
    "orange": (1.0, 0.55, 0.1),
}
BACKGROUND_RGB = (0.5, 0.5, 0.5)
BACKGROUND_DEPTH = 1.0
NEAR_DEPTH = 0.3
FAR_DEPTH = 0.6
FEATURE_CHANNELS = 32
FEATURE_VARIANTS = ("rgb", "depth", "rgbd")
DISCRIMINATING_TOKENS = ("nearer", "farther")
CAPTION_TEMPLATE = "a {first} box is {relation} than the {second} box and is on the {side}"


@dataclass
class SyntheticDataset:
    root: Path
    manifests: Dict[str, Path] = field(default_factory=dict)
    feature_dirs: Dict[str, Path] = field(default_factory=dict)
    records: int = 0


def _box(rng: np.random.Generator, size: int, left: bool) -> tuple:
    half = size // 2
    width = int(rng.integers(max(2, size // 8), max(3, half - 1)))
    height = int(rng.integers(max(2, size // 8), max(3, size - 2)))
    x0 = int(rng.integers(0, half - width + 1)) + (0 if left else half)
    y0 = int(rng.integers(0, size - height + 1))
    return y0, y0 + height, x0, x0 + width


def _projection(seed: int, in_channels: int) -> np.ndarray:
    rng = np.random.default_rng([seed, in_channels, FEATURE_CHANNELS])
    return rng.normal(0.0, 1.0 / np.sqrt(in_channels), size=(in_channels, FEATURE_CHANNELS))


def feature_grid(image_size: int) -> int:
    """Side of the default backbone's output grid, so precomputed features line up with backbone streams."""
    try:
        grid = BackboneConfig().stage_extents(image_size)[-1]
    except ShapeError as exc:
        raise DataError(f"image_size {image_size} does not fit the default backbone: {exc}") from None
    if image_size % grid:
        raise DataError(f"image_size {image_size} does not pool evenly onto a {grid}x{grid} feature grid")
    return grid


def pooled_features(image: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Mean-pool ``[H, W, C]`` onto the backbone grid and project to feature channels: ``[1, P, F]``."""
    grid = feature_grid(image.shape[0])
    cell = image.shape[0] // grid
    pooled = image.reshape(grid, cell, grid, cell, image.shape[-1]).mean(axis=(1, 3))
    return np.tanh(pooled.reshape(1, grid * grid, -1) @ projection)


def generate_synthetic_dataset(
    out_dir: Union[str, os.PathLike],
    n_train: int,
    n_test: int,
    image_size: int = 32,
    seed: int = 0,
    n_val: int = 0,
) -> SyntheticDataset:
    for name, count in (("n_train", n_train), ("n_test", n_test), ("n_val", n_val)):
        if count % 2 or count < (2 if name == "n_train" else 0):
            raise DataError(f"{name} must be an even count{' of at least 2' if name == 'n_train' else ''}, got {count}")
    feature_grid(image_size)

    root = Path(out_dir)
    try:
        for sub in ["rgb", "depth"] + [f"features/{v}" for v in FEATURE_VARIANTS]:
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {root}: {exc}") from exc

    rng = np.random.default_rng(seed)
    projections = {"rgb": _projection(seed, 3), "depth": _projection(seed, 1), "rgbd": _projection(seed, 4)}
    dataset = SyntheticDataset(root=root, feature_dirs={v: root / "features" / v for v in FEATURE_VARIANTS})
    colours = list(PALETTE)

    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count == 0:
            continue
        lines: List[str] = []
        for scene in range(count // 2):
            first_colour, second_colour = rng.choice(colours, size=2, replace=False)
            first_left = bool(rng.integers(2))
            first_box = _box(rng, image_size, first_left)
            second_box = _box(rng, image_size, not first_left)

            rgb = np.empty((image_size, image_size, 3))
            rgb[...] = BACKGROUND_RGB
            for (y0, y1, x0, x1), colour in ((first_box, first_colour), (second_box, second_colour)):
                rgb[y0:y1, x0:x1] = PALETTE[colour]
            rgb_samples = to_samples(rgb)

            for relation in DISCRIMINATING_TOKENS:
                record_id = f"{split}{scene:04d}{relation[0]}"
                near, far = (first_box, second_box) if relation == "nearer" else (second_box, first_box)
                depth = np.full((image_size, image_size, 1), BACKGROUND_DEPTH)
                depth[near[0] : near[1], near[2] : near[3]] = NEAR_DEPTH
                depth[far[0] : far[1], far[2] : far[3]] = FAR_DEPTH

                write_pnm(root / "rgb" / f"{record_id}.ppm", rgb_samples)
                write_pnm(root / "depth" / f"{record_id}.pgm", to_samples(depth, 65535), maxval=65535)
                rgb_values = rgb_samples / 255.0
                sources = {
                    "rgb": rgb_values,
                    "depth": depth,
                    "rgbd": np.concatenate([rgb_values, depth], axis=-1),
                }
                for variant, image in sources.items():
                    write_features(
                        root / "features" / variant / f"{record_id}.fcf", pooled_features(image, projections[variant])
                    )

                caption = CAPTION_TEMPLATE.format(
                    first=first_colour,
                    relation=relation,
                    second=second_colour,
                    side="left" if first_left else "right",
                )
                lines.append(
                    json.dumps(
                        {
                            "id": record_id,
                            "rgb": f"rgb/{record_id}.ppm",
                            "depth": f"depth/{record_id}.pgm",
                            "features": f"features/rgbd/{record_id}.fcf",
                            "captions": [caption],
                        }
                    )
                )
        path = root / f"{split}.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        dataset.manifests[split] = path
        dataset.records += len(lines)

    logger.info("synthetic dataset written", root=str(root), records=dataset.records, image_size=image_size, seed=seed)
    return dataset
