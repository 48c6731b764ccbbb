import json

import numpy as np
import pytest

from captioner.backbone import BackboneConfig, read_features
from captioner.data import load_manifest
from captioner.errors import DataError
from captioner.pnm import load_image_depth, read_pnm
from captioner.synthetic import (
    DISCRIMINATING_TOKENS,
    FEATURE_CHANNELS,
    FEATURE_VARIANTS,
    FAR_DEPTH,
    NEAR_DEPTH,
    feature_grid,
    generate_synthetic_dataset,
)
from captioner.trainer import train

from .helpers import tiny_config


@pytest.fixture
def synthetic(tmp_path):
    return generate_synthetic_dataset(tmp_path / "synth", n_train=6, n_test=4, image_size=32, seed=5, n_val=2)


def _records(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_manifests_and_counts(synthetic):
    assert set(synthetic.manifests) == {"train", "val", "test"}
    assert synthetic.records == 12
    assert len(load_manifest(synthetic.manifests["train"])) == 6


def test_pairs_share_rgb_and_differ_in_relation(synthetic):
    """Each scene appears twice with byte-identical RGB; only depth and the relation word change."""
    records = _records(synthetic.manifests["train"])
    root = synthetic.root
    for near, far in zip(records[::2], records[1::2]):
        assert (root / near["rgb"]).read_bytes() == (root / far["rgb"]).read_bytes()
        assert (root / near["depth"]).read_bytes() != (root / far["depth"]).read_bytes()
        assert "nearer" in near["captions"][0] and "farther" in far["captions"][0]
        assert near["captions"][0].replace("nearer", "farther") == far["captions"][0]


def test_caption_names_exactly_one_relation(synthetic):
    for record in _records(synthetic.manifests["test"]):
        words = record["captions"][0].split()
        assert sum(word in DISCRIMINATING_TOKENS for word in words) == 1


def test_depth_is_sixteen_bit_with_three_levels(synthetic):
    record = _records(synthetic.manifests["train"])[0]
    _, maxval = read_pnm(synthetic.root / record["depth"])
    assert maxval == 65535
    levels = np.unique(np.round(load_image_depth(synthetic.root / record["depth"]), 3))
    np.testing.assert_allclose(levels, [NEAR_DEPTH, FAR_DEPTH, 1.0], atol=1e-3)


def test_feature_variants_match_the_default_backbone_grid(synthetic):
    record = _records(synthetic.manifests["train"])[0]
    assert record["features"] == f"features/rgbd/{record['id']}.fcf"
    for variant in FEATURE_VARIANTS:
        values = read_features(synthetic.feature_dirs[variant] / f"{record['id']}.fcf")
        assert values.shape == (1, 16, FEATURE_CHANNELS)


def test_rgb_features_cannot_separate_a_pair(synthetic):
    """The rgb variant is identical within a pair; the depth variant is not."""
    records = _records(synthetic.manifests["train"])
    near, far = records[0]["id"], records[1]["id"]
    rgb = synthetic.feature_dirs["rgb"]
    depth = synthetic.feature_dirs["depth"]
    np.testing.assert_array_equal(read_features(rgb / f"{near}.fcf"), read_features(rgb / f"{far}.fcf"))
    assert not np.array_equal(read_features(depth / f"{near}.fcf"), read_features(depth / f"{far}.fcf"))


def test_generation_is_seeded(tmp_path):
    first = generate_synthetic_dataset(tmp_path / "a", 4, 2, seed=9)
    second = generate_synthetic_dataset(tmp_path / "b", 4, 2, seed=9)
    assert first.manifests["train"].read_text() == second.manifests["train"].read_text()
    assert (first.root / "depth" / "train0000n.pgm").read_bytes() == (second.root / "depth" / "train0000n.pgm").read_bytes()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_train": 3, "n_test": 2},
        {"n_train": 0, "n_test": 2},
        {"n_train": 2, "n_test": 2, "image_size": 20},
        {"n_train": 2, "n_test": 2, "n_val": 1},
    ],
)
def test_rejects_bad_sizes(tmp_path, kwargs):
    with pytest.raises(DataError):
        generate_synthetic_dataset(tmp_path, **kwargs)


def test_depth_order_decides_the_relation_word(tmp_path):
    """Across every generated record, the named box is nearer exactly when its depth is smaller."""
    synthetic = generate_synthetic_dataset(tmp_path / "scan", n_train=40, n_test=20, seed=11)
    relations = []
    for split in ("train", "test"):
        for record in _records(synthetic.manifests[split]):
            words = record["captions"][0].split()
            relation, side = words[4], words[-1]
            depth = load_image_depth(synthetic.root / record["depth"])[..., 0]
            half = depth.shape[1] // 2
            left, right = depth[:, :half].min(), depth[:, half:].min()
            named, other = (left, right) if side == "left" else (right, left)
            assert relation in DISCRIMINATING_TOKENS
            assert (named < other) == (relation == "nearer"), record["id"]
            relations.append(relation)
    assert relations.count("nearer") == relations.count("farther") == 30


def test_feature_grid_follows_image_size(tmp_path):
    synthetic = generate_synthetic_dataset(tmp_path / "big", n_train=2, n_test=2, image_size=64, seed=3)
    assert feature_grid(64) == 8
    values = read_features(synthetic.feature_dirs["rgbd"] / "train0000n.fcf")
    assert values.shape == (1, BackboneConfig().output_positions(64), FEATURE_CHANNELS)

    config = tiny_config(
        tmp_path,
        **{
            "data.train": "big/train.jsonl",
            "data.image_size": "64",
            "fusion.method": "concat",
            "fusion.position": "late",
            "fusion.inputs": "RGB+MAE_CD",
            "train.steps": "1",
        },
    )
    result = train(config, save=False)
    assert np.isfinite(result.losses[0])
