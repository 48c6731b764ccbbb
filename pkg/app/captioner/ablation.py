"""
Ablation suites over a base run config.

Each suite trains a set of arms for every seed in ``ablation.seeds`` and
writes one comparison CSV: a row per (arm, seed) plus one ``mean`` row per
arm. Arms of a suite share the vocabulary and, for a given seed, the batch
order, so only the model differs between them.
"""

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from django.conf import settings

from .caption_metrics import MetricReport
from .data import ImageSample, load_manifest, load_samples
from .decoder import Vocabulary, build_vocabulary
from .errors import ConfigError
from .model import build_model, count_by_group
from .runconfig import RunConfig
from .trainer import TrainedModel, evaluate, train

logger = structlog.get_logger(__name__)

SUITES = ("position", "modality", "freeze")
MODALITY_ARMS = ("rgb", "depth", "rgbd")
BASE_COLUMNS = ["arm", "seed", "params_total", "params_encoder"]


@dataclass
class Arm:
    name: str
    config: RunConfig


@dataclass
class ArmRun:
    arm: str
    seed: object  # int, or "mean" for summary rows
    params_total: int
    params_encoder: int
    report: MetricReport
    accuracy: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class AblationResult:
    suite: str
    runs: List[ArmRun]
    table: Path
    arms: List[Arm] = field(default_factory=list)


class _SampleCache:
    """Decoded splits keyed by the modalities and feature directory an arm needs."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._cache: Dict[tuple, List[ImageSample]] = {}

    def get(self, config: RunConfig, path: Path) -> List[ImageSample]:
        spec = config.fusion
        key = (str(path), spec.needs_rgb, spec.needs_depth, spec.needs_features, str(config.data.features))
        if key not in self._cache:
            manifest = load_manifest(path)
            if config.data.features is not None:
                manifest = manifest.with_features_dir(config.data.features)
            self._cache[key] = load_samples(
                manifest, self.vocab, config.data.image_size, spec, int(getattr(settings, "FUSECAP_LOADER_THREADS", 4))
            )
        return self._cache[key]


def _counts(config: RunConfig, vocab_size: int) -> Tuple[int, int]:
    rows = {r.group: r.total for r in count_by_group(build_model(config, vocab_size, config.train.seed))}
    return rows["total"], rows.get("encoder", 0)


def _mean_run(arm: str, runs: Sequence[ArmRun]) -> ArmRun:
    columns = MetricReport.columns()
    report = MetricReport(**{c: float(np.mean([getattr(r.report, c) for r in runs])) for c in columns})
    accuracies = [r.accuracy for r in runs if r.accuracy is not None]
    extra_keys = runs[0].extra.keys()
    return ArmRun(
        arm=arm,
        seed="mean",
        params_total=runs[0].params_total,
        params_encoder=runs[0].params_encoder,
        report=report,
        accuracy=float(np.mean(accuracies)) if accuracies else None,
        extra={k: float(np.mean([r.extra[k] for r in runs])) for k in extra_keys},
    )


def run_arms(
    suite: str,
    arms: Sequence[Arm],
    seeds: Sequence[int],
    out_dir: Union[str, os.PathLike],
    inspect: Optional[Callable[[Arm, TrainedModel], Dict[str, float]]] = None,
) -> AblationResult:
    if not seeds:
        raise ConfigError("ablation.seeds must list at least one seed")
    base = arms[0].config
    if base.data.train is None or base.data.test is None:
        raise ConfigError("ablations need data.train and data.test")
    vocab = build_vocabulary(load_manifest(base.data.train).captions(), base.data.min_count)
    cache = _SampleCache(vocab)

    runs: List[ArmRun] = []
    for arm in arms:
        total, encoder = _counts(arm.config, len(vocab))
        arm_runs = []
        for seed in seeds:
            config = arm.config.override(**{"train.seed": seed})
            with structlog.contextvars.bound_contextvars(suite=suite, arm=arm.name, seed=seed):
                result = train(config, cache.get(config, config.data.train), vocab, save=False)
                evaluation = evaluate(result.trained, config.data.test, samples=cache.get(config, config.data.test))
            arm_runs.append(
                ArmRun(
                    arm=arm.name,
                    seed=seed,
                    params_total=total,
                    params_encoder=encoder,
                    report=evaluation.report,
                    accuracy=evaluation.accuracy,
                    extra=inspect(Arm(arm.name, config), result.trained) if inspect else {},
                )
            )
        runs.extend(arm_runs)
        runs.append(_mean_run(arm.name, arm_runs))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{suite}_ablation.csv"
    extra_columns = list(runs[0].extra.keys())
    with open(table, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(BASE_COLUMNS + MetricReport.columns() + ["accuracy"] + extra_columns)
        for run in runs:
            writer.writerow(
                [run.arm, run.seed, run.params_total, run.params_encoder]
                + run.report.as_row()
                + ["" if run.accuracy is None else f"{run.accuracy:.4f}"]
                + [f"{run.extra[c]:.6g}" for c in extra_columns]
            )
    logger.info("ablation finished", suite=suite, arms=len(arms), seeds=len(seeds), table=str(table))
    return AblationResult(suite, runs, table, list(arms))


FLOOR_ARM = "untrained"


def position_arms(base: RunConfig) -> List[Arm]:
    """
    early (one encoder), early (two stacked encoders) and late, on the base's
    two streams, plus the late architecture evaluated at step 0 as the floor
    every trained arm has to beat.
    """
    method = base.fusion.method if base.fusion.method in ("concat", "cross_attention") else "cross_attention"
    inputs = base.values["fusion.inputs"] if len(base.fusion.streams) == 2 and method == base.fusion.method else "RGB+Depth"
    family = base.fusion.family if method == base.fusion.method else "feature"
    common = {"fusion.family": family, "fusion.method": method, "fusion.inputs": inputs}
    late = {**common, "fusion.position": "late", "model.stack_count": 1}
    return [
        Arm("early", base.override(**common, **{"fusion.position": "early", "model.stack_count": 1})),
        Arm("early_stacked", base.override(**common, **{"fusion.position": "early", "model.stack_count": 2})),
        Arm("late", base.override(**late)),
        Arm(FLOOR_ARM, base.override(**late, **{"train.steps": 0})),
    ]


def run_position_ablation(base: RunConfig, out_dir: Union[str, os.PathLike]) -> AblationResult:
    return run_arms("position", position_arms(base), base.ablation.seeds, out_dir)


def modality_arms(base: RunConfig) -> List[Arm]:
    """Late concat of RGB with precomputed features; arms differ only in data.features."""
    root = base.ablation.modality_features
    if root is None:
        raise ConfigError("the modality suite needs ablation.modality_features (a directory with rgb/depth/rgbd)")
    common = {
        "fusion.family": "hybrid",
        "fusion.method": "concat",
        "fusion.position": "late",
        "fusion.inputs": "RGB+MAE_CD",
    }
    return [
        Arm(name, base.override(**common, **{"data.features": os.path.relpath(root / name, base.base_dir)}))
        for name in MODALITY_ARMS
    ]


def run_modality_ablation(base: RunConfig, out_dir: Union[str, os.PathLike]) -> AblationResult:
    return run_arms("modality", modality_arms(base), base.ablation.seeds, out_dir)


def freeze_arms(base: RunConfig, k_list: Sequence[int]) -> List[Arm]:
    layers = base.backbone.num_layers
    arms = []
    for k in k_list:
        if not 0 <= k <= layers:
            raise ConfigError(f"cannot unfreeze {k} layers of a {layers}-layer backbone")
        arms.append(Arm(f"unfreeze_{k}", base.override(**{"train.unfreeze_last_k": k})))
    return arms


def backbone_deltas(arm: Arm, trained: TrainedModel) -> Dict[str, float]:
    """Largest absolute change of each backbone stage against its initialization."""
    initial = build_model(arm.config, len(trained.vocab), arm.config.train.seed).state_dict()
    deltas: Dict[str, float] = {}
    for name, value in trained.model.state_dict().items():
        if not name.startswith("graph.backbone.stages."):
            continue
        stage = f"delta_stage{int(name.split('.')[3]) + 1}"
        deltas[stage] = max(deltas.get(stage, 0.0), float(np.abs(value - initial[name]).max()))
    return deltas


def run_freeze_ablation(
    base: RunConfig, out_dir: Union[str, os.PathLike], k_list: Optional[Sequence[int]] = None
) -> AblationResult:
    k_list = base.ablation.freeze_k if k_list is None else k_list
    return run_arms("freeze", freeze_arms(base, k_list), base.ablation.seeds, out_dir, inspect=backbone_deltas)


def run_suite(suite: str, base: RunConfig, out_dir: Union[str, os.PathLike]) -> AblationResult:
    if suite == "position":
        return run_position_ablation(base, out_dir)
    if suite == "modality":
        return run_modality_ablation(base, out_dir)
    if suite == "freeze":
        return run_freeze_ablation(base, out_dir)
    raise ConfigError(f"unknown ablation suite {suite!r}, expected one of {', '.join(SUITES)}")
