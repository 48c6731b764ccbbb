"""
End-to-end training scenarios on the synthetic set.

Both take minutes on a CPU. They back the ``acceptance`` test marker and
``scripts/acceptance.py``.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import structlog

from .ablation import Arm, run_arms, run_modality_ablation
from .data import load_manifest
from .decoder import tokenize
from .runconfig import RunConfig
from .synthetic import generate_synthetic_dataset
from .trainer import evaluate, train

logger = structlog.get_logger(__name__)

PathLike = Union[str, os.PathLike]

LATE_CROSS_ATTENTION = {
    "fusion.family": "feature",
    "fusion.method": "cross_attention",
    "fusion.position": "late",
    "fusion.inputs": "RGB+Depth",
}
SYNTHETIC_SPLITS = {"data.train": "synth/train.jsonl", "data.test": "synth/test.jsonl"}

OVERFIT_LOSS = 0.1
OVERFIT_MIN_EXACT = 7
BASELINE_MAX_ACCURACY = 0.6
FUSED_MIN_ACCURACY = 0.9
MIN_B1_GAIN = 5.0
DEPTH_CARRYING_ARMS = ("depth", "rgbd")


@dataclass
class OverfitOutcome:
    final_loss: float
    first_step_below: Optional[int]
    exact: int
    total: int

    @property
    def passed(self) -> bool:
        return self.first_step_below is not None and self.exact >= OVERFIT_MIN_EXACT


@dataclass
class DepthAdvantageOutcome:
    baseline_accuracy: float
    fused_accuracy: float
    baseline_b1: float
    fused_b1: float
    table: Path

    @property
    def b1_gain(self) -> float:
        return self.fused_b1 - self.baseline_b1

    @property
    def passed(self) -> bool:
        return (
            self.baseline_accuracy <= BASELINE_MAX_ACCURACY
            and self.fused_accuracy >= FUSED_MIN_ACCURACY
            and self.b1_gain >= MIN_B1_GAIN
        )


@dataclass
class ModalityOutcome:
    accuracy: Dict[str, float]
    table: Path

    @property
    def passed(self) -> bool:
        return all(self.accuracy[arm] > self.accuracy["rgb"] for arm in DEPTH_CARRYING_ARMS)


def run_overfit(workdir: PathLike, steps: int = 2000, seed: int = 0) -> OverfitOutcome:
    """Eight training samples, dropout off: the model should memorize every caption."""
    workdir = Path(workdir)
    generate_synthetic_dataset(workdir / "synth", n_train=8, n_test=2, seed=seed)
    values = dict(
        LATE_CROSS_ATTENTION,
        **SYNTHETIC_SPLITS,
        **{
            "model.encoder_dropout": "0",
            "model.decoder_dropout": "0",
            "train.batch_size": "8",
            "train.steps": str(steps),
            "train.seed": str(seed),
            "train.log_every": "200",
        },
    )
    config = RunConfig.from_values(values, workdir)
    result = train(config, save=False)
    evaluation = evaluate(result.trained, config.data.train)
    references = [" ".join(tokenize(r.captions[0])) for r in load_manifest(config.data.train).records]
    outcome = OverfitOutcome(
        final_loss=result.losses[-1],
        first_step_below=next((i for i, loss in enumerate(result.losses) if loss < OVERFIT_LOSS), None),
        exact=sum(h == r for h, r in zip(evaluation.hypotheses, references)),
        total=len(references),
    )
    logger.info("overfit scenario finished", **vars(outcome), passed=outcome.passed)
    return outcome


def run_depth_advantage(
    workdir: PathLike,
    seeds: Sequence[int] = (0, 1, 2),
    steps: int = 2000,
    n_train: int = 200,
    n_test: int = 50,
) -> DepthAdvantageOutcome:
    """RGB-only baseline against late cross-attention fusion of RGB and depth, averaged over seeds."""
    workdir = Path(workdir)
    generate_synthetic_dataset(workdir / "synth", n_train=n_train, n_test=n_test, seed=0)
    base = RunConfig.from_values(dict(SYNTHETIC_SPLITS, **{"train.steps": str(steps), "train.log_every": "0"}), workdir)
    arms = [Arm("rgb_only", base), Arm("late_cross_attention", base.override(**LATE_CROSS_ATTENTION))]
    result = run_arms("depth", arms, seeds, workdir / "depth")
    means = {run.arm: run for run in result.runs if run.seed == "mean"}
    baseline, fused = means["rgb_only"], means["late_cross_attention"]
    outcome = DepthAdvantageOutcome(
        baseline_accuracy=baseline.accuracy or 0.0,
        fused_accuracy=fused.accuracy or 0.0,
        baseline_b1=baseline.report.b1,
        fused_b1=fused.report.b1,
        table=result.table,
    )
    logger.info(
        "depth advantage scenario finished",
        baseline_accuracy=outcome.baseline_accuracy,
        fused_accuracy=outcome.fused_accuracy,
        b1_gain=outcome.b1_gain,
        passed=outcome.passed,
    )
    return outcome


def run_modality_advantage(
    workdir: PathLike,
    seeds: Sequence[int] = (0, 1, 2),
    steps: int = 2000,
    n_train: int = 200,
    n_test: int = 50,
) -> ModalityOutcome:
    """The modality suite on the synthetic set: features carrying depth should resolve the relation word."""
    workdir = Path(workdir)
    generate_synthetic_dataset(workdir / "synth", n_train=n_train, n_test=n_test, seed=0)
    values = dict(
        SYNTHETIC_SPLITS,
        **{
            "train.steps": str(steps),
            "train.log_every": "0",
            "ablation.seeds": ",".join(str(s) for s in seeds),
            "ablation.modality_features": "synth/features",
        },
    )
    result = run_modality_ablation(RunConfig.from_values(values, workdir), workdir / "modality")
    outcome = ModalityOutcome(
        accuracy={run.arm: run.accuracy or 0.0 for run in result.runs if run.seed == "mean"},
        table=result.table,
    )
    logger.info("modality scenario finished", **outcome.accuracy, passed=outcome.passed)
    return outcome
