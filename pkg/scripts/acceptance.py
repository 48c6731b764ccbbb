#!/usr/bin/env python3
"""
Acceptance driver for fusecap.
Runs the overfit, depth-advantage and modality scenarios and prints a summary table.
"""

import argparse
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

APP_DIR = Path(__file__).resolve().parent.parent / "app"


def setup_django():
    """Make the app importable and load its settings."""
    sys.path.insert(0, str(APP_DIR))
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "app.settings")
    import django

    django.setup()


def print_summary(rows):
    """Print one line per check."""
    print("\n" + "=" * 72)
    print("ACCEPTANCE SUMMARY")
    print("=" * 72)
    for scenario, check, value, target, ok in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{scenario:<16} {check:<28} {value:>10} {target:>10}  {status}")
    print("=" * 72)


def run_overfit_checks(workdir, steps):
    from captioner.acceptance import OVERFIT_LOSS, OVERFIT_MIN_EXACT, run_overfit

    started = time.time()
    outcome = run_overfit(workdir / "overfit", steps=steps)
    logger.info(f"Overfit scenario took {time.time() - started:.1f}s")
    below = "-" if outcome.first_step_below is None else str(outcome.first_step_below)
    return [
        ("overfit", f"first step with loss < {OVERFIT_LOSS}", below, f"<{steps}", outcome.first_step_below is not None),
        ("overfit", "exact captions", f"{outcome.exact}/{outcome.total}", f">={OVERFIT_MIN_EXACT}", outcome.exact >= OVERFIT_MIN_EXACT),
    ]


def run_depth_checks(workdir, steps, seeds):
    from captioner.acceptance import (
        BASELINE_MAX_ACCURACY,
        FUSED_MIN_ACCURACY,
        MIN_B1_GAIN,
        run_depth_advantage,
    )

    started = time.time()
    outcome = run_depth_advantage(workdir / "depth", seeds=seeds, steps=steps)
    logger.info(f"Depth advantage scenario took {time.time() - started:.1f}s, table at {outcome.table}")
    return [
        ("depth", "rgb-only relation accuracy", f"{outcome.baseline_accuracy:.3f}", f"<={BASELINE_MAX_ACCURACY}",
         outcome.baseline_accuracy <= BASELINE_MAX_ACCURACY),
        ("depth", "fused relation accuracy", f"{outcome.fused_accuracy:.3f}", f">={FUSED_MIN_ACCURACY}",
         outcome.fused_accuracy >= FUSED_MIN_ACCURACY),
        ("depth", "B-1 gain", f"{outcome.b1_gain:.2f}", f">={MIN_B1_GAIN}", outcome.b1_gain >= MIN_B1_GAIN),
    ]


def run_modality_checks(workdir, steps, seeds):
    from captioner.acceptance import DEPTH_CARRYING_ARMS, run_modality_advantage

    started = time.time()
    outcome = run_modality_advantage(workdir / "modality", seeds=seeds, steps=steps)
    logger.info(f"Modality scenario took {time.time() - started:.1f}s, table at {outcome.table}")
    rgb = outcome.accuracy["rgb"]
    return [
        ("modality", f"{arm} relation accuracy", f"{outcome.accuracy[arm]:.3f}", f">{rgb:.3f}", outcome.accuracy[arm] > rgb)
        for arm in DEPTH_CARRYING_ARMS
    ]


def main():
    parser = argparse.ArgumentParser(description='Run fusecap acceptance scenarios')
    parser.add_argument('--scenario', choices=['overfit', 'depth', 'modality', 'all'], default='all',
                        help='Scenario to run')
    parser.add_argument('--workdir', help='Directory for datasets and tables (default: a temporary directory)')
    parser.add_argument('--steps', type=int, default=2000, help='Training steps per run')
    parser.add_argument('--seeds', default='0,1,2', help='Comma-separated seeds for the depth and modality scenarios')

    args = parser.parse_args()
    setup_django()

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="fusecap-acceptance-"))
    logger.info(f"Writing scenario data under {workdir}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    rows = []
    if args.scenario in ("overfit", "all"):
        rows.extend(run_overfit_checks(workdir, args.steps))
    if args.scenario in ("depth", "all"):
        rows.extend(run_depth_checks(workdir, args.steps, seeds))
    if args.scenario in ("modality", "all"):
        rows.extend(run_modality_checks(workdir, args.steps, seeds))

    print_summary(rows)
    sys.exit(0 if all(row[-1] for row in rows) else 1)


if __name__ == "__main__":
    main()
