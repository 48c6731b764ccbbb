"""
Training, evaluation, grid search and checkpoints.

A checkpoint is one ``.npz`` archive holding every parameter
(``param/<path>``), the AdamW state (``optim/<key>``), the run-config snapshot
(JSON), the vocabulary and the step counter.
"""

import csv
import itertools
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from django.conf import settings

from autograd.nn import set_dropout_step
from autograd.optim import AdamW
from autograd.tensor import NonFiniteError
from monitoring.metrics import training_tracker

from .caption_metrics import EvalPair, MetricReport, score_corpus
from .data import (
    DatasetManifest,
    ImageSample,
    ManifestRecord,
    batch_stream,
    eval_batches,
    load_manifest,
    load_sample,
    load_samples,
)
from .decoder import Vocabulary, build_vocabulary, tokenize
from .errors import ConfigError, DataError, NumericError
from .feature_fusion import StreamInputs
from .model import CaptioningModel, GroupCount, build_model, count_by_group
from .runconfig import RunConfig
from .synthetic import DISCRIMINATING_TOKENS

logger = structlog.get_logger(__name__)

PathLike = Union[str, os.PathLike]
CHECKPOINT_NAME = "checkpoint.npz"
GRID_COLUMNS = ["cell", "lr", "heads", "encoder_dropout", "decoder_dropout"]


@dataclass
class TrainedModel:
    config: RunConfig
    vocab: Vocabulary
    model: CaptioningModel
    optimizer: Optional[AdamW] = None
    step: int = 0


@dataclass
class TrainResult:
    trained: TrainedModel
    losses: List[float]
    checkpoint: Optional[Path] = None


@dataclass
class EvalResult:
    report: MetricReport
    hypotheses: List[str]
    ids: List[str]
    accuracy: Optional[float] = None
    out_dir: Optional[Path] = None


def _threads() -> int:
    return int(getattr(settings, "FUSECAP_LOADER_THREADS", 4))


def _manifest(config: RunConfig, path: Optional[Path], role: str) -> DatasetManifest:
    if path is None:
        raise ConfigError(f"data.{role} is not set")
    manifest = load_manifest(path)
    if config.data.features is not None:
        manifest = manifest.with_features_dir(config.data.features)
    manifest.require(config.fusion)
    return manifest


def make_optimizer(config: RunConfig, model: CaptioningModel) -> AdamW:
    cfg = config.train
    return AdamW(
        model.named_parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def train(config: RunConfig, samples: Optional[Sequence[ImageSample]] = None, vocab: Optional[Vocabulary] = None,
          save: bool = True) -> TrainResult:
    """
    Teacher-forced cross-entropy with AdamW for ``train.steps`` steps. Only
    the last ``train.unfreeze_last_k`` backbone stages receive updates.
    ``samples``/``vocab`` let callers reuse already-decoded data.
    """
    cfg = config.train
    fusion = config.fusion.label
    if samples is None:
        manifest = _manifest(config, config.data.train, "train")
        vocab = vocab or build_vocabulary(manifest.captions(), config.data.min_count)
        samples = load_samples(manifest, vocab, config.data.image_size, config.fusion, _threads())
    if vocab is None:
        raise ConfigError("train() needs a vocabulary when samples are passed in")
    if not samples:
        raise DataError("the training split is empty")

    model = build_model(config, len(vocab), cfg.seed)
    model.train()
    optimizer = make_optimizer(config, model)
    stream = batch_stream(samples, cfg.batch_size, cfg.seed, config.decoder.max_len)
    losses: List[float] = []
    log_path = None
    if save:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = cfg.out_dir / "train_log.csv"
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss"])

    logger.info("training started", fusion=fusion, steps=cfg.steps, samples=len(samples), vocab=len(vocab),
                trainable=sum(p.size for _, p in optimizer.params))
    training_tracker.start_run(fusion)
    try:
        for step in range(cfg.steps):
            started = time.perf_counter()
            batch = next(stream)
            set_dropout_step(model, step)
            optimizer.zero_grad()
            loss = model.loss(batch)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}", step=step)
            loss.backward()
            try:
                optimizer.step()
            except NonFiniteError as exc:
                raise NumericError(f"{exc} at step {step}", step=step) from exc
            losses.append(value)
            training_tracker.record_step(fusion, value, time.perf_counter() - started)
            if save:
                writer.writerow([step, repr(value)])
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                logger.info("training step", step=step, loss=value, batch=len(batch))
    except NumericError as exc:
        training_tracker.record_failure()
        logger.error("training aborted", step=exc.step, error=str(exc))
        raise
    finally:
        training_tracker.finish_run(fusion)
        if save:
            log_file.close()

    trained = TrainedModel(config, vocab, model, optimizer, step=cfg.steps)
    checkpoint = None
    if save:
        checkpoint = save_checkpoint(cfg.out_dir / CHECKPOINT_NAME, trained)
        vocab.save(cfg.out_dir / "vocab.txt")
    logger.info("training finished", fusion=fusion, steps=cfg.steps, final_loss=losses[-1] if losses else None)
    return TrainResult(trained, losses, checkpoint)


def save_checkpoint(path: PathLike, trained: TrainedModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {f"param/{k}": v for k, v in trained.model.state_dict().items()}
    if trained.optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in trained.optimizer.state_dict().items()})
    arrays["config"] = np.array(json.dumps(trained.config.snapshot(), sort_keys=True))
    arrays["vocab"] = np.array(trained.vocab.tokens)
    arrays["step"] = np.array(trained.step)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    logger.info("checkpoint saved", path=str(path), step=trained.step, parameters=len(trained.model.state_dict()))
    return path


def load_checkpoint(path: PathLike) -> TrainedModel:
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        try:
            config = RunConfig.from_snapshot(json.loads(str(archive["config"])))
            vocab = Vocabulary([str(t) for t in archive["vocab"]])
            step = int(archive["step"])
            params = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
            optim = {k[len("optim/"):]: archive[k] for k in archive.files if k.startswith("optim/")}
        except KeyError as exc:
            raise DataError(f"{path}: checkpoint is missing {exc}") from None
    model = build_model(config, len(vocab), config.train.seed)
    try:
        model.load_state_dict(params)
    except KeyError as exc:
        raise DataError(f"{path}: parameters do not match the stored config: {exc}") from None
    optimizer = make_optimizer(config, model)
    if optim:
        optimizer.load_state_dict(optim)
    model.eval()
    logger.debug("checkpoint loaded", path=str(path), step=step, fusion=config.fusion.label)
    return TrainedModel(config, vocab, model, optimizer, step)


def discriminating_accuracy(hypotheses: Sequence[List[str]], references: Sequence[List[List[str]]]) -> Optional[float]:
    """Share of samples whose hypothesis carries the reference's nearer/farther word and not the other."""
    scored = correct = 0
    for hyp, refs in zip(hypotheses, references):
        wanted = [t for t in DISCRIMINATING_TOKENS if t in refs[0]]
        if len(wanted) != 1:
            continue
        scored += 1
        other = DISCRIMINATING_TOKENS[1 - DISCRIMINATING_TOKENS.index(wanted[0])]
        correct += wanted[0] in hyp and other not in hyp
    return correct / scored if scored else None


def evaluate(trained: TrainedModel, manifest_path: PathLike, out_dir: Optional[PathLike] = None,
             samples: Optional[Sequence[ImageSample]] = None) -> EvalResult:
    """Greedy-decode every record and score against its references."""
    config = trained.config
    if samples is None:
        manifest = _manifest(config, Path(manifest_path), "test")
        if not len(manifest):
            raise DataError(f"{manifest_path}: the evaluation split is empty")
        unknown = {t for c in manifest.captions() for t in tokenize(c)} - set(trained.vocab.tokens)
        if unknown:
            logger.warning("references hold tokens outside the vocabulary", count=len(unknown))
        samples = load_samples(manifest, trained.vocab, config.data.image_size, config.fusion, _threads())
    if not samples:
        raise DataError("the evaluation split is empty")

    ids: List[str] = []
    hypotheses: List[List[str]] = []
    references: List[List[List[str]]] = []
    for batch in eval_batches(samples, config.eval_batch_size, config.decoder.max_len):
        for seq in trained.model.caption(batch.inputs, trained.vocab):
            hypotheses.append(seq.tokens)
        references.extend(batch.references)
        ids.extend(batch.ids)
    training_tracker.record_captions(len(hypotheses))

    pairs = [EvalPair(h, r) for h, r in zip(hypotheses, references)]
    report = score_corpus(pairs, config.eval)
    accuracy = discriminating_accuracy(hypotheses, references)
    training_tracker.record_evaluation(config.fusion.label, report.as_dict())
    texts = [" ".join(h) for h in hypotheses]

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(MetricReport.columns())
            writer.writerow(report.as_row())
        with open(out / "samples.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["id", "hypothesis", "references"])
            for sample_id, text, refs in zip(ids, texts, references):
                writer.writerow([sample_id, text, "\t".join(" ".join(r) for r in refs)])
        (out / "hypotheses.txt").write_text("".join(t + "\n" for t in texts), encoding="utf-8")
    logger.info("evaluation finished", samples=len(ids), accuracy=accuracy, **report.as_dict())
    return EvalResult(report, texts, ids, accuracy, Path(out_dir) if out_dir is not None else None)


@dataclass
class GridCell:
    index: int
    lr: float
    heads: int
    encoder_dropout: float
    decoder_dropout: float
    report: Optional[MetricReport] = None

    @property
    def coordinates(self) -> Tuple[float, int, float, float]:
        return (self.lr, self.heads, self.encoder_dropout, self.decoder_dropout)

    def row(self) -> List[str]:
        return [str(self.index)] + [str(v) for v in self.coordinates] + (self.report.as_row() if self.report else [])


@dataclass
class GridResult:
    cells: List[GridCell]
    best: GridCell
    best_config: RunConfig
    table: Optional[Path] = None


def select_best(cells: Sequence[GridCell]) -> GridCell:
    """Highest B-4, then highest R-L; remaining ties go to the smallest coordinates."""
    return min(cells, key=lambda c: (-c.report.b4, -c.report.rl, c.coordinates))


def gridsearch(config: RunConfig, out_dir: Optional[PathLike] = None) -> GridResult:
    """
    Train and validate every cell of lr x heads x encoder dropout x decoder
    dropout. Every cell reuses ``train.seed``, so a cell's result does not
    depend on where it sits in the grid.
    """
    config.grid.require()
    if config.data.val is None:
        raise ConfigError("grid search evaluates on data.val, which is not set")
    out = Path(out_dir) if out_dir is not None else config.train.out_dir / "grid"
    grid = config.grid
    cells = []
    for index, (lr, heads, enc_drop, dec_drop) in enumerate(
        itertools.product(grid.lr, grid.heads, grid.encoder_dropout, grid.decoder_dropout)
    ):
        cell = GridCell(index, lr, heads, enc_drop, dec_drop)
        cell_config = cell_config_for(config, cell, out / f"cell{index:03d}")
        with structlog.contextvars.bound_contextvars(cell=index):
            result = train(cell_config)
            cell.report = evaluate(result.trained, cell_config.data.val).report
        cells.append(cell)

    best = select_best(cells)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "gridsearch.csv"
    with open(table, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(GRID_COLUMNS + MetricReport.columns())
        for cell in cells:
            writer.writerow(cell.row())
    best_config = cell_config_for(config, best, config.train.out_dir)
    lines = [f"{k} = {v}\n" for k, v in best_config.resolved_values().items() if not k.startswith("grid.")]
    (out / "best.conf").write_text("".join(lines), encoding="utf-8")
    logger.info("grid search finished", cells=len(cells), best=best.index, b4=best.report.b4, rl=best.report.rl)
    return GridResult(cells, best, best_config, table)


def cell_config_for(config: RunConfig, cell: GridCell, out_dir: Path) -> RunConfig:
    return config.override(
        **{
            "train.lr": cell.lr,
            "model.heads": cell.heads,
            "model.decoder_heads": cell.heads,
            "model.encoder_dropout": cell.encoder_dropout,
            "model.decoder_dropout": cell.decoder_dropout,
            "train.out_dir": os.path.relpath(out_dir, config.base_dir),
        }
    )


def param_count(config: RunConfig, vocab_size: Optional[int] = None) -> List[GroupCount]:
    """
    Per-group trainable and total parameter counts. The vocabulary size comes
    from ``vocab_size``, then ``model.vocab_size``, then the training manifest.
    """
    size = vocab_size or config.vocab_size
    if not size:
        if config.data.train is None:
            raise ConfigError("params needs model.vocab_size or data.train to size the decoder")
        size = len(build_vocabulary(load_manifest(config.data.train).captions(), config.data.min_count))
    return count_by_group(build_model(config, size, config.train.seed))


def caption(
    trained: TrainedModel,
    rgb: Optional[PathLike] = None,
    depth: Optional[PathLike] = None,
    features: Optional[PathLike] = None,
) -> str:
    """Single-sample greedy caption; inputs the checkpoint's fusion does not use are ignored."""
    spec = trained.config.fusion
    for name, given, needed in (
        ("rgb", rgb, spec.needs_rgb),
        ("depth", depth, spec.needs_depth),
        ("features", features, spec.needs_features),
    ):
        if needed and given is None:
            raise ConfigError(f"{spec.label} needs a {name} input")
        if given is not None and not needed:
            logger.warning("input ignored by this checkpoint", input=name, fusion=spec.label)
    record = ManifestRecord(
        id="input",
        rgb=Path(rgb) if spec.needs_rgb else None,
        depth=Path(depth) if spec.needs_depth else None,
        features=Path(features) if spec.needs_features else None,
        captions=[],
    )
    sample = load_sample(record, trained.vocab, trained.config.data.image_size, spec)
    inputs = StreamInputs(
        rgb=None if sample.rgb is None else sample.rgb[None],
        depth=None if sample.depth is None else sample.depth[None],
        features=None if sample.features is None else sample.features[None],
    )
    text = trained.model.caption(inputs, trained.vocab)[0].text
    training_tracker.record_captions(1)
    return text
