"""Training loop and evaluation runs

:func:`train` repeats: draw a batch, augment it, render the target heatmaps,
run every stage, sum the stage losses, back-propagate and take one Adam step.
Every ``eval_interval`` iterations (and after the last one) the model is scored
on a fixed validation slice; the validation loss drives a plateau schedule that
divides the learning rate by ``lr_decay_factor`` a bounded number of times.

All randomness comes from streams derived from ``TrainConfig.seed``: batch
``i`` uses ``(seed, BATCHES, i)`` and the augmentation of its slot ``j`` uses
``(seed, AUGMENT, i, j)``, so two runs with one seed give identical histories.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
from more_itertools import chunked

from gccpm._statistics import TrainingStatistics
from gccpm._utils import Stream, derive_rng, raise_if_errors
from gccpm.augment import AugmentationProfile, AugmentConfig, Sample, augment_sample, letterbox
from gccpm.codec import (
    CodecConfig,
    decode_heatmaps,
    encode_heatmaps,
    multiscale_average,
    target_weights,
    with_background,
)
from gccpm.metrics import EvalResult, pckh, stage_losses
from gccpm.model import (
    Layer,
    ModelConfig,
    PoseMachine,
    build_model,
    images_to_batch,
    layer_hooks,
    save_checkpoint,
)
from gccpm.tensor import Adam, Tensor, add, backward, default_dtype, no_grad

MODULE_LOGGER = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "train_loss", "val_loss", "mean_pckh", "lr")


@attrs.define
class TrainConfig:
    """Optimisation settings

    :param lr: Initial Adam learning rate
    :param lr_decay_factor: Divisor applied to the learning rate on a plateau
    :param max_decays: Most learning rate decays over the run
    :param plateau_patience: Evaluations without improvement before a decay
    :param plateau_threshold: Relative drop of the validation loss that counts as improvement
    :param batch_size: Samples per iteration
    :param max_iters: Iterations to run, 0 returns the initialised model
    :param seed: Seed of every random stream of the run
    :param augmentation: Augmentation profile applied to training samples
    :param eval_interval: Iterations between evaluations
    :param eval_samples: Size of the validation slice
    :param iteration_log: Optional tab separated per-iteration log file
    """

    lr: float = 4e-5
    lr_decay_factor: float = 10.0
    max_decays: int = 2
    plateau_patience: int = 3
    plateau_threshold: float = 0.001
    batch_size: int = 8
    max_iters: int = 2000
    seed: int = 0
    augmentation: AugmentationProfile = attrs.field(
        default=AugmentationProfile.standard, converter=AugmentationProfile
    )
    eval_interval: int = 100
    eval_samples: int = 16
    iteration_log: Optional[str] = None

    def __attrs_post_init__(self):
        errors = []
        if not self.lr > 0:
            errors.append(ValueError(f"lr must be > 0, got {self.lr}"))
        if not self.lr_decay_factor > 1:
            errors.append(ValueError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}"))
        if self.max_decays < 0:
            errors.append(ValueError(f"max_decays must be >= 0, got {self.max_decays}"))
        if self.plateau_patience < 1:
            errors.append(ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}"))
        if not 0 <= self.plateau_threshold < 1:
            errors.append(
                ValueError(f"plateau_threshold must be in [0, 1), got {self.plateau_threshold}")
            )
        if self.max_iters < 0:
            errors.append(ValueError(f"max_iters must be >= 0, got {self.max_iters}"))
        for name in ("batch_size", "eval_interval", "eval_samples"):
            if getattr(self, name) < 1:
                errors.append(ValueError(f"{name} must be >= 1, got {getattr(self, name)}"))
        raise_if_errors("Invalid TrainConfig", errors)


@attrs.define(frozen=True)
class HistoryRecord:
    iteration: int
    train_loss: float
    val_loss: float
    mean_pckh: float
    lr: float

    def row(self) -> List[str]:
        return [str(self.iteration)] + [
            repr(float(getattr(self, c))) for c in HISTORY_COLUMNS[1:]
        ]


@attrs.define
class TrainHistory:
    """Evaluation records of one run, plus the loss of every iteration

    >>> history = TrainHistory()
    >>> history.append(HistoryRecord(100, 0.5, 0.6, 0.1, 4e-5))
    >>> history.append(HistoryRecord(100, 0.4, 0.5, 0.2, 4e-5))
    Traceback (most recent call last):
        ...
    ValueError: iteration 100 does not follow 100
    """

    records: List[HistoryRecord] = attrs.Factory(list)
    losses: List[float] = attrs.Factory(list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: HistoryRecord) -> None:
        if self.records:
            last = self.records[-1]
            if record.iteration <= last.iteration:
                raise ValueError(f"iteration {record.iteration} does not follow {last.iteration}")
            if record.lr > last.lr:
                raise ValueError(f"learning rate rose from {last.lr} to {record.lr}")
        self.records.append(record)

    def best(self) -> Optional[HistoryRecord]:
        """The record with the lowest validation loss, the earliest on ties."""
        if not self.records:
            return None
        return min(self.records, key=lambda r: r.val_loss)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            writer.writerows(r.row() for r in self.records)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> TrainHistory:
        """Read the records written by :meth:`to_csv`; per-iteration losses are not stored."""
        history = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
                raise ValueError(f"{path} does not have the columns {', '.join(HISTORY_COLUMNS)}")
            for row in reader:
                history.append(
                    HistoryRecord(
                        iteration=int(row["iteration"]),
                        train_loss=float(row["train_loss"]),
                        val_loss=float(row["val_loss"]),
                        mean_pckh=float(row["mean_pckh"]),
                        lr=float(row["lr"]),
                    )
                )
        return history


@attrs.define
class PlateauSchedule:
    """Divide the learning rate when the validation loss stops improving

    A loss improves on the best so far when it is lower by more than
    ``threshold`` relative. After ``patience`` evaluations in a row without
    improvement the rate is divided by ``factor``, at most ``max_decays`` times.

    >>> schedule = PlateauSchedule(lr=1.0, factor=10, patience=2, threshold=0.001, max_decays=1)
    >>> [schedule.update(loss) for loss in (1.0, 0.5, 0.5, 0.4999, 0.5, 0.5, 0.5)]
    [1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1]
    """

    lr: float
    factor: float = 10.0
    patience: int = 3
    threshold: float = 0.001
    max_decays: int = 2
    best: float = attrs.field(default=math.inf, init=False)
    bad_evals: int = attrs.field(default=0, init=False)
    decays: int = attrs.field(default=0, init=False)

    def improves(self, loss: float) -> bool:
        return loss < self.best * (1.0 - self.threshold) or math.isinf(self.best)

    def update(self, loss: float) -> float:
        """Record one validation loss and return the learning rate to use next."""
        if self.improves(loss):
            self.best, self.bad_evals = loss, 0
            return self.lr
        self.bad_evals += 1
        if self.bad_evals >= self.patience and self.decays < self.max_decays:
            self.lr /= self.factor
            self.decays += 1
            self.bad_evals = 0
            MODULE_LOGGER.info("Loss plateau, learning rate decayed to %.3g", self.lr)
        return self.lr


class TrainingDivergedError(RuntimeError):
    """The loss stopped being finite

    :param iteration: One based iteration the loss went bad at
    :param layer_name: First layer producing a non-finite output, or holding a
        non-finite parameter, or ``"loss"`` when every layer is finite
    """

    def __init__(self, iteration: int, layer_name: str):
        self.iteration = iteration
        self.layer_name = layer_name
        super().__init__(
            f"loss is not finite at iteration {iteration}, first non-finite layer: {layer_name}"
        )


class _FirstNonFinite:
    def __init__(self):
        self.name: Optional[str] = None

    def before(self, layer: Layer, x: Tensor) -> None:
        pass

    def after(self, layer: Layer, x: Tensor, out: Tensor) -> None:
        if self.name is None and not out.is_finite():
            self.name = layer.name


def find_nonfinite_layer(model: PoseMachine, batch: Tensor) -> str:
    """Name the first layer, in execution order, whose output holds NaN or infinity."""
    hook = _FirstNonFinite()
    with no_grad(), layer_hooks(hook):
        model(batch)
    if hook.name is not None:
        return hook.name
    for layer in model.layers():
        if any(not p.is_finite() for _, p in layer.own_parameters()):
            return layer.name
    return "loss"


def codec_for(model_cfg: ModelConfig) -> CodecConfig:
    """The codec matching a model's heatmap geometry."""
    if model_cfg.num_keypoints == CodecConfig().num_keypoints:
        return CodecConfig(
            heatmap_size=model_cfg.heatmap_size, output_stride=model_cfg.output_stride
        )
    return CodecConfig(
        heatmap_size=model_cfg.heatmap_size,
        output_stride=model_cfg.output_stride,
        num_keypoints=model_cfg.num_keypoints,
        flip_pairs=[],
    )


def _targets(
    samples: Sequence[Sample], codec_cfg: CodecConfig, background: bool
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Input batch, N×C×h×h target heatmaps and N×C channel weights."""
    maps, weights = [], []
    for sample in samples:
        target = encode_heatmaps(sample.keypoints, codec_cfg).data
        weight = target_weights(sample.keypoints)
        if background:
            target = with_background(target)
            weight = np.append(weight, 1.0)
        maps.append(target)
        weights.append(weight)
    target = np.stack(maps).astype(default_dtype())
    return images_to_batch([s.image for s in samples]), target, np.stack(weights)


def _fit_to_input(samples: Sequence[Sample], augment_cfg: AugmentConfig) -> List[Sample]:
    size = augment_cfg.input_size
    return [
        s if s.image.shape[:2] == (size, size) else letterbox(s, augment_cfg) for s in samples
    ]


def _validation_loss(
    model: PoseMachine,
    samples: Sequence[Sample],
    codec_cfg: CodecConfig,
    batch_size: int,
) -> float:
    """Mean summed stage loss over ``samples``, batched."""
    total, count = 0.0, 0
    with no_grad():
        for chunk in chunked(samples, batch_size):
            batch, target, weights = _targets(
                chunk, codec_cfg, model.config.include_background_map
            )
            losses = stage_losses(model(batch), target, weights)
            total += sum(loss.item() for loss in losses) * len(chunk)
            count += len(chunk)
    return total / count


def _write_report(
    path: Path,
    model: PoseMachine,
    train_cfg: TrainConfig,
    history: TrainHistory,
    stats: TrainingStatistics,
) -> None:
    model_cfg = model.config
    lines = [
        f"iterations: {train_cfg.max_iters}",
        f"batch_size: {train_cfg.batch_size}",
        f"seed: {train_cfg.seed}",
        f"augmentation: {train_cfg.augmentation.value}",
        f"context: {model_cfg.context.kind.value} ({model_cfg.context.placement.value})",
        f"refinement stages: {model_cfg.num_refinement_stages}",
        f"parameters: {model.param_count()}",
    ]
    if history.losses:
        lines.append(f"initial train loss: {history.losses[0]:.6g}")
        lines.append(f"final train loss: {history.losses[-1]:.6g}")
    best = history.best()
    if best is not None:
        final = history.records[-1]
        lines.append(
            f"best: iteration {best.iteration}, val_loss {best.val_loss:.6g}, "
            f"mean PCKh {best.mean_pckh:.4f}"
        )
        lines.append(
            f"final: iteration {final.iteration}, val_loss {final.val_loss:.6g}, "
            f"mean PCKh {final.mean_pckh:.4f}, lr {final.lr:.3g}"
        )
    lines.append(f"performance: {stats.get_performance()}")
    path.write_text("\n".join(lines) + "\n")


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[Sample],
    codec_cfg: Optional[CodecConfig] = None,
    augment_cfg: Optional[AugmentConfig] = None,
    val_dataset: Optional[Sequence[Sample]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[PoseMachine, TrainHistory]:
    """Train a freshly built network

    :param model_cfg: Network to build, initialised from ``train_cfg.seed``
    :param train_cfg: Optimisation settings
    :param dataset: Training samples
    :param codec_cfg: Target geometry, by default matching ``model_cfg``
    :param augment_cfg: Augmentation settings, by default sized to the model input
    :param val_dataset: Validation samples, by default the training samples
    :param out_dir: When given, receives ``history.csv``, ``report.txt`` and the
        ``best`` and ``final`` checkpoints
    :raises ValueError: If ``dataset`` is empty
    :raises TrainingDivergedError: When the loss becomes NaN or infinite
    """
    if not dataset:
        raise ValueError("train needs a non-empty dataset")
    codec_cfg = codec_cfg or codec_for(model_cfg)
    augment_cfg = augment_cfg or AugmentConfig(input_size=model_cfg.input_size)
    background = model_cfg.include_background_map
    model = build_model(model_cfg, seed=train_cfg.seed)
    history = TrainHistory()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    val_pool = val_dataset if val_dataset else dataset
    val_samples = _fit_to_input(val_pool[: train_cfg.eval_samples], augment_cfg)
    optimizer = Adam(model.parameters(), lr=train_cfg.lr)
    schedule = PlateauSchedule(
        lr=train_cfg.lr,
        factor=train_cfg.lr_decay_factor,
        patience=train_cfg.plateau_patience,
        threshold=train_cfg.plateau_threshold,
        max_decays=train_cfg.max_decays,
    )
    stats = TrainingStatistics(train_cfg.iteration_log)
    MODULE_LOGGER.info(
        "Training %d parameters on %d samples for %d iterations",
        model.param_count(),
        len(dataset),
        train_cfg.max_iters,
    )
    best_val = math.inf
    window_start = 0
    try:
        for iteration in range(1, train_cfg.max_iters + 1):
            started = time.perf_counter()
            indices = derive_rng(train_cfg.seed, Stream.BATCHES, iteration).choice(
                len(dataset),
                size=train_cfg.batch_size,
                replace=len(dataset) < train_cfg.batch_size,
            )
            samples = [
                augment_sample(
                    dataset[int(index)],
                    derive_rng(train_cfg.seed, Stream.AUGMENT, iteration, slot),
                    augment_cfg,
                    train_cfg.augmentation,
                )
                for slot, index in enumerate(indices)
            ]
            batch, target, weights = _targets(samples, codec_cfg, background)
            per_stage = stage_losses(model(batch), target, weights)
            loss = per_stage[0]
            for stage in per_stage[1:]:
                loss = add(loss, stage)
            if not loss.is_finite():
                raise TrainingDivergedError(iteration, find_nonfinite_layer(model, batch))
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()

            value = loss.item()
            history.losses.append(value)
            stats.add_iteration(
                iteration,
                value,
                [s.item() for s in per_stage],
                optimizer.lr,
                time.perf_counter() - started,
                batch_size=len(samples),
            )

            if iteration % train_cfg.eval_interval and iteration != train_cfg.max_iters:
                continue
            val_loss = _validation_loss(model, val_samples, codec_cfg, train_cfg.batch_size)
            result = evaluate(model, val_samples, codec_cfg)
            history.append(
                HistoryRecord(
                    iteration=iteration,
                    train_loss=float(np.mean(history.losses[window_start:])),
                    val_loss=val_loss,
                    mean_pckh=result.mean_pckh,
                    lr=optimizer.lr,
                )
            )
            window_start = len(history.losses)
            MODULE_LOGGER.info(
                "Iteration %d: train_loss %.6g, val_loss %.6g, mean PCKh %.4f",
                iteration,
                history.records[-1].train_loss,
                val_loss,
                result.mean_pckh,
            )
            MODULE_LOGGER.info(stats.get_performance())
            if out is not None and val_loss < best_val:
                save_checkpoint(model, out / "best.toml")
            best_val = min(best_val, val_loss)
            optimizer.lr = schedule.update(val_loss)
    finally:
        stats.close()

    if out is not None:
        save_checkpoint(model, out / "final.toml")
        if not history.records:
            save_checkpoint(model, out / "best.toml")
        history.to_csv(out / "history.csv")
        _write_report(out / "report.txt", model, train_cfg, history, stats)
    return model, history


def evaluate(
    model: PoseMachine,
    dataset: Sequence[Sample],
    codec_cfg: CodecConfig,
    use_flip: bool = False,
    scales: Sequence[float] = (1.0,),
    fill_color: Sequence[int] = (128, 128, 128),
) -> EvalResult:
    """PCKh and AUC of the final-stage predictions on ``dataset``

    Images not already at the model input size are letterboxed first, with
    their keypoints and head sizes mapped along.

    :param use_flip: Average with the mirrored prediction
    :param scales: Zoom factors averaged by :func:`~gccpm.codec.multiscale_average`
    :raises ValueError: If a sample has no head size
    """
    fit = AugmentConfig(
        input_size=codec_cfg.input_size,
        fill_color=list(fill_color),
        flip_pairs=codec_cfg.flip_pairs,
    )
    samples = _fit_to_input(dataset, fit)
    preds, gts = [], []
    for sample in samples:
        maps = multiscale_average(
            model, sample.image, scales, codec_cfg, flip=use_flip, fill_color=fill_color
        )
        preds.append(decode_heatmaps(maps, codec_cfg))
        gts.append(sample.keypoints)
    return pckh(preds, gts)
