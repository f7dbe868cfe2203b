"""Heatmap loss and keypoint accuracy

The loss compares every stage's heatmaps with the same targets and sums the
stages. Accuracy is PCKh: a joint is correct when its predicted location lies
within ``alpha`` times the head size of the annotation. Annotated joints count
whether visible or occluded; absent joints are left out of both numerator and
denominator.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import List, Sequence, Union

import attrs
import numpy as np

from gccpm._keypoints import KEYPOINT_NAMES
from gccpm.codec import KeypointSet
from gccpm.tensor import Tensor, add, mul, weighted_squared_error

MODULE_LOGGER = logging.getLogger(__name__)

#: Thresholds averaged by :func:`auc`, 0.00 to 0.50 in steps of 0.01
ALPHA_GRID = np.arange(51) / 100


def stage_losses(
    pred_stages: Sequence[Tensor],
    target: Union[Tensor, np.ndarray],
    weights: np.ndarray,
) -> List[Tensor]:
    """One loss per stage, each ``(1/N) * sum_n sum_xy w_n (G_n - P_n)^2``

    ``N`` counts every map in the batch (batch size times channels), so a
    zero-weighted channel still counts towards the normaliser.

    :param pred_stages: Per stage N×K×h×w predictions
    :param target: N×K×h×w ground truth
    :param weights: N×K channel weights, 0 for absent keypoints
    :raises ValueError: When shapes disagree or there are no stages

    >>> pred = Tensor(np.full((1, 2, 2, 2), 0.5))
    >>> [float(loss.item()) for loss in stage_losses([pred], np.zeros((1, 2, 2, 2)), np.ones((1, 2)))]
    [1.0]
    """
    if not pred_stages:
        raise ValueError("stage_losses needs at least one stage")
    num_maps = pred_stages[0].shape[0] * pred_stages[0].shape[1]
    return [
        mul(weighted_squared_error(stage, target, weights), 1.0 / num_maps)
        for stage in pred_stages
    ]


def stage_loss(
    pred_stages: Sequence[Tensor],
    target: Union[Tensor, np.ndarray],
    weights: np.ndarray,
) -> Tensor:
    """Sum of :func:`stage_losses` over all stages."""
    losses = stage_losses(pred_stages, target, weights)
    result = losses[0]
    for loss in losses[1:]:
        result = add(result, loss)
    return result


def _normalised_distances(
    preds: Sequence[KeypointSet], gts: Sequence[KeypointSet]
) -> tuple[np.ndarray, np.ndarray]:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truth samples")
    distances, counted = [], []
    for index, (pred, gt) in enumerate(zip(preds, gts)):
        if gt.head_size is None:
            raise ValueError(f"Ground truth sample {index} has no head_size")
        if len(pred) != len(gt):
            raise ValueError(
                f"Sample {index} has {len(pred)} predicted and {len(gt)} annotated keypoints"
            )
        distances.append(np.linalg.norm(pred.points - gt.points, axis=1) / gt.head_size)
        counted.append(gt.annotated)
    if not distances:
        return np.zeros((0, 0)), np.zeros((0, 0), dtype=bool)
    return np.stack(distances), np.stack(counted)


def _rates(distances: np.ndarray, counted: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    correct = (distances <= alpha) & counted
    per_joint_total = counted.sum(axis=0)
    per_joint = np.divide(
        correct.sum(axis=0),
        per_joint_total,
        out=np.zeros(counted.shape[1]),
        where=per_joint_total > 0,
    )
    total = counted.sum()
    mean = float(correct.sum() / total) if total else 0.0
    return per_joint, mean


@attrs.define(frozen=True)
class EvalResult:
    """PCKh summary of one evaluation

    :param per_joint_pckh: Fraction correct per keypoint, 0 for keypoints never annotated
    :param mean_pckh: Fraction of all annotated joints that are correct
    :param auc: Mean of ``mean_pckh`` over :data:`ALPHA_GRID`
    :param num_samples: Number of evaluated samples
    :param alpha: The PCKh threshold
    :param per_joint_count: Annotated occurrences per keypoint
    """

    per_joint_pckh: tuple[float, ...]
    mean_pckh: float
    auc: float
    num_samples: int
    alpha: float = 0.5
    per_joint_count: tuple[int, ...] = ()

    def __attrs_post_init__(self):
        for value in (*self.per_joint_pckh, self.mean_pckh, self.auc):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"Accuracy fractions must be in [0, 1], got {value}")

    def joint_names(self) -> List[str]:
        if len(self.per_joint_pckh) == len(KEYPOINT_NAMES):
            return list(KEYPOINT_NAMES)
        return [f"joint_{i}" for i in range(len(self.per_joint_pckh))]

    def csv_header(self) -> List[str]:
        return ["num_samples", "alpha", "mean_pckh", "auc"] + [
            f"pckh_{name}" for name in self.joint_names()
        ]

    def to_csv_row(self) -> List[str]:
        return [
            str(self.num_samples),
            f"{self.alpha:g}",
            f"{self.mean_pckh:.6f}",
            f"{self.auc:.6f}",
            *(f"{v:.6f}" for v in self.per_joint_pckh),
        ]

    def format_table(self) -> str:
        """Aligned, human readable report."""
        names = self.joint_names()
        width = max(len(n) for n in names + ["mean PCKh"])
        lines = [f"{'joint':<{width}}  PCKh@{self.alpha:g}"]
        for name, value in zip(names, self.per_joint_pckh):
            lines.append(f"{name:<{width}}  {100 * value:6.2f}")
        lines.append(f"{'mean PCKh':<{width}}  {100 * self.mean_pckh:6.2f}")
        lines.append(f"{'AUC':<{width}}  {100 * self.auc:6.2f}")
        lines.append(f"{'samples':<{width}}  {self.num_samples:6d}")
        return "\n".join(lines)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            writer.writerow(self.to_csv_row())


def auc(
    preds: Sequence[KeypointSet],
    gts: Sequence[KeypointSet],
    alpha_grid: Sequence[float] = ALPHA_GRID,
) -> float:
    """Mean of the mean PCKh over ``alpha_grid`` (a plain average, not a trapezoid)

    >>> gt = KeypointSet([[0.0, 0.0]], [2], head_size=40.0)
    >>> round(auc([KeypointSet([[10.0, 0.0]], [2])], [gt]), 4)
    0.5098
    """
    distances, counted = _normalised_distances(preds, gts)
    if distances.size == 0:
        return 0.0
    return float(np.mean([_rates(distances, counted, a)[1] for a in alpha_grid]))


def pckh(
    preds: Sequence[KeypointSet], gts: Sequence[KeypointSet], alpha: float = 0.5
) -> EvalResult:
    """Per-joint and mean PCKh at ``alpha``, plus the AUC over :data:`ALPHA_GRID`

    :raises ValueError: When a ground truth lacks ``head_size`` or sizes disagree
    """
    distances, counted = _normalised_distances(preds, gts)
    num_joints = distances.shape[1] if distances.size else (len(gts[0]) if gts else 0)
    if distances.size == 0:
        per_joint, mean = np.zeros(num_joints), 0.0
        area = 0.0
    else:
        per_joint, mean = _rates(distances, counted, alpha)
        area = float(np.mean([_rates(distances, counted, a)[1] for a in ALPHA_GRID]))
    return EvalResult(
        per_joint_pckh=tuple(float(v) for v in per_joint),
        mean_pckh=mean,
        auc=area,
        num_samples=len(gts),
        alpha=alpha,
        per_joint_count=tuple(int(c) for c in counted.sum(axis=0)) if counted.size else (),
    )
