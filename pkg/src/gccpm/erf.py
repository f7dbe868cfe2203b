"""Empirical receptive fields by sliding occlusion

A small window of random pixels is slid over the input image. At every window
position the heatmaps are recomputed, and the difference from the unoccluded
heatmaps says how much the covered region matters for the chosen keypoint. The
importance grid and the smallest box that holds most of its mass make the
"context widens what the network looks at" claim measurable.

The patch content is drawn once per run and reused at every position.
"""

from __future__ import annotations

import csv
import logging
import math
from enum import Enum, unique
from pathlib import Path
from typing import Optional, Sequence, Union

import attrs
import cv2
import numpy as np
from scipy.stats import binomtest

from gccpm._utils import Stream, derive_rng
from gccpm.codec import Forward, predict_heatmaps
from gccpm.data.images import write_image
from gccpm.model.layers import Conv2d, Layer, Module, Pool2d

MODULE_LOGGER = logging.getLogger(__name__)


@unique
class Aggregation(str, Enum):
    #: Sum of absolute differences over the heatmap channel
    sum_abs = "sum_abs"
    #: Absolute difference at the unoccluded peak cell
    value_at_peak = "value_at_peak"


def window_positions(size: int, window: int, stride: int) -> np.ndarray:
    """Top-left offsets of the window along one axis

    ``ceil((size - window) / stride) + 1`` offsets spaced by ``stride``; the
    last one is pulled back so the window ends on the final pixel.

    >>> window_positions(32, 11, 4).tolist()
    [0, 4, 8, 12, 16, 20, 21]
    >>> window_positions(11, 11, 4).tolist()
    [0]
    """
    if window > size:
        raise ValueError(f"window {window} is larger than the image side {size}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    count = math.ceil((size - window) / stride) + 1
    return np.minimum(np.arange(count) * stride, size - window)


@attrs.define(eq=False)
class ErfMap:
    """Importance of each window position

    :param grid: rows × cols of non-negative importance, one value per window position
    :param window: Window side in pixels
    :param stride: Spacing of the window positions in pixels
    :param keypoint_index: The compared heatmap channel
    :param reference_location: ``(row, col)`` heatmap cell of the unoccluded peak
    :param image_size: ``(height, width)`` of the occluded image
    :param aggregation: How a heatmap difference was reduced to one value
    :param all_channels: Whether every channel, rather than only ``keypoint_index``, was compared
    """

    grid: np.ndarray
    window: int
    stride: int
    keypoint_index: int
    reference_location: tuple[int, int]
    image_size: tuple[int, int]
    aggregation: Aggregation = Aggregation.sum_abs
    all_channels: bool = False

    @property
    def rows(self) -> np.ndarray:
        return window_positions(self.image_size[0], self.window, self.stride)

    @property
    def cols(self) -> np.ndarray:
        return window_positions(self.image_size[1], self.window, self.stride)

    def records(self) -> list[tuple[int, int, float]]:
        """``(px, py, importance)`` with ``(px, py)`` the window centre pixel."""
        half = self.window // 2
        return [
            (int(x) + half, int(y) + half, float(self.grid[r, c]))
            for r, y in enumerate(self.rows)
            for c, x in enumerate(self.cols)
        ]


def estimate_erf(
    model: Forward,
    image: np.ndarray,
    keypoint_index: int,
    window: int = 11,
    stride: int = 4,
    rng: Optional[np.random.Generator] = None,
    aggregation: Union[Aggregation, str] = Aggregation.sum_abs,
    all_channels: bool = False,
    seed: int = 0,
) -> ErfMap:
    """Occlude the image with a random patch at every window position and rerun ``model``

    :param model: A network mapping a batch to per-stage heatmaps; the final stage is used
    :param image: H×W×3 ``uint8`` image
    :param keypoint_index: Heatmap channel to compare
    :param window: Patch side in pixels
    :param stride: Spacing of window positions
    :param rng: Source of the patch pixels; defaults to the ERF stream of ``seed``
    :param aggregation: Reduction of the absolute heatmap difference
    :param all_channels: Compare every channel instead of only ``keypoint_index``
    :raises ValueError: If the window does not fit, the stride is not positive or
        the channel does not exist
    """
    aggregation = Aggregation(aggregation)
    height, width = image.shape[:2]
    rows = window_positions(height, window, stride)
    cols = window_positions(width, window, stride)
    if rng is None:
        rng = derive_rng(seed, Stream.ERF_PATCH)
    patch = rng.integers(0, 256, size=(window, window, image.shape[2]), dtype=np.uint8)

    reference = predict_heatmaps(model, [image])[0]
    if not 0 <= keypoint_index < reference.shape[0]:
        raise ValueError(
            f"keypoint_index {keypoint_index} is outside 0..{reference.shape[0] - 1}"
        )
    channel = reference[keypoint_index]
    peak = np.unravel_index(int(np.argmax(channel)), channel.shape)
    selector = slice(None) if all_channels else slice(keypoint_index, keypoint_index + 1)

    grid = np.zeros((len(rows), len(cols)))
    for r, y in enumerate(rows):
        for c, x in enumerate(cols):
            occluded = image.copy()
            occluded[y : y + window, x : x + window] = patch
            diff = np.abs(predict_heatmaps(model, [occluded])[0] - reference)[selector]
            if aggregation is Aggregation.sum_abs:
                grid[r, c] = diff.sum()
            else:
                grid[r, c] = diff[:, peak[0], peak[1]].sum()
        MODULE_LOGGER.debug("Occluded row %d of %d", r + 1, len(rows))
    return ErfMap(
        grid=grid,
        window=window,
        stride=stride,
        keypoint_index=keypoint_index,
        reference_location=(int(peak[0]), int(peak[1])),
        image_size=(height, width),
        aggregation=aggregation,
        all_channels=all_channels,
    )


@attrs.define(frozen=True)
class ErfStats:
    """The smallest box holding the requested share of importance

    :param cell_box: ``(row0, col0, row1, col1)`` inclusive, in window cells
    :param pixel_box: ``(x0, y0, x1, y1)`` inclusive, in image pixels
    :param area_fraction: Pixel box area over image area
    :param mass_fraction: Share of total importance inside the box
    """

    cell_box: tuple[int, int, int, int]
    pixel_box: tuple[int, int, int, int]
    area_fraction: float
    mass_fraction: float


def erf_stats(erf_map: ErfMap, mass_fraction: float = 0.95) -> ErfStats:
    """Smallest axis aligned box of window cells holding ``mass_fraction`` of the importance

    Among boxes of equal cell count the one holding more importance wins, then
    the first in row-major order.

    :raises ValueError: For an all-zero map or a fraction outside ``(0, 1]``

    >>> m = ErfMap(np.eye(3), window=1, stride=1, keypoint_index=0,
    ...            reference_location=(0, 0), image_size=(3, 3))
    >>> erf_stats(m, 0.3).cell_box
    (0, 0, 0, 0)
    >>> erf_stats(m, 0.95).cell_box
    (0, 0, 2, 2)
    """
    if not 0 < mass_fraction <= 1:
        raise ValueError(f"mass_fraction must be in (0, 1], got {mass_fraction}")
    grid = np.asarray(erf_map.grid, dtype=np.float64)
    total = grid.sum()
    if not total > 0:
        raise ValueError("ERF map has no importance to bound")
    target = mass_fraction * total * (1 - 1e-12)
    n_rows, n_cols = grid.shape
    row_prefix = np.vstack([np.zeros(n_cols), np.cumsum(grid, axis=0)])

    best: Optional[tuple[int, float, tuple[int, int, int, int]]] = None
    starts = np.arange(n_cols)
    for r0 in range(n_rows):
        for r1 in range(r0, n_rows):
            height = r1 - r0 + 1
            if best is not None and height > best[0]:
                break
            col_mass = row_prefix[r1 + 1] - row_prefix[r0]
            prefix = np.concatenate([[0.0], np.cumsum(col_mass)])
            ends = np.searchsorted(prefix, prefix[:-1] + target, side="left")
            valid = ends <= n_cols
            if not valid.any():
                continue
            widths = np.where(valid, ends - starts, n_cols + 1)
            areas = height * widths
            for c0 in np.flatnonzero(areas == areas[valid].min()):
                c1 = int(ends[c0]) - 1
                area = int(areas[c0])
                mass = float(prefix[c1 + 1] - prefix[c0])
                if best is None or area < best[0] or (area == best[0] and mass > best[1]):
                    best = (area, mass, (r0, int(c0), r1, c1))
    assert best is not None
    r0, c0, r1, c1 = best[2]
    rows, cols = erf_map.rows, erf_map.cols
    pixel_box = (
        int(cols[c0]),
        int(rows[r0]),
        int(cols[c1]) + erf_map.window - 1,
        int(rows[r1]) + erf_map.window - 1,
    )
    pixel_area = (pixel_box[2] - pixel_box[0] + 1) * (pixel_box[3] - pixel_box[1] + 1)
    return ErfStats(
        cell_box=best[2],
        pixel_box=pixel_box,
        area_fraction=pixel_area / float(erf_map.image_size[0] * erf_map.image_size[1]),
        mass_fraction=best[1] / total,
    )


@attrs.define(frozen=True)
class ReceptiveField:
    """Theoretical receptive field of a chain of layers

    :param size: Side of the field in input pixels
    :param jump: Input pixels between neighbouring output cells
    :param start: Input coordinate of the centre of output cell 0
    """

    size: int
    jump: int
    start: float

    def box(self, row: int, col: int, image_size: Optional[tuple[int, int]] = None):
        """``(x0, y0, x1, y1)`` inclusive pixel box of an output cell, clipped to ``image_size``."""
        half = (self.size - 1) / 2.0
        cx, cy = self.start + col * self.jump, self.start + row * self.jump
        x0, y0 = math.floor(cx - half), math.floor(cy - half)
        x1, y1 = math.ceil(cx + half), math.ceil(cy + half)
        if image_size is not None:
            h, w = image_size
            x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)
        return x0, y0, x1, y1


def theoretical_receptive_field(layers: Union[Module, Sequence[Layer]]) -> ReceptiveField:
    """Compose the receptive field of convolutions and poolings applied in sequence

    :raises ValueError: For a layer that is not a convolution or pooling

    >>> from gccpm.tensor import ConvSpec
    >>> chain = [Conv2d("a", ConvSpec.same(1, 1, 3), None), Pool2d("p", "avg", 8)]
    >>> theoretical_receptive_field(chain)
    ReceptiveField(size=10, jump=8, start=3.5)
    """
    if isinstance(layers, Module):
        layers = layers.layers()
    size, jump, start = 1, 1, 0.0
    for layer in layers:
        if isinstance(layer, Conv2d):
            kernel = layer.spec.dilation * (layer.spec.kernel[0] - 1) + 1
            stride, padding = layer.spec.stride[0], layer.spec.padding[0]
        elif isinstance(layer, Pool2d):
            kernel, stride, padding = layer.kernel, layer.stride, 0
        else:
            raise ValueError(
                f"Layer {layer.name} ({type(layer).__name__}) has no fixed receptive field"
            )
        start += ((kernel - 1) / 2.0 - padding) * jump
        size += (kernel - 1) * jump
        jump *= stride
    return ReceptiveField(size=size, jump=jump, start=start)


@attrs.define(frozen=True)
class ErfComparison:
    """Paired ERF areas of two models over the same images

    :param areas_a: Area fractions of the first model
    :param areas_b: Area fractions of the second model
    :param wins: Images where the second model's area is strictly larger
    :param trials: Images with unequal areas
    :param p_value: One sided sign test of "the second model's area is larger"
    """

    areas_a: tuple[float, ...]
    areas_b: tuple[float, ...]
    wins: int
    trials: int
    p_value: float

    def significant(self, level: float = 0.05) -> bool:
        return self.p_value < level


def compare_erf_areas(
    model_a: Forward,
    model_b: Forward,
    images: Sequence[np.ndarray],
    keypoint_index: int,
    window: int = 11,
    stride: int = 4,
    mass_fraction: float = 0.95,
    seed: int = 0,
) -> ErfComparison:
    """Sign test over ``images`` that ``model_b`` has the wider empirical receptive field

    Both models see the same image and the same patch content at each index.
    Ties are dropped from the test.
    """
    areas_a, areas_b = [], []
    for index, image in enumerate(images):
        per_model = []
        for model in (model_a, model_b):
            erf_map = estimate_erf(
                model,
                image,
                keypoint_index,
                window,
                stride,
                rng=derive_rng(seed, Stream.ERF_PATCH, index),
            )
            per_model.append(erf_stats(erf_map, mass_fraction).area_fraction)
        areas_a.append(per_model[0])
        areas_b.append(per_model[1])
    a, b = np.asarray(areas_a), np.asarray(areas_b)
    wins, trials = int((b > a).sum()), int((b != a).sum())
    p_value = float(binomtest(wins, trials, 0.5, alternative="greater").pvalue) if trials else 1.0
    MODULE_LOGGER.info(
        "ERF area larger for the second model on %d of %d images (p=%.4g)", wins, trials, p_value
    )
    return ErfComparison(tuple(areas_a), tuple(areas_b), wins, trials, p_value)


def render_erf(erf_map: ErfMap) -> np.ndarray:
    """Importance as an image-sized grayscale ``uint8`` map, brightest at the maximum."""
    grid = np.asarray(erf_map.grid, dtype=np.float64)
    peak = grid.max()
    scaled = grid / peak if peak > 0 else np.zeros_like(grid)
    height, width = erf_map.image_size
    canvas = np.zeros((height, width))
    half = erf_map.window // 2
    for r, y in enumerate(erf_map.rows):
        for c, x in enumerate(erf_map.cols):
            cy, cx = int(y) + half, int(x) + half
            canvas[cy, cx] = max(canvas[cy, cx], scaled[r, c])
    kernel = np.ones((erf_map.stride, erf_map.stride), np.uint8)
    canvas = cv2.dilate(canvas, kernel)
    return np.round(canvas * 255).astype(np.uint8)


def overlay_erf(image: np.ndarray, erf_map: ErfMap, stats: ErfStats) -> np.ndarray:
    """The image tinted by importance with the bounding box drawn in green."""
    shade = render_erf(erf_map).astype(np.float64)[..., None] / 255.0
    tinted = image.astype(np.float64) * (0.35 + 0.65 * shade)
    out = np.ascontiguousarray(np.clip(tinted, 0, 255).astype(np.uint8))
    x0, y0, x1, y1 = stats.pixel_box
    cv2.rectangle(out, (x0, y0), (x1, y1), (0, 255, 0), 2)
    return out


def write_erf_outputs(
    out_dir: Union[str, Path],
    image: np.ndarray,
    erf_map: ErfMap,
    stats: ErfStats,
) -> dict[str, Path]:
    """Write ``erf_map.png``, ``erf_overlay.png`` and ``erf.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "map": write_image(out_dir / "erf_map.png", render_erf(erf_map)),
        "overlay": write_image(out_dir / "erf_overlay.png", overlay_erf(image, erf_map, stats)),
        "csv": out_dir / "erf.csv",
    }
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["px", "py", "importance"])
        for px, py, value in erf_map.records():
            writer.writerow([px, py, f"{value:.9g}"])
    return paths
