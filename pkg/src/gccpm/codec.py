"""Keypoint ↔ heatmap conversion and test-time averaging

Cell ``c`` covers image pixels ``c * stride`` to ``(c + 1) * stride - 1`` and its
centre sits at pixel ``(c + 0.5) * stride - 0.5``, so a keypoint at pixel ``x``
lies at cell coordinate ``(x + 0.5) / stride - 0.5``. Every in-image keypoint is
then within half a cell of the grid, and reversing a heatmap row is exactly the
image mirror ``x -> input_size - 1 - x``.
"""

from __future__ import annotations

import logging
from enum import IntEnum
from typing import Callable, List, Optional, Sequence, Union

import attrs
import cv2
import numpy as np

from gccpm._keypoints import FLIP_PAIRS, NUM_KEYPOINTS
from gccpm._utils import raise_if_errors
from gccpm.model.network import images_to_batch
from gccpm.tensor import Tensor, default_dtype, no_grad

MODULE_LOGGER = logging.getLogger(__name__)

#: A network: maps an N×3×S×S batch to the per-stage heatmaps
Forward = Callable[[Tensor], Sequence[Tensor]]


class Visibility(IntEnum):
    #: Not annotated, excluded from loss and metrics
    absent = 0
    #: Annotated but hidden
    occluded = 1
    #: Annotated and in view
    visible = 2


def _points(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64).reshape(-1, 2)


def _visibility(value) -> np.ndarray:
    return np.asarray(value, dtype=np.int64).reshape(-1)


def _optional_array(value) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64).reshape(-1)


@attrs.define(eq=False)
class KeypointSet:
    """Keypoint locations in image pixels

    :param points: K×2 array of ``(x, y)``
    :param visibility: K values of :class:`Visibility`
    :param head_size: PCKh reference length in pixels, ``None`` for predictions
    :param confidence: K peak values, set by :func:`decode_heatmaps`

    >>> kps = KeypointSet(np.zeros((16, 2)), np.full(16, 2), head_size=40.0)
    >>> int(kps.annotated.sum())
    16
    """

    points: np.ndarray = attrs.field(converter=_points)
    visibility: np.ndarray = attrs.field(converter=_visibility)
    head_size: Optional[float] = None
    confidence: Optional[np.ndarray] = attrs.field(default=None, converter=_optional_array)

    def __attrs_post_init__(self):
        errors = []
        if len(self.points) != len(self.visibility):
            errors.append(
                ValueError(
                    f"{len(self.points)} points but {len(self.visibility)} visibility flags"
                )
            )
        if not np.isin(self.visibility, [int(v) for v in Visibility]).all():
            errors.append(
                ValueError(f"visibility must be 0, 1 or 2, got {sorted(set(self.visibility.tolist()))}")
            )
        if self.head_size is not None and not self.head_size > 0:
            errors.append(ValueError(f"head_size must be > 0, got {self.head_size}"))
        if self.confidence is not None and len(self.confidence) != len(self.points):
            errors.append(ValueError("confidence needs one value per point"))
        raise_if_errors("Invalid KeypointSet", errors)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def annotated(self) -> np.ndarray:
        """Mask of visible or occluded points."""
        return self.visibility != Visibility.absent

    def copy(self) -> KeypointSet:
        return KeypointSet(
            self.points.copy(),
            self.visibility.copy(),
            self.head_size,
            None if self.confidence is None else self.confidence.copy(),
        )


def _pair_list(value) -> List[List[int]]:
    return [[int(a), int(b)] for a, b in value]


@attrs.define
class CodecConfig:
    """Heatmap geometry

    :param heatmap_size: Side of a heatmap in cells
    :param output_stride: Image pixels per cell
    :param sigma: Gaussian standard deviation in cells
    :param num_keypoints: Keypoint channels
    :param flip_pairs: ``[right, left]`` channel index pairs swapped by a mirror
    """

    heatmap_size: int = 32
    output_stride: int = 8
    sigma: float = 2.0
    num_keypoints: int = NUM_KEYPOINTS
    flip_pairs: List[List[int]] = attrs.field(
        factory=lambda: [list(p) for p in FLIP_PAIRS], converter=_pair_list
    )

    def __attrs_post_init__(self):
        errors = []
        if not self.sigma > 0:
            errors.append(ValueError(f"sigma must be > 0, got {self.sigma}"))
        if self.heatmap_size < 1 or self.output_stride < 1:
            errors.append(
                ValueError(
                    f"heatmap_size and output_stride must be positive, got "
                    f"{self.heatmap_size} and {self.output_stride}"
                )
            )
        flat = [i for pair in self.flip_pairs for i in pair]
        if len(flat) != len(set(flat)):
            errors.append(ValueError(f"flip_pairs must be disjoint, got {self.flip_pairs}"))
        bad = [i for i in flat if not 0 <= i < self.num_keypoints]
        if bad:
            errors.append(
                ValueError(f"flip_pairs indices {bad} are outside 0..{self.num_keypoints - 1}")
            )
        raise_if_errors("Invalid CodecConfig", errors)

    @property
    def input_size(self) -> int:
        return self.heatmap_size * self.output_stride

    def swap_order(self) -> np.ndarray:
        """Channel permutation applied after a mirror

        >>> CodecConfig(num_keypoints=4, flip_pairs=[[0, 3]]).swap_order().tolist()
        [3, 1, 2, 0]
        """
        order = np.arange(self.num_keypoints)
        for right, left in self.flip_pairs:
            order[right], order[left] = left, right
        return order


def to_cells(points: np.ndarray, stride: int) -> np.ndarray:
    """Image pixel coordinates to cell coordinates

    >>> to_cells(np.array([0.0, 3.5, 255.0]), 8).tolist()
    [-0.4375, 0.0, 31.4375]
    """
    return (np.asarray(points, dtype=np.float64) + 0.5) / stride - 0.5


def to_pixels(cells: np.ndarray, stride: int) -> np.ndarray:
    """Inverse of :func:`to_cells`."""
    return (np.asarray(cells, dtype=np.float64) + 0.5) * stride - 0.5


def encode_heatmaps(kps: KeypointSet, cfg: CodecConfig) -> Tensor:
    """Render one Gaussian per keypoint

    Channel ``n`` holds ``exp(-((x - x_n)^2 + (y - y_n)^2) / (2 sigma^2))`` over the
    cell grid, with the keypoint in cell coordinates (:func:`to_cells`). Absent keypoints
    give all-zero channels.

    :return: K×h×h heatmaps

    >>> cfg = CodecConfig(heatmap_size=8, output_stride=4, sigma=1.0, num_keypoints=1, flip_pairs=[])
    >>> maps = encode_heatmaps(KeypointSet([[17.5, 13.5]], [2]), cfg).data
    >>> float(maps[0, 3, 4]), round(float(maps[0, 3, 5]), 4)
    (1.0, 0.6065)
    """
    if len(kps) != cfg.num_keypoints:
        raise ValueError(f"expected {cfg.num_keypoints} keypoints, got {len(kps)}")
    h = cfg.heatmap_size
    grid = np.arange(h, dtype=np.float64)
    centers = to_cells(kps.points, cfg.output_stride)
    dx = (grid[None, :] - centers[:, 0:1]) ** 2
    dy = (grid[None, :] - centers[:, 1:2]) ** 2
    maps = np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * cfg.sigma**2))
    maps[~kps.annotated] = 0.0
    return Tensor(maps.astype(default_dtype()))


def target_weights(kps: KeypointSet) -> np.ndarray:
    """1 for annotated keypoints, 0 for absent ones."""
    return kps.annotated.astype(np.float64)


def with_background(maps: np.ndarray) -> np.ndarray:
    """Append a background channel, ``1 - max`` over the keypoint channels."""
    background = 1.0 - maps.max(axis=0, keepdims=True)
    return np.concatenate([maps, background], axis=0)


def decode_heatmaps(maps: Union[Tensor, np.ndarray], cfg: CodecConfig) -> KeypointSet:
    """Peak location of every channel, refined by a quarter cell

    The argmax (first index on ties, row-major) is shifted by 0.25 cells towards
    the larger immediate neighbour along each axis when both neighbours exist
    and differ, then mapped back to pixels with :func:`to_pixels`. Confidence is
    the peak value.
    Extra channels beyond ``num_keypoints`` (a background map) are ignored.

    :raises ValueError: If ``maps`` contains NaN or infinity

    >>> cfg = CodecConfig(heatmap_size=16, output_stride=8, num_keypoints=1, flip_pairs=[])
    >>> maps = np.zeros((1, 16, 16)); maps[0, 10, 10] = 0.9; maps[0, 10, 11] = 0.8
    >>> decode_heatmaps(maps, cfg).points.tolist()
    [[85.5, 83.5]]
    """
    data = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype=np.float64)
    data = data[: cfg.num_keypoints]
    if not np.isfinite(data).all():
        raise ValueError("cannot decode heatmaps containing NaN or infinity")
    k, h, w = data.shape
    flat = data.reshape(k, -1).argmax(axis=1)
    ys, xs = np.divmod(flat, w)
    rows = np.arange(k)
    peak = data[rows, ys, xs]
    fx, fy = xs.astype(np.float64), ys.astype(np.float64)
    inner_x = (xs > 0) & (xs < w - 1)
    inner_y = (ys > 0) & (ys < h - 1)
    right = data[rows, ys, np.minimum(xs + 1, w - 1)]
    left = data[rows, ys, np.maximum(xs - 1, 0)]
    down = data[rows, np.minimum(ys + 1, h - 1), xs]
    up = data[rows, np.maximum(ys - 1, 0), xs]
    fx += np.where(inner_x, 0.25 * np.sign(right - left), 0.0)
    fy += np.where(inner_y, 0.25 * np.sign(down - up), 0.0)
    points = to_pixels(np.stack([fx, fy], axis=1), cfg.output_stride)
    return KeypointSet(points, np.full(k, int(Visibility.visible)), confidence=peak)


def mirror_maps(maps: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Reverse the width axis and swap every left/right channel pair

    Works on K×h×w or N×K×h×w arrays. Extra channels beyond
    ``num_keypoints`` keep their place.
    """
    order = np.arange(maps.shape[-3])
    order[: cfg.num_keypoints] = cfg.swap_order()
    return maps[..., order, :, ::-1]


def predict_heatmaps(model: Forward, images: Sequence[np.ndarray]) -> np.ndarray:
    """Final-stage heatmaps of each image, one forward pass per image

    Images are run separately so every result is independent of its batch mates.
    """
    outputs = []
    with no_grad():
        for image in images:
            stages = model(images_to_batch([image]))
            outputs.append(np.asarray(stages[-1].data[0], dtype=np.float64))
    return np.stack(outputs)


def flip_average(model: Forward, image: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Mean of the heatmaps of ``image`` and the mirrored heatmaps of its mirror image

    :return: K×h×h
    """
    plain, flipped = predict_heatmaps(model, [image, np.ascontiguousarray(image[:, ::-1])])
    return (plain + mirror_maps(flipped, cfg)) / 2.0


def _scale_matrix(scale: float, center: float) -> np.ndarray:
    offset = (1.0 - scale) * center
    return np.array([[scale, 0.0, offset], [0.0, scale, offset]], dtype=np.float64)


def rescale_image(
    image: np.ndarray, scale: float, fill_color: Sequence[int] = (128, 128, 128)
) -> np.ndarray:
    """Zoom ``image`` by ``scale`` about its centre, keeping its size

    Uncovered pixels are set to ``fill_color``.
    """
    size = image.shape[1], image.shape[0]
    center = (image.shape[1] - 1) / 2.0
    return cv2.warpAffine(
        image,
        _scale_matrix(scale, center),
        size,
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(int(c) for c in fill_color),
    )


def unscale_heatmaps(maps: np.ndarray, scale: float, cfg: CodecConfig) -> np.ndarray:
    """Resample heatmaps of a zoomed image back onto the original image's grid (bilinear)."""
    h = maps.shape[-1]
    center = (h - 1) / 2.0
    matrix = _scale_matrix(scale, center)
    return np.stack(
        [
            cv2.warpAffine(
                channel,
                matrix,
                (h, h),
                flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                borderMode=cv2.BORDER_REPLICATE,
            )
            for channel in np.asarray(maps, dtype=np.float64)
        ]
    )


def multiscale_average(
    model: Forward,
    image: np.ndarray,
    scales: Sequence[float],
    cfg: CodecConfig,
    flip: bool = False,
    fill_color: Sequence[int] = (128, 128, 128),
) -> np.ndarray:
    """Equal-weight mean of the heatmaps predicted at several zoom levels

    Each zoomed image keeps the input size, padded with ``fill_color``; its
    heatmaps are resampled onto the common grid before averaging. A scale of
    exactly 1 skips both resamplings.

    :param scales: Zoom factors, for example ``[0.75, 1.0, 1.25]``
    :param flip: Use :func:`flip_average` at every scale
    :raises ValueError: If ``scales`` is empty or holds a non-positive value
    """
    if not scales:
        raise ValueError("multiscale_average needs at least one scale")
    if min(scales) <= 0:
        raise ValueError(f"scales must be positive, got {list(scales)}")
    total = None
    for scale in scales:
        scaled = image if scale == 1.0 else rescale_image(image, scale, fill_color)
        maps = (
            flip_average(model, scaled, cfg) if flip else predict_heatmaps(model, [scaled])[0]
        )
        if scale != 1.0:
            maps = unscale_heatmaps(maps, scale, cfg)
        total = maps if total is None else total + maps
    return total / len(scales)
