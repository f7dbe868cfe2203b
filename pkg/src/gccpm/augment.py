"""Training-time augmentation

Every function takes an explicit :class:`numpy.random.Generator`, so a seed
and a config fully determine the output. Images are H×W×3 ``uint8`` arrays in
RGB order; keypoints are carried alongside in a
:class:`~gccpm.codec.KeypointSet`.

- :func:`geometric_augment` scales, rotates and mirrors the image about its
  centre and letterboxes it to the network input size.
- :func:`body_mask` paints one randomly sized, rotated rectangle of a single
  random colour near the image centre, imitating an occluding object.
- :func:`keypoint_mask` covers a few visible keypoints with small patches of the
  fill colour, the simpler occlusion scheme body masking is compared against.
- :func:`channel_permute` shuffles the colour planes.
"""

from __future__ import annotations

import logging
import math
from enum import Enum, unique
from typing import List, Optional

import attrs
import cv2
import numpy as np

from gccpm._keypoints import FLIP_PAIRS
from gccpm._utils import raise_if_errors
from gccpm.codec import KeypointSet, Visibility

MODULE_LOGGER = logging.getLogger(__name__)


@attrs.define
class BodyMaskConfig:
    """
    :param enabled: Apply the mask under the ``standard`` profile too
    :param max_side_frac: Upper bound of each rectangle side, as a fraction of the input size
    :param center_jitter_frac: Largest offset of the rectangle centre from the image centre,
        per axis, as a fraction of the input size
    """

    enabled: bool = False
    max_side_frac: float = 0.3
    center_jitter_frac: float = 0.1


@attrs.define
class KeypointMaskConfig:
    """
    :param enabled: Apply the patches under the ``standard`` profile too
    :param patch_size_px: Side of each square patch
    :param max_keypoints: Most keypoints covered per sample
    """

    enabled: bool = False
    patch_size_px: int = 16
    max_keypoints: int = 4


@attrs.define
class AugmentConfig:
    """Augmentation settings

    :param input_size: Side of the square output image
    :param scale_range: ``[low, high]`` zoom factor range
    :param rotation_deg: Rotations are drawn from ``[-rotation_deg, rotation_deg]``
    :param flip_prob: Chance of a horizontal mirror
    :param permute_channels: Shuffle the colour planes under the ``standard`` profile
    :param fill_color: RGB colour of the letterbox padding and keypoint patches
    :param flip_pairs: ``[right, left]`` keypoint index pairs swapped by a mirror
    :param body_mask: Body mask settings
    :param keypoint_mask: Keypoint mask settings
    """

    input_size: int = 256
    scale_range: List[float] = attrs.Factory(lambda: [0.75, 1.25])
    rotation_deg: float = 40.0
    flip_prob: float = 0.5
    permute_channels: bool = True
    fill_color: List[int] = attrs.Factory(lambda: [128, 128, 128])
    flip_pairs: List[List[int]] = attrs.Factory(lambda: [list(p) for p in FLIP_PAIRS])
    body_mask: BodyMaskConfig = attrs.Factory(BodyMaskConfig)
    keypoint_mask: KeypointMaskConfig = attrs.Factory(KeypointMaskConfig)

    def __attrs_post_init__(self):
        errors = []
        if self.input_size < 1:
            errors.append(ValueError(f"input_size must be >= 1, got {self.input_size}"))
        if len(self.scale_range) != 2 or not 0 < self.scale_range[0] <= self.scale_range[1]:
            errors.append(
                ValueError(f"scale_range must be an ordered positive pair, got {self.scale_range}")
            )
        if self.rotation_deg < 0:
            errors.append(ValueError(f"rotation_deg must be >= 0, got {self.rotation_deg}"))
        if not 0 <= self.flip_prob <= 1:
            errors.append(ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}"))
        if len(self.fill_color) != 3 or not all(0 <= c <= 255 for c in self.fill_color):
            errors.append(ValueError(f"fill_color must be three values in 0..255, got {self.fill_color}"))
        if not 0 < self.body_mask.max_side_frac <= 1:
            errors.append(
                ValueError(
                    f"body_mask.max_side_frac must be in (0, 1], got {self.body_mask.max_side_frac}"
                )
            )
        if not 0 <= self.body_mask.center_jitter_frac <= 0.5:
            errors.append(
                ValueError(
                    "body_mask.center_jitter_frac must be in [0, 0.5], got "
                    f"{self.body_mask.center_jitter_frac}"
                )
            )
        if self.keypoint_mask.patch_size_px < 1:
            errors.append(
                ValueError(
                    f"keypoint_mask.patch_size_px must be >= 1, got {self.keypoint_mask.patch_size_px}"
                )
            )
        if self.keypoint_mask.max_keypoints < 0:
            errors.append(
                ValueError(
                    f"keypoint_mask.max_keypoints must be >= 0, got {self.keypoint_mask.max_keypoints}"
                )
            )
        raise_if_errors("Invalid AugmentConfig", errors)

    @classmethod
    def mpii(cls, **kwargs) -> AugmentConfig:
        """The narrower ±30° rotation range used for the MPII-style setup."""
        kwargs.setdefault("rotation_deg", 30.0)
        return cls(**kwargs)

    def swap_order(self, num_keypoints: int) -> np.ndarray:
        order = np.arange(num_keypoints)
        for right, left in self.flip_pairs:
            order[right], order[left] = left, right
        return order


@attrs.define(eq=False)
class Sample:
    """An image and its keypoints

    :param image: H×W×3 ``uint8`` pixels
    :param keypoints: Annotations in image pixels
    """

    image: np.ndarray
    keypoints: KeypointSet

    def __attrs_post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"Sample image must be H×W×3, got {self.image.shape}")


@unique
class AugmentationProfile(str, Enum):
    #: Letterbox only
    none = "none"
    #: Scale, rotation, mirror and colour permutation; masks only when enabled in the config
    standard = "standard"
    #: ``standard`` plus a body mask on every sample
    body_mask = "body_mask"
    #: ``standard`` plus keypoint patches on every sample
    keypoint_mask = "keypoint_mask"


@attrs.define(frozen=True)
class GeometricParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    flip: bool = False


def sample_geometric_params(rng: np.random.Generator, cfg: AugmentConfig) -> GeometricParams:
    low, high = cfg.scale_range
    return GeometricParams(
        scale=float(rng.uniform(low, high)),
        angle_deg=float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
        flip=bool(rng.random() < cfg.flip_prob),
    )


def geometric_matrix(
    params: GeometricParams, height: int, width: int, out_size: int
) -> np.ndarray:
    """2×3 affine map from source pixels to output pixels

    The source is fitted (longer side to ``out_size``), scaled by
    ``params.scale``, rotated by ``params.angle_deg`` (counter-clockwise on
    screen) and optionally mirrored, all about its centre, which lands on the
    output centre.

    >>> geometric_matrix(GeometricParams(), 256, 256, 256).tolist()
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    """
    fit = out_size / max(height, width)
    s = fit * params.scale
    theta = math.radians(params.angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    linear = s * np.array([[cos, sin], [-sin, cos]])
    if params.flip:
        linear = np.array([[-1.0, 0.0], [0.0, 1.0]]) @ linear
    src_center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    dst_center = np.full(2, (out_size - 1) / 2.0)
    offset = dst_center - linear @ src_center
    return np.hstack([linear, offset[:, None]])


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return points @ matrix[:, :2].T + matrix[:, 2]


def apply_geometric(sample: Sample, params: GeometricParams, cfg: AugmentConfig) -> Sample:
    """Warp ``sample`` with fixed parameters

    Keypoints move with the image; a mirror swaps each left/right pair.
    Annotated keypoints that end up outside the output are marked occluded
    and keep their (out of range) coordinates.
    """
    h, w = sample.image.shape[:2]
    size = cfg.input_size
    matrix = geometric_matrix(params, h, w, size)
    image = cv2.warpAffine(
        np.ascontiguousarray(sample.image),
        matrix,
        (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(int(c) for c in cfg.fill_color),
    )
    kps = sample.keypoints
    points = transform_points(kps.points, matrix)
    visibility = kps.visibility.copy()
    if params.flip:
        order = cfg.swap_order(len(kps))
        points, visibility = points[order], visibility[order]
    outside = ((points < 0) | (points > size - 1)).any(axis=1)
    visibility[outside & (visibility == Visibility.visible)] = Visibility.occluded
    head_size = None if kps.head_size is None else kps.head_size * matrix_scale(matrix)
    return Sample(image, KeypointSet(points, visibility, head_size))


def matrix_scale(matrix: np.ndarray) -> float:
    return float(math.sqrt(abs(np.linalg.det(matrix[:, :2]))))


def geometric_augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """Random zoom, rotation and mirror, letterboxed to ``cfg.input_size``."""
    return apply_geometric(sample, sample_geometric_params(rng, cfg), cfg)


def letterbox(sample: Sample, cfg: AugmentConfig) -> Sample:
    """Fit and centre ``sample`` in a ``cfg.input_size`` square without other changes."""
    return apply_geometric(sample, GeometricParams(), cfg)


@attrs.define(frozen=True)
class MaskRegion:
    """A filled rotated rectangle

    :param center: ``(x, y)`` in pixels
    :param width: Side along the rotated x axis
    :param height: Side along the rotated y axis
    :param angle_deg: Rotation of the rectangle
    :param color: RGB fill
    """

    center: tuple[float, float]
    width: float
    height: float
    angle_deg: float
    color: tuple[int, int, int]

    def corners(self) -> np.ndarray:
        """The four vertices, in order around the rectangle."""
        theta = math.radians(self.angle_deg)
        u = np.array([math.cos(theta), math.sin(theta)])
        v = np.array([-math.sin(theta), math.cos(theta)])
        c = np.asarray(self.center)
        hw, hh = (self.width - 1) / 2.0, (self.height - 1) / 2.0
        return np.array(
            [c - hw * u - hh * v, c + hw * u - hh * v, c + hw * u + hh * v, c - hw * u + hh * v]
        )

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Whether each ``(x, y)`` lies inside or on the rectangle."""
        theta = math.radians(self.angle_deg)
        d = np.asarray(points, dtype=np.float64).reshape(-1, 2) - np.asarray(self.center)
        along = d[:, 0] * math.cos(theta) + d[:, 1] * math.sin(theta)
        across = -d[:, 0] * math.sin(theta) + d[:, 1] * math.cos(theta)
        eps = 1e-9
        return (np.abs(along) <= (self.width - 1) / 2.0 + eps) & (
            np.abs(across) <= (self.height - 1) / 2.0 + eps
        )

    def pixel_mask(self, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width]
        inside = self.contains(np.stack([xs.ravel(), ys.ravel()], axis=1))
        return inside.reshape(height, width)


def body_mask_region(
    rng: np.random.Generator, cfg: AugmentConfig, height: int, width: int
) -> MaskRegion:
    """Draw the rectangle a body mask will paint

    Each side is uniform in ``[1, max_side_frac * input_size]``; the centre is
    jittered uniformly by up to ``center_jitter_frac * input_size`` per axis;
    the angle is uniform over a half turn and the colour uniform over RGB.
    """
    limit = max(1.0, cfg.body_mask.max_side_frac * cfg.input_size)
    jitter = cfg.body_mask.center_jitter_frac * cfg.input_size
    side_w, side_h = rng.uniform(1.0, limit, size=2)
    offset = rng.uniform(-jitter, jitter, size=2)
    angle = rng.uniform(0.0, 180.0)
    color = rng.integers(0, 256, size=3)
    return MaskRegion(
        center=((width - 1) / 2.0 + offset[0], (height - 1) / 2.0 + offset[1]),
        width=float(side_w),
        height=float(side_h),
        angle_deg=float(angle),
        color=tuple(int(c) for c in color),
    )


def paint_region(image: np.ndarray, region: MaskRegion) -> np.ndarray:
    out = image.copy()
    out[region.pixel_mask(*image.shape[:2])] = np.asarray(region.color, dtype=image.dtype)
    return out


def body_mask(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Paint one uniformly coloured rotated rectangle near the image centre."""
    return paint_region(image, body_mask_region(rng, cfg, *image.shape[:2]))


def apply_body_mask(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """:func:`body_mask` on the image; visible keypoints under the rectangle become occluded."""
    region = body_mask_region(rng, cfg, *sample.image.shape[:2])
    kps = sample.keypoints.copy()
    covered = region.contains(kps.points) & (kps.visibility == Visibility.visible)
    kps.visibility[covered] = Visibility.occluded
    return Sample(paint_region(sample.image, region), kps)


def keypoint_mask(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """Cover up to ``max_keypoints`` visible keypoints with squares of the fill colour

    The number of patches is uniform in ``[0, min(max_keypoints, visible)]``.
    Annotations are returned unchanged.
    """
    kps = sample.keypoints
    h, w = sample.image.shape[:2]
    inside = (
        (kps.points[:, 0] >= 0)
        & (kps.points[:, 0] <= w - 1)
        & (kps.points[:, 1] >= 0)
        & (kps.points[:, 1] <= h - 1)
    )
    candidates = np.flatnonzero((kps.visibility == Visibility.visible) & inside)
    limit = min(cfg.keypoint_mask.max_keypoints, len(candidates))
    if limit == 0:
        return Sample(sample.image.copy(), kps.copy())
    count = int(rng.integers(0, limit + 1))
    chosen = rng.choice(candidates, size=count, replace=False)
    image = sample.image.copy()
    size = cfg.keypoint_mask.patch_size_px
    fill = np.asarray(cfg.fill_color, dtype=image.dtype)
    for index in np.sort(chosen):
        x, y = (int(round(c)) for c in kps.points[index])
        x0, y0 = x - size // 2, y - size // 2
        image[max(y0, 0) : max(y0 + size, 0), max(x0, 0) : max(x0 + size, 0)] = fill
    return Sample(image, kps.copy())


def permute_channels(image: np.ndarray, order) -> np.ndarray:
    return np.ascontiguousarray(image[..., list(order)])


def channel_permute(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reorder the three colour planes by a uniformly random permutation."""
    return permute_channels(image, rng.permutation(3))


def augment_sample(
    sample: Sample,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    profile: AugmentationProfile | str = AugmentationProfile.standard,
) -> Sample:
    """Compose the augmentations of ``profile``

    Order: geometric, body mask, keypoint mask, channel permutation.
    """
    profile = AugmentationProfile(profile)
    if profile is AugmentationProfile.none:
        return letterbox(sample, cfg)
    out = geometric_augment(sample, rng, cfg)
    if cfg.body_mask.enabled or profile is AugmentationProfile.body_mask:
        out = apply_body_mask(out, rng, cfg)
    if cfg.keypoint_mask.enabled or profile is AugmentationProfile.keypoint_mask:
        out = keypoint_mask(out, rng, cfg)
    if cfg.permute_channels:
        out = Sample(channel_permute(out.image, rng), out.keypoints)
    return out


def draw_keypoints(
    image: np.ndarray,
    kps: KeypointSet,
    skeleton: Optional[tuple] = None,
    radius: int = 3,
) -> np.ndarray:
    """Overlay keypoints (green visible, red occluded) and limbs for visual checks."""
    out = np.ascontiguousarray(image.copy())
    if skeleton is not None:
        for a, b in skeleton:
            if kps.annotated[a] and kps.annotated[b]:
                pa = tuple(int(round(c)) for c in kps.points[a])
                pb = tuple(int(round(c)) for c in kps.points[b])
                cv2.line(out, pa, pb, (255, 255, 255), 1, cv2.LINE_AA)
    for point, vis in zip(kps.points, kps.visibility):
        if vis == Visibility.absent:
            continue
        color = (0, 255, 0) if vis == Visibility.visible else (255, 0, 0)
        cv2.circle(out, tuple(int(round(c)) for c in point), radius, color, -1, cv2.LINE_AA)
    return out
