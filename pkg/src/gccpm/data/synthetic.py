"""Stick figure images with exact keypoints

A figure is built from the pelvis outwards: torso, neck and head up; hips,
thighs and shins down; shoulders, upper arms and forearms from the thorax.
Every length is a fraction of the image side, so the same config renders at
any resolution. Limbs on the figure's right are drawn in a different shade
from those on its left, so mirrored poses stay distinguishable.

With ``figures > 1`` distractor figures are drawn first, away from the centre;
only the central figure is annotated.
"""

from __future__ import annotations

import logging
import math
from enum import Enum, unique
from typing import List

import attrs
import cv2
import numpy as np

from gccpm._keypoints import (
    HEAD_TOP,
    LEFT,
    NUM_KEYPOINTS,
    PELVIS,
    RIGHT,
    SKELETON,
    THORAX,
    UPPER_NECK,
)
from gccpm._utils import Stream, derive_rng, raise_if_errors
from gccpm.augment import Sample
from gccpm.codec import KeypointSet, Visibility

MODULE_LOGGER = logging.getLogger(__name__)

RIGHT_COLOR = (230, 70, 50)
LEFT_COLOR = (60, 120, 235)
CENTER_COLOR = (235, 235, 225)


@unique
class BackgroundKind(str, Enum):
    #: One random dark colour
    solid = "solid"
    #: Independent dark noise per pixel
    noise = "noise"


def _range(value) -> List[float]:
    return [float(v) for v in value]


@attrs.define
class BoneLengths:
    """Length ranges ``[low, high]`` per body segment, as fractions of the image side."""

    torso: List[float] = attrs.field(factory=lambda: [0.16, 0.20], converter=_range)
    neck: List[float] = attrs.field(factory=lambda: [0.03, 0.045], converter=_range)
    head: List[float] = attrs.field(factory=lambda: [0.06, 0.08], converter=_range)
    hip: List[float] = attrs.field(factory=lambda: [0.04, 0.06], converter=_range)
    thigh: List[float] = attrs.field(factory=lambda: [0.13, 0.16], converter=_range)
    shin: List[float] = attrs.field(factory=lambda: [0.12, 0.15], converter=_range)
    shoulder: List[float] = attrs.field(factory=lambda: [0.06, 0.08], converter=_range)
    upper_arm: List[float] = attrs.field(factory=lambda: [0.10, 0.13], converter=_range)
    forearm: List[float] = attrs.field(factory=lambda: [0.09, 0.12], converter=_range)


@attrs.define
class JointAngles:
    """Angle ranges ``[low, high]`` in radians

    Swings are measured from straight down, bends relative to the parent segment.
    """

    torso_tilt: List[float] = attrs.field(factory=lambda: [-0.3, 0.3], converter=_range)
    neck_bend: List[float] = attrs.field(factory=lambda: [-0.3, 0.3], converter=_range)
    head_bend: List[float] = attrs.field(factory=lambda: [-0.2, 0.2], converter=_range)
    thigh_swing: List[float] = attrs.field(factory=lambda: [-0.2, 0.6], converter=_range)
    knee_bend: List[float] = attrs.field(factory=lambda: [0.0, 1.2], converter=_range)
    arm_swing: List[float] = attrs.field(factory=lambda: [-0.5, 2.8], converter=_range)
    elbow_bend: List[float] = attrs.field(factory=lambda: [0.0, 2.0], converter=_range)


@attrs.define
class SynthConfig:
    """Synthetic data settings

    :param image_size: Side of the square images in pixels
    :param limb_thickness: ``[low, high]`` line width in pixels
    :param bones: Segment length ranges
    :param angles: Joint angle ranges
    :param background: ``solid`` or ``noise``
    :param figures: Figures per image, the central one annotated
    :param margin_frac: Smallest gap between the annotated figure and the image border
    :param seed: Dataset seed
    """

    image_size: int = 256
    limb_thickness: List[int] = attrs.Factory(lambda: [3, 6])
    bones: BoneLengths = attrs.Factory(BoneLengths)
    angles: JointAngles = attrs.Factory(JointAngles)
    background: BackgroundKind = attrs.field(default=BackgroundKind.solid, converter=BackgroundKind)
    figures: int = 1
    margin_frac: float = 0.05
    seed: int = 0

    def __attrs_post_init__(self):
        errors = []
        if self.image_size < 32:
            errors.append(ValueError(f"image_size must be >= 32, got {self.image_size}"))
        if len(self.limb_thickness) != 2 or not 1 <= self.limb_thickness[0] <= self.limb_thickness[1]:
            errors.append(ValueError(f"limb_thickness must be 1 <= low <= high, got {self.limb_thickness}"))
        for name, span in attrs.asdict(self.bones).items():
            if len(span) != 2 or not 0 < span[0] <= span[1]:
                errors.append(ValueError(f"bones.{name} must be a positive ordered pair, got {span}"))
        for name, span in attrs.asdict(self.angles).items():
            if len(span) != 2 or span[0] > span[1]:
                errors.append(ValueError(f"angles.{name} must be an ordered pair, got {span}"))
        if self.figures < 1:
            errors.append(ValueError(f"figures must be >= 1, got {self.figures}"))
        if not 0.05 <= self.margin_frac < 0.4:
            errors.append(ValueError(f"margin_frac must be in [0.05, 0.4), got {self.margin_frac}"))
        raise_if_errors("Invalid SynthConfig", errors)


def _step(origin: np.ndarray, angle: float, length: float) -> np.ndarray:
    """``origin`` moved ``length`` along ``angle``, where 0 points down the image."""
    return origin + length * np.array([math.sin(angle), math.cos(angle)])


def _pose(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Keypoints of one figure relative to its pelvis, in pixels."""
    size = cfg.image_size
    bone = {k: rng.uniform(*v) * size for k, v in attrs.asdict(cfg.bones).items()}
    angle = {k: rng.uniform(*v) for k, v in attrs.asdict(cfg.angles).items()}
    # Independent draws for the second side of each paired joint
    second = {
        k: rng.uniform(*getattr(cfg.angles, k))
        for k in ("thigh_swing", "knee_bend", "arm_swing", "elbow_bend")
    }

    pts = np.zeros((NUM_KEYPOINTS, 2))
    tilt = angle["torso_tilt"]
    up = math.pi + tilt
    # the figure faces the camera: its right side is on the image left
    across = np.array([-math.cos(tilt), math.sin(tilt)])
    pts[PELVIS] = 0.0
    pts[THORAX] = _step(pts[PELVIS], up, bone["torso"])
    neck = up + angle["neck_bend"]
    pts[UPPER_NECK] = _step(pts[THORAX], neck, bone["neck"])
    pts[HEAD_TOP] = _step(pts[UPPER_NECK], neck + angle["head_bend"], bone["head"])

    for side, hip, knee, ankle, swing, bend in (
        (1.0, 2, 1, 0, angle["thigh_swing"], angle["knee_bend"]),
        (-1.0, 3, 4, 5, second["thigh_swing"], second["knee_bend"]),
    ):
        pts[hip] = pts[PELVIS] + side * bone["hip"] * across
        thigh = tilt - side * swing
        pts[knee] = _step(pts[hip], thigh, bone["thigh"])
        pts[ankle] = _step(pts[knee], thigh + side * bend, bone["shin"])

    for side, shoulder, elbow, wrist, swing, bend in (
        (1.0, 12, 11, 10, angle["arm_swing"], angle["elbow_bend"]),
        (-1.0, 13, 14, 15, second["arm_swing"], second["elbow_bend"]),
    ):
        pts[shoulder] = pts[THORAX] + side * bone["shoulder"] * across
        arm = tilt - side * swing
        pts[elbow] = _step(pts[shoulder], arm, bone["upper_arm"])
        pts[wrist] = _step(pts[elbow], arm - side * bend, bone["forearm"])
    return pts


def _segment_color(a: int, b: int) -> tuple[int, int, int]:
    if a in RIGHT or b in RIGHT:
        return RIGHT_COLOR
    if a in LEFT or b in LEFT:
        return LEFT_COLOR
    return CENTER_COLOR


def _draw_figure(image: np.ndarray, pts: np.ndarray, thickness: int) -> None:
    for a, b in SKELETON:
        cv2.line(
            image,
            tuple(int(round(c)) for c in pts[a]),
            tuple(int(round(c)) for c in pts[b]),
            _segment_color(a, b),
            thickness,
            cv2.LINE_AA,
        )
    head_center = (pts[HEAD_TOP] + pts[UPPER_NECK]) / 2.0
    radius = max(1, int(round(np.linalg.norm(pts[HEAD_TOP] - pts[UPPER_NECK]) / 2.0)))
    cv2.circle(
        image, tuple(int(round(c)) for c in head_center), radius, CENTER_COLOR, -1, cv2.LINE_AA
    )


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    shape = (cfg.image_size, cfg.image_size, 3)
    if cfg.background is BackgroundKind.noise:
        return rng.integers(0, 101, size=shape, dtype=np.uint8)
    color = rng.integers(0, 101, size=3, dtype=np.uint8)
    return np.broadcast_to(color, shape).copy()


def _fit(pts: np.ndarray, anchor: np.ndarray, pad: float, cfg: SynthConfig) -> np.ndarray:
    """Place the pelvis at ``anchor`` and shrink the figure until it clears the margin."""
    size = cfg.image_size
    margin = cfg.margin_frac * size + pad
    low, high = margin, size - 1 - margin
    scale = 1.0
    for axis in (0, 1):
        below = -pts[:, axis].min()
        above = pts[:, axis].max()
        if below > 0:
            scale = min(scale, (anchor[axis] - low) / below)
        if above > 0:
            scale = min(scale, (high - anchor[axis]) / above)
    return anchor + pts * scale


def gen_synthetic(rng: np.random.Generator, cfg: SynthConfig) -> Sample:
    """Render one image and the keypoints of its central figure

    Every keypoint is visible and lies at least ``margin_frac * image_size``
    (plus half a limb) inside the border. ``head_size`` is twice the
    head-top to upper-neck distance.
    """
    size = cfg.image_size
    image = _background(rng, cfg)
    center = np.full(2, (size - 1) / 2.0)

    for _ in range(cfg.figures - 1):
        theta = rng.uniform(0.0, 2 * math.pi)
        radius = rng.uniform(0.3, 0.5) * size
        anchor = center + radius * np.array([math.cos(theta), math.sin(theta)])
        thickness = int(rng.integers(cfg.limb_thickness[0], cfg.limb_thickness[1] + 1))
        _draw_figure(image, anchor + _pose(rng, cfg), thickness)

    thickness = int(rng.integers(cfg.limb_thickness[0], cfg.limb_thickness[1] + 1))
    anchor = center + rng.uniform(-0.03, 0.03, size=2) * size
    pts = _fit(_pose(rng, cfg), anchor, thickness / 2.0 + 1.0, cfg)
    _draw_figure(image, pts, thickness)

    head_size = 2.0 * float(np.linalg.norm(pts[HEAD_TOP] - pts[UPPER_NECK]))
    kps = KeypointSet(pts, np.full(NUM_KEYPOINTS, int(Visibility.visible)), head_size=head_size)
    return Sample(image, kps)


def generate_dataset(seed: int, cfg: SynthConfig, count: int) -> List[Sample]:
    """``count`` samples, sample ``i`` drawn from its own stream of ``seed``

    The content of sample ``i`` does not depend on ``count`` or on the order
    samples are generated in.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    samples = [gen_synthetic(derive_rng(seed, Stream.SYNTH, i), cfg) for i in range(count)]
    MODULE_LOGGER.info("Generated %d synthetic samples of %dpx", count, cfg.image_size)
    return samples
