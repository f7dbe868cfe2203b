"""The 16 body keypoints, in annotation order, and their left/right pairing."""

KEYPOINT_NAMES = (
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

#: (right, left) index pairs swapped by a horizontal flip
FLIP_PAIRS = ((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13))

#: Limbs drawn by the synthetic generator and the preview renderer
SKELETON = (
    (0, 1),
    (1, 2),
    (2, 6),
    (3, 6),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (7, 12),
    (12, 11),
    (11, 10),
    (7, 13),
    (13, 14),
    (14, 15),
)

PELVIS, THORAX, UPPER_NECK, HEAD_TOP = 6, 7, 8, 9
RIGHT = frozenset(right for right, _ in FLIP_PAIRS)
LEFT = frozenset(left for _, left in FLIP_PAIRS)
