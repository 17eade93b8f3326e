"""Canonical 2D skeleton data model and per-bone geometry.

The body layout is the OpenPose-style Body-18 skeleton: 18 named joints
connected by 17 directed bones rooted at the neck. Every bone is identified
by its child joint (each joint except the neck has exactly one parent), so
per-bone tables throughout the toolkit are keyed by child-joint name.

Keypoint blocks are stored as float64 arrays of (x, y, confidence) rows.
Construction enforces structural shape only; value-level invariants
(confidence range, finiteness, canvas bounds) are reported by
``validate_sequence`` rather than raised, so malformed data can be loaded
and diagnosed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import SchemaError

# Keypoints with confidence below this threshold are treated as missing.
VISIBILITY_THRESHOLD = 0.05

# Canvas margin factor: transforms may push joints slightly off-canvas.
CANVAS_MARGIN = 1.5

JOINT_NAMES = (
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
)

JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Directed parent -> child edges in topological order (parents first).
BONES = (
    ("neck", "nose"),
    ("nose", "r_eye"),
    ("nose", "l_eye"),
    ("r_eye", "r_ear"),
    ("l_eye", "l_ear"),
    ("neck", "r_shoulder"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("neck", "l_shoulder"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("neck", "r_hip"),
    ("r_hip", "r_knee"),
    ("r_knee", "r_ankle"),
    ("neck", "l_hip"),
    ("l_hip", "l_knee"),
    ("l_knee", "l_ankle"),
)

BONE_PARENT = {child: parent for parent, child in BONES}

# Bone names are child-joint names, listed in the same topological order.
BONE_NAMES = tuple(child for _, child in BONES)

PART_GROUPS: Mapping[str, tuple[str, ...]] = {
    "shoulder": ("r_shoulder", "l_shoulder"),
    "body": ("r_hip", "l_hip"),
    "upper_arm": ("r_elbow", "l_elbow"),
    "lower_arm": ("r_wrist", "l_wrist"),
    "upper_leg": ("r_knee", "l_knee"),
    "lower_leg": ("r_ankle", "l_ankle"),
    "neck": ("nose",),
    "face": ("r_eye", "l_eye", "r_ear", "l_ear"),
}


class Keypoint2D(NamedTuple):
    x: float
    y: float
    confidence: float

    @property
    def visible(self) -> bool:
        return self.confidence >= VISIBILITY_THRESHOLD


@dataclass(frozen=True)
class BodyLayout:
    """Joint names, bone edges and part groups of a skeleton topology."""

    joints: tuple[str, ...]
    bones: tuple[tuple[str, str], ...]
    part_groups: Mapping[str, tuple[str, ...]]

    def children(self, joint: str) -> tuple[str, ...]:
        return tuple(c for p, c in self.bones if p == joint)


BODY_18 = BodyLayout(joints=JOINT_NAMES, bones=BONES, part_groups=PART_GROUPS)


def _as_block(data, rows: int, name: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape != (rows, 3):
        raise SchemaError(f"{name} block must have shape ({rows}, 3), got {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PoseFrame:
    """One skeleton frame: 18 body keypoints plus optional hand/face blocks."""

    body: np.ndarray
    left_hand: np.ndarray | None = None
    right_hand: np.ndarray | None = None
    face: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "body", _as_block(self.body, 18, "body"))
        for attr, rows in (("left_hand", 21), ("right_hand", 21), ("face", 68)):
            block = getattr(self, attr)
            if block is not None:
                object.__setattr__(self, attr, _as_block(block, rows, attr))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseFrame):
            return NotImplemented
        for attr in ("body", "left_hand", "right_hand", "face"):
            a, b = getattr(self, attr), getattr(other, attr)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    def keypoint(self, joint: str) -> Keypoint2D:
        row = self.body[JOINT_INDEX[joint]]
        return Keypoint2D(float(row[0]), float(row[1]), float(row[2]))

    def visible(self, joint: str) -> bool:
        return float(self.body[JOINT_INDEX[joint], 2]) >= VISIBILITY_THRESHOLD

    def replace(self, **blocks) -> "PoseFrame":
        """Return a copy with the given blocks substituted."""
        updated = {
            "body": self.body,
            "left_hand": self.left_hand,
            "right_hand": self.right_hand,
            "face": self.face,
        }
        updated.update(blocks)
        return PoseFrame(**updated)


@dataclass(frozen=True)
class PoseSequence:
    """An ordered run of pose frames on a shared canvas."""

    frames: tuple[PoseFrame, ...]
    width: int
    height: int
    fps: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) == 0:
            raise SchemaError("a pose sequence needs at least one frame")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise SchemaError(f"canvas size must be positive, got {self.width}x{self.height}")
        if not (float(self.fps) > 0):
            raise SchemaError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "fps", float(self.fps))

    def replace_frames(self, frames: Iterable[PoseFrame]) -> "PoseSequence":
        return PoseSequence(tuple(frames), self.width, self.height, self.fps)


class BoneMetric(NamedTuple):
    length: float
    direction: float
    visible: bool


def bone_visible(frame: PoseFrame, child: str) -> bool:
    """A bone is visible iff both its endpoints are."""
    return frame.visible(child) and frame.visible(BONE_PARENT[child])


def bone_metrics(frame: PoseFrame) -> dict[str, BoneMetric]:
    """Length and direction of every bone, keyed by child-joint name.

    Length is the Euclidean parent-to-child distance, direction the atan2 of
    the child-minus-parent vector. Bones with a missing endpoint are flagged
    invisible and report length 0 and direction 0; their coordinates are not
    trusted.
    """
    out: dict[str, BoneMetric] = {}
    body = frame.body
    for parent, child in BONES:
        if not bone_visible(frame, child):
            out[child] = BoneMetric(0.0, 0.0, False)
            continue
        dx = float(body[JOINT_INDEX[child], 0] - body[JOINT_INDEX[parent], 0])
        dy = float(body[JOINT_INDEX[child], 1] - body[JOINT_INDEX[parent], 1])
        out[child] = BoneMetric(math.hypot(dx, dy), math.atan2(dy, dx), True)
    return out


# COCO-WholeBody body order (first 17 of 133 keypoints).
_COCO_BODY = (
    "nose",
    "l_eye",
    "r_eye",
    "l_ear",
    "r_ear",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)

_COCO_TO_BODY18 = {name: JOINT_INDEX[name] for name in _COCO_BODY}

# 133 = 17 body + 6 feet + 68 face + 21 left hand + 21 right hand.
_COCO_FACE = slice(23, 91)
_COCO_LEFT_HAND = slice(91, 112)
_COCO_RIGHT_HAND = slice(112, 133)


def from_coco_wholebody(keypoints) -> PoseFrame:
    """Convert one 133-keypoint COCO-WholeBody detection to a Body-18 frame.

    The neck is synthesized as the shoulder midpoint with the smaller of the
    two shoulder confidences; the 6 foot keypoints are discarded.
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.shape != (133, 3):
        raise SchemaError(f"COCO-WholeBody input must have shape (133, 3), got {kps.shape}")

    body = np.zeros((18, 3))
    for coco_idx, name in enumerate(_COCO_BODY):
        body[_COCO_TO_BODY18[name]] = kps[coco_idx]
    l_sho, r_sho = kps[5], kps[6]
    body[JOINT_INDEX["neck"], 0] = (l_sho[0] + r_sho[0]) / 2.0
    body[JOINT_INDEX["neck"], 1] = (l_sho[1] + r_sho[1]) / 2.0
    body[JOINT_INDEX["neck"], 2] = min(l_sho[2], r_sho[2])

    return PoseFrame(
        body=body,
        left_hand=kps[_COCO_LEFT_HAND],
        right_hand=kps[_COCO_RIGHT_HAND],
        face=kps[_COCO_FACE],
    )


# Stick-figure proportions in torso units (y grows downward), used to build
# synthetic frames for demos, pools and the training simulator.
_STICK_OFFSETS = {
    "neck": (0.0, 0.0),
    "nose": (0.0, -0.30),
    "r_eye": (-0.08, -0.38),
    "l_eye": (0.08, -0.38),
    "r_ear": (-0.16, -0.34),
    "l_ear": (0.16, -0.34),
    "r_shoulder": (-0.35, 0.0),
    "l_shoulder": (0.35, 0.0),
    "r_elbow": (-0.45, 0.45),
    "l_elbow": (0.45, 0.45),
    "r_wrist": (-0.50, 0.85),
    "l_wrist": (0.50, 0.85),
    "r_hip": (-0.20, 1.00),
    "l_hip": (0.20, 1.00),
    "r_knee": (-0.22, 1.70),
    "l_knee": (0.22, 1.70),
    "r_ankle": (-0.23, 2.40),
    "l_ankle": (0.23, 2.40),
}


def stick_figure(center_x: float, center_y: float, torso: float = 40.0,
                 confidence: float = 1.0) -> PoseFrame:
    """A fully visible synthetic figure with the neck at the given center."""
    body = np.empty((18, 3))
    for joint, (ox, oy) in _STICK_OFFSETS.items():
        idx = JOINT_INDEX[joint]
        body[idx] = (center_x + ox * torso, center_y + oy * torso, confidence)
    return PoseFrame(body=body)


@dataclass(frozen=True)
class Violation:
    """One broken invariant: which frame, which field, which rule."""

    frame: int | None
    location: str
    rule: str

    def __str__(self) -> str:
        where = f"frame {self.frame}, {self.location}" if self.frame is not None else self.location
        return f"{where}: {self.rule}"


def _check_block(violations: list[Violation], frame_idx: int, block_name: str,
                 block: np.ndarray, names: tuple[str, ...] | None,
                 x_max: float, y_max: float) -> None:
    for row_idx in range(block.shape[0]):
        x, y, c = block[row_idx]
        label = names[row_idx] if names is not None else str(row_idx)
        loc = f"{block_name}[{label}]"
        if not (math.isfinite(x) and math.isfinite(y)):
            violations.append(Violation(frame_idx, loc, "coordinates must be finite"))
            continue
        if not math.isfinite(c):
            violations.append(Violation(frame_idx, f"{loc}.confidence", "confidence must be finite"))
            continue
        if not (0.0 <= c <= 1.0):
            violations.append(Violation(frame_idx, f"{loc}.confidence", "confidence must be in [0, 1]"))
        elif c >= VISIBILITY_THRESHOLD and not (0.0 <= x < x_max and 0.0 <= y < y_max):
            violations.append(
                Violation(frame_idx, loc, f"visible keypoint outside canvas margin ({x:.1f}, {y:.1f})")
            )


def validate_sequence(seq: PoseSequence) -> list[Violation]:
    """Collect every invariant violation; an empty list means a valid sequence.

    Validation never raises: bad values are reported with frame index, joint
    and rule so callers can log or reject as they see fit.
    """
    violations: list[Violation] = []
    x_max = seq.width * CANVAS_MARGIN
    y_max = seq.height * CANVAS_MARGIN
    layout0 = tuple(getattr(seq.frames[0], a) is not None for a in ("left_hand", "right_hand", "face"))
    for frame_idx, frame in enumerate(seq.frames):
        layout = tuple(getattr(frame, a) is not None for a in ("left_hand", "right_hand", "face"))
        if layout != layout0:
            violations.append(
                Violation(frame_idx, "frame", "optional blocks differ from frame 0 layout")
            )
        _check_block(violations, frame_idx, "body", frame.body, JOINT_NAMES, x_max, y_max)
        for attr in ("left_hand", "right_hand", "face"):
            block = getattr(frame, attr)
            if block is not None:
                _check_block(violations, frame_idx, attr, block, None, x_max, y_max)
    return violations
