"""Explicit pose transformation: anchor realignment and randomized rescaling.

Realignment re-targets a driving sequence's bone lengths to a sampled anchor
frame's proportions while preserving every bone direction, so the motion is
kept and only the body shape changes. The construction:

  * per-bone ratios r(b) = anchor length / driving reference length, where
    the reference length comes from the configured reference-frame policy
    (median of per-frame lengths by default); ratios are clamped to
    [ratio_min, ratio_max] and bones invisible on either side get r = 1;
  * per frame, forward kinematics from the neck root places each child at
    new_parent + r(b) * (old_child - old_parent);
  * the frame-0 neck is moved to the anchor's neck and per-frame neck
    displacement is scaled by the torso ratio (torso = mean of the two
    neck-to-hip bone lengths);
  * the face block scales rigidly about the nose by the mean face-bone
    ratio; hand blocks translate with their wrists.

Rescaling draws a small plan from an op pool (per-group length scaling,
part drops, part synthesis) and applies it with the same kinematic rule.
Part synthesis uses the canonical proportion table below, expressed as
fractions of the torso length, with limbs extending straight down and
synthesized keypoints at confidence 0.5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigError, SchemaError, UnalignableError, UsageError
from .skeleton import (
    BONES,
    BONE_NAMES,
    BONE_PARENT,
    JOINT_INDEX,
    PART_GROUPS,
    VISIBILITY_THRESHOLD,
    PoseFrame,
    PoseSequence,
    bone_metrics,
    bone_visible,
)

# The six part groups reported by the rescaling-ratio statistics.
STATS_GROUPS = ("shoulder", "body", "upper_arm", "lower_arm", "upper_leg", "lower_leg")

STATS_GROUP_LABELS = {
    "shoulder": "Shoulder Length",
    "body": "Body Length",
    "upper_arm": "Upper Arm Length",
    "lower_arm": "Lower Arm Length",
    "upper_leg": "Upper Leg Length",
    "lower_leg": "Lower Leg Length",
}

# Left-closed histogram bins over the ratio range [0.001, 10).
HISTOGRAM_EDGES = (0.001, 0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 6.0, 10.0)

DROPPABLE_PARTS = (
    "left_arm",
    "right_arm",
    "left_leg",
    "right_leg",
    "face",
    "left_hand",
    "right_hand",
)

# Body joints silenced by DropPart / synthesized by AddPart. Shoulders and
# hips stay: they belong to the torso, not the limb.
PART_JOINTS = {
    "left_arm": ("l_elbow", "l_wrist"),
    "right_arm": ("r_elbow", "r_wrist"),
    "left_leg": ("l_knee", "l_ankle"),
    "right_leg": ("r_knee", "r_ankle"),
    "face": ("r_eye", "l_eye", "r_ear", "l_ear"),
}

# Joint a synthesized part attaches to.
PART_ATTACH = {
    "left_arm": "l_shoulder",
    "right_arm": "r_shoulder",
    "left_leg": "l_hip",
    "right_leg": "r_hip",
    "face": "nose",
    "left_hand": "l_wrist",
    "right_hand": "r_wrist",
}

# Canonical segment lengths as fractions of the torso length.
CANONICAL_PROPORTIONS = {
    "upper_arm": 0.55,
    "lower_arm": 0.45,
    "upper_leg": 0.85,
    "lower_leg": 0.80,
    "hand": 0.35,
}

# Head landmark offsets from the nose, in torso units (x mirrored per side).
CANONICAL_HEAD_OFFSETS = {
    "r_eye": (-0.10, -0.10),
    "l_eye": (0.10, -0.10),
    "r_ear": (-0.20, -0.05),
    "l_ear": (0.20, -0.05),
}

SYNTH_CONFIDENCE = 0.5

_TORSO_BONES = ("r_hip", "l_hip")
_NECK = JOINT_INDEX["neck"]
_NOSE = JOINT_INDEX["nose"]


# ---------------------------------------------------------------------------
# Plans and configuration


@dataclass(frozen=True)
class ScaleGroup:
    group: str
    factor: float

    def __post_init__(self):
        if self.group not in PART_GROUPS:
            raise ConfigError(f"unknown part group: {self.group!r}")
        if not (self.factor > 0 and math.isfinite(self.factor)):
            raise ConfigError(f"scale factor must be a positive real, got {self.factor}")


@dataclass(frozen=True)
class DropPart:
    part: str

    def __post_init__(self):
        if self.part not in DROPPABLE_PARTS:
            raise ConfigError(f"unknown part: {self.part!r}")


@dataclass(frozen=True)
class AddPart:
    part: str

    def __post_init__(self):
        if self.part not in DROPPABLE_PARTS:
            raise ConfigError(f"unknown part: {self.part!r}")


RescaleOp = Union[ScaleGroup, DropPart, AddPart]


@dataclass(frozen=True)
class RescalePlan:
    """Ordered rescale ops; an empty plan is the identity."""

    ops: tuple[RescaleOp, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for kind in (DropPart, AddPart):
            parts = [op.part for op in self.ops if isinstance(op, kind)]
            if len(parts) != len(set(parts)):
                raise ConfigError(f"duplicate {kind.__name__} ops in plan")


@dataclass(frozen=True)
class EpiConfig:
    """Transform probabilities, factor ranges and realignment policy."""

    lambda_: float = 0.98
    p_rescale: float = 0.5
    factor_range: tuple[float, float] = (1.0 / 3.0, 3.0)
    ratio_min: float = 0.001
    ratio_max: float = 10.0
    max_ops_per_plan: int = 3
    ref_frame_policy: str = "median"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ConfigError(f"lambda must be in [0, 1], got {self.lambda_}")
        if not (0.0 <= self.p_rescale <= 1.0):
            raise ConfigError(f"p_rescale must be in [0, 1], got {self.p_rescale}")
        if not (0.0 < self.ratio_min < 1.0 < self.ratio_max):
            raise ConfigError(
                f"need 0 < ratio_min < 1 < ratio_max, got {self.ratio_min}, {self.ratio_max}"
            )
        lo, hi = self.factor_range
        if not (self.ratio_min <= lo <= hi <= self.ratio_max):
            raise ConfigError(f"factor_range {self.factor_range} outside clamp bounds")
        if self.max_ops_per_plan < 1:
            raise ConfigError("max_ops_per_plan must be >= 1")
        if self.ref_frame_policy not in ("first", "median"):
            raise ConfigError(f"unknown ref_frame_policy: {self.ref_frame_policy!r}")


def _anchor_ok(frame: PoseFrame) -> bool:
    return (
        frame.visible("neck")
        and (frame.visible("r_shoulder") or frame.visible("l_shoulder"))
        and (frame.visible("r_hip") or frame.visible("l_hip"))
    )


@dataclass(frozen=True)
class AnchorPool:
    """Reference frames whose proportions driving poses get re-targeted to."""

    anchors: tuple[PoseFrame, ...]

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        if len(self.anchors) == 0:
            raise SchemaError("anchor pool must not be empty")
        for i, anchor in enumerate(self.anchors):
            if not _anchor_ok(anchor):
                raise SchemaError(
                    f"anchor {i} needs a visible neck, at least one shoulder and one hip"
                )


@dataclass(frozen=True)
class TransformRecord:
    """Audit trail of one transform: what was sampled and what it did."""

    applied: bool
    anchor_index: int | None = None
    plan: RescalePlan | None = None
    per_bone_ratio: Mapping[str, float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.applied:
            if self.anchor_index is not None or self.plan is not None:
                raise ConfigError("an unapplied record cannot carry an anchor or plan")
            if any(r != 1.0 for r in self.per_bone_ratio.values()):
                raise ConfigError("an unapplied record must have unit ratios")


# ---------------------------------------------------------------------------
# Ratio computation


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def _ref_bone_lengths(driving: PoseSequence, policy: str) -> dict[str, float | None]:
    """Reference length per bone, or None when the bone is never measurable."""
    if policy == "first":
        metrics = bone_metrics(driving.frames[0])
        return {b: (metrics[b].length if metrics[b].visible else None) for b in BONE_NAMES}
    per_bone: dict[str, list[float]] = {b: [] for b in BONE_NAMES}
    for frame in driving.frames:
        metrics = bone_metrics(frame)
        for b in BONE_NAMES:
            if metrics[b].visible:
                per_bone[b].append(metrics[b].length)
    return {b: (float(np.median(v)) if v else None) for b, v in per_bone.items()}


def _raw_ratio(anchor_len: float | None, ref_len: float | None) -> float | None:
    """Unclamped anchor/driving ratio; None when either side is unmeasurable."""
    if anchor_len is None or ref_len is None:
        return None
    if ref_len == 0.0:
        return None if anchor_len == 0.0 else math.inf
    return anchor_len / ref_len


def _anchor_bone_lengths(anchor: PoseFrame) -> dict[str, float | None]:
    metrics = bone_metrics(anchor)
    return {b: (metrics[b].length if metrics[b].visible else None) for b in BONE_NAMES}


def _check_alignable(ref: dict[str, float | None]) -> None:
    if all(ref[b] is None for b in _TORSO_BONES):
        raise UnalignableError("driving sequence has no visible torso in any frame")


def compute_bone_ratios(
    driving: PoseSequence, anchor: PoseFrame, cfg: EpiConfig
) -> dict[str, float]:
    """Per-bone anchor/driving length ratios, clamped to the config bounds."""
    if not _anchor_ok(anchor):
        raise SchemaError("anchor needs a visible neck, at least one shoulder and one hip")
    ref = _ref_bone_lengths(driving, cfg.ref_frame_policy)
    _check_alignable(ref)
    anchor_lengths = _anchor_bone_lengths(anchor)
    ratios: dict[str, float] = {}
    for bone in BONE_NAMES:
        raw = _raw_ratio(anchor_lengths[bone], ref[bone])
        ratios[bone] = 1.0 if raw is None else _clamp(raw, cfg.ratio_min, cfg.ratio_max)
    return ratios


def _torso_ratio(
    anchor_lengths: dict[str, float | None],
    ref: dict[str, float | None],
    cfg: EpiConfig,
) -> float:
    anchor_vals = [anchor_lengths[b] for b in _TORSO_BONES if anchor_lengths[b] is not None]
    ref_vals = [ref[b] for b in _TORSO_BONES if ref[b] is not None]
    anchor_torso = float(np.mean(anchor_vals)) if anchor_vals else 0.0
    driving_torso = float(np.mean(ref_vals))
    raw = _raw_ratio(anchor_torso, driving_torso)
    return 1.0 if raw is None else _clamp(raw, cfg.ratio_min, cfg.ratio_max)


# ---------------------------------------------------------------------------
# Kinematic application


def _apply_ratios_frame(
    frame: PoseFrame,
    ratios: Mapping[str, float],
    neck_xy: np.ndarray,
    face_block_ratio: float,
) -> PoseFrame:
    """Forward kinematics from the neck with per-bone length ratios.

    Bone directions are untouched by construction: each child keeps its
    old offset direction, scaled by the bone's ratio. The face block scales
    rigidly about the nose; hand blocks translate with their wrists.
    """
    old = frame.body
    new = old.copy()
    new[_NECK, 0] = neck_xy[0]
    new[_NECK, 1] = neck_xy[1]
    for parent, child in BONES:
        pi, ci = JOINT_INDEX[parent], JOINT_INDEX[child]
        r = ratios.get(child, 1.0)
        new[ci, 0] = new[pi, 0] + r * (old[ci, 0] - old[pi, 0])
        new[ci, 1] = new[pi, 1] + r * (old[ci, 1] - old[pi, 1])

    blocks: dict[str, np.ndarray | None] = {}
    if frame.face is not None:
        face = frame.face.copy()
        face[:, 0] = new[_NOSE, 0] + face_block_ratio * (frame.face[:, 0] - old[_NOSE, 0])
        face[:, 1] = new[_NOSE, 1] + face_block_ratio * (frame.face[:, 1] - old[_NOSE, 1])
        blocks["face"] = face
    for attr, wrist in (("left_hand", "l_wrist"), ("right_hand", "r_wrist")):
        block = getattr(frame, attr)
        if block is not None:
            wi = JOINT_INDEX[wrist]
            moved = block.copy()
            moved[:, 0] += new[wi, 0] - old[wi, 0]
            moved[:, 1] += new[wi, 1] - old[wi, 1]
            blocks[attr] = moved
    return frame.replace(body=new, **blocks)


def _face_group_ratio(ratios: Mapping[str, float]) -> float:
    return float(np.mean([ratios[b] for b in PART_GROUPS["face"]]))


def realign(driving: PoseSequence, anchor: PoseFrame, cfg: EpiConfig) -> PoseSequence:
    """Re-target the driving sequence onto the anchor's body proportions."""
    ratios = compute_bone_ratios(driving, anchor, cfg)
    ref = _ref_bone_lengths(driving, cfg.ref_frame_policy)
    torso_ratio = _torso_ratio(_anchor_bone_lengths(anchor), ref, cfg)
    face_ratio = _face_group_ratio(ratios)

    neck0 = driving.frames[0].body[_NECK, :2]
    anchor_neck = anchor.body[_NECK, :2]
    frames = []
    for frame in driving.frames:
        neck_xy = anchor_neck + torso_ratio * (frame.body[_NECK, :2] - neck0)
        frames.append(_apply_ratios_frame(frame, ratios, neck_xy, face_ratio))
    return driving.replace_frames(frames)


# ---------------------------------------------------------------------------
# Rescale ops


def _part_present(seq: PoseSequence, part: str) -> bool:
    if part in ("left_hand", "right_hand"):
        for frame in seq.frames:
            block = getattr(frame, part)
            if block is not None and np.any(block[:, 2] >= VISIBILITY_THRESHOLD):
                return True
        return False
    joints = PART_JOINTS[part]
    return any(frame.visible(j) for frame in seq.frames for j in joints)


def _torso_unit(frame: PoseFrame) -> float | None:
    """Reference scale for synthesis: torso length, else shoulder span."""
    metrics = bone_metrics(frame)
    torso = [metrics[b].length for b in _TORSO_BONES if metrics[b].visible]
    if torso:
        return float(np.mean(torso))
    shoulders = [metrics[b].length for b in ("r_shoulder", "l_shoulder") if metrics[b].visible]
    if shoulders:
        return 2.5 * float(np.mean(shoulders))
    return None


def _hand_template() -> np.ndarray:
    """21-point open-hand template in unit hand-lengths, wrist at the origin."""
    pts = np.zeros((21, 2))
    for finger in range(5):
        theta = math.radians(-40.0 + 20.0 * finger)
        dx, dy = math.sin(theta), math.cos(theta)
        for joint in range(1, 5):
            radius = 0.25 * joint
            pts[1 + finger * 4 + (joint - 1)] = (radius * dx, radius * dy)
    return pts


_HAND_TEMPLATE = _hand_template()


def _scale_group_frame(frame: PoseFrame, op: ScaleGroup) -> PoseFrame:
    ratios = {bone: op.factor for bone in PART_GROUPS[op.group]}
    face_ratio = op.factor if op.group == "face" else 1.0
    return _apply_ratios_frame(frame, ratios, frame.body[_NECK, :2], face_ratio)


def _drop_part_frame(frame: PoseFrame, part: str) -> PoseFrame:
    if part in ("left_hand", "right_hand"):
        block = getattr(frame, part)
        if block is None:
            return frame
        cleared = block.copy()
        cleared[:, 2] = 0.0
        return frame.replace(**{part: cleared})
    body = frame.body.copy()
    for joint in PART_JOINTS[part]:
        body[JOINT_INDEX[joint], 2] = 0.0
    updates: dict[str, np.ndarray] = {"body": body}
    if part == "face" and frame.face is not None:
        face = frame.face.copy()
        face[:, 2] = 0.0
        updates["face"] = face
    return frame.replace(**updates)


def _synth_limb(body: np.ndarray, part: str, unit: float) -> None:
    attach = JOINT_INDEX[PART_ATTACH[part]]
    segs = ("upper_arm", "lower_arm") if part.endswith("arm") else ("upper_leg", "lower_leg")
    joints = PART_JOINTS[part]
    x, y = body[attach, 0], body[attach, 1]
    for seg, joint in zip(segs, joints):
        y = y + CANONICAL_PROPORTIONS[seg] * unit
        body[JOINT_INDEX[joint]] = (x, y, SYNTH_CONFIDENCE)


def _synth_hand_block(frame: PoseFrame, part: str) -> np.ndarray | None:
    attach = PART_ATTACH[part]
    if not frame.visible(attach):
        return None
    unit = _torso_unit(frame)
    if unit is None:
        return None
    wrist = frame.body[JOINT_INDEX[attach], :2]
    block = np.zeros((21, 3))
    block[:, :2] = wrist + CANONICAL_PROPORTIONS["hand"] * unit * _HAND_TEMPLATE
    block[:, 2] = SYNTH_CONFIDENCE
    return block


def _add_body_part_frame(frame: PoseFrame, part: str) -> PoseFrame | None:
    """Synthesize a body part for one frame; None when there is no anchor."""
    attach = PART_ATTACH[part]
    if not frame.visible(attach):
        return None
    unit = _torso_unit(frame)
    if unit is None:
        return None
    body = frame.body.copy()
    if part == "face":
        nose = body[_NOSE, :2]
        for joint, (ox, oy) in CANONICAL_HEAD_OFFSETS.items():
            body[JOINT_INDEX[joint]] = (nose[0] + ox * unit, nose[1] + oy * unit, SYNTH_CONFIDENCE)
    else:
        _synth_limb(body, part, unit)
    return frame.replace(body=body)


def _add_hand_part(seq: PoseSequence, part: str, warnings: list[str]) -> PoseSequence:
    blocks = [_synth_hand_block(frame, part) for frame in seq.frames]
    if all(b is None for b in blocks):
        warnings.append(f"add_part {part}: no frame has a visible attach joint, skipped")
        return seq
    # Frames that cannot synthesize still get a block (all-missing) so every
    # frame keeps the same layout.
    frames = [
        frame.replace(**{part: block if block is not None else np.zeros((21, 3))})
        for frame, block in zip(seq.frames, blocks)
    ]
    return seq.replace_frames(frames)


def _apply_op(seq: PoseSequence, op: RescaleOp, warnings: list[str]) -> PoseSequence:
    if isinstance(op, ScaleGroup):
        return seq.replace_frames(_scale_group_frame(f, op) for f in seq.frames)
    if isinstance(op, DropPart):
        return seq.replace_frames(_drop_part_frame(f, op.part) for f in seq.frames)
    if _part_present(seq, op.part):
        warnings.append(f"add_part {op.part}: part already present, skipped")
        return seq
    if op.part in ("left_hand", "right_hand"):
        return _add_hand_part(seq, op.part, warnings)
    frames = []
    synthesized = 0
    for frame in seq.frames:
        new_frame = _add_body_part_frame(frame, op.part)
        if new_frame is None:
            frames.append(frame)
        else:
            frames.append(new_frame)
            synthesized += 1
    if synthesized == 0:
        warnings.append(f"add_part {op.part}: no frame has a visible attach joint, skipped")
        return seq
    return seq.replace_frames(frames)


def apply_rescale(seq: PoseSequence, plan: RescalePlan) -> tuple[PoseSequence, list[str]]:
    """Apply the plan's ops in order; returns the result and any warnings."""
    warnings: list[str] = []
    for op in plan.ops:
        seq = _apply_op(seq, op, warnings)
    return seq, warnings


# ---------------------------------------------------------------------------
# Sampling


def _op_pool() -> list[tuple[str, str]]:
    pool = [("scale", group) for group in PART_GROUPS]
    pool += [("drop", part) for part in DROPPABLE_PARTS]
    pool += [("add", part) for part in DROPPABLE_PARTS]
    return pool


OP_POOL = tuple(_op_pool())


def sample_rescale_plan(rng: np.random.Generator, cfg: EpiConfig) -> RescalePlan:
    """Draw 1..max_ops_per_plan ops without replacement from the op pool.

    Draw order (fixed for reproducibility): op count, then pool indices,
    then one log-uniform factor per scale op in plan order.
    """
    k = int(rng.integers(1, cfg.max_ops_per_plan + 1))
    chosen = rng.choice(len(OP_POOL), size=k, replace=False)
    lo, hi = cfg.factor_range
    ops: list[RescaleOp] = []
    for idx in chosen:
        kind, target = OP_POOL[int(idx)]
        if kind == "scale":
            factor = float(np.exp(rng.uniform(math.log(lo), math.log(hi))))
            ops.append(ScaleGroup(target, factor))
        elif kind == "drop":
            ops.append(DropPart(target))
        else:
            ops.append(AddPart(target))
    return RescalePlan(tuple(ops))


def epi_transform(
    seq: PoseSequence,
    pool: AnchorPool,
    cfg: EpiConfig,
    rng: np.random.Generator,
) -> tuple[PoseSequence, TransformRecord]:
    """One training-step transform: with probability lambda, realign to a
    uniformly sampled anchor and (with probability p_rescale) apply one
    sampled rescale plan; otherwise return the input unchanged.

    Draw order: apply?, anchor index, rescale?, then the plan's own draws.
    """
    unit_ratios = {b: 1.0 for b in BONE_NAMES}
    if not (rng.random() < cfg.lambda_):
        return seq, TransformRecord(applied=False, per_bone_ratio=unit_ratios)
    anchor_index = int(rng.integers(len(pool.anchors)))
    anchor = pool.anchors[anchor_index]
    ratios = compute_bone_ratios(seq, anchor, cfg)
    out = realign(seq, anchor, cfg)
    plan = None
    warnings: list[str] = []
    if rng.random() < cfg.p_rescale:
        plan = sample_rescale_plan(rng, cfg)
        out, warnings = apply_rescale(out, plan)
    record = TransformRecord(
        applied=True,
        anchor_index=anchor_index,
        plan=plan,
        per_bone_ratio=ratios,
        warnings=tuple(warnings),
    )
    return out, record


# ---------------------------------------------------------------------------
# Rescaling-ratio statistics


@dataclass(frozen=True)
class RatioHistogram:
    """Per-group ratio counts over the ten intervals, plus out-of-range tails.

    Counts are over pre-clamp ratios; only bones measurable on both the
    driving and anchor side contribute samples.
    """

    edges: tuple[float, ...]
    counts: Mapping[str, tuple[int, ...]]
    below_range: Mapping[str, int]
    above_range: Mapping[str, int]
    trials: int

    def proportions(self, group: str) -> list[float]:
        """Percent of in-range samples per bin; zeros when a group is empty."""
        total = sum(self.counts[group])
        if total == 0:
            return [0.0] * (len(self.edges) - 1)
        return [100.0 * c / total for c in self.counts[group]]

    def interval_labels(self) -> list[str]:
        return [
            f"[{self.edges[i]:g}, {self.edges[i + 1]:g})"
            for i in range(len(self.edges) - 1)
        ]

    def format_table(self) -> str:
        headers = ["Interval"] + [STATS_GROUP_LABELS[g] for g in STATS_GROUPS]
        rows = [headers]
        labels = self.interval_labels()
        props = {g: self.proportions(g) for g in STATS_GROUPS}
        for i, label in enumerate(labels):
            rows.append([label] + [f"{props[g][i]:.2f}%" for g in STATS_GROUPS])
        rows.append(
            ["out of range"]
            + [f"{self.below_range[g] + self.above_range[g]}" for g in STATS_GROUPS]
        )
        widths = [max(len(r[c]) for r in rows) for c in range(len(headers))]
        lines = []
        for r_idx, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip())
            if r_idx == 0:
                lines.append("  ".join("-" * widths[c] for c in range(len(headers))))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "edges": list(self.edges),
            "trials": self.trials,
            "groups": {
                g: {
                    "counts": list(self.counts[g]),
                    "proportions_percent": self.proportions(g),
                    "below_range": self.below_range[g],
                    "above_range": self.above_range[g],
                }
                for g in STATS_GROUPS
            },
        }


def bin_ratio(value: float, edges: Sequence[float] = HISTOGRAM_EDGES) -> int | None:
    """Index of the left-closed bin holding value, or None when out of range."""
    if not (edges[0] <= value < edges[-1]):
        return None
    # rightmost edge <= value
    return int(np.searchsorted(edges, value, side="right")) - 1


def ratio_histogram(
    pool: AnchorPool,
    driving_set: Sequence[PoseSequence],
    trials: int,
    rng: np.random.Generator,
    cfg: EpiConfig | None = None,
) -> RatioHistogram:
    """Sample driving sequences and traverse all anchors, binning the raw
    (pre-clamp) per-bone ratios of the six statistics groups."""
    if len(driving_set) == 0 or trials <= 0:
        raise UsageError("ratio_histogram needs a non-empty driving set and trials >= 1")
    cfg = cfg or EpiConfig()
    n_bins = len(HISTOGRAM_EDGES) - 1
    counts = {g: [0] * n_bins for g in STATS_GROUPS}
    below = {g: 0 for g in STATS_GROUPS}
    above = {g: 0 for g in STATS_GROUPS}
    for _ in range(trials):
        driving = driving_set[int(rng.integers(len(driving_set)))]
        ref = _ref_bone_lengths(driving, cfg.ref_frame_policy)
        for anchor in pool.anchors:
            anchor_lengths = _anchor_bone_lengths(anchor)
            for group in STATS_GROUPS:
                for bone in PART_GROUPS[group]:
                    raw = _raw_ratio(anchor_lengths[bone], ref[bone])
                    if raw is None:
                        continue
                    idx = bin_ratio(raw)
                    if idx is None:
                        if raw < HISTOGRAM_EDGES[0]:
                            below[group] += 1
                        else:
                            above[group] += 1
                    else:
                        counts[group][idx] += 1
    return RatioHistogram(
        edges=HISTOGRAM_EDGES,
        counts={g: tuple(c) for g, c in counts.items()},
        below_range=below,
        above_range=above,
        trials=trials,
    )


# ---------------------------------------------------------------------------
# Plan / record serialization


def _op_to_dict(op: RescaleOp) -> dict:
    if isinstance(op, ScaleGroup):
        return {"op": "scale_group", "group": op.group, "factor": op.factor}
    if isinstance(op, DropPart):
        return {"op": "drop_part", "part": op.part}
    return {"op": "add_part", "part": op.part}


def _op_from_dict(doc: dict) -> RescaleOp:
    kind = doc.get("op")
    if kind == "scale_group":
        return ScaleGroup(doc["group"], float(doc["factor"]))
    if kind == "drop_part":
        return DropPart(doc["part"])
    if kind == "add_part":
        return AddPart(doc["part"])
    raise SchemaError(f"unknown rescale op kind: {kind!r}")


def plan_to_json(plan: RescalePlan) -> bytes:
    doc = {"ops": [_op_to_dict(op) for op in plan.ops]}
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


def plan_from_json(data: bytes | str) -> RescalePlan:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed plan JSON: {e.msg}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("ops"), list):
        raise SchemaError("plan document must be an object with an ops list")
    return RescalePlan(tuple(_op_from_dict(d) for d in doc["ops"]))


def record_to_json(record: TransformRecord) -> bytes:
    doc = {
        "applied": record.applied,
        "anchor_index": record.anchor_index,
        "plan": None if record.plan is None else [_op_to_dict(op) for op in record.plan.ops],
        "per_bone_ratio": {b: record.per_bone_ratio[b] for b in BONE_NAMES
                           if b in record.per_bone_ratio},
        "warnings": list(record.warnings),
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


def record_from_json(data: bytes | str) -> TransformRecord:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed record JSON: {e.msg}") from e
    plan = None
    if doc.get("plan") is not None:
        plan = RescalePlan(tuple(_op_from_dict(d) for d in doc["plan"]))
    return TransformRecord(
        applied=bool(doc["applied"]),
        anchor_index=doc.get("anchor_index"),
        plan=plan,
        per_bone_ratio={k: float(v) for k, v in doc.get("per_bone_ratio", {}).items()},
        warnings=tuple(doc.get("warnings", ())),
    )
