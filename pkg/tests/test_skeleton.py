import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose_frame
from oracles import pairwise_bone_lengths
from posekit.errors import SchemaError
from posekit.skeleton import (
    BODY_18,
    BONES,
    BONE_PARENT,
    JOINT_INDEX,
    JOINT_NAMES,
    PART_GROUPS,
    PoseFrame,
    PoseSequence,
    bone_metrics,
    from_coco_wholebody,
    validate_sequence,
)


def make_coco(fill=0.0):
    kps = np.zeros((133, 3))
    kps[:, 0] = fill
    return kps


class TestLayout:
    def test_tree_reaches_all_joints_exactly_once(self):
        seen = {"neck"}
        frontier = ["neck"]
        while frontier:
            joint = frontier.pop()
            for child in BODY_18.children(joint):
                assert child not in seen, f"{child} reached twice"
                seen.add(child)
                frontier.append(child)
        assert seen == set(JOINT_NAMES)

    def test_every_joint_but_neck_has_one_parent(self):
        children = [child for _, child in BONES]
        assert len(children) == 17
        assert len(set(children)) == 17
        assert "neck" not in children

    def test_part_groups_cover_rescale_pool(self):
        assert set(PART_GROUPS) == {
            "shoulder", "body", "upper_arm", "lower_arm",
            "upper_leg", "lower_leg", "neck", "face",
        }
        for group, bones in PART_GROUPS.items():
            for bone in bones:
                assert bone in BONE_PARENT


class TestFromCocoWholebody:
    def test_neck_is_shoulder_midpoint_with_min_confidence(self):
        kps = make_coco()
        kps[5] = (10.0, 0.0, 1.0)   # left shoulder
        kps[6] = (30.0, 0.0, 0.8)   # right shoulder
        frame = from_coco_wholebody(kps)
        neck = frame.keypoint("neck")
        assert neck == (20.0, 0.0, 0.8)

    def test_all_zero_confidence_propagates_missingness(self):
        frame = from_coco_wholebody(np.zeros((133, 3)))
        assert not any(frame.visible(j) for j in JOINT_NAMES)

    def test_wrong_count_is_schema_error(self):
        with pytest.raises(SchemaError):
            from_coco_wholebody(np.zeros((132, 3)))

    def test_golden_index_mapping(self):
        # Synthetic frame where keypoint i sits at (i, 1000 + i): the output
        # coordinates reveal which input index fed each joint.
        kps = np.zeros((133, 3))
        kps[:, 0] = np.arange(133)
        kps[:, 1] = 1000 + np.arange(133)
        kps[:, 2] = 0.5
        frame = from_coco_wholebody(kps)
        # Hand-applied COCO-WholeBody -> Body-18 map.
        expected_source = {
            "nose": 0, "r_shoulder": 6, "r_elbow": 8, "r_wrist": 10,
            "l_shoulder": 5, "l_elbow": 7, "l_wrist": 9,
            "r_hip": 12, "r_knee": 14, "r_ankle": 16,
            "l_hip": 11, "l_knee": 13, "l_ankle": 15,
            "r_eye": 2, "l_eye": 1, "r_ear": 4, "l_ear": 3,
        }
        for joint, src in expected_source.items():
            assert frame.keypoint(joint) == (float(src), 1000.0 + src, 0.5), joint
        assert frame.keypoint("neck") == (5.5, 1005.5, 0.5)
        assert frame.face is not None and frame.face[0, 0] == 23.0
        assert frame.left_hand is not None and frame.left_hand[0, 0] == 91.0
        assert frame.right_hand is not None and frame.right_hand[0, 0] == 112.0

    def test_shoulders_roundtrip_bit_exact(self):
        rng = np.random.default_rng(11)
        kps = rng.uniform(0, 500, (133, 3))
        kps[:, 2] = rng.uniform(0, 1, 133)
        frame = from_coco_wholebody(kps)
        assert frame.body[JOINT_INDEX["l_shoulder"]].tolist() == kps[5].tolist()
        assert frame.body[JOINT_INDEX["r_shoulder"]].tolist() == kps[6].tolist()


class TestBoneMetrics:
    def test_three_four_five_triangle(self):
        body = np.zeros((18, 3))
        body[:, 2] = 1.0
        body[JOINT_INDEX["neck"], :2] = (0.0, 0.0)
        body[JOINT_INDEX["r_shoulder"], :2] = (3.0, 4.0)
        metrics = bone_metrics(PoseFrame(body=body))
        m = metrics["r_shoulder"]
        assert m.visible
        assert m.length == pytest.approx(5.0)
        assert m.direction == pytest.approx(math.atan2(4.0, 3.0))

    def test_degenerate_bone_is_zero_by_convention(self):
        body = np.zeros((18, 3))
        body[:, 2] = 1.0
        metrics = bone_metrics(PoseFrame(body=body))
        assert metrics["nose"] == (0.0, 0.0, True)

    def test_missing_endpoint_flags_invisible(self):
        body = np.ones((18, 3))
        body[JOINT_INDEX["r_elbow"], 2] = 0.0
        metrics = bone_metrics(PoseFrame(body=body))
        assert not metrics["r_elbow"].visible
        assert not metrics["r_wrist"].visible  # parent missing
        assert metrics["l_elbow"].visible

    def test_lengths_match_bruteforce_distances(self):
        rng = np.random.default_rng(5)
        frame = random_pose_frame(rng)
        expected = pairwise_bone_lengths(frame.body, BONES, JOINT_INDEX)
        metrics = bone_metrics(frame)
        for child, length in expected.items():
            if metrics[child].visible:
                assert metrics[child].length == pytest.approx(length, abs=1e-12)

    @given(st.integers(0, 2**32 - 1), st.floats(-500, 500), st.floats(-500, 500),
           st.floats(-math.pi, math.pi))
    @settings(max_examples=40, deadline=None)
    def test_rigid_motion_invariance(self, seed, dx, dy, theta):
        rng = np.random.default_rng(seed)
        frame = random_pose_frame(rng)
        cos, sin = math.cos(theta), math.sin(theta)
        body = frame.body.copy()
        x, y = body[:, 0].copy(), body[:, 1].copy()
        body[:, 0] = cos * x - sin * y + dx
        body[:, 1] = sin * x + cos * y + dy
        moved = bone_metrics(PoseFrame(body=body))
        original = bone_metrics(frame)
        for child in original:
            if not original[child].visible:
                continue
            assert moved[child].length == pytest.approx(original[child].length, abs=1e-9)
            delta = (moved[child].direction - original[child].direction - theta) % (2 * math.pi)
            delta = min(delta, 2 * math.pi - delta)
            assert delta < 1e-9


class TestValidateSequence:
    def test_well_formed_sequence_is_clean(self, figure_sequence):
        assert validate_sequence(figure_sequence) == []

    def test_confidence_out_of_range_names_field(self, figure_frame):
        body = figure_frame.body.copy()
        body[JOINT_INDEX["nose"], 2] = 1.2
        seq = PoseSequence((PoseFrame(body=body),), 100, 120, 24.0)
        violations = validate_sequence(seq)
        assert len(violations) == 1
        v = violations[0]
        assert v.frame == 0
        assert "nose" in v.location and "confidence" in v.location

    def test_nan_coordinate_is_finiteness_violation(self, figure_frame):
        body = figure_frame.body.copy()
        body[JOINT_INDEX["l_wrist"], 0] = float("nan")
        seq = PoseSequence((PoseFrame(body=body),), 100, 120, 24.0)
        violations = validate_sequence(seq)
        assert len(violations) == 1
        assert "finite" in violations[0].rule

    def test_off_canvas_visible_keypoint_reported(self, figure_frame):
        body = figure_frame.body.copy()
        body[JOINT_INDEX["nose"], 0] = 100 * 1.5 + 1  # beyond the margin
        seq = PoseSequence((PoseFrame(body=body),), 100, 120, 24.0)
        assert len(validate_sequence(seq)) == 1

    def test_layout_mismatch_reported(self, figure_frame):
        with_hand = figure_frame.replace(left_hand=np.zeros((21, 3)))
        seq = PoseSequence((figure_frame, with_hand), 100, 120, 24.0)
        assert any("layout" in v.rule for v in validate_sequence(seq))

    def test_never_raises_on_garbage_values(self, figure_frame):
        body = figure_frame.body.copy()
        body[:, 0] = float("inf")
        body[:, 2] = -3.0
        seq = PoseSequence((PoseFrame(body=body),), 100, 120, 24.0)
        assert len(validate_sequence(seq)) > 0


class TestStructuralErrors:
    def test_wrong_body_shape(self):
        with pytest.raises(SchemaError):
            PoseFrame(body=np.zeros((17, 3)))

    def test_empty_sequence(self):
        with pytest.raises(SchemaError):
            PoseSequence((), 100, 100, 24.0)

    def test_bad_canvas(self, figure_frame):
        with pytest.raises(SchemaError):
            PoseSequence((figure_frame,), 0, 100, 24.0)
