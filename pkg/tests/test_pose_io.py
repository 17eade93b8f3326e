import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA_DIR, random_sequence
from oracles import read_p6
from posekit.errors import ParseError, SchemaError, UnsupportedVersionError
from posekit.pose_io import (
    BONE_COLORS,
    CanvasSpec,
    ImageBuffer,
    encode_ppm,
    parse_pose_json,
    render_frame,
    write_pose_json,
)
from posekit.skeleton import JOINT_INDEX, PoseFrame, PoseSequence

MINIMAL_DOC = json.dumps(
    {
        "version": 1,
        "width": 64,
        "height": 64,
        "fps": 10.0,
        "frames": [{"body": [[1.0, 2.0, 0.5]] * 18}],
    }
)


class TestParse:
    def test_minimal_document(self):
        seq = parse_pose_json(MINIMAL_DOC)
        assert len(seq.frames) == 1
        assert seq.width == 64 and seq.height == 64
        assert seq.frames[0].keypoint("nose") == (1.0, 2.0, 0.5)
        assert seq.frames[0].left_hand is None

    def test_unsupported_version(self):
        doc = MINIMAL_DOC.replace('"version": 1', '"version": 2')
        with pytest.raises(UnsupportedVersionError):
            parse_pose_json(doc)

    def test_malformed_json_reports_offset(self):
        with pytest.raises(ParseError) as exc:
            parse_pose_json(b'{"version": 1,,}')
        assert exc.value.offset is not None

    def test_missing_field_named(self):
        doc = json.loads(MINIMAL_DOC)
        del doc["fps"]
        with pytest.raises(SchemaError, match="fps"):
            parse_pose_json(json.dumps(doc))

    def test_unknown_field_lenient_vs_strict(self):
        doc = json.loads(MINIMAL_DOC)
        doc["exporter"] = "thirdparty"
        text = json.dumps(doc)
        parse_pose_json(text)  # lenient default ignores extras
        with pytest.raises(SchemaError, match="exporter"):
            parse_pose_json(text, strict=True)

    def test_wrong_keypoint_count(self):
        doc = json.loads(MINIMAL_DOC)
        doc["frames"][0]["body"] = [[0, 0, 0]] * 17
        with pytest.raises(SchemaError, match="body"):
            parse_pose_json(json.dumps(doc))

    def test_non_utf8_input(self):
        with pytest.raises(ParseError):
            parse_pose_json(b"\xff\xfe{}")


class TestWrite:
    def test_serialization_is_deterministic(self, figure_sequence):
        assert write_pose_json(figure_sequence) == write_pose_json(figure_sequence)

    def test_six_decimal_rounding(self):
        body = np.zeros((18, 3))
        body[0] = (1.23456789, 0.0, 1.0)
        seq = PoseSequence((PoseFrame(body=body),), 64, 64, 10.0)
        assert b"[1.234568,0.000000,1.000000]" in write_pose_json(seq)

    def test_newline_terminated(self, figure_sequence):
        assert write_pose_json(figure_sequence).endswith(b"]}\n")

    def test_golden_bytes(self):
        golden = (DATA_DIR / "golden_sequence.json").read_bytes()
        seq = parse_pose_json(golden)
        assert write_pose_json(seq) == golden


class TestRoundTrip:
    def test_fuzzed_documents_roundtrip_canonically(self):
        rng = np.random.default_rng(2024)
        for i in range(100):
            seq = random_sequence(rng, n_frames=int(rng.integers(1, 4)),
                                  with_blocks=bool(rng.integers(2)))
            first = write_pose_json(seq)
            reparsed = parse_pose_json(first)
            assert write_pose_json(reparsed) == first, f"fuzz case {i}"

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_parse_write_identity_on_canonical_sequences(self, seed):
        rng = np.random.default_rng(seed)
        seq = random_sequence(rng)
        canonical = parse_pose_json(write_pose_json(seq))
        assert parse_pose_json(write_pose_json(canonical)) == canonical


class TestRender:
    def test_all_missing_gives_solid_background(self):
        body = np.zeros((18, 3))
        spec = CanvasSpec(32, 32, background=(7, 8, 9))
        img = render_frame(PoseFrame(body=body), spec)
        assert img.pixels == bytes((7, 8, 9)) * (32 * 32)

    def test_single_horizontal_bone_exact_pixels(self):
        # Neck at (2, 10), nose at (12, 10): one horizontal bone of
        # thickness 1, radius 0 so no joint discs.
        body = np.zeros((18, 3))
        body[JOINT_INDEX["neck"]] = (2.0, 10.0, 1.0)
        body[JOINT_INDEX["nose"]] = (12.0, 10.0, 1.0)
        spec = CanvasSpec(20, 20, line_thickness=1, joint_radius=0)
        img = render_frame(PoseFrame(body=body), spec)
        color = BONE_COLORS["nose"]
        expected = {(x, 10) for x in range(2, 13)}
        lit = {
            (x, y)
            for y in range(20)
            for x in range(20)
            if img.pixel(x, y) != (0, 0, 0)
        }
        # Joint discs are off; endpoints get the joint color only if radius > 0.
        assert lit == expected
        assert all(img.pixel(x, y) == color for x, y in expected)

    def test_golden_image(self, figure_frame):
        golden = (DATA_DIR / "golden_pose.ppm").read_bytes()
        img = render_frame(figure_frame, CanvasSpec(100, 120, line_thickness=3, joint_radius=3))
        assert encode_ppm(img) == golden

    def test_render_is_pure(self, figure_frame):
        spec = CanvasSpec(24, 24, line_thickness=1, joint_radius=1)
        outputs = {render_frame(figure_frame, spec).pixels for _ in range(1000)}
        assert len(outputs) == 1

    def test_translation_consistency(self, figure_frame):
        spec = CanvasSpec(256, 256, line_thickness=2, joint_radius=2)
        base = render_frame(figure_frame, spec)
        dx, dy = 17, 9
        body = figure_frame.body.copy()
        body[:, 0] += dx
        body[:, 1] += dy
        shifted = render_frame(PoseFrame(body=body), spec)

        def lit(img):
            return {
                (x, y)
                for y in range(img.height)
                for x in range(img.width)
                if img.pixel(x, y) != (0, 0, 0)
            }

        assert {(x + dx, y + dy) for x, y in lit(base)} == lit(shifted)


class TestPpm:
    def test_one_by_one_white(self):
        img = ImageBuffer(1, 1, bytes((255, 255, 255)))
        assert encode_ppm(img) == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_two_by_one_red_blue(self):
        img = ImageBuffer(2, 1, bytes((255, 0, 0, 0, 0, 255)))
        assert encode_ppm(img) == b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff"

    def test_roundtrip_with_independent_reader(self):
        rng = np.random.default_rng(9)
        pixels = bytes(rng.integers(0, 256, 3 * 5 * 7, dtype=np.uint8))
        img = ImageBuffer(5, 7, pixels)
        w, h, payload = read_p6(encode_ppm(img))
        assert (w, h, payload) == (5, 7, pixels)

    def test_buffer_length_checked(self):
        with pytest.raises(SchemaError):
            ImageBuffer(2, 2, b"\x00" * 11)
