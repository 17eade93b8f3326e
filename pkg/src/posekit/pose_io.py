"""Keypoint file format and deterministic skeleton rasterization.

File format (version 1, canonical):

    { "version": 1, "width": int, "height": int, "fps": real,
      "frames": [ { "body": [[x, y, c] * 18],
                    "left_hand": [[x, y, c] * 21]?,
                    "right_hand": [[x, y, c] * 21]?,
                    "face": [[x, y, c] * 68]? } ] }

The canonical writer emits fixed key order, 6-decimal fixed-point reals
(round-half-even) and a trailing newline, so a given sequence always
serializes to the same bytes on every platform.

Rendering is integer-only: Bresenham lines stamped with a thickness x
thickness square, joints as filled discs, no anti-aliasing. Bones use the
conventional 18-color wheel below (indexed in bone order); body joints use
the same wheel in joint order; hand and face keypoints are white radius-1
dots. Draw order is bones, body joints, left hand, right hand, face; later
strokes overwrite earlier ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, UnsupportedVersionError
from .skeleton import (
    BONE_NAMES,
    BONE_PARENT,
    BONES,
    JOINT_INDEX,
    JOINT_NAMES,
    VISIBILITY_THRESHOLD,
    PoseFrame,
    PoseSequence,
)

FORMAT_VERSION = 1

_FRAME_BLOCKS = (("body", 18), ("left_hand", 21), ("right_hand", 21), ("face", 68))

COLOR_WHEEL = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
    (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
    (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
    (255, 0, 255), (255, 0, 170), (255, 0, 85),
)

BONE_COLORS = {bone: COLOR_WHEEL[i] for i, bone in enumerate(BONE_NAMES)}
JOINT_COLORS = {joint: COLOR_WHEEL[i] for i, joint in enumerate(JOINT_NAMES)}
POINT_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class CanvasSpec:
    width: int
    height: int
    line_thickness: int = 4
    joint_radius: int = 4
    background: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"canvas must be at least 16x16, got {self.width}x{self.height}")
        if self.line_thickness < 1:
            raise ConfigError("line thickness must be >= 1")
        if self.joint_radius < 0:
            raise ConfigError("joint radius must be >= 0")


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major RGB byte image, no alpha."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if len(self.pixels) != 3 * self.width * self.height:
            raise SchemaError(
                f"pixel buffer must hold {3 * self.width * self.height} bytes, got {len(self.pixels)}"
            )

    def pixel(self, x: int, y: int) -> tuple[int, int, int]:
        off = 3 * (y * self.width + x)
        return (self.pixels[off], self.pixels[off + 1], self.pixels[off + 2])


# ---------------------------------------------------------------------------
# JSON parsing / serialization


def _require_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where} must be a number, got {type(value).__name__}")
    return float(value)


def _parse_block(raw, name: str, rows: int, frame_idx: int) -> np.ndarray:
    if not isinstance(raw, list) or len(raw) != rows:
        raise SchemaError(f"frames[{frame_idx}].{name} must be a list of {rows} keypoints")
    block = np.empty((rows, 3))
    for i, triple in enumerate(raw):
        if not isinstance(triple, list) or len(triple) != 3:
            raise SchemaError(f"frames[{frame_idx}].{name}[{i}] must be an [x, y, c] triple")
        for j in range(3):
            block[i, j] = _require_number(triple[j], f"frames[{frame_idx}].{name}[{i}][{j}]")
    return block


def parse_pose_json(data: bytes | str, *, strict: bool = False) -> PoseSequence:
    """Parse a keypoint document into a PoseSequence.

    In strict mode unknown fields are rejected; the default lenient mode
    ignores them so exports from third-party tools can carry extras.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"input is not UTF-8 at byte {e.start}", offset=e.start) from e
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON at byte {e.pos}: {e.msg}", offset=e.pos) from e

    if not isinstance(doc, dict):
        raise SchemaError("top-level value must be an object")
    known_top = {"version", "width", "height", "fps", "frames"}
    if strict:
        extra = set(doc) - known_top
        if extra:
            raise SchemaError(f"unknown top-level fields: {sorted(extra)}")
    for key in known_top:
        if key not in doc:
            raise SchemaError(f"missing required field: {key}")

    version = doc["version"]
    if isinstance(version, bool) or not isinstance(version, int):
        raise SchemaError("version must be an integer")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")

    for key in ("width", "height"):
        if isinstance(doc[key], bool) or not isinstance(doc[key], int):
            raise SchemaError(f"{key} must be an integer")
    fps = _require_number(doc["fps"], "fps")

    raw_frames = doc["frames"]
    if not isinstance(raw_frames, list) or len(raw_frames) == 0:
        raise SchemaError("frames must be a non-empty list")

    frames = []
    known_frame = {name for name, _ in _FRAME_BLOCKS}
    for frame_idx, raw in enumerate(raw_frames):
        if not isinstance(raw, dict):
            raise SchemaError(f"frames[{frame_idx}] must be an object")
        if strict:
            extra = set(raw) - known_frame
            if extra:
                raise SchemaError(f"unknown fields in frames[{frame_idx}]: {sorted(extra)}")
        if "body" not in raw:
            raise SchemaError(f"frames[{frame_idx}] is missing the body block")
        blocks = {}
        for name, rows in _FRAME_BLOCKS:
            if name in raw:
                blocks[name] = _parse_block(raw[name], name, rows, frame_idx)
        frames.append(PoseFrame(**blocks))

    return PoseSequence(tuple(frames), doc["width"], doc["height"], fps)


def _fmt(value: float) -> str:
    # %.6f is correctly rounded (ties to even at binary precision).
    return f"{value:.6f}"


def _block_json(block: np.ndarray) -> str:
    rows = ",".join(f"[{_fmt(x)},{_fmt(y)},{_fmt(c)}]" for x, y, c in block)
    return f"[{rows}]"


def write_pose_json(seq: PoseSequence) -> bytes:
    """Serialize a sequence to canonical bytes (stable across platforms)."""
    frame_docs = []
    for frame in seq.frames:
        parts = [f'"body":{_block_json(frame.body)}']
        for name in ("left_hand", "right_hand", "face"):
            block = getattr(frame, name)
            if block is not None:
                parts.append(f'"{name}":{_block_json(block)}')
        frame_docs.append("{" + ",".join(parts) + "}")
    doc = (
        f'{{"version":{FORMAT_VERSION},"width":{seq.width},"height":{seq.height},'
        f'"fps":{_fmt(seq.fps)},"frames":[' + ",".join(frame_docs) + "]}\n"
    )
    return doc.encode("utf-8")


# ---------------------------------------------------------------------------
# Rasterization


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> Iterator[tuple[int, int]]:
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def _put(buf: bytearray, w: int, h: int, x: int, y: int, color: tuple[int, int, int]) -> None:
    if 0 <= x < w and 0 <= y < h:
        off = 3 * (y * w + x)
        buf[off] = color[0]
        buf[off + 1] = color[1]
        buf[off + 2] = color[2]


def _stamp_square(buf, w, h, x, y, size: int, color) -> None:
    for oy in range(-(size // 2), (size - 1) // 2 + 1):
        for ox in range(-(size // 2), (size - 1) // 2 + 1):
            _put(buf, w, h, x + ox, y + oy, color)


def _draw_line(buf, w, h, p0, p1, thickness: int, color) -> None:
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    for x, y in _bresenham(x0, y0, x1, y1):
        if thickness == 1:
            _put(buf, w, h, x, y, color)
        else:
            _stamp_square(buf, w, h, x, y, thickness, color)


def _draw_disc(buf, w, h, cx: float, cy: float, radius: int, color) -> None:
    icx, icy = int(round(cx)), int(round(cy))
    r2 = radius * radius
    for oy in range(-radius, radius + 1):
        for ox in range(-radius, radius + 1):
            if ox * ox + oy * oy <= r2:
                _put(buf, w, h, icx + ox, icy + oy, color)


def render_frame(frame: PoseFrame, spec: CanvasSpec) -> ImageBuffer:
    """Rasterize one frame. Missing joints and their bones are skipped."""
    w, h = spec.width, spec.height
    buf = bytearray(bytes(spec.background) * (w * h))

    body = frame.body
    for parent, child in BONES:
        pi, ci = JOINT_INDEX[parent], JOINT_INDEX[child]
        if body[pi, 2] < VISIBILITY_THRESHOLD or body[ci, 2] < VISIBILITY_THRESHOLD:
            continue
        _draw_line(buf, w, h, body[pi], body[ci], spec.line_thickness, BONE_COLORS[child])

    # joint_radius 0 disables joint discs entirely
    if spec.joint_radius > 0:
        for idx, joint in enumerate(JOINT_NAMES):
            if body[idx, 2] >= VISIBILITY_THRESHOLD:
                _draw_disc(buf, w, h, body[idx, 0], body[idx, 1], spec.joint_radius,
                           JOINT_COLORS[joint])

    for block in (frame.left_hand, frame.right_hand, frame.face):
        if block is None:
            continue
        for x, y, c in block:
            if c >= VISIBILITY_THRESHOLD:
                _draw_disc(buf, w, h, x, y, 1, POINT_COLOR)

    return ImageBuffer(w, h, bytes(buf))


def encode_ppm(img: ImageBuffer) -> bytes:
    """Encode as binary P6 PPM, bit-exact."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels
