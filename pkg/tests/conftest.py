import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from posekit.skeleton import PoseFrame, PoseSequence, stick_figure

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def figure_frame() -> PoseFrame:
    return stick_figure(50.0, 30.0, torso=20.0)


@pytest.fixture
def figure_sequence(figure_frame) -> PoseSequence:
    return PoseSequence((figure_frame, figure_frame), width=100, height=120, fps=24.0)


def random_pose_frame(rng: np.random.Generator, width=100, height=100,
                      with_blocks=False) -> PoseFrame:
    def block(rows):
        arr = np.empty((rows, 3))
        arr[:, 0] = rng.uniform(0, width, rows)
        arr[:, 1] = rng.uniform(0, height, rows)
        arr[:, 2] = rng.uniform(0.1, 1.0, rows)
        return arr

    return PoseFrame(
        body=block(18),
        left_hand=block(21) if with_blocks else None,
        right_hand=block(21) if with_blocks else None,
        face=block(68) if with_blocks else None,
    )


def random_sequence(rng: np.random.Generator, n_frames=2, width=100, height=100,
                    with_blocks=False) -> PoseSequence:
    frames = tuple(random_pose_frame(rng, width, height, with_blocks) for _ in range(n_frames))
    return PoseSequence(frames, width, height, fps=float(rng.uniform(1, 60)))


def wiggled_figure_sequence(rng: np.random.Generator, n_frames=3, torso=20.0,
                            width=128, height=160) -> PoseSequence:
    """Stick figures with per-frame jitter: realistic but fully visible."""
    frames = []
    for _ in range(n_frames):
        base = stick_figure(width / 2, height / 4, torso=torso)
        body = base.body.copy()
        body[:, 0] += rng.normal(0, 1.5, 18)
        body[:, 1] += rng.normal(0, 1.5, 18)
        frames.append(PoseFrame(body=body))
    return PoseSequence(tuple(frames), width, height, fps=10.0)
