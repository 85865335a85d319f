"""Steered BRIEF sampling tables.

The 256 point pairs are the learned ORB test pattern (offsets within a 31x31
patch) that ships as a data file with scikit-image. Steering is discretized
into 30 bins of 12 degrees; each bin holds the pattern rotated and rounded to
integer pixel offsets. All tables are read-only.
"""

from importlib import resources

import numpy as np

N_BITS = 256
N_ANGLE_BINS = 30
ANGLE_STEP = 2.0 * np.pi / N_ANGLE_BINS


def _load_learned_pattern() -> np.ndarray:
    text = resources.files("skimage.feature").joinpath("orb_descriptor_positions.txt").read_text()
    pattern = np.loadtxt(text.splitlines(), dtype=np.int64).reshape(-1, 4)
    if pattern.shape != (N_BITS, 4):
        raise RuntimeError(f"unexpected ORB pattern shape {pattern.shape}")
    # columns: (row0, col0, row1, col1) offsets
    return pattern


def _steer(pattern: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(pattern)
    for k in (0, 2):
        dy, dx = pattern[:, k], pattern[:, k + 1]
        out[:, k] = np.floor(s * dx + c * dy + 0.5)
        out[:, k + 1] = np.floor(c * dx - s * dy + 0.5)
    return out


PATTERN = _load_learned_pattern()
STEERED = np.stack([_steer(PATTERN, k * ANGLE_STEP) for k in range(N_ANGLE_BINS)])
MAX_OFFSET = int(np.abs(STEERED).max())

PATTERN.flags.writeable = False
STEERED.flags.writeable = False


def angle_bin(angle) -> np.ndarray:
    return np.floor(np.asarray(angle) / ANGLE_STEP + 0.5).astype(np.int64) % N_ANGLE_BINS
