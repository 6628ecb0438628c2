"""Cubic Bezier geometry for curved text instances.

A text instance is bounded by a top and a bottom cubic Bezier curve (four
control points each, ordered in reading direction). Its center curve is the
control-point-wise midpoint of the two boundaries and acts as the instance
spine: positional queries are built from points sampled uniformly (in the
curve parameter) along it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "BezierCurve",
    "TextInstance",
    "center_curve",
    "eval_bezier",
    "sample_uniform",
    "control_point_distances",
]


@dataclass(frozen=True)
class BezierCurve:
    """A cubic Bezier curve: four 2-D control points P0..P3 in reading order."""

    control: np.ndarray  # (4, 2) float64

    def __post_init__(self):
        control = np.asarray(self.control, dtype=np.float64)
        if control.shape != (4, 2):
            raise ValueError(f"cubic Bezier needs control points of shape (4, 2), got {control.shape}")
        if not np.isfinite(control).all():
            raise ValueError("control points must be finite")
        object.__setattr__(self, "control", control)


@dataclass(frozen=True)
class TextInstance:
    """Ground-truth text instance: boundary curves plus a transcript.

    The transcript is a sequence of character indices in [0, C-1]; the
    background index C is reserved and never appears in ground truth.
    """

    top: BezierCurve
    bottom: BezierCurve
    transcript: tuple[int, ...]
    id: str = ""

    def __post_init__(self):
        transcript = tuple(int(c) for c in self.transcript)
        if len(transcript) < 1:
            raise ValueError("transcript must contain at least one character")
        if any(c < 0 for c in transcript):
            raise ValueError("transcript indices must be non-negative")
        object.__setattr__(self, "transcript", transcript)

    @cached_property
    def center(self) -> BezierCurve:
        return center_curve(self.top, self.bottom)

    def validate_alphabet(self, alphabet_size: int) -> None:
        """Reject transcripts that stray outside [0, C-1] (C is the background)."""
        if any(c >= alphabet_size for c in self.transcript):
            raise ValueError(
                f"instance {self.id!r}: transcript uses index >= alphabet size {alphabet_size} "
                "(the background index is reserved)"
            )


def center_curve(top: BezierCurve, bottom: BezierCurve) -> BezierCurve:
    """Control-point-wise midpoint of the top and bottom boundary curves."""
    return BezierCurve((top.control + bottom.control) / 2.0)


def _bernstein3(t: np.ndarray) -> np.ndarray:
    """Cubic Bernstein basis evaluated at t, shape (..., 4)."""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    return np.stack([s**3, 3.0 * s**2 * t, 3.0 * s * t**2, t**3], axis=-1)


def eval_bezier(curve: BezierCurve, t) -> np.ndarray:
    """Evaluate the curve at parameter(s) t in [0, 1] (Bernstein form).

    Scalar t gives a (2,) point, an array of shape (...,) gives (..., 2).
    t=0 gives P0, t=1 gives P3.
    """
    t = np.asarray(t, dtype=np.float64)
    if bool((t < 0.0).any() or (t > 1.0).any()):
        raise ValueError("curve parameters must lie in [0, 1]")
    return _bernstein3(t) @ curve.control


def sample_uniform(curve: BezierCurve, T: int) -> np.ndarray:
    """Sample T points at t = k/(T-1), k = 0..T-1.

    Uniform in the curve parameter, not arc length. Returns shape (T, 2);
    the first row is exactly P0 and the last exactly P3.
    """
    if T < 2:
        raise ValueError(f"need at least 2 samples, got T={T}")
    ts = np.linspace(0.0, 1.0, T)
    return _bernstein3(ts) @ curve.control


def control_point_distances(center: BezierCurve, top: BezierCurve) -> np.ndarray:
    """Per-axis absolute distances |top_i - center_i|, shape (4, 2).

    Column 0 holds the x magnitudes, column 1 the y magnitudes. These bound
    the noise offsets: the sign of an offset is drawn separately, so the
    distances are unsigned.
    """
    return np.abs(top.control - center.control)
