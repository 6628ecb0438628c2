"""Denoising-query construction.

Each training image contributes g groups of noised queries next to the
learned matching queries. A group holds one positive and one negative query
per ground-truth instance: the positive part is lightly noised and is trained
to reconstruct its instance, the negative part is heavily noised and is
trained to predict background.

Positional noise is injected into the four center-curve control points (not
the sampled points), bounded per axis by the control-point distance D to the
top boundary: positive offsets stay within [0, D), negative offsets within
[D, 2D). Content queries come from Mask Character Sliding: each transcript
character is cloned into a contiguous run so the T query positions cover the
characters in reading order, then clones are probabilistically backgrounded
(at least one clone per character survives) and flipped to other characters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BezierCurve, TextInstance, control_point_distances, sample_uniform

__all__ = [
    "NoiseConfig",
    "DnGroup",
    "DnQueryBatch",
    "dynamic_groups",
    "noise_offsets",
    "noised_positional_points",
    "mask_character_sliding",
    "build_dn_batch",
]

# per-image query budget that caps instances and sizes the dynamic group count
QUERY_BUDGET = 100
MAX_GROUPS = 5


@dataclass(frozen=True)
class NoiseConfig:
    """Knobs for denoising-query construction.

    lambda_flip: probability of flipping a non-background content character.
    mask_prob: per-position probability of backgrounding a clone.
    max_instances: per-image instance cap (first-k slicing above it).
    T: points sampled per curve; also the maximum recognition length.
    """

    lambda_flip: float = 0.4
    mask_prob: float = 0.5
    max_instances: int = 100
    T: int = 25
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_flip <= 1.0:
            raise ValueError(f"lambda_flip must lie in [0, 1], got {self.lambda_flip}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.max_instances < 1:
            raise ValueError(f"max_instances must be >= 1, got {self.max_instances}")


@dataclass(frozen=True)
class DnGroup:
    """One denoising group: positive and negative halves, n instances each."""

    positive_points: np.ndarray  # (n, T, 2)
    negative_points: np.ndarray  # (n, T, 2)
    positive_chars: np.ndarray  # (n, T) int64
    negative_chars: np.ndarray  # (n, T) int64, all background
    source_ids: tuple[str, ...]

    def __post_init__(self):
        n, T, _ = self.positive_points.shape
        if self.negative_points.shape != (n, T, 2):
            raise ValueError("positive and negative point halves must share shape")
        if self.positive_chars.shape != (n, T) or self.negative_chars.shape != (n, T):
            raise ValueError("character halves must be (n, T)")
        if len(self.source_ids) != n:
            raise ValueError("source_ids must align with instance rows")


@dataclass(frozen=True)
class DnQueryBatch:
    """g independently noised groups for one image, n instances per group."""

    groups: tuple[DnGroup, ...]
    g: int
    n: int

    @property
    def num_queries(self) -> int:
        return self.g * 2 * self.n


def dynamic_groups(n: int) -> int:
    """Group count g = min(5, floor(100/n)), clamped to at least 1."""
    if n < 1:
        raise ValueError("images with no instances must be skipped by the caller")
    return max(1, min(MAX_GROUPS, QUERY_BUDGET // n))


def noise_offsets(
    center: BezierCurve,
    top: BezierCurve,
    positive: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw per-control-point offsets (dx, dy), shape (4, 2).

    Magnitude ratios are uniform in [0, 1) (positive regime) or [1, 2)
    (negative regime) of the per-axis control-point distance D; sign bits are
    independent fair coins per control point per axis.
    """
    D = control_point_distances(center, top)  # (4, 2)
    ratio = rng.random((4, 2))
    signs = 1.0 - 2.0 * rng.integers(0, 2, size=(4, 2))
    if not positive:
        ratio = ratio + 1.0
    return signs * ratio * D


def noised_positional_points(
    instance: TextInstance,
    positive: bool,
    T: int,
    rng: np.random.Generator,
    *,
    control_point_noise: bool = True,
) -> np.ndarray:
    """T points sampled from the instance's noised center curve, shape (T, 2).

    With control_point_noise (the default), noise perturbs the four center
    control points and the resulting cubic is sampled, so the output is still
    an exact Bezier sampling. The ablation arm (control_point_noise=False)
    instead perturbs each sampled point independently, with per-point bounds
    taken from the pointwise distance to the top boundary.
    """
    center = instance.center
    if control_point_noise:
        noised = BezierCurve(center.control + noise_offsets(center, instance.top, positive, rng))
        return sample_uniform(noised, T)

    base = sample_uniform(center, T)
    D = np.abs(sample_uniform(instance.top, T) - base)  # (T, 2)
    ratio = rng.random((T, 2))
    signs = 1.0 - 2.0 * rng.integers(0, 2, size=(T, 2))
    if not positive:
        ratio = ratio + 1.0
    return base + signs * ratio * D


def mask_character_sliding(
    transcript,
    T: int,
    mask_prob: float,
    lambda_flip: float,
    rng: np.random.Generator,
    alphabet_size: int,
    *,
    use_sliding: bool = True,
) -> np.ndarray:
    """Build a length-T noised content sequence from a transcript.

    Sliding: character i is cloned floor(T/t) times, the first T mod t
    characters once more, clones contiguous and in order. Masking: within
    each run one uniformly chosen keeper survives and every other position is
    backgrounded with probability mask_prob. Flipping: every non-background
    position is replaced by a uniformly random *different* character with
    probability lambda_flip (never by background).

    With use_sliding=False the transcript is left-aligned and background-
    padded instead, and no masking is applied (the flip noise remains).
    """
    chars = np.asarray(transcript, dtype=np.int64)
    t = len(chars)
    if t == 0:
        raise ValueError("transcript must not be empty")
    if np.any(chars >= alphabet_size) or np.any(chars < 0):
        raise ValueError("transcript characters must lie in [0, alphabet_size)")
    if t > T:
        chars = chars[:T]
        t = T
    background = alphabet_size

    if use_sliding:
        base, k = divmod(T, t)
        lengths = np.full(t, base, dtype=np.int64)
        lengths[:k] += 1
        seq = np.repeat(chars, lengths)
        if mask_prob > 0.0:
            starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            keepers = starts + rng.integers(0, lengths)
            masked = rng.random(T) < mask_prob
            masked[keepers] = False
            seq = np.where(masked, background, seq)
    else:
        seq = np.full(T, background, dtype=np.int64)
        seq[:t] = chars

    if lambda_flip > 0.0 and alphabet_size > 1:
        flip = (rng.random(T) < lambda_flip) & (seq != background)
        # offset into the other C-1 characters keeps the draw uniform off-diagonal
        offsets = rng.integers(1, alphabet_size, size=T)
        seq = np.where(flip, (seq + offsets) % alphabet_size, seq)
    return seq


def build_dn_batch(
    instances,
    cfg: NoiseConfig,
    alphabet_size: int,
    rng: np.random.Generator,
    *,
    control_point_noise: bool = True,
    use_sliding: bool = True,
) -> DnQueryBatch:
    """Assemble the denoising part for one image.

    Instances beyond cfg.max_instances are sliced off (first-k). Every group
    draws its own independent noise; negative content is all background.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("build_dn_batch needs at least one instance")
    instances = instances[: cfg.max_instances]
    n = len(instances)
    g = dynamic_groups(n)
    background = alphabet_size

    groups = []
    for _ in range(g):
        pos_pts = np.stack(
            [
                noised_positional_points(inst, True, cfg.T, rng, control_point_noise=control_point_noise)
                for inst in instances
            ]
        )
        neg_pts = np.stack(
            [
                noised_positional_points(inst, False, cfg.T, rng, control_point_noise=control_point_noise)
                for inst in instances
            ]
        )
        pos_chars = np.stack(
            [
                mask_character_sliding(
                    inst.transcript, cfg.T, cfg.mask_prob, cfg.lambda_flip, rng, alphabet_size,
                    use_sliding=use_sliding,
                )
                for inst in instances
            ]
        )
        neg_chars = np.full((n, cfg.T), background, dtype=np.int64)
        groups.append(
            DnGroup(
                positive_points=pos_pts,
                negative_points=neg_pts,
                positive_chars=pos_chars,
                negative_chars=neg_chars,
                source_ids=tuple(inst.id for inst in instances),
            )
        )
    return DnQueryBatch(groups=tuple(groups), g=g, n=n)
