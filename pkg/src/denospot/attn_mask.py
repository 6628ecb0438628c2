"""Group-isolation attention mask for inter-instance self-attention.

Queries are ordered [group 0 | ... | group g-1 | matching part], each group
2n wide (n positive then n negative rows). The mask blocks attention between
different denoising groups and hides every denoising column from the matching
rows, so ground-truth information cannot leak into the matching part. It is
applied only to the inter-instance attention stage; attention across the T
character positions inside one instance needs no mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AttentionMask", "build_mask"]


@dataclass(frozen=True)
class AttentionMask:
    """Boolean may-not-attend matrix; blocked[i, j] means i cannot see j."""

    blocked: np.ndarray  # (size, size) bool

    def __post_init__(self):
        blocked = np.asarray(self.blocked, dtype=bool)
        if blocked.ndim != 2 or blocked.shape[0] != blocked.shape[1]:
            raise ValueError("attention mask must be square")
        if blocked.diagonal().any():
            raise ValueError("every query must see itself")
        object.__setattr__(self, "blocked", blocked)

    @property
    def size(self) -> int:
        return self.blocked.shape[0]


def build_mask(g: int, n: int, K: int) -> AttentionMask:
    """Mask for g groups of 2n denoising queries followed by K matching queries.

    blocked[i, j] is true iff j is a denoising column and either i lies in a
    different group or i is a matching row. Matching columns are never
    blocked, so denoising rows may attend to the matching part (the reverse
    is what leaks, and is blocked).
    """
    if g < 1 or n < 1 or K < 0:
        raise ValueError(f"need g >= 1, n >= 1, K >= 0, got g={g}, n={n}, K={K}")
    dn = g * 2 * n
    size = dn + K
    idx = np.arange(size)
    group = idx // (2 * n)  # matching rows land past g-1; exact value is irrelevant below
    j_is_dn = idx < dn
    i_is_matching = idx >= dn
    blocked = j_is_dn[None, :] & (
        (group[:, None] != group[None, :]) | i_is_matching[:, None]
    )
    return AttentionMask(blocked=blocked)
