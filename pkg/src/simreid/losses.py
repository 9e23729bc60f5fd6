"""Contrastive (Siamese) and triplet objectives over embedding pairs.

Both losses act on the Euclidean geometry of the embedding space with a
single margin.  Contrastive is the classic two-branch form

    L(e1, e2, y) = y * d^2 + (1 - y) * max(0, margin - d)^2,  d = ||e1 - e2||

and triplet defaults to the squared-distance convention

    L(a, p, n) = max(0, ||a - p||^2 - ||a - n||^2 + margin)

with a config switch to use raw distances instead.  Gradients are exact
except at hinge kinks and at d = 0 for a dissimilar pair, where the
subgradient is taken to be zero so optimization stays stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import check_same_dim, euclidean_distance


@dataclass(frozen=True)
class LossConfig:
    """Shared loss settings; `squared_distances` governs the triplet form."""

    margin: float = 1.0
    squared_distances: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


def contrastive_loss(e1, e2, same: bool, cfg: LossConfig = LossConfig()) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    check_same_dim(e1, e2)
    d = euclidean_distance(e1, e2)
    if same:
        return d * d
    gap = cfg.margin - d
    return gap * gap if gap > 0.0 else 0.0


def contrastive_grad(
    e1, e2, same: bool, cfg: LossConfig = LossConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`contrastive_loss` w.r.t. e1 and e2.

    Always satisfies grad(e1) == -grad(e2).
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    check_same_dim(e1, e2)
    diff = e1 - e2
    if same:
        g = 2.0 * diff
        return g, -g
    d = float(np.sqrt(np.dot(diff, diff)))
    if d >= cfg.margin or d == 0.0:
        # Hinge inactive, or undefined direction at d == 0: zero subgradient.
        zero = np.zeros_like(diff)
        return zero, zero.copy()
    g = (-2.0 * (cfg.margin - d) / d) * diff
    return g, -g


def triplet_loss(a, p, n, cfg: LossConfig = LossConfig()) -> float:
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    check_same_dim(a, p)
    check_same_dim(a, n)
    if cfg.squared_distances:
        d_ap = np.dot(a - p, a - p)
        d_an = np.dot(a - n, a - n)
    else:
        d_ap = euclidean_distance(a, p)
        d_an = euclidean_distance(a, n)
    val = d_ap - d_an + cfg.margin
    return float(val) if val > 0.0 else 0.0


def triplet_grad(
    a, p, n, cfg: LossConfig = LossConfig()
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`triplet_loss` w.r.t. anchor, positive, negative."""
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    check_same_dim(a, p)
    check_same_dim(a, n)
    ap = a - p
    an = a - n
    if cfg.squared_distances:
        active = np.dot(ap, ap) - np.dot(an, an) + cfg.margin > 0.0
        if not active:
            z = np.zeros_like(a)
            return z, z.copy(), z.copy()
        g_a = 2.0 * ap - 2.0 * an
        g_p = -2.0 * ap
        g_n = 2.0 * an
        return g_a, g_p, g_n
    d_ap = float(np.sqrt(np.dot(ap, ap)))
    d_an = float(np.sqrt(np.dot(an, an)))
    if d_ap - d_an + cfg.margin <= 0.0:
        z = np.zeros_like(a)
        return z, z.copy(), z.copy()
    # Unit-direction terms; a zero distance contributes nothing.
    u_ap = ap / d_ap if d_ap > 0.0 else np.zeros_like(ap)
    u_an = an / d_an if d_an > 0.0 else np.zeros_like(an)
    return u_ap - u_an, -u_ap, u_an
