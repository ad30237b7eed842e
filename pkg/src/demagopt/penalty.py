"""Demagnetization penalty, its smooth p-norm relaxation, and the
partial-demagnetization metric.

The hard pointwise condition "easy-axis flux >= B_star in every magnet" is
relaxed to an integral of a smooth penalty of the easy-axis flux; the
metric D reports how deep below the knee a design operates, normalized so
that a uniformly fully-demagnetized magnet scores 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PenaltyConfig:
    B_star: float = 0.56       # knee flux density, T
    p: int = 16                # even smoothing exponent
    B0_star: float = -0.66     # fully demagnetized easy-axis flux, T
    gamma: float = 10.0        # constraint weight in the objective

    def validate(self):
        if not self.B_star > self.B0_star:
            raise ValueError("B_star must exceed B0_star")
        if self.p < 2 or self.p % 2:
            raise ValueError("p must be an even integer >= 2")


def phi(s, cfg: PenaltyConfig = PenaltyConfig()):
    """Exact penalty max(B_star - s, 0)."""
    return np.maximum(cfg.B_star - np.asarray(s, dtype=np.float64), 0.0)


def phi_p(s, cfg: PenaltyConfig = PenaltyConfig()):
    """Smooth penalty (B*^p + (2B* - s)^p)^(1/p) - B* for s < 2B*, else 0."""
    s = np.asarray(s, dtype=np.float64)
    bs = cfg.B_star
    u = 2.0 * bs - s
    out = np.zeros_like(s)
    mask = u > 0.0
    if np.any(mask):
        um = u[mask]
        m = np.maximum(um, bs)  # factor out the larger term: no overflow in **p
        out[mask] = m * ((bs / m) ** cfg.p + (um / m) ** cfg.p) ** (1.0 / cfg.p) - bs
    return out if out.ndim else float(out)


def phi_p_prime(s, cfg: PenaltyConfig = PenaltyConfig()):
    """Derivative of phi_p; ranges over [-1, 0] and vanishes for s >= 2B*."""
    s = np.asarray(s, dtype=np.float64)
    bs = cfg.B_star
    u = 2.0 * bs - s
    out = np.zeros_like(s)
    mask = u > 0.0
    if np.any(mask):
        um = u[mask]
        m = np.maximum(um, bs)
        t = um / m
        base = (bs / m) ** cfg.p + t ** cfg.p
        out[mask] = -(t ** (cfg.p - 1)) * base ** ((1.0 - cfg.p) / cfg.p)
    return out if out.ndim else float(out)


def _magnet_masks(labels):
    labels = np.asarray(labels)
    return labels == 1, labels == 2


def constraint_functional(areas, b, labels, easy_axes, cfg: PenaltyConfig) -> float:
    """C = sum over magnet elements of area * phi_p(b . e_M)  [T m^2].

    areas (E,), b (E,2), labels (E,) with 1/2 marking the two magnets,
    easy_axes (2,2) rows e_M1, e_M2.
    """
    areas = np.asarray(areas, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != areas.shape[0]:
        raise ValueError("field and design live on different meshes")
    total = 0.0
    for mask, e in zip(_magnet_masks(labels), easy_axes):
        if not np.any(mask):
            continue
        s = b[mask] @ e
        total += float(np.sum(areas[mask] * phi_p(s, cfg)))
    return total


def constraint_gradient_flux(b, labels, easy_axes, cfg: PenaltyConfig):
    """dC/db per element: phi_p'(b . e_M) * e_M on magnet elements, else 0."""
    b = np.asarray(b, dtype=np.float64)
    grad = np.zeros_like(b)
    for mask, e in zip(_magnet_masks(labels), easy_axes):
        if not np.any(mask):
            continue
        w = phi_p_prime(b[mask] @ e, cfg)
        grad[mask] = w[:, None] * e[None, :]
    return grad


def demag_integrand(b, labels, easy_axes, cfg: PenaltyConfig):
    """Per-element max{(B* - b.e_M)/(B* - B0*), 0} on magnets, 0 elsewhere."""
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros(b.shape[0])
    span = cfg.B_star - cfg.B0_star
    for mask, e in zip(_magnet_masks(labels), easy_axes):
        if not np.any(mask):
            continue
        out[mask] = np.maximum((cfg.B_star - b[mask] @ e) / span, 0.0)
    return out


def demag_metric(areas, b, labels, easy_axes, cfg: PenaltyConfig) -> float:
    """Partial-demagnetization metric D: per-magnet area average of the
    demag integrand, summed over the two magnets. Unclamped above 1."""
    areas = np.asarray(areas, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != areas.shape[0]:
        raise ValueError("field and design live on different meshes")
    span = cfg.B_star - cfg.B0_star
    total = 0.0
    for idx, (mask, e) in enumerate(zip(_magnet_masks(labels), easy_axes), start=1):
        area = float(np.sum(areas[mask]))
        if area <= 0.0:
            warnings.warn(f"magnet {idx} region is empty; it contributes 0 to D")
            continue
        vals = np.maximum((cfg.B_star - b[mask] @ e) / span, 0.0)
        total += float(np.sum(areas[mask] * vals)) / area
    return total
