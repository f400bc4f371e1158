"""Named metric/foliation configurations used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (ConformalMetric, DiskBDF, EuclideanMetric, FoliationSpec,
                       GridMetric, HalfPlaneBDF)


@dataclass(frozen=True)
class Scene:
    name: str
    metric: object
    fol: FoliationSpec
    # whether Omega_c sits strictly inside the chart (exits only through rho or x)
    compact: bool = True

    def with_depth(self, c):
        return replace(self, fol=self.fol.with_depth(c))


def euclidean_disk(c=0.3, eps=0.3):
    """Unit disk, boundary point p = (1, 0); leaves bend around the disk."""
    metric = EuclideanMetric((0.2, 1.1, -0.95, 0.95))
    fol = FoliationSpec(DiskBDF((0.0, 0.0), 1.0), (1.0, 0.0), eps, c)
    return Scene("euclidean-disk", metric, fol)


def conformal_strip(c=0.3, eps=0.1, kappa=1.0):
    """Half plane ``z1 < 0`` with metric ``exp(2 kappa z1)``, p at the origin."""
    metric = ConformalMetric((-0.5, 0.1, -2.0, 2.0), kappa=kappa, axis=0)
    fol = FoliationSpec(HalfPlaneBDF(0.0, 0.0), (0.0, 0.0), eps, c)
    return Scene("conformal-strip", metric, fol)


def conformal_axis(c=0.3, kappa=1.0, phi=0.0, half_width=1.0):
    """Axis-aligned (``eps = 0``) foliation; leaves are chart lines rotated by ``phi``.

    Omega_c is a strip, so rays may leave through the chart edge.
    """
    hw = half_width + c + 0.2
    metric = ConformalMetric((-hw, hw, -hw, hw), kappa=kappa, axis=0)
    if phi != 0.0:
        metric = _RotatedConformal((-hw, hw, -hw, hw), kappa, phi)
    fol = FoliationSpec(HalfPlaneBDF(phi, 0.0), (0.0, 0.0), 0.0, c)
    return Scene("conformal-axis" if phi == 0.0 else "conformal-rotated", metric, fol, compact=False)


class _RotatedConformal(ConformalMetric):
    """``exp(2 kappa n . z) * identity`` with ``n = (cos phi, sin phi)``."""

    def __init__(self, bounds, kappa, phi):
        super().__init__(bounds, kappa=kappa, axis=0)
        self.phi = float(phi)
        self.n = np.array([np.cos(phi), np.sin(phi)])

    def _evaluate(self, z):
        s = np.exp(2.0 * self.kappa * (z @ self.n))
        g = s[..., None, None] * np.eye(2)
        dg = (2.0 * self.kappa * s)[..., None, None, None] * np.eye(2)[..., None] * self.n
        return g, dg


def flat_strip(c=1.0):
    """Euclidean half plane ``rho = z1`` with straight leaves (not strictly convex)."""
    metric = EuclideanMetric((-0.5, c + 0.5, -3.0, 3.0))
    fol = FoliationSpec(HalfPlaneBDF(np.pi, 0.0), (0.0, 0.0), 0.0, c)
    return Scene("flat-strip", metric, fol, compact=False)


def grid_conformal(c=0.3, eps=0.1, kappa=1.0, n=41):
    """The conformal strip with its metric tabulated on a grid."""
    base = conformal_strip(c, eps, kappa)
    x0, x1, y0, y1 = base.metric.bounds
    metric = GridMetric.sample(base.metric, np.linspace(x0, x1, n), np.linspace(y0, y1, 2 * n))
    return Scene("grid-conformal", metric, base.fol)


PRESETS = {
    "euclidean-disk": euclidean_disk,
    "conformal-strip": conformal_strip,
    "conformal-axis": conformal_axis,
    "flat-strip": flat_strip,
    "grid-conformal": grid_conformal,
}


def make_scene(name, **params):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)
