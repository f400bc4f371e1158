"""Weights, foliation-adapted fields and the weighted geodesic X-ray transform.

A weight ``rho(z1, z)`` is evaluated with ``z1`` the starting point of the
geodesic and ``z`` the point being integrated.  Every weight shipped here
depends on ``z1`` only through the geodesic it spans, so it is computed from a
traced segment: :meth:`WeightSpec.on_rays` returns the weight at every node of
a bundle of full segments.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import least_squares

from .geometry import DomainError, _rk4_step, trace_bundle

# --------------------------------------------------------------------------
# traced segments
# --------------------------------------------------------------------------


@dataclass
class TracedRays:
    """Forward and backward halves of geodesics launched from ``(z0, v0)``.

    ``param`` is ``"arclength"`` when ``v0`` was normalized to unit metric
    speed before tracing and ``"affine"`` when the given vector was used.
    ``speed`` holds the metric length of the original initial vectors.
    """

    z0: np.ndarray
    v0: np.ndarray
    speed: np.ndarray
    param: str
    fwd: object
    bwd: object

    @property
    def n(self):
        return self.z0.shape[0]

    @property
    def capped(self):
        return self.fwd.capped | self.bwd.capped

    @property
    def exits(self):
        return self.fwd.exit_point, self.bwd.exit_point

    def halves(self):
        return (self.fwd, self.bwd)


def trace_rays(metric, fol, z0, v0, h, param="arclength", t_cap=None):
    """Trace full geodesic segments through ``z0`` with initial vectors ``v0``."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    z0, v0 = np.broadcast_arrays(z0, v0)
    z0, v0 = z0.copy(), v0.copy()
    if z0.shape[0] == 0:
        raise ValueError("no rays to trace")
    speed = np.sqrt(metric.norm2(z0, v0))
    if np.any(speed == 0):
        raise ValueError("initial vectors must be nonzero")
    if param == "arclength":
        vt = v0 / speed[:, None]
    elif param == "affine":
        vt = v0
    else:
        raise ValueError(f"unknown parametrization {param!r}")
    fwd = trace_bundle(metric, fol, z0, vt, h, t_cap=t_cap)
    bwd = trace_bundle(metric, fol, z0, -vt, h, t_cap=t_cap)
    return TracedRays(z0, v0, speed, param, fwd, bwd)


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------


class WeightSpec:
    """Strictly positive density ``rho(z1, z)`` with bounds ``C0 <= rho <= C1``."""

    name = "weight"
    bounds = (1.0, 1.0)

    def on_rays(self, rays):
        """Weights at the nodes of ``rays.fwd`` and ``rays.bwd``, start ``rays.z0``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, bounds={self.bounds})"


class ConstantWeight(WeightSpec):
    name = "constant"

    def __init__(self, value=1.0):
        if value <= 0:
            raise ValueError("weight must be strictly positive")
        self.value = float(value)
        self.bounds = (self.value, self.value)

    def on_rays(self, rays):
        return tuple(np.full(b.times.shape, self.value) for b in rays.halves())


def _default_modulation(z):
    return 1.0 + 0.2 * np.sin(z[..., 0] + 2.0 * z[..., 1])


def _default_end_score(a, b):
    s = a[..., 0] + b[..., 0] + 0.5 * (a[..., 1] + b[..., 1])
    return 1.0 + 0.2 * np.tanh(s)


class ExitWeight(WeightSpec):
    """``m(z) E(e+, e-)``: a point factor times a symmetric function of both exits.

    The exits identify the geodesic, so the value does not depend on where
    along the geodesic the start point sits.
    """

    name = "exit"

    def __init__(self, m=_default_modulation, end_score=_default_end_score,
                 bounds=(0.64, 1.44)):
        self.m = m
        self.end_score = end_score
        self.bounds = bounds

    def on_rays(self, rays):
        e = self.end_score(rays.fwd.exit_point, rays.bwd.exit_point)[:, None]
        return tuple(self.m(b.points) * e for b in rays.halves())


class AveragedWeight(WeightSpec):
    """Average over start points ``z'`` on the segment of ``k(z', z)``.

    ``k(z', z) = 1 + amp exp(-|z' - z|^2 / (2 sigma^2))`` depends on the start
    point; the arc-length average over the full segment does not.
    """

    name = "averaged"

    def __init__(self, amp=0.5, sigma=0.2):
        self.amp = float(amp)
        self.sigma = float(sigma)
        self.bounds = (1.0, 1.0 + self.amp)

    def kernel(self, zp, z):
        d = zp - z
        return 1.0 + self.amp * np.exp(-np.einsum("...i,...i->...", d, d) / (2 * self.sigma ** 2))

    def on_rays(self, rays):
        pts = np.concatenate([rays.bwd.points, rays.fwd.points], axis=1)
        wts = np.concatenate([rays.bwd.weights, rays.fwd.weights], axis=1)
        length = wts.sum(axis=1)
        out = []
        for b in rays.halves():
            k = self.kernel(pts[:, None, :, :], b.points[:, :, None, :])
            out.append(np.einsum("nkj,nj->nk", k, wts) / length[:, None])
        return tuple(out)


WEIGHT_PRESETS = {"constant": ConstantWeight, "exit": ExitWeight, "averaged": AveragedWeight}


def make_weight(name, **params):
    try:
        return WEIGHT_PRESETS[name](**params)
    except KeyError:
        raise KeyError(f"unknown weight preset {name!r}; choose from {sorted(WEIGHT_PRESETS)}") from None


def connecting_direction(metric, fol, z, zp, h=1e-3):
    """Unit chart direction at ``z`` of the geodesic reaching ``zp``.

    Solved by shooting: the launch angle and arrival time are adjusted until
    the geodesic from ``z`` lands on ``zp``.
    """
    z = np.asarray(z, dtype=float)
    zp = np.asarray(zp, dtype=float)
    d = zp - z
    theta0 = np.arctan2(d[1], d[0])
    g = metric.metric(z)
    s0 = float(np.sqrt(d @ g @ d))

    def endpoint(params):
        theta, s = params
        v = np.array([np.cos(theta), np.sin(theta)])
        v = v / np.sqrt(v @ g @ v)
        n = max(int(np.ceil(abs(s) / h)), 1)
        zz, vv = z.copy(), v.copy()
        for _ in range(n):
            zz, vv = _rk4_step(metric, zz, vv, s / n)
        return zz - zp

    sol = least_squares(endpoint, [theta0, s0], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if np.max(np.abs(sol.fun)) > 1e-8:
        raise DomainError(f"no connecting geodesic found from {z} to {zp}")
    theta = sol.x[0]
    return np.array([np.cos(theta), np.sin(theta)])


def eval_weight(w, metric, fol, z1, z, direction=None, h=1e-3, coincide_tol=1e-9):
    """``rho(z1, z)`` for a start point ``z1`` and an integration point ``z``.

    For coincident points the diagonal value ``rho_ff(z, direction)`` is
    returned; the direction is then mandatory.
    """
    z1 = np.asarray(z1, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.hypot(*(z1 - z)) < coincide_tol:
        if direction is None:
            raise ValueError("coincident points need an explicit direction")
        d = np.asarray(direction, dtype=float)
    else:
        d = connecting_direction(metric, fol, z, z1, h=h)
    rays = trace_rays(metric, fol, z, d, h)
    return float(w.on_rays(rays)[0][0, 0])


# --------------------------------------------------------------------------
# adapted profiles
# --------------------------------------------------------------------------


class ProfileExtensionWarning(UserWarning):
    """Lifted points fall outside the sampled range of the profile."""


@dataclass
class AdaptedProfile:
    """Profile ``u(s)`` on ``s in [-c, 0]``; the lifted field is ``u(xt(z))``.

    Interpolation is local cubic Hermite with finite-difference slopes, which
    is C1 and linear in the node values, and each node only influences the
    two neighbouring cells on either side.
    """

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.size < 3:
            raise ValueError("profile needs at least 3 nodes")
        if self.values.shape != self.nodes.shape:
            raise ValueError("profile nodes and values differ in length")
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("profile nodes must be strictly increasing")

    @classmethod
    def sample(cls, u, c, n=64):
        s = np.linspace(-c, 0.0, n)
        return cls(s, np.asarray(u(s), dtype=float) * np.ones_like(s))

    @classmethod
    def zeros(cls, c, n=64):
        return cls(np.linspace(-c, 0.0, n), np.zeros(n))

    @property
    def c(self):
        return -float(self.nodes[0])

    def _spline(self, values):
        slopes = np.gradient(values, self.nodes, axis=0, edge_order=2)
        return CubicHermiteSpline(self.nodes, values, slopes, axis=0, extrapolate=False)

    def __call__(self, s):
        s = np.clip(np.asarray(s, dtype=float), self.nodes[0], self.nodes[-1])
        return self._spline(self.values)(s)

    def basis(self, s):
        """Matrix ``B`` with ``u(s) = B @ values`` (shape ``s.shape + (n,)``)."""
        s = np.clip(np.asarray(s, dtype=float), self.nodes[0], self.nodes[-1])
        return self._spline(np.eye(self.nodes.size))(s)

    def with_values(self, values):
        return AdaptedProfile(self.nodes.copy(), np.asarray(values, dtype=float))

    def integral(self):
        """Exact integral of the interpolant over the node range."""
        return float(self._spline(self.values).integrate(self.nodes[0], self.nodes[-1]))


@dataclass
class LiftedField:
    """The adapted field ``z -> u(xt(z))`` as a callable."""

    profile: AdaptedProfile
    fol: object
    tol: float = 1e-9
    warn: bool = True

    def __call__(self, z):
        s = self.fol.xt(z)
        lo, hi = self.profile.nodes[0], self.profile.nodes[-1]
        if self.warn and np.any((s < lo - self.tol) | (s > hi + self.tol)):
            warnings.warn("adapted field evaluated beyond the profile range; "
                          "using the nearest endpoint value", ProfileExtensionWarning, stacklevel=2)
        return self.profile(s)


def lift_adapted(profile, fol, z=None, tol=1e-9, warn=True):
    """Lift ``profile`` to the chart: returns values at ``z`` or a callable field."""
    field_ = LiftedField(profile, fol, tol, warn)
    if z is None:
        return field_
    return field_(np.asarray(z, dtype=float))


# --------------------------------------------------------------------------
# the transform
# --------------------------------------------------------------------------


@dataclass
class RayValue:
    value: float
    capped: bool


def integrate_rays(rays, w, f, symmetric=True):
    """Weighted integrals of ``f`` along traced segments (one value per ray)."""
    rho = w.on_rays(rays)
    total = rays.fwd.integrate(rho[0] * f(rays.fwd.points))
    if symmetric:
        total = total + rays.bwd.integrate(rho[1] * f(rays.bwd.points))
    return total


def xray(metric, fol, w, f, z0, v0, h=1e-3, symmetric=True, param="arclength"):
    """Weighted integral of ``f`` along the geodesic through ``(z0, v0)``.

    With ``symmetric=True`` both halves of the segment through ``z0`` are
    integrated; otherwise only the forward half.  ``param`` selects the
    integration variable (metric arc length or the affine parameter of
    ``v0``); ``h`` is the step in that variable.
    """
    rays = trace_rays(metric, fol, z0, v0, h, param=param)
    val = integrate_rays(rays, w, f, symmetric)
    return RayValue(float(val[0]), bool(rays.capped[0]))


@dataclass
class Sinogram:
    """Transform values over ``(x, y, lam_hat, omega)`` with ``lam = x * lam_hat``.

    ``mask`` marks base points inside Omega_c; values elsewhere are zero.
    """

    x: np.ndarray
    y: np.ndarray
    lam_hat: np.ndarray
    omega: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    capped: np.ndarray
    h: float
    weight: str
    param: str = "arclength"
    symmetric: bool = True

    @property
    def shape(self):
        return self.values.shape

    def axes(self):
        return {"x": self.x, "y": self.y, "lam_hat": self.lam_hat, "omega": self.omega}


@dataclass
class RayGrid:
    """Initial conditions of a sinogram, flattened over the valid entries."""

    x: np.ndarray
    y: np.ndarray
    lam_hat: np.ndarray
    omega: np.ndarray
    mask: np.ndarray
    z0: np.ndarray
    v0: np.ndarray
    index: tuple = field(repr=False, default=())

    @property
    def shape(self):
        return (self.x.size, self.y.size, self.lam_hat.size, self.omega.size)


def ray_grid(metric, fol, x, y, lam_hat, omega=(1.0, -1.0)):
    """Launch data for every ``(x, y, lam_hat, omega)`` with base point in Omega_c."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    lam_hat = np.atleast_1d(np.asarray(lam_hat, dtype=float))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if min(x.size, y.size, lam_hat.size, omega.size) == 0:
        raise ValueError("empty sinogram grid")
    if np.any(x <= 0):
        raise DomainError("sinogram base points need x > 0")
    X, Y, L, W = np.meshgrid(x, y, lam_hat, omega, indexing="ij")
    zb = fol.to_chart(X[..., 0, 0], Y[..., 0, 0])
    inside = metric.contains(zb) & (fol.rho(zb) >= 0) & (fol.x(zb) > 0)
    mask = np.broadcast_to(inside[:, :, None, None], X.shape).copy()
    idx = np.nonzero(mask)
    z0 = zb[idx[0], idx[1]]
    v0 = fol.tangent_vector(z0, X[idx] * L[idx], W[idx])
    return RayGrid(x, y, lam_hat, omega, mask, z0, v0, idx)


def sinogram(metric, fol, w, f, x, y, lam_hat, omega=(1.0, -1.0), h=1e-3,
             symmetric=True, param="arclength", rays=None):
    """Batched :func:`xray` over a grid of initial conditions.

    ``rays`` may be a previously traced ``(RayGrid, TracedRays)`` pair to
    reuse geodesics across many fields.
    """
    if rays is None:
        rays = trace_grid(metric, fol, x, y, lam_hat, omega, h, param)
    grid, traced = rays
    vals = np.zeros(grid.shape)
    capped = np.zeros(grid.shape, dtype=bool)
    if traced is not None:
        vals[grid.index] = integrate_rays(traced, w, f, symmetric)
        capped[grid.index] = traced.capped
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite sinogram values")
    return Sinogram(grid.x, grid.y, grid.lam_hat, grid.omega, vals, grid.mask, capped,
                    float(h), w.name, param, symmetric)


def trace_grid(metric, fol, x, y, lam_hat, omega=(1.0, -1.0), h=1e-3, param="arclength"):
    grid = ray_grid(metric, fol, x, y, lam_hat, omega)
    if grid.z0.shape[0] == 0:
        return grid, None
    return grid, trace_rays(metric, fol, grid.z0, grid.v0, h, param=param)
