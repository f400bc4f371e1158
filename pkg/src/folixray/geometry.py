"""Chart metrics, boundary defining functions, foliations and geodesic tracing.

All point arrays carry the chart coordinates in the last axis, so ``z`` may be
a single ``(2,)`` point or any ``(..., 2)`` batch.  Tangent vectors use chart
components as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import brentq


class DomainError(ValueError):
    """A point or region lies outside where an operation is defined."""


class IntegrationError(RuntimeError):
    """Geodesic integration produced non-finite values."""


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


class ChartMetric:
    """Riemannian metric on a rectangular chart.

    Subclasses implement :meth:`_evaluate`, returning the metric matrix
    ``g[..., i, j]`` and its first derivatives ``dg[..., i, j, k] = d_k g_ij``.
    """

    family = "custom"

    def __init__(self, bounds):
        x0, x1, y0, y1 = map(float, bounds)
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate chart bounds {bounds}")
        self.bounds = (x0, x1, y0, y1)

    @property
    def diameter(self):
        x0, x1, y0, y1 = self.bounds
        return float(np.hypot(x1 - x0, y1 - y0))

    def contains(self, z, tol=0.0):
        z = np.asarray(z, dtype=float)
        x0, x1, y0, y1 = self.bounds
        return ((z[..., 0] >= x0 - tol) & (z[..., 0] <= x1 + tol)
                & (z[..., 1] >= y0 - tol) & (z[..., 1] <= y1 + tol))

    def chart_margin(self, z):
        """Signed distance-like margin to the chart rectangle (>= 0 inside)."""
        z = np.asarray(z, dtype=float)
        x0, x1, y0, y1 = self.bounds
        return np.minimum.reduce([z[..., 0] - x0, x1 - z[..., 0],
                                  z[..., 1] - y0, y1 - z[..., 1]])

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        if not np.all(self.contains(z, tol=1e-12)):
            raise DomainError(f"point(s) outside chart {self.bounds}")
        return z

    def _evaluate(self, z):
        raise NotImplementedError

    def metric(self, z):
        """Metric matrix ``g[..., 2, 2]`` at chart points."""
        return self._evaluate(self._check(z))[0]

    def components(self, z):
        """Return ``(g11, g12, g22)`` at ``z``."""
        g = self.metric(z)
        return g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]

    def derivatives(self, z):
        """First partials ``dg[..., i, j, k] = d g_ij / d z_k``."""
        return self._evaluate(self._check(z))[1]

    def norm2(self, z, v):
        """Squared metric length ``g(v, v)``."""
        g = self._evaluate(np.asarray(z, dtype=float))[0]
        v = np.asarray(v, dtype=float)
        return np.einsum("...i,...ij,...j->...", v, g, v)

    def eigen_bounds(self, n=33):
        """Smallest and largest metric eigenvalue over an ``n x n`` chart sample."""
        x0, x1, y0, y1 = self.bounds
        zz = np.stack(np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n),
                                  indexing="ij"), axis=-1)
        ev = np.linalg.eigvalsh(self._evaluate(zz)[0])
        return float(ev.min()), float(ev.max())


class EuclideanMetric(ChartMetric):
    family = "euclidean"

    def _evaluate(self, z):
        shape = z.shape[:-1]
        g = np.broadcast_to(np.eye(2), shape + (2, 2)).copy()
        return g, np.zeros(shape + (2, 2, 2))


class ConformalMetric(ChartMetric):
    """``g = exp(2 kappa z_axis) * identity``."""

    family = "conformal"

    def __init__(self, bounds, kappa=0.5, axis=0):
        super().__init__(bounds)
        self.kappa = float(kappa)
        self.axis = int(axis)

    def _evaluate(self, z):
        s = np.exp(2.0 * self.kappa * z[..., self.axis])
        g = s[..., None, None] * np.eye(2)
        dg = np.zeros(z.shape[:-1] + (2, 2, 2))
        dg[..., self.axis] = (2.0 * self.kappa * s)[..., None, None] * np.eye(2)
        return g, dg


class GridMetric(ChartMetric):
    """Metric sampled on a tensor grid, interpolated by bicubic splines.

    ``values`` has shape ``(nx, ny, 3)`` holding ``g11, g12, g22``.
    """

    family = "custom-grid"

    def __init__(self, xs, ys, values, order=3):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.shape != (xs.size, ys.size, 3):
            raise ValueError(f"grid metric values must have shape {(xs.size, ys.size, 3)}")
        super().__init__((xs[0], xs[-1], ys[0], ys[-1]))
        self.xs, self.ys, self.values = xs, ys, values
        self._splines = [RectBivariateSpline(xs, ys, values[..., c], kx=order, ky=order)
                         for c in range(3)]

    @classmethod
    def sample(cls, metric, xs, ys, order=3):
        """Tabulate another metric on a grid (used to build test zoos)."""
        zz = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        g = metric.metric(zz)
        vals = np.stack([g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]], axis=-1)
        return cls(xs, ys, vals, order=order)

    def _evaluate(self, z):
        shape = z.shape[:-1]
        a = z[..., 0].ravel()
        b = z[..., 1].ravel()
        comp = np.empty((3, 3, a.size))
        for c, sp in enumerate(self._splines):
            comp[c, 0] = sp.ev(a, b)
            comp[c, 1] = sp.ev(a, b, dx=1)
            comp[c, 2] = sp.ev(a, b, dy=1)
        idx = {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2}
        g = np.empty(shape + (2, 2))
        dg = np.empty(shape + (2, 2, 2))
        for (i, j), c in idx.items():
            g[..., i, j] = comp[c, 0].reshape(shape)
            dg[..., i, j, 0] = comp[c, 1].reshape(shape)
            dg[..., i, j, 1] = comp[c, 2].reshape(shape)
        return g, dg


def _christoffel_from(g, dg):
    g11, g12, g22 = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
    det = g11 * g22 - g12 * g12
    ginv = np.stack([np.stack([g22, -g12], -1), np.stack([-g12, g11], -1)], -2) / det[..., None, None]
    # lower[..., l, i, j] = d_i g_lj + d_j g_li - d_l g_ij
    lower = np.swapaxes(dg, -1, -2) + dg - np.moveaxis(dg, -1, -3)
    return 0.5 * (ginv[..., :, :, None, None] * lower[..., None, :, :, :]).sum(axis=-3)


def christoffel(metric, z):
    """Christoffel symbols ``Gamma[..., k, i, j]`` of the second kind at ``z``."""
    z = metric._check(z)
    g, dg = metric._evaluate(z)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(dg))):
        raise IntegrationError("non-finite metric values")
    return _christoffel_from(g, dg)


def geodesic_acceleration(metric, z, v):
    g, dg = metric._evaluate(z)
    # Christoffel symbols of the first kind contracted with v, then raised
    v1, v2 = v[..., 0], v[..., 1]
    d11, d12, d22 = dg[..., 0, 0, :], dg[..., 0, 1, :], dg[..., 1, 1, :]
    q1 = 0.5 * d11[..., 0] * v1 * v1 + d11[..., 1] * v1 * v2 + (d12[..., 1] - 0.5 * d22[..., 0]) * v2 * v2
    q2 = (d12[..., 0] - 0.5 * d11[..., 1]) * v1 * v1 + d22[..., 0] * v1 * v2 + 0.5 * d22[..., 1] * v2 * v2
    g11, g12, g22 = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
    det = g11 * g22 - g12 * g12
    return -np.stack([g22 * q1 - g12 * q2, g11 * q2 - g12 * q1], axis=-1) / det[..., None]


# --------------------------------------------------------------------------
# boundary defining functions and foliations
# --------------------------------------------------------------------------


class HalfPlaneBDF:
    """``rho(z) = offset - n . z`` with unit normal ``n`` at angle ``phi``.

    The transverse coordinate is the position along the boundary line.
    """

    kind = "halfplane"

    def __init__(self, phi=0.0, offset=0.0):
        self.phi = float(phi)
        self.offset = float(offset)
        self.n = np.array([np.cos(phi), np.sin(phi)])
        self.tangent = np.array([-np.sin(phi), np.cos(phi)])

    def __call__(self, z):
        return self.offset - np.asarray(z, dtype=float) @ self.n

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(-self.n, z.shape).copy()

    def hess(self, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1] + (2, 2))

    def chart_point(self, xt, y):
        """Chart point with ``-rho = xt`` and transverse coordinate ``y``."""
        xt = np.asarray(xt, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        return (xt + self.offset) * self.n + y * self.tangent

    def transverse(self, z):
        return np.asarray(z, dtype=float) @ self.tangent

    def transverse_grad(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.tangent, z.shape).copy()


class DiskBDF:
    """``rho(z) = R - |z - center|``; transverse coordinate ``R * angle``."""

    kind = "disk"

    def __init__(self, center=(0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def __call__(self, z):
        d = np.asarray(z, dtype=float) - self.center
        return self.radius - np.hypot(d[..., 0], d[..., 1])

    def grad(self, z):
        d = np.asarray(z, dtype=float) - self.center
        r = np.hypot(d[..., 0], d[..., 1])[..., None]
        return -d / r

    def hess(self, z):
        d = np.asarray(z, dtype=float) - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        u = d / r[..., None]
        proj = np.eye(2) - u[..., :, None] * u[..., None, :]
        return -proj / r[..., None, None]

    def chart_point(self, xt, y):
        r = self.radius + np.asarray(xt, dtype=float)
        th = np.asarray(y, dtype=float) / self.radius
        return self.center + np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)

    def transverse(self, z):
        d = np.asarray(z, dtype=float) - self.center
        return self.radius * np.arctan2(d[..., 1], d[..., 0])

    def transverse_grad(self, z):
        d = np.asarray(z, dtype=float) - self.center
        r2 = d[..., 0] ** 2 + d[..., 1] ** 2
        return self.radius * np.stack([-d[..., 1], d[..., 0]], axis=-1) / r2[..., None]


@dataclass(frozen=True)
class FoliationSpec:
    """Artificial boundary defining function ``xt = -rho - eps |z - p|^2``.

    ``x = xt + c`` vanishes on the artificial boundary; leaves are the level
    sets ``Sigma_t = {xt = -t}``.
    """

    rho: object
    p: tuple
    eps: float = 0.1
    c: float = 0.3

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.c <= 0:
            raise ValueError("depth c must be positive")
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))

    def with_depth(self, c):
        return FoliationSpec(self.rho, self.p, self.eps, c)

    def xt(self, z):
        z = np.asarray(z, dtype=float)
        d = z - np.asarray(self.p)
        return -self.rho(z) - self.eps * np.einsum("...i,...i->...", d, d)

    def xt_grad(self, z):
        z = np.asarray(z, dtype=float)
        return -self.rho.grad(z) - 2.0 * self.eps * (z - np.asarray(self.p))

    def xt_hess(self, z):
        return -self.rho.hess(z) - 2.0 * self.eps * np.eye(2)

    def x(self, z):
        return self.xt(z) + self.c

    def y(self, z):
        return self.rho.transverse(z)

    def adapted(self, z):
        """Foliation coordinates ``(x, y)`` of chart points."""
        return np.stack([self.x(z), self.y(z)], axis=-1)

    def to_chart(self, x, y, iters=30):
        """Invert :meth:`adapted` by Newton iteration from the ``eps = 0`` guess."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        target = np.stack([x, y], axis=-1)
        z = self.rho.chart_point(x - self.c, y)
        for _ in range(iters):
            r = self.adapted(z) - target
            if np.max(np.abs(r)) < 1e-14:
                break
            jac = np.stack([self.xt_grad(z), self.rho.transverse_grad(z)], axis=-2)
            z = z - np.linalg.solve(jac, r[..., None])[..., 0]
        return z

    def frame(self, z):
        """Chart components of the coordinate vectors ``d/dx`` and ``d/dy``.

        Returns ``(N, T)`` with ``dx(N) = 1, dy(N) = 0`` and ``dx(T) = 0, dy(T) = 1``.
        """
        jac = np.stack([self.xt_grad(z), self.rho.transverse_grad(z)], axis=-2)
        inv = np.linalg.inv(jac)
        return inv[..., :, 0], inv[..., :, 1]

    def tangent_vector(self, z, lam, omega):
        """Chart components of ``lam d/dx + omega d/dy`` at ``z``."""
        n, t = self.frame(z)
        lam = np.asarray(lam, dtype=float)[..., None]
        omega = np.asarray(omega, dtype=float)[..., None]
        return lam * n + omega * t

    def boundary_value(self, z, metric=None):
        """``min(rho, x[, chart margin])``; non-negative exactly on the traced region."""
        b = np.minimum(self.rho(z), self.x(z))
        if metric is not None:
            b = np.minimum(b, metric.chart_margin(z))
        return b

    def inside(self, z, metric=None, tol=0.0):
        return self.boundary_value(z, metric) >= -tol

    def bounding_box(self, metric, n=201):
        """Axis-aligned box of sampled points of Omega_c within the chart."""
        x0, x1, y0, y1 = metric.bounds
        zz = np.stack(np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n),
                                  indexing="ij"), axis=-1)
        mask = (self.rho(zz) >= 0) & (self.x(zz) >= 0)
        if not mask.any():
            raise DomainError("Omega_c has no sampled points in the chart")
        pts = zz[mask]
        return (pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max())

    def is_bounded_in(self, metric, n=201):
        """True when Omega_c does not touch the chart boundary (sampled check)."""
        x0, x1, y0, y1 = metric.bounds
        hx = (x1 - x0) / (n - 1)
        hy = (y1 - y0) / (n - 1)
        bx0, bx1, by0, by1 = self.bounding_box(metric, n)
        return (bx0 > x0 + hx and bx1 < x1 - hx and by0 > y0 + hy and by1 < y1 - hy)


# --------------------------------------------------------------------------
# geodesic tracing
# --------------------------------------------------------------------------

EXIT_NAMES = {0: "interior", 1: "boundary", 2: "artificial", 3: "chart", 4: "time cap"}


@dataclass
class GeodesicPath:
    """A traced geodesic.  ``t`` is the affine parameter of ``v0``."""

    z0: np.ndarray
    v0: np.ndarray
    h: float
    t: np.ndarray
    z: np.ndarray
    v: np.ndarray
    exit_reason: str
    t_cap: float

    @property
    def exit_point(self):
        return self.z[-1]

    @property
    def exit_time(self):
        return float(self.t[-1])


def _rk4_step(metric, z, v, h):
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[..., None]
    a1 = geodesic_acceleration(metric, z, v)
    z2, v2 = z + 0.5 * h * v, v + 0.5 * h * a1
    a2 = geodesic_acceleration(metric, z2, v2)
    z3, v3 = z + 0.5 * h * v2, v + 0.5 * h * a2
    a3 = geodesic_acceleration(metric, z3, v3)
    z4, v4 = z + h * v3, v + h * a3
    a4 = geodesic_acceleration(metric, z4, v4)
    zn = z + h / 6.0 * (v + 2 * v2 + 2 * v3 + v4)
    vn = v + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    return zn, vn


def _exit_code(fol, metric, z):
    parts = np.stack([fol.rho(z), fol.x(z), metric.chart_margin(z)], axis=-1)
    return np.argmin(parts, axis=-1) + 1


@dataclass
class RayBundle:
    """Batch of traced geodesic halves with per-ray trapezoid weights.

    ``points[i, k]`` are nodes at times ``times[i, k]``; padded entries carry
    weight zero and repeat the start point.
    """

    z0: np.ndarray
    v0: np.ndarray
    h: float
    points: np.ndarray
    times: np.ndarray
    weights: np.ndarray
    exit_point: np.ndarray
    exit_time: np.ndarray
    exit_code: np.ndarray

    @property
    def capped(self):
        return self.exit_code == 4

    def integrate(self, values):
        """Trapezoid sums of node ``values`` (same leading shape as ``points``)."""
        return np.sum(self.weights * values, axis=-1)


def trace_bundle(metric, fol, z0, v0, h, t_cap=None, bisect_tol=1e-10):
    """Integrate many geodesics with fixed-step RK4 until they leave Omega_c.

    The last node of each ray is the exit point, located by bisection on the
    partial RK4 step to within ``bisect_tol`` in time.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    z0, v0 = np.broadcast_arrays(z0, v0)
    z0, v0 = z0.copy(), v0.copy()
    n = z0.shape[0]
    if h <= 0:
        raise ValueError("step size must be positive")
    if t_cap is None:
        _, lmax = metric.eigen_bounds()
        speed = np.sqrt(metric.norm2(z0, v0))
        t_cap = 4.0 * metric.diameter * np.sqrt(lmax) / np.maximum(speed, 1e-300)
    t_cap = np.broadcast_to(np.asarray(t_cap, dtype=float), (n,)).copy()

    zs = [z0.copy()]
    z, v = z0.copy(), v0.copy()
    active = np.ones(n, dtype=bool)
    n_nodes = np.zeros(n, dtype=int)  # index of last regular node
    exit_z = np.full((n, 2), np.nan)
    exit_t = np.full(n, np.nan)
    exit_code = np.zeros(n, dtype=int)
    last_z = np.empty((n, 2))
    last_v = np.empty((n, 2))
    k = 0
    while active.any():
        idx = np.flatnonzero(active)
        zi, vi = z[idx], v[idx]
        zn, vn = _rk4_step(metric, zi, vi, h)
        if not (np.all(np.isfinite(zn)) and np.all(np.isfinite(vn))):
            raise IntegrationError("non-finite state during geodesic integration")
        b = fol.boundary_value(zn, metric)
        left = b < 0
        tk = k * h
        over = (~left) & ((k + 1) * h >= t_cap[idx])
        if left.any():
            j = idx[left]
            last_z[j] = zi[left]
            last_v[j] = vi[left]
            exit_t[j] = tk
            n_nodes[j] = k
            active[j] = False
        if over.any():
            j = idx[over]
            exit_z[j] = zn[over]
            exit_t[j] = (k + 1) * h
            exit_code[j] = 4
            n_nodes[j] = k
            active[j] = False
        keep = ~left & ~over
        z[idx[keep]] = zn[keep]
        v[idx[keep]] = vn[keep]
        k += 1
        if keep.any():
            snap = np.full((n, 2), np.nan)
            snap[idx[keep]] = zn[keep]
            zs.append(snap)

    j = np.flatnonzero(exit_code == 0)
    if j.size:
        za, va = last_z[j], last_v[j]
        lo = np.zeros(j.size)
        hi = np.full(j.size, float(h))
        while np.max(hi - lo) > bisect_tol:
            mid = 0.5 * (lo + hi)
            zm, _ = _rk4_step(metric, za, va, mid)
            ok = fol.boundary_value(zm, metric) >= 0
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        ze, _ = _rk4_step(metric, za, va, hi)
        exit_z[j] = ze
        exit_t[j] += hi
        exit_code[j] = _exit_code(fol, metric, ze)

    kmax = len(zs)
    pts = np.stack(zs, axis=1)  # (n, kmax, 2)
    points = np.empty((n, kmax + 1, 2))
    points[:, :kmax] = pts
    times = np.tile(np.arange(kmax + 1, dtype=float) * h, (n, 1))
    rows = np.arange(n)
    points[rows, n_nodes + 1] = exit_z
    times[rows, n_nodes + 1] = exit_t
    valid = np.arange(kmax + 1)[None, :] <= (n_nodes + 1)[:, None]
    points = np.where(valid[..., None], points, z0[:, None, :])
    times = np.where(valid, times, times[rows, n_nodes + 1][:, None])
    dt = np.diff(times, axis=1)
    weights = np.zeros_like(times)
    weights[:, :-1] += 0.5 * dt
    weights[:, 1:] += 0.5 * dt
    return RayBundle(z0, v0, float(h), points, times, weights, exit_z, exit_t, exit_code)


def shoot_geodesic(metric, fol, z0, v0, h=1e-3, t_cap=None):
    """Trace one geodesic forward from ``(z0, v0)`` and keep the full state history.

    Flip the sign of ``v0`` for the backward branch.
    """
    z0 = np.asarray(z0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if not np.any(v0 != 0):
        raise ValueError("initial vector must be nonzero")
    if fol.boundary_value(z0, metric) < -1e-9:
        raise DomainError(f"start point {z0} is outside Omega_c")
    if t_cap is None:
        _, lmax = metric.eigen_bounds()
        t_cap = 4.0 * metric.diameter * np.sqrt(lmax) / np.sqrt(metric.norm2(z0, v0))
    ts, zs, vs = [0.0], [z0.copy()], [v0.copy()]
    z, v = z0.copy(), v0.copy()
    k = 0
    reason = None
    while reason is None:
        zn, vn = _rk4_step(metric, z, v, h)
        if not (np.all(np.isfinite(zn)) and np.all(np.isfinite(vn))):
            raise IntegrationError("non-finite state during geodesic integration")
        if fol.boundary_value(zn, metric) < 0:
            lo, hi = 0.0, h
            while hi - lo > 1e-10:
                mid = 0.5 * (lo + hi)
                zm, _ = _rk4_step(metric, z, v, mid)
                if fol.boundary_value(zm, metric) >= 0:
                    lo = mid
                else:
                    hi = mid
            ze, ve = _rk4_step(metric, z, v, hi)
            ts.append(k * h + hi)
            zs.append(ze)
            vs.append(ve)
            reason = EXIT_NAMES[int(_exit_code(fol, metric, ze))]
            break
        k += 1
        z, v = zn, vn
        ts.append(k * h)
        zs.append(z)
        vs.append(v)
        if k * h >= t_cap:
            reason = "time cap"
    return GeodesicPath(z0, v0, h, np.array(ts), np.array(zs), np.array(vs), reason, float(t_cap))


def second_derivative_along(metric, fol, z, v):
    """``d^2/dt^2 xt(gamma(t))`` at ``t = 0`` for the geodesic through ``(z, v)``."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    acc = geodesic_acceleration(metric, z, v)
    hess = fol.xt_hess(z)
    return (np.einsum("...i,...ij,...j->...", v, hess, v)
            + np.einsum("...i,...i->...", fol.xt_grad(z), acc))


def alpha_coefficient(metric, fol, z, lam=0.0, omega=1.0):
    """Half the initial acceleration of ``x`` along ``gamma_{x,y,lam,omega}``."""
    v = fol.tangent_vector(z, lam, omega)
    return 0.5 * second_derivative_along(metric, fol, z, v)


def leaf_points(metric, fol, t, n_samples=64, n_scan=400):
    """Sample points of ``Sigma_t`` inside Omega_c by scanning chart lines."""
    x0, x1, y0, y1 = metric.bounds
    target = lambda z: fol.xt(z) + t
    pts = []
    for axis in (0, 1):
        lines = np.linspace(*(metric.bounds[2:] if axis == 0 else metric.bounds[:2]),
                            n_samples + 2)[1:-1]
        grid = np.linspace(*(metric.bounds[:2] if axis == 0 else metric.bounds[2:]), n_scan)
        for c in lines:
            def point(s, c=c):
                return np.array([s, c]) if axis == 0 else np.array([c, s])
            vals = np.array([target(point(s)) for s in grid])
            sgn = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
            for i in sgn:
                s = brentq(lambda s: target(point(s)), grid[i], grid[i + 1], xtol=1e-14)
                q = point(s)
                if fol.rho(q) >= 0:
                    pts.append(q)
    if not pts:
        raise DomainError(f"leaf Sigma_{t} is empty within the chart")
    return np.array(pts)


@dataclass
class ConvexityReport:
    margin: float
    argmin: np.ndarray
    alpha_lower: float
    n_points: int


def convexity_margin(metric, fol, t, n_samples=64):
    """Minimum over sampled leaf points of ``d^2/ds^2 (xt o gamma)`` at ``s = 0``.

    ``gamma`` is the unit-speed geodesic tangent to ``Sigma_t``.  A positive
    margin means tangent geodesics bend towards larger ``xt`` (away from the
    deeper sublevel set), i.e. the leaf is strictly convex.
    """
    pts = leaf_points(metric, fol, t, n_samples)
    grad = fol.xt_grad(pts)
    tan = np.stack([-grad[:, 1], grad[:, 0]], axis=-1)
    tan /= np.sqrt(metric.norm2(pts, tan))[:, None]
    vals = second_derivative_along(metric, fol, pts, tan)
    i = int(np.argmin(vals))
    return ConvexityReport(float(vals[i]), pts[i], 0.5 * float(vals[i]), len(pts))


def certify_region(metric, fol, n_leaves=6, n_samples=24):
    """Check Omega_c lies in the chart and every sampled leaf is strictly convex."""
    if not fol.is_bounded_in(metric):
        raise DomainError(f"Omega_c for c={fol.c} is not contained in the chart")
    worst = np.inf
    for t in np.linspace(0.0, fol.c, n_leaves + 1)[1:]:
        rep = convexity_margin(metric, fol, t, n_samples)
        worst = min(worst, rep.margin)
    if worst <= 0:
        raise DomainError(f"foliation not strictly convex on Omega_c (margin {worst:.3g})")
    return worst
