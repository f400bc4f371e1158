"""The cutoff backprojection ``L``, the conjugated normal operator ``A_F`` and its kernel.

Geodesics here are ``gamma_{x,y,lam,omega}``: launched at the point with
foliation coordinates ``(x, y)`` with initial vector ``lam d/dx + omega d/dy``
and parametrized affinely by that vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import erfcinv

from .geometry import DomainError, _rk4_step, alpha_coefficient
from .transform import ConstantWeight, WeightSpec, eval_weight, trace_rays


class DroppedRayWarning(UserWarning):
    """Rays hit the time cap and were left out of an integral."""


# --------------------------------------------------------------------------
# cutoffs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CutoffChi:
    """Even cutoff with ``chi(0) = 1``.

    ``kind="bump"`` is ``exp(1 - 1/(1 - (s/C)^2))`` on ``|s| < C``.
    ``kind="gaussian"`` is ``exp(-s^2 / (2 nu))`` truncated at the radius where
    the discarded tail mass falls to ``tail`` times the total mass.
    ``kind="zero"`` is identically zero (a control case).
    """

    kind: str = "bump"
    C: float = 1.0
    nu: float = 1.0
    tail: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("bump", "gaussian", "zero"):
            raise ValueError(f"unknown cutoff kind {self.kind!r}")
        if self.C <= 0 or self.nu <= 0 or not (0 < self.tail < 1):
            raise ValueError("cutoff parameters must be positive")

    @classmethod
    def gaussian(cls, F, alpha, tail=1e-16):
        """The Gaussian ``exp(-F s^2 / (2 alpha))``, i.e. ``nu = alpha / F``.

        Inside ``A_F`` the cutoff meets the growth ``e^{F |lam_hat| t_hat}``, so
        the truncation error of the symbol scales like the square root of the
        edge value; the default tail keeps it below ``1e-7``.
        """
        if alpha <= 0:
            raise DomainError(f"alpha must be positive for the Gaussian cutoff, got {alpha}")
        return cls("gaussian", nu=alpha / F, tail=tail)

    @property
    def radius(self):
        if self.kind == "gaussian":
            return float(np.sqrt(2 * self.nu) * erfcinv(self.tail))
        return self.C

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(s)
        if self.kind == "gaussian":
            return np.where(np.abs(s) <= self.radius, np.exp(-s * s / (2 * self.nu)), 0.0)
        r = s / self.C
        inside = np.abs(r) < 1
        with np.errstate(divide="ignore", over="ignore"):
            val = np.exp(1.0 - 1.0 / (1.0 - np.where(inside, r * r, 0.0)))
        return np.where(inside, val, 0.0)

    def integral(self):
        """``int chi(s) ds`` over its support."""
        if self.kind == "zero":
            return 0.0
        r = self.radius
        return quad(lambda s: float(self(s)), -r, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0]

    def lower_bound(self, delta=0.1):
        """``min chi`` on ``[-(1 - delta) R, (1 - delta) R]``."""
        return float(self((1.0 - delta) * self.radius))

    def nodes(self, step):
        """Symmetric trapezoid nodes covering the support with spacing ``<= step``."""
        r = self.radius
        n = max(int(np.ceil(r / step)), 1)
        return np.linspace(-r, r, 2 * n + 1)


@dataclass
class NormalOpConfig:
    """Parameters shared by ``L`` and ``A_F``.

    ``lam_step`` is the trapezoid step in ``lam / x`` and ``h`` the step of the
    affine geodesic parameter.
    """

    F: float = 1.0
    lam_step: float = 0.025
    h: float = 1e-3
    chi: CutoffChi = field(default_factory=CutoffChi)

    def __post_init__(self):
        if self.F < 0:
            raise ValueError("F must be non-negative")
        if self.lam_step <= 0 or self.h <= 0:
            raise ValueError("quadrature steps must be positive")


def _trapezoid_weights(nodes):
    d = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def damping(F, x, xp):
    """``exp(-F X / (1 + x X))`` with ``X = (x' - x) / x^2``; zero where ``x' <= 0``."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    X = (xp - x) / (x * x)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.exp(-F * X / (1.0 + x * X))
    return np.where(xp > 0, val, 0.0)


def _base_points(fol, z):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = fol.x(z)
    if np.any(x <= 0):
        raise DomainError("evaluation points need x > 0")
    return z, x


# --------------------------------------------------------------------------
# L and A_F
# --------------------------------------------------------------------------


def backproject_L(v, z, cfg, fol):
    """``x^-2 sum_omega int chi(lam/x) v(z, lam, omega) dlam`` at chart points ``z``.

    ``v(z0, lam, omega)`` is evaluated on flat arrays of launch data.
    """
    z, x = _base_points(fol, z)
    s = cfg.chi.nodes(cfg.lam_step)
    ws = _trapezoid_weights(s) * cfg.chi(s)
    out = np.zeros(z.shape[0])
    for om in (1.0, -1.0):
        zz = np.repeat(z, s.size, axis=0)
        lam = (x[:, None] * s[None, :]).ravel()
        vals = np.asarray(v(zz, lam, np.full(lam.size, om)), dtype=float).reshape(z.shape[0], s.size)
        out += vals @ ws
    # dlam = x dlam_hat
    return out / x


@dataclass
class AFResult:
    values: np.ndarray
    dropped: int


def _launch(fol, z, x, s, omega):
    zz = np.repeat(z, s.size, axis=0)
    lam = (x[:, None] * s[None, :]).ravel()
    return zz, fol.tangent_vector(zz, lam, np.full(lam.size, omega))


def apply_AF(f, cfg, metric, fol, w=None, z=None):
    """``A_F f`` at chart points ``z`` from the defining double integral.

    For each ``omega = +1, -1`` the forward half-geodesics ``t >= 0`` are
    integrated with the damping ``exp(-F/x + F/x(gamma(t)))``; the outer
    integral runs over ``lam = x lam_hat`` against ``chi(lam_hat)``.
    """
    w = ConstantWeight() if w is None else w
    z, x = _base_points(fol, z)
    s = cfg.chi.nodes(cfg.lam_step)
    ws = _trapezoid_weights(s) * cfg.chi(s)
    total = np.zeros(z.shape[0])
    dropped = 0
    for om in (1.0, -1.0):
        zz, vv = _launch(fol, z, x, s, om)
        rays = trace_rays(metric, fol, zz, vv, cfg.h, param="affine")
        rho = w.on_rays(rays)[0]
        pts = rays.fwd.points
        xb = np.repeat(x, s.size)[:, None]
        integrand = rho * f(pts) * damping(cfg.F, xb, fol.x(pts))
        vals = rays.fwd.integrate(integrand)
        bad = rays.fwd.capped
        dropped += int(bad.sum())
        vals = np.where(bad, 0.0, vals)
        total += vals.reshape(z.shape[0], s.size) @ ws
    if dropped:
        warnings.warn(f"{dropped} rays hit the time cap and were dropped", DroppedRayWarning, stacklevel=2)
    return AFResult(total / x, dropped)


def apply_A(g, cfg, metric, fol, w=None, z=None):
    """The averaged operator ``A g = int I(g)(x, y, lam, +1) x^-1 chi(lam/x) dlam``.

    ``I`` integrates over the full segment through the base point, which is
    the sum of the two half-geodesics ``(lam, +1)`` and ``(-lam, -1)``.
    """
    w = ConstantWeight() if w is None else w
    z, x = _base_points(fol, z)
    s = cfg.chi.nodes(cfg.lam_step)
    ws = _trapezoid_weights(s) * cfg.chi(s)
    zz, vv = _launch(fol, z, x, s, 1.0)
    rays = trace_rays(metric, fol, zz, vv, cfg.h, param="affine")
    rho = w.on_rays(rays)
    vals = rays.fwd.integrate(rho[0] * g(rays.fwd.points)) + rays.bwd.integrate(rho[1] * g(rays.bwd.points))
    bad = rays.capped
    vals = np.where(bad, 0.0, vals)
    # x^-1 chi(lam/x) dlam = chi(lam_hat) dlam_hat
    return AFResult(vals.reshape(z.shape[0], s.size) @ ws, int(bad.sum()))


def apply_AF_composed(f, cfg, metric, fol, w=None, z=None):
    """``A_F = x^-1 e^{-F/x} A e^{F/x}`` evaluated through :func:`apply_A`."""
    z, x = _base_points(fol, z)

    def g(p):
        xp = fol.x(p)
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(xp > 0, np.exp(cfg.F / np.where(xp > 0, xp, 1.0)), 0.0) * f(p)

    res = apply_A(g, cfg, metric, fol, w, z)
    return AFResult(res.values * np.exp(-cfg.F / x) / x, res.dropped)


# --------------------------------------------------------------------------
# kernel in scattering coordinates
# --------------------------------------------------------------------------


def _endpoint(metric, fol, z, v, t, h):
    n = max(int(np.ceil(abs(t) / h)), 4)
    zz, vv = z, v
    for _ in range(n):
        zz, vv = _rk4_step(metric, zz, vv, t / n)
    return zz


def scattering_coords(metric, fol, x, y, t_hat, lam_hat, omega, h=1e-3):
    """``(X, Y)`` of ``gamma_{x,y,x lam_hat,omega}(x t_hat)`` relative to ``(x, y)``."""
    z = fol.to_chart(x, y)
    v = fol.tangent_vector(z, x * lam_hat, omega)
    zp = _endpoint(metric, fol, z, v, x * t_hat, h)
    xp, yp = fol.x(zp), fol.y(zp)
    return np.array([(xp - x) / x ** 2, (yp - y) / x]), zp


def _jacobian(metric, fol, x, y, t_hat, lam_hat, omega, h, step=1e-4):
    cols = []
    for dt, dl in ((step, 0.0), (0.0, step)):
        a, _ = scattering_coords(metric, fol, x, y, t_hat + dt, lam_hat + dl, omega, h)
        b, _ = scattering_coords(metric, fol, x, y, t_hat - dt, lam_hat - dl, omega, h)
        cols.append((a - b) / (2 * step))
    return np.stack(cols, axis=-1)


def density_factor(metric, fol, x, y, t_hat, lam_hat, omega=1.0, h=1e-3, step=1e-4):
    """``J`` in ``dt dlam = J x^2 |Y|^-1 dX dY`` from a finite-difference Jacobian."""
    (X, Y), _ = scattering_coords(metric, fol, x, y, t_hat, lam_hat, omega, h)
    jac = _jacobian(metric, fol, x, y, t_hat, lam_hat, omega, h, step)
    det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    return abs(Y) / abs(det)


def density_factor_boundary(metric, fol, y, t_hat, lam_hat, omega=1.0, x=2e-3, h=1e-4):
    """``J`` at ``x = 0`` by Richardson extrapolation of ``J(x)`` and ``J(2x)``."""
    j1 = density_factor(metric, fol, x, y, t_hat, lam_hat, omega, h)
    j2 = density_factor(metric, fol, 2 * x, y, t_hat, lam_hat, omega, h)
    return 2 * j1 - j2


def boundary_alpha(metric, fol, y):
    """``alpha(0, y, 0, +-1)``: half the acceleration of ``x`` along ``d/dy`` at ``x = 0``."""
    z = fol.to_chart(np.zeros_like(np.asarray(y, dtype=float)), y)
    return alpha_coefficient(metric, fol, z)


def boundary_kernel(X, Y, F, alpha, chi, rho_ff=1.0):
    """The ``x = 0`` kernel ``rho_ff e^{-F X} |Y|^-1 chi_even((X - alpha Y^2) / Y)``.

    ``chi_even`` averages the forward and backward halves of the geodesic.
    Vectorized over ``X`` and ``Y`` (``Y != 0``).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    u = (X - alpha * Y * Y) / Y
    chi_even = 0.5 * (chi(u) + chi(-u))
    with np.errstate(over="ignore"):
        return np.where(chi_even > 0, rho_ff * np.exp(-F * X) / np.abs(Y) * chi_even, 0.0)


@dataclass
class KernelValue:
    value: float
    reachable: bool
    lam_hat: float = np.nan
    J: float = np.nan


def kernel_flat(x, y, X, Y, cfg, metric, fol, w=None, alpha=None, tol=1e-11, max_iter=30):
    """Kernel of ``A_F`` in the coordinates ``(x, y, X, Y)``.

    At ``x = 0`` the boundary form ``e^{-F X} |Y|^-1 chi_even rho_ff`` is used
    (``alpha`` may be passed to skip its evaluation).  For ``x > 0`` the
    geodesic reaching ``(x + x^2 X, y + x Y)`` is found by Newton iteration in
    ``(t_hat, lam_hat)`` started from the boundary solution.
    """
    w = ConstantWeight() if w is None else w
    if Y == 0:
        raise ValueError("the kernel needs Y != 0")
    chi = cfg.chi
    if x == 0:
        a = float(boundary_alpha(metric, fol, np.array([y]))[0]) if alpha is None else alpha
        z = fol.to_chart(np.array(0.0), np.array(y))
        rho_ff = _diag_weight(w, metric, fol, z, cfg.h)
        val = boundary_kernel(X, Y, cfg.F, a, chi, rho_ff)
        return KernelValue(float(val), True, float((X - a * Y * Y) / Y), 1.0)
    if x < 0:
        raise DomainError("kernel base point needs x >= 0")
    omega = float(np.sign(Y))
    a = float(boundary_alpha(metric, fol, np.array([y]))[0]) if alpha is None else alpha
    p = np.array([abs(Y), (X - a * Y * Y) / abs(Y)])
    target = np.array([X, Y])
    h = min(cfg.h, x * 1e-2)
    ok = False
    for _ in range(max_iter):
        cur, zp = scattering_coords(metric, fol, x, y, p[0], p[1], omega, h)
        r = cur - target
        if np.max(np.abs(r)) < tol * max(1.0, np.max(np.abs(target))):
            ok = True
            break
        jac = _jacobian(metric, fol, x, y, p[0], p[1], omega, h)
        p = p - np.linalg.solve(jac, r)
    if not ok or p[0] <= 0:
        return KernelValue(0.0, False)
    if abs(p[1]) > chi.radius:
        return KernelValue(0.0, True, float(p[1]))
    if not fol.inside(zp, metric):
        return KernelValue(0.0, False, float(p[1]))
    J = density_factor(metric, fol, x, y, p[0], p[1], omega, h)
    z = fol.to_chart(np.array(x), np.array(y))
    if isinstance(w, ConstantWeight):
        rho = w.value
    else:
        rho = eval_weight(w, metric, fol, z, zp, h=cfg.h)
    val = damping(cfg.F, x, x + x * x * X) * chi(p[1]) / abs(Y) * J * rho
    return KernelValue(float(val), True, float(p[1]), float(J))


def _diag_weight(w, metric, fol, z, h):
    if isinstance(w, ConstantWeight):
        return w.value
    return eval_weight(w, metric, fol, z, z, direction=fol.tangent_vector(z, 0.0, 1.0), h=h)
