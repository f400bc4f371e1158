"""Scattering symbols of ``A_F``: numerical evaluation, closed forms and ellipticity.

Symbols are paired with the scattering frequency ``zeta = (xi, eta)`` dual to
``X = (x' - x) / x^2`` and ``Y = (y' - y) / x``, so that

    a(z, zeta) = int e^{i (xi X + eta Y)} K(z; X, Y) dX dY

for the kernel ``K`` of ``A_F`` written in those coordinates.  In the
normalized variables ``t = x t_hat``, ``lam = x lam_hat`` the same integral
reads ``sum_omega int int chi(lam_hat) rho e^{-F(1/x - 1/x')} e^{i (xi X + eta Y)}``
over the half-geodesics ``gamma_{x, y, lam, omega}(t)``, ``t >= 0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DomainError, alpha_coefficient, trace_bundle
from .normal_op import (CutoffChi, NormalOpConfig, _diag_weight, boundary_alpha,
                        boundary_kernel, damping)
from .transform import ConstantWeight, lift_adapted, trace_rays


class AccuracyError(RuntimeError):
    """Adaptive refinement did not converge; ``best`` holds the last estimate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


class ConvexityError(DomainError):
    """The boundary coefficient ``alpha`` is not positive."""


class PreconditionError(ValueError):
    """An operation was called without the certification it relies on."""


# --------------------------------------------------------------------------
# symbol grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SymbolGrid:
    """Complex symbol samples ``a(z, zeta)`` on a product grid.

    ``x`` and ``y`` are foliation coordinates of the base points.  The
    frequency part is either ``layout="polar"`` (``radii`` x ``angles``, the
    same for every base point) or ``layout="fft"`` (discrete frequencies
    ``k1, k2`` of a uniform ``(x, y)`` grid, realized at each base point as
    ``zeta = (x^2 k1, x k2)``).  ``values`` has shape
    ``(nx, ny, n_zeta_1, n_zeta_2)``; a size-one ``y`` axis marks a symbol that
    does not depend on ``y``.
    """

    x: np.ndarray
    y: np.ndarray
    values: np.ndarray
    layout: str = "polar"
    radii: np.ndarray | None = None
    angles: np.ndarray | None = None
    k1: np.ndarray | None = None
    k2: np.ndarray | None = None
    order: tuple = (-1, 0)

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=complex))
        if self.layout == "polar":
            if self.radii is None or self.angles is None:
                raise ValueError("polar symbol grids need radii and angles")
            tail = (len(self.radii), len(self.angles))
        elif self.layout == "fft":
            if self.k1 is None or self.k2 is None:
                raise ValueError("fft symbol grids need k1 and k2")
            tail = (len(self.k1), len(self.k2))
        else:
            raise ValueError(f"unknown layout {self.layout!r}")
        ny = self.values.shape[1] if self.values.ndim == 4 else -1
        if self.values.shape != (self.x.size, ny, *tail) or ny not in (1, self.y.size):
            raise ValueError(f"values of shape {self.values.shape} do not match the axes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("symbol values must be finite")

    # construction ---------------------------------------------------------

    @classmethod
    def polar(cls, x, y, radii, angles, func, order=(-1, 0)):
        """Sample ``func(x, y, xi, eta)`` (scalar call per node) on a polar grid."""
        x, y = np.atleast_1d(x).astype(float), np.atleast_1d(y).astype(float)
        radii, angles = np.asarray(radii, dtype=float), np.asarray(angles, dtype=float)
        vals = np.empty((x.size, y.size, radii.size, angles.size), dtype=complex)
        for i, xv in enumerate(x):
            for j, yv in enumerate(y):
                for k, r in enumerate(radii):
                    for m, th in enumerate(angles):
                        vals[i, j, k, m] = func(xv, yv, r * np.cos(th), r * np.sin(th))
        return cls(x, y, vals, "polar", radii=radii, angles=angles, order=order)

    @classmethod
    def fft(cls, x, y, func, y_independent=False, order=(-1, 0)):
        """Sample a vectorized ``func(x, y, xi, eta)`` on the grid's FFT frequencies."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        k1 = 2 * np.pi * np.fft.fftfreq(x.size, _spacing(x))
        k2 = 2 * np.pi * np.fft.fftfreq(y.size, _spacing(y))
        ys = y[:1] if y_independent else y
        X = x[:, None, None, None]
        Y = ys[None, :, None, None]
        xi = X ** 2 * k1[None, None, :, None]
        eta = X * k2[None, None, None, :]
        vals = np.broadcast_to(func(X, Y, xi, eta), (x.size, ys.size, k1.size, k2.size))
        return cls(x, y, np.array(vals, dtype=complex), "fft", k1=k1, k2=k2, order=order)

    def with_values(self, values):
        return replace(self, values=values)

    # geometry of the frequency samples -----------------------------------

    def zeta(self):
        """``(xi, eta)`` broadcastable against ``values``."""
        if self.layout == "polar":
            r = self.radii[:, None]
            return r * np.cos(self.angles)[None, :], r * np.sin(self.angles)[None, :]
        X = self.x[:, None, None, None]
        return X ** 2 * self.k1[None, None, :, None], X * self.k2[None, None, None, :]

    def zeta_norm(self):
        xi, eta = self.zeta()
        return np.hypot(xi, eta)

    def conjugate_defect(self):
        """``max |a(z, -zeta) - conj(a(z, zeta))|`` over the nodes whose negative is sampled."""
        if self.layout == "fft":
            neg = self.values[..., _neg_index(self.k1), :][..., _neg_index(self.k2)]
            return float(np.max(np.abs(neg - np.conj(self.values))))
        ang = np.mod(self.angles, 2 * np.pi)
        opp = np.mod(ang + np.pi, 2 * np.pi)
        d = np.abs(np.angle(np.exp(1j * (opp[:, None] - ang[None, :]))))
        pairs = [(i, int(np.argmin(d[i]))) for i in range(ang.size) if np.min(d[i]) < 1e-12]
        if not pairs:
            raise ValueError("no antipodal angle pairs on this grid")
        return max(float(np.max(np.abs(self.values[..., j] - np.conj(self.values[..., i]))))
                   for i, j in pairs)


def _spacing(axis):
    d = np.diff(axis)
    if d.size == 0 or not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise ValueError("fft layouts need uniform axes with at least two nodes")
    return float(d[0])


def _neg_index(k):
    n = k.size
    return (-np.arange(n)) % n


@dataclass(frozen=True)
class ConeSpec:
    """The cone ``{|xi| >= C_cone |eta|}`` and a certified lower bound ``C_ell``."""

    C_cone: float = 1.0
    C_ell: float = 0.0

    def __post_init__(self):
        if self.C_cone <= 0:
            raise ValueError("C_cone must be positive")

    def contains(self, xi, eta):
        return np.abs(xi) >= self.C_cone * np.abs(eta) * (1 - 1e-12)


def cone_grid(radii, n_angles, C_cone=1.0, symmetric=True):
    """Angles filling the cone ``|xi| >= C_cone |eta|`` (both halves if ``symmetric``)."""
    half = np.arctan(1.0 / C_cone)
    th = np.linspace(-half, half, n_angles)
    if symmetric:
        th = np.concatenate([th, th + np.pi])
    return np.asarray(radii, dtype=float), th


# --------------------------------------------------------------------------
# closed forms and stationary phase
# --------------------------------------------------------------------------


def boundary_symbol_closed(y, xi, eta, F, alpha, rho_ff=1.0):
    """``rho_ff sqrt(F / alpha) (F^2 + xi^2)^{-1/2} exp(-F eta^2 / (2 alpha (xi^2 + F^2)))``.

    The boundary symbol of ``A_F`` for the Gaussian cutoff, up to one global
    constant.  ``y`` only selects the base point and is not used.
    """
    if np.any(np.asarray(alpha) <= 0):
        raise ConvexityError("alpha must be positive (strict convexity)")
    if F <= 0 or np.any(np.asarray(rho_ff) <= 0):
        raise ValueError("F and rho_ff must be positive")
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    s = F * F + xi * xi
    return rho_ff * np.sqrt(F / alpha) / np.sqrt(s) * np.exp(-F * eta * eta / (2 * alpha * s))


def stationary_phase_symbol(xi, eta, chi, rho_ff=1.0):
    """Leading term ``(pi / |xi|) (chi(eta/xi) + chi(-eta/xi)) rho_ff`` at the boundary."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi == 0):
        raise DomainError("stationary phase needs xi != 0")
    s = np.asarray(eta, dtype=float) / xi
    return np.pi / np.abs(xi) * (chi(s) + chi(-s)) * rho_ff


def phase(t_hat, lam_hat, xi, eta, omega, alpha):
    """Boundary phase ``xi (lam_hat t_hat + alpha t_hat^2) + eta omega t_hat``."""
    return xi * (lam_hat * t_hat + alpha * t_hat * t_hat) + eta * omega * t_hat


def phase_gradient(t_hat, lam_hat, xi, eta, omega, alpha):
    return np.array([xi * lam_hat + 2 * xi * alpha * t_hat + eta * omega, xi * t_hat])


def phase_hessian(xi, alpha):
    return np.array([[2 * xi * alpha, xi], [xi, 0.0]])


@dataclass(frozen=True)
class CriticalPoint:
    t_hat: float
    lam_hat: float
    det: float
    grad_norm: float


def critical_points(xi, eta, omega, alpha):
    """The nondegenerate critical point ``(0, -eta omega / xi)`` and its Hessian determinant."""
    if xi == 0:
        raise DomainError("xi = 0 is a degenerate direction (outside the cone)")
    t, lam = 0.0, -eta * omega / xi
    H = phase_hessian(xi, alpha)
    det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
    g = phase_gradient(t, lam, xi, eta, omega, alpha)
    return CriticalPoint(t, lam, float(det), float(np.max(np.abs(g))))


# --------------------------------------------------------------------------
# numerical evaluation
# --------------------------------------------------------------------------


def _chi_bandwidth(chi):
    """Angular frequency beyond which the spectrum of ``chi`` is negligible."""
    if chi.kind == "gaussian":
        return 9.0 / np.sqrt(chi.nu)
    if chi.kind == "bump":
        return 250.0 / chi.C
    return 1.0


def _trap(n, width):
    w = np.full(n + 1, width / n)
    w[0] = w[-1] = 0.5 * width / n
    return w


def _outward(g, freq, os, t_max, t_guess, n_chunk=64, floor=1e-14):
    """``int_R g`` by a uniform trapezoid rule walking outward from zero.

    The step resolves ``freq`` (an increasing bound on the local frequency)
    at the extent ``T`` of the integrand, with oversampling ``os``.  The walk
    stops once two consecutive chunks are negligible against the running
    peak; if that happens beyond ``T`` the walk is repeated with a larger
    ``T``.  A single step keeps the rule spectrally accurate, which a
    composite rule with changing steps would not be.
    """
    T = min(t_guess, t_max)
    while True:
        h = 2 * np.pi / (os * freq(T))
        total = 0j
        peak = 0.0
        quiet = 0
        a = 0.0
        w = np.full(n_chunk + 1, h)
        w[0] = w[-1] = 0.5 * h
        while a < t_max and quiet < 2:
            t = a + h * np.arange(n_chunk + 1)
            vals = g(np.concatenate([t, -t]))
            total += np.sum(w * (vals[: n_chunk + 1] + vals[n_chunk + 1:]))
            m = float(np.max(np.abs(vals)))
            peak = max(peak, m)
            quiet = quiet + 1 if m <= floor * peak else 0
            a = t[-1]
        if a <= T or T >= t_max:
            return total
        T = min(1.25 * a, t_max)


def _normalized_boundary(xi, eta, F, alpha, chi, rho_ff, os):
    """``rho int dt int dlam chi(lam) e^{-(F - i xi)(lam t + alpha t^2) + i eta t}`` over ``t in R``."""
    R = chi.radius
    K = _chi_bandwidth(chi)
    ax = abs(xi)
    t_max = (R + np.sqrt(R * R + 180.0 / (F * alpha))) / (2 * alpha)
    s = F - 1j * xi

    def g(t):
        tm = float(np.max(np.abs(t)))
        hl = 2 * np.pi / (os * (K + (ax + F) * tm))
        n = max(int(np.ceil(2 * R / hl)), 8)
        lam = np.linspace(-R, R, n + 1)
        wl = _trap(n, 2 * R) * chi(lam)
        inner = np.exp(-s * np.outer(t, lam)) @ wl
        return rho_ff * inner * np.exp(-s * alpha * t * t + 1j * eta * t)

    def freq(t):
        return (ax + F) * (R + 2 * alpha * t) + abs(eta) + 8.0

    return _outward(g, freq, os, t_max, _extent_guess(xi, F, alpha))


def _extent_guess(xi, F, alpha):
    # where the Gaussian-cutoff integrand exp(-alpha (F^2 + xi^2) t^2 / (2F)) drops below 1e-16
    return float(np.sqrt(74.0 * F / (alpha * (F * F + xi * xi))))


def _kernel_boundary(xi, eta, F, alpha, chi, rho_ff, os):
    """``int dY e^{i eta Y} int dX e^{i xi X} K_0(X, Y)`` with ``K_0`` the ``x = 0`` kernel."""
    R = chi.radius
    K = _chi_bandwidth(chi)
    ax = abs(xi)
    t_max = (R + np.sqrt(R * R + 180.0 / (F * alpha))) / (2 * alpha)
    mass = rho_ff * chi.integral()

    def g(Y):
        Y = np.asarray(Y, dtype=float)
        aY = np.abs(Y)
        ym = float(np.max(aY))
        # X runs over the support [alpha Y^2 - R|Y|, alpha Y^2 + R|Y|] of the kernel
        n = max(int(np.ceil(os * R * (ym * (ax + F) + K) / np.pi)), 8)
        u = np.linspace(-R, R, n + 1)
        safe = np.where(aY > 0, Y, 1.0)
        X = alpha * safe[:, None] ** 2 + np.abs(safe)[:, None] * u[None, :]
        kern = boundary_kernel(X, safe[:, None], F, alpha, chi, rho_ff)
        wX = _trap(n, 2 * R)[None, :] * np.abs(safe)[:, None]
        inner = np.sum(wX * kern * np.exp(1j * xi * X), axis=1)
        # the |Y|^-1 singularity integrates to the mass of chi at Y = 0
        inner = np.where(aY > 0, inner, mass)
        return inner * np.exp(1j * eta * Y)

    def freq(t):
        return (ax + F) * (R + 2 * alpha * t) + abs(eta) + 8.0

    return _outward(g, freq, os, t_max, _extent_guess(xi, F, alpha))


def _interior(x, y, xi, eta, cfg, metric, fol, w, os):
    """Direct evaluation at ``x > 0`` from traced half-geodesics."""
    chi = cfg.chi
    R, K, F = chi.radius, _chi_bandwidth(chi), cfg.F
    z0 = fol.to_chart(np.array([x]), np.array([y]))
    alpha = max(float(alpha_coefficient(metric, fol, z0)[0]), 1e-3)
    T = 2.0 * metric.diameter / x
    cap = None
    if F > 45.0 * x:
        Xmax = 45.0 / (F - 45.0 * x)
        T = min(T, (R + np.sqrt(R * R + 4 * alpha * Xmax)) / (2 * alpha))
        cap = x * T
    ht = 2 * np.pi / (os * ((abs(xi) + F) * (R + 2 * alpha * T) + abs(eta) + 8.0))
    hl = 2 * np.pi / (os * (K + (abs(xi) + F) * T))
    n = max(int(np.ceil(2 * R / hl)), 8)
    lam = np.linspace(-R, R, n + 1)
    wl = _trap(n, 2 * R) * chi(lam)
    keep = wl > 0
    lam, wl = lam[keep], wl[keep]
    zz = np.repeat(z0, lam.size, axis=0)
    total = 0j
    for om in (1.0, -1.0):
        v = fol.tangent_vector(zz, x * lam, np.full(lam.size, om))
        if isinstance(w, ConstantWeight):
            half = trace_bundle(metric, fol, zz, v, x * ht, t_cap=cap)
            rho = w.value
        else:
            rays = trace_rays(metric, fol, zz, v, x * ht, param="affine", t_cap=cap)
            half, rho = rays.fwd, w.on_rays(rays)[0]
        xp = fol.x(half.points)
        X = (xp - x) / x ** 2
        Y = (fol.y(half.points) - y) / x
        integrand = rho * damping(F, x, xp) * np.exp(1j * (xi * X + eta * Y))
        total += (half.integrate(integrand) / x) @ wl
    return total


def numeric_symbol(z, zeta, cfg, metric, fol, w=None, rtol=1e-6, max_level=12, route="normalized"):
    """The symbol ``a_F(z, zeta)`` by adaptive nested trapezoid quadrature.

    ``z = (x, y)`` in foliation coordinates.  At ``x = 0`` the phase reduces
    to ``xi (lam t + alpha t^2) + eta omega t`` and both half-geodesics are
    summed; ``route="kernel"`` instead integrates the ``x = 0`` kernel in the
    scattering coordinates ``(X, Y)``.  For ``x > 0`` the geodesics are traced.
    The sampling density doubles per level until two successive estimates
    agree to ``rtol``.
    """
    x, y = float(z[0]), float(z[1])
    xi, eta = float(zeta[0]), float(zeta[1])
    w = ConstantWeight() if w is None else w
    if x < 0:
        raise DomainError("symbols are defined for x >= 0")
    if cfg.chi.kind == "zero":
        return 0j
    if x == 0:
        if cfg.F <= 0:
            raise ValueError("the boundary symbol needs F > 0")
        alpha = float(boundary_alpha(metric, fol, np.array([y]))[0])
        if alpha <= 0:
            raise ConvexityError(f"alpha = {alpha} at y = {y}")
        rho_ff = _diag_weight(w, metric, fol, fol.to_chart(np.array(0.0), np.array(y)), cfg.h)
        if route == "normalized":
            fn = lambda os: _normalized_boundary(xi, eta, cfg.F, alpha, cfg.chi, rho_ff, os)
        elif route == "kernel":
            fn = lambda os: _kernel_boundary(xi, eta, cfg.F, alpha, cfg.chi, rho_ff, os)
        else:
            raise ValueError(f"unknown route {route!r}")
    else:
        fn = lambda os: _interior(x, y, xi, eta, cfg, metric, fol, w, os)
    prev = fn(2.0)
    for level in range(1, max_level + 1):
        cur = fn(2.0 ** (level + 1))
        if abs(cur - prev) <= rtol * abs(cur) or cur == prev:
            return complex(cur)
        prev = cur
    raise AccuracyError(f"no convergence to rtol={rtol} after {max_level} levels", complex(prev))


def gaussian_config(F, metric, fol, y=0.0, tail=1e-16, **kw):
    """A configuration whose cutoff is the Gaussian with ``nu = alpha(0, y) / F``."""
    alpha = float(boundary_alpha(metric, fol, np.array([y]))[0])
    return NormalOpConfig(F=F, chi=CutoffChi.gaussian(F, alpha, tail), **kw)


@dataclass(frozen=True)
class Calibration:
    c: float
    max_rel_error: float
    rel_errors: np.ndarray


def calibrate(numeric, closed, fit=slice(0, 5)):
    """Least-squares constant ``c`` with ``numeric ~ c closed`` fitted on ``fit`` points."""
    numeric = np.asarray(numeric)
    closed = np.asarray(closed, dtype=float)
    n_fit, c_fit = numeric.real[fit], closed[fit]
    c = float(np.dot(n_fit, c_fit) / np.dot(c_fit, c_fit))
    rel = np.abs(numeric - c * closed) / np.abs(c * closed)
    return Calibration(c, float(np.max(rel)), rel)


# --------------------------------------------------------------------------
# ellipticity
# --------------------------------------------------------------------------


@dataclass
class ScanReport:
    """Result of :func:`ellipticity_scan`.

    ``violations`` has one row ``(x, y, direction, |zeta|, |zeta||a|)`` per
    failing node.  ``nodes`` holds the same columns for every scanned node
    and ``passed_mask`` flags them; both are kept only on request.
    """

    minimum: float
    n_scanned: int
    violations: np.ndarray
    nodes: np.ndarray | None = None
    passed_mask: np.ndarray | None = None

    @property
    def passed(self):
        return len(self.violations) == 0

    def write_csv(self, path):
        if self.nodes is None:
            raise ValueError("scan was run without keep_nodes; no rows to write")
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["x", "y", "direction", "zeta_norm", "zeta_norm_abs_a", "pass"])
            for row, ok in zip(self.nodes, self.passed_mask):
                out.writerow([repr(float(v)) for v in row] + ["PASS" if ok else "FAIL"])


def ellipticity_scan(a, cone=None, zeta_min=4.0, csv_path=None, keep_nodes=False):
    """Minimum of ``|zeta| |a|`` over cone nodes with ``|zeta| >= zeta_min``.

    ``cone=None`` scans all directions.  A node violates ellipticity when its
    value is below ``cone.C_ell`` or is zero.  Writing ``csv_path`` emits the
    certificate with one row per scanned node.
    """
    shape = a.values.shape
    xi, eta = a.zeta()
    r = np.hypot(xi, eta)
    vals = r * np.abs(a.values)
    sel = np.broadcast_to(r >= zeta_min * (1 - 1e-12), shape)
    if cone is not None:
        sel = sel & np.broadcast_to(cone.contains(xi, eta), shape)
    if not np.any(sel):
        raise ValueError("no symbol nodes in the scanned region")
    threshold = 0.0 if cone is None else cone.C_ell
    ok = (vals > 0) & (vals >= threshold)
    ys = a.y if shape[1] == a.y.size else a.y[:1]

    def rows(mask):
        idx = np.nonzero(mask)
        xb, eb, rb = (np.broadcast_to(v, shape)[idx] for v in (xi, eta, r))
        return np.stack([a.x[idx[0]], ys[idx[1]], np.arctan2(eb, xb), rb, vals[idx]], axis=1)

    report = ScanReport(float(vals[sel].min()), int(sel.sum()), rows(sel & ~ok))
    if keep_nodes or csv_path is not None:
        report.nodes = rows(sel)
        report.passed_mask = ok[sel]
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def certify_cone(a0, C_cone=1.0, zeta_min=4.0):
    """A :class:`ConeSpec` whose ``C_ell`` is the certified minimum of ``|zeta||a0|``."""
    rep = ellipticity_scan(a0, ConeSpec(C_cone), zeta_min)
    if rep.minimum <= 0:
        raise PreconditionError("the symbol is not elliptic on the cone")
    return ConeSpec(C_cone, rep.minimum * (1 - 1e-12))


# --------------------------------------------------------------------------
# elliptic completion
# --------------------------------------------------------------------------


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10 - 15 * s + 6 * s * s)


def completion_chi1(t, C):
    """Smooth monotone ``chi_1``: ``1/2`` on ``t <= C/2`` and ``t / C`` on ``t >= C``."""
    t = np.asarray(t, dtype=float)
    return 0.5 + (t / C - 0.5) * _smoothstep((t - 0.5 * C) / (0.5 * C))


def completion_chi(t, C):
    """``chi(t) = -t + C chi_1(t)``, exactly zero on ``t >= C``."""
    t = np.asarray(t, dtype=float)
    return np.where(t >= C, 0.0, -t + C * completion_chi1(t, C))


@dataclass(frozen=True)
class Completion:
    a1: SymbolGrid
    completed: SymbolGrid
    theta: np.ndarray
    C: float
    b0: np.ndarray
    b1: np.ndarray


def build_elliptic_completion(a0, cone, zeta_lo=2.0, zeta_hi=4.0, C=None):
    """Real ``a1`` vanishing on the cone with ``e^{-i theta} a0 + a1`` elliptic.

    ``theta`` is the phase of ``a0`` (unwrapped along radial lines for polar
    grids), ``b0 = |zeta| Re(e^{-i theta} a0)`` and
    ``a1 = |zeta|^-1 chi(b0) psi(|zeta|)`` with ``psi`` rising from 0 at
    ``zeta_lo`` to 1 at ``zeta_hi``.  ``C`` defaults to the minimum of ``b0``
    over cone nodes with ``|zeta| >= zeta_lo``, so ``chi(b0) = 0`` there.
    """
    if cone is None or cone.C_ell <= 0:
        raise PreconditionError("build the completion from a certified cone (see certify_cone)")
    if ellipticity_scan(a0, cone, zeta_hi).minimum < cone.C_ell:
        raise PreconditionError("a0 is not bounded below by C_ell on the cone")
    theta = np.angle(a0.values)
    if a0.layout == "polar":
        theta = np.unwrap(theta, axis=2)
    xi, eta = a0.zeta()
    r = np.broadcast_to(np.hypot(xi, eta), a0.values.shape)
    b0 = r * np.real(np.exp(-1j * theta) * a0.values)
    if C is None:
        on_cone = np.broadcast_to(cone.contains(xi, eta), b0.shape) & (r >= zeta_lo)
        if not np.any(on_cone):
            raise PreconditionError("no cone nodes above zeta_lo")
        C = float(b0[on_cone].min())
    b1 = completion_chi(b0, C)
    psi = _smoothstep((r - zeta_lo) / (zeta_hi - zeta_lo))
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = np.where(r > 0, psi * b1 / np.where(r > 0, r, 1.0), 0.0)
    a1_grid = a0.with_values(a1.astype(complex))
    completed = a0.with_values(np.exp(-1j * theta) * a0.values + a1)
    return Completion(a1_grid, completed, theta, C, b0, b1)


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------


def quantize_left(a, f, chunk=16):
    """Left quantization with the scattering pairing on the grid of ``a``.

    ``(Op a) f (x_i, y_j) = sum_k e^{i (k1 x_i + k2 y_j)} a(x_i, y_j, x_i^2 k1, x_i k2) f^(k)``,
    with ``f`` periodically extended.  Symbols without ``y`` dependence use an
    ``O(N^3)`` path.
    """
    if a.layout != "fft":
        raise ValueError("quantization needs an fft-layout symbol")
    f = np.asarray(f)
    n1, n2 = a.x.size, a.y.size
    if f.shape != (n1, n2):
        raise ValueError(f"field of shape {f.shape} does not match the symbol grid ({n1}, {n2})")
    fh = np.fft.fft2(f)
    e1 = np.exp(2j * np.pi * np.outer(np.arange(n1), np.arange(n1)) / n1)
    out = np.empty((n1, n2), dtype=complex)
    if a.values.shape[1] == 1:
        for s in range(0, n1, chunk):
            sl = slice(s, min(s + chunk, n1))
            rows = np.einsum("im,imk,mk->ik", e1[sl], a.values[sl, 0], fh)
            out[sl] = np.fft.ifft(rows, axis=1) / n1
    else:
        e2 = np.exp(2j * np.pi * np.outer(np.arange(n2), np.arange(n2)) / n2)
        for s in range(0, n1, chunk):
            sl = slice(s, min(s + chunk, n1))
            out[sl] = np.einsum("im,jk,ijmk,mk->ij", e1[sl], e2, a.values[sl], fh) / (n1 * n2)
    return out.real if np.isrealobj(f) and _is_hermitian(a) else out


def _is_hermitian(a):
    return a.conjugate_defect() <= 1e-12 * max(1.0, float(np.max(np.abs(a.values))))


def verify_annihilation(a1, profile, fol, chart_axes=None, perturb=None):
    """``||Op(a1) f|| / ||f||`` for the lifted profile ``f`` on the grid of ``a1``.

    With ``chart_axes = (z1_axis, z2_axis)`` the field is sampled on that chart
    grid and interpolated (cubic) to the foliation-coordinate grid, as needed
    for foliations not aligned with the chart.  ``perturb(z)`` is added to
    the field in chart coordinates.
    """
    from scipy.interpolate import RegularGridInterpolator

    X, Y = np.meshgrid(a1.x, a1.y, indexing="ij")
    z = fol.to_chart(X, Y)

    def field_at(p):
        v = lift_adapted(profile, fol, p, warn=False)
        return v + perturb(p) if perturb is not None else v

    if chart_axes is None:
        f = field_at(z)
    else:
        g1, g2 = (np.asarray(ax, dtype=float) for ax in chart_axes)
        G = np.stack(np.meshgrid(g1, g2, indexing="ij"), -1)
        interp = RegularGridInterpolator((g1, g2), field_at(G), method="cubic")
        f = interp(z.reshape(-1, 2)).reshape(X.shape)
    nf = np.linalg.norm(f)
    if nf == 0:
        return 0.0
    return float(np.linalg.norm(quantize_left(a1, f)) / nf)


def closed_form_fft_symbol(x, y, F, alpha_of_x, rho_ff=1.0):
    """Boundary closed form with ``alpha = alpha_of_x(x)`` sampled on an fft layout.

    Used as a model ``a0`` at interior points of foliations whose boundary
    coefficient depends on ``x`` only.
    """
    def func(X, Y, xi, eta):
        return boundary_symbol_closed(Y, xi, eta, F, alpha_of_x(X), rho_ff)

    return SymbolGrid.fft(x, y, func, y_independent=True)
