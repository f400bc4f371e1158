"""Least-squares inversion of the transform on foliation-adapted functions.

An adapted field is ``u(xt(z))`` for a profile ``u`` on ``[-c, 0]``, so the
transform restricted to adapted fields is a linear map from the profile node
values to the sinogram.  Because the unknown is one-dimensional the map is
assembled once as a dense ``rays x nodes`` matrix from traced geodesics; the
field on the chart is never formed.

Data-space inner products carry the weight ``exp(-2 F / x)`` of the base
point of each ray, with ``x`` clamped below at half a cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainError, certify_region
from .symbols import PreconditionError
from .transform import AdaptedProfile, ConstantWeight, Sinogram, trace_grid


class CoverageError(ValueError):
    """A slab is not seen by any ray that stays inside recovered territory."""


# --------------------------------------------------------------------------
# configuration and acquisition geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InversionConfig:
    """Solver settings.

    ``mu=None`` selects ``1e-6 * ||data||_w``.  ``F`` is the exponent of the
    data weight ``exp(-2 F / x)``.
    """

    mu: float | None = None
    max_iter: int = 500
    tol: float = 1e-10
    c_ladder: tuple = (0.3, 0.2, 0.1)
    F: float = 0.05
    n_profile: int = 64

    def __post_init__(self):
        ladder = tuple(float(c) for c in self.c_ladder)
        object.__setattr__(self, "c_ladder", ladder)
        if not ladder or any(c <= 0 for c in ladder) or np.any(np.diff(ladder) >= 0):
            raise ValueError("c_ladder must be strictly decreasing and positive")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.mu is not None and self.mu < 0:
            raise ValueError("regularization weight must be non-negative")
        if self.max_iter < 1 or self.n_profile < 3 or self.F < 0:
            raise ValueError("max_iter >= 1, n_profile >= 3 and F >= 0 are required")


def _cell_centers(lo, hi, n):
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


@dataclass(frozen=True)
class Acquisition:
    """Metric, foliation, weight and the ray grid of the measured sinogram."""

    metric: object
    fol: object
    weight: object
    x: np.ndarray
    y: np.ndarray
    lam_hat: np.ndarray
    omega: tuple = (1.0, -1.0)
    h: float = 1e-2

    @classmethod
    def for_scene(cls, scene, n_chart=64, n_lam=9, h=1e-2, weight=None, certify=True):
        """Cell-centred ``n_chart**2`` base grid covering Omega_c in ``(x, y)``.

        With ``certify`` the foliation must be strictly convex on Omega_c.
        """
        fol = scene.fol
        if certify:
            try:
                certify_region(scene.metric, fol)
            except DomainError as exc:
                raise PreconditionError(f"depth c={fol.c}: {exc}") from None
        x0, x1, y0, y1 = fol.bounding_box(scene.metric)
        zz = np.stack(np.meshgrid(np.linspace(x0, x1, 201), np.linspace(y0, y1, 201),
                                  indexing="ij"), axis=-1)
        inside = (fol.rho(zz) >= 0) & (fol.x(zz) >= 0)
        ys = fol.y(zz[inside])
        return cls(scene.metric, fol, weight or ConstantWeight(),
                   _cell_centers(0.0, fol.c, n_chart),
                   _cell_centers(ys.min(), ys.max(), n_chart),
                   np.linspace(-1.0, 1.0, n_lam), (1.0, -1.0), float(h))

    def cell_volume(self):
        dx = self.fol.c / self.x.size
        dy = (self.y[-1] - self.y[0]) / max(self.y.size - 1, 1)
        dl = 2.0 / max(self.lam_hat.size - 1, 1)
        return dx, dy, dl

    def same_grid(self, sino):
        return all(np.array_equal(np.asarray(a), np.asarray(b)) for a, b in
                   ((self.x, sino.x), (self.y, sino.y), (self.lam_hat, sino.lam_hat),
                    (self.omega, sino.omega)))


def data_weight(x, F, x_floor):
    """``exp(-2 F / x)`` with ``x`` clamped below at ``x_floor``."""
    return np.exp(-2.0 * F / np.maximum(x, x_floor))


# --------------------------------------------------------------------------
# the restricted operator
# --------------------------------------------------------------------------


@dataclass
class RestrictedOperator:
    """Transform restricted to adapted fields with a given profile grid.

    ``matrix[r, j]`` is the transform of the lifted ``j``-th Hermite basis
    profile along ray ``r`` (rays enumerate the valid sinogram entries).
    """

    acq: Acquisition
    nodes: np.ndarray
    matrix: np.ndarray
    index: tuple
    mask: np.ndarray
    capped: np.ndarray
    x_base: np.ndarray
    min_xt: np.ndarray = field(repr=False)

    @property
    def n_rays(self):
        return self.matrix.shape[0]

    def forward(self, values):
        return self.matrix @ np.asarray(values, dtype=float)

    def adjoint(self, r):
        return self.matrix.T @ np.asarray(r, dtype=float)

    def weights(self, F):
        return data_weight(self.x_base, F, 0.5 * self.acq.fol.c / self.acq.x.size)

    def to_sinogram(self, ray_values):
        vals = np.zeros(self.mask.shape)
        vals[self.index] = ray_values
        capped = np.zeros(self.mask.shape, dtype=bool)
        capped[self.index] = self.capped
        a = self.acq
        return Sinogram(a.x, a.y, a.lam_hat, np.asarray(a.omega, dtype=float), vals,
                        self.mask.copy(), capped, a.h, a.weight.name)

    def from_sinogram(self, sino):
        if not self.acq.same_grid(sino) or not np.array_equal(sino.mask, self.mask):
            raise ValueError("data were not generated over this operator's ray grid")
        return np.asarray(sino.values)[self.index]


def build_operator(acq, nodes=None, n_profile=64, chunk=512):
    """Trace the ray grid of ``acq`` and assemble the restricted operator."""
    fol = acq.fol
    if nodes is None:
        nodes = np.linspace(-fol.c, 0.0, n_profile)
    basis = AdaptedProfile(nodes, np.zeros_like(nodes))
    grid, traced = trace_grid(acq.metric, fol, acq.x, acq.y, acq.lam_hat, acq.omega, acq.h)
    n = len(nodes)
    if traced is None:
        empty = np.zeros(0)
        return RestrictedOperator(acq, basis.nodes, np.zeros((0, n)), grid.index, grid.mask,
                                  empty.astype(bool), empty, empty)
    rho = acq.weight.on_rays(traced)
    mat = np.zeros((traced.n, n))
    min_xt = np.full(traced.n, np.inf)
    for half, w in zip(traced.halves(), rho):
        for lo in range(0, traced.n, chunk):
            sl = slice(lo, lo + chunk)
            s = fol.xt(half.points[sl])
            live = half.weights[sl] > 0
            min_xt[sl] = np.minimum(min_xt[sl], np.where(live, s, np.inf).min(axis=1))
            mat[sl] += np.einsum("rk,rkn->rn", half.weights[sl] * w[sl], basis.basis(s))
    x_base = grid.x[grid.index[0]]
    return RestrictedOperator(acq, basis.nodes, mat, grid.index, grid.mask, traced.capped,
                              x_base, min_xt)


def restricted_forward(profile, op):
    """Sinogram of the lifted ``profile``.

    ``op`` is a :class:`RestrictedOperator` whose profile nodes match the
    profile's, or an :class:`Acquisition` (the operator is then built).
    """
    if isinstance(op, Acquisition):
        op = build_operator(op, nodes=profile.nodes)
    if not np.array_equal(op.nodes, profile.nodes):
        raise ValueError("profile nodes differ from the operator's")
    return op.to_sinogram(op.forward(profile.values))


def difference_matrix(n):
    return np.diff(np.eye(n), axis=0)


# --------------------------------------------------------------------------
# least squares
# --------------------------------------------------------------------------


@dataclass
class ReconReport:
    """Per-iteration residuals and summary diagnostics of one solve.

    ``residuals`` are the (regularized, weighted) least-squares residual
    norms, which CGLS decreases monotonically; ``normal_residuals`` are the
    norms of the normal-equation residual.
    """

    residuals: np.ndarray
    normal_residuals: np.ndarray
    iterations: int
    converged: bool
    stagnated: bool
    mu: float
    rel_error: float | None = None
    stability_ratio: float | None = None
    condition: float | None = None

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,residual,normal_residual\n")
            for k, (r, g) in enumerate(zip(self.residuals, self.normal_residuals)):
                fh.write(f"{k},{r:.17g},{g:.17g}\n")
            for key in ("iterations", "converged", "stagnated", "mu", "rel_error",
                        "stability_ratio", "condition"):
                fh.write(f"# {key},{getattr(self, key)}\n")


def cgls(A, b, reg, tol, max_iter):
    """CGLS for ``min ||A u - b||^2 + ||reg u||^2``.

    Returns ``(u, residuals, normal_residuals, converged, stagnated)``.  The
    iteration stops on ``||grad|| <= tol * ||A^T b||`` or when the residual
    changes by less than ``1e-12`` relatively before that.
    """
    n = A.shape[1]
    u = np.zeros(n)
    r = b.copy()
    s = A.T @ r
    g0 = np.linalg.norm(s)
    res = [float(np.linalg.norm(r))]
    grads = [float(g0)]
    if g0 == 0:
        return u, np.array(res), np.array(grads), True, False
    p = s.copy()
    gamma = s @ s
    converged = stagnated = False
    for _ in range(max_iter):
        q = A @ p
        qr = reg @ p
        delta = q @ q + qr @ qr
        if delta <= 0:
            stagnated = True
            break
        a = gamma / delta
        u = u + a * p
        r = r - a * q
        s = A.T @ r - reg.T @ (reg @ u)
        full = np.sqrt(r @ r + np.sum((reg @ u) ** 2))
        res.append(float(full))
        grads.append(float(np.linalg.norm(s)))
        if grads[-1] <= tol * g0:
            converged = True
            break
        if abs(res[-2] - res[-1]) < 1e-12 * res[-2]:
            stagnated = True
            break
        gamma_new = s @ s
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return u, np.array(res), np.array(grads), converged, stagnated


def default_mu(d, wts):
    return 1e-6 * float(np.sqrt(np.sum(wts * d * d)))


def _solve(M, d, wts, cfg, condition=True):
    sw = np.sqrt(wts)
    A = M * sw[:, None]
    b = d * sw
    mu = default_mu(d, wts) if cfg.mu is None else float(cfg.mu)
    reg = np.sqrt(mu) * difference_matrix(M.shape[1])
    u, res, grads, conv, stag = cgls(A, b, reg, cfg.tol, cfg.max_iter)
    cond = None
    if condition and A.shape[0] >= A.shape[1]:
        sv = np.linalg.svd(A, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    return u, ReconReport(res, grads, len(res) - 1, conv, stag, mu, condition=cond)


def relative_error(u, truth):
    truth = np.asarray(truth, dtype=float)
    den = np.linalg.norm(truth)
    return float(np.linalg.norm(u - truth) / den) if den > 0 else float(np.linalg.norm(u))


def local_reconstruct(data, op, cfg=InversionConfig(), truth=None):
    """Recover the profile from ``data`` by weighted regularized least squares.

    ``op`` is a :class:`RestrictedOperator` over the data's ray grid, or an
    :class:`Acquisition` from which one with ``cfg.n_profile`` nodes is built.
    ``truth`` (a profile on the same nodes) fills in the relative error.
    """
    if isinstance(op, Acquisition):
        op = build_operator(op, n_profile=cfg.n_profile)
    d = op.from_sinogram(data)
    wts = op.weights(cfg.F)
    u, rep = _solve(op.matrix, d, wts, cfg)
    profile = AdaptedProfile(op.nodes.copy(), u)
    fit = np.sqrt(np.sum(wts * op.forward(u) ** 2))
    rep.stability_ratio = float(np.linalg.norm(u) / fit) if fit > 0 else None
    if truth is not None:
        rep.rel_error = relative_error(u, truth.values)
    return profile, rep


# --------------------------------------------------------------------------
# regularization sweep
# --------------------------------------------------------------------------


@dataclass
class LCurve:
    mus: np.ndarray
    residuals: np.ndarray
    seminorms: np.ndarray
    best_mu: float


def lcurve_sweep(data, op, cfg=InversionConfig(), mus=None):
    """Tikhonov sweep; ``best_mu`` is the point of largest curvature in log-log."""
    d = op.from_sinogram(data)
    wts = op.weights(cfg.F)
    sw = np.sqrt(wts)
    A, b = op.matrix * sw[:, None], d * sw
    if mus is None:
        scale = np.linalg.norm(A, 2) ** 2
        mus = scale * np.logspace(-14, 0, 29)
    mus = np.asarray(mus, dtype=float)
    D = difference_matrix(A.shape[1])
    res, semi = [], []
    for mu in mus:
        u = np.linalg.lstsq(np.vstack([A, np.sqrt(mu) * D]),
                            np.concatenate([b, np.zeros(D.shape[0])]), rcond=None)[0]
        res.append(np.linalg.norm(A @ u - b))
        semi.append(np.linalg.norm(D @ u))
    res, semi = np.array(res), np.array(semi)
    lr = np.log(np.maximum(res, 1e-300))
    ls = np.log(np.maximum(semi, 1e-300))
    t = np.log(mus)
    d1r, d1s = np.gradient(lr, t), np.gradient(ls, t)
    d2r, d2s = np.gradient(d1r, t), np.gradient(d1s, t)
    kappa = (d1r * d2s - d2r * d1s) / np.maximum((d1r ** 2 + d1s ** 2) ** 1.5, 1e-300)
    inner = kappa[1:-1]
    best = mus[1 + int(np.argmax(inner))] if inner.size else mus[0]
    return LCurve(mus, res, semi, float(best))


# --------------------------------------------------------------------------
# layer stripping
# --------------------------------------------------------------------------


@dataclass
class LayerStripResult:
    profile: AdaptedProfile
    slabs: list
    reports: list
    slab_errors: list


def layer_strip(data, op, cfg=InversionConfig(), n_slabs=2, truth=None):
    """Recover the profile slab by slab, from ``xt = 0`` towards ``xt = -c``.

    For slab ``[b, top]`` the usable rays are those whose traced points stay
    in ``xt >= b`` and reach ``xt <= top``; the forward contribution of the
    already recovered nodes is subtracted from their data.  The unknowns are
    the unrecovered nodes whose basis functions those rays see; only the
    nodes inside the slab are kept.
    """
    if isinstance(op, Acquisition):
        op = build_operator(op, n_profile=cfg.n_profile)
    d = op.from_sinogram(data)
    c = -float(op.nodes[0])
    edges = np.linspace(0.0, -c, n_slabs + 1)
    nodes = op.nodes
    n = nodes.size
    recovered = np.zeros(n, dtype=bool)
    u = np.zeros(n)
    wts_all = op.weights(cfg.F)
    slabs, reports, errors = [], [], []
    for k in range(n_slabs):
        top, bottom = edges[k], edges[k + 1]
        last = k == n_slabs - 1
        in_slab = (nodes >= bottom - 1e-12 * c) & (nodes <= top + 1e-12 * c) & ~recovered
        if last:
            in_slab = ~recovered
        rows = (op.min_xt >= (-np.inf if last else bottom)) & (op.min_xt <= top)
        if not np.any(rows):
            raise CoverageError(f"slab {k} [{bottom:.4g}, {top:.4g}] has no ray confined "
                                "to recovered territory")
        every = bool(rows.all())
        M = op.matrix if every else op.matrix[rows]
        rhs = d[rows] - M[:, recovered] @ u[recovered] if recovered.any() else d[rows]
        cols = ~recovered & np.any(M != 0, axis=0)
        cols |= in_slab
        # whole-problem slabs reuse the operator arrays unchanged, so a single
        # slab reproduces local_reconstruct to rounding
        if every and cols.all():
            uk, rep = _solve(M, d, wts_all, cfg)
        else:
            uk, rep = _solve(M[:, cols], rhs, wts_all[rows], cfg)
        sol = np.zeros(n)
        sol[cols] = uk
        u[in_slab] = sol[in_slab]
        recovered |= in_slab
        if truth is not None:
            rep.rel_error = relative_error(u[in_slab], truth.values[in_slab])
            errors.append(rep.rel_error)
        slabs.append((float(bottom), float(top)))
        reports.append(rep)
    return LayerStripResult(AdaptedProfile(nodes.copy(), u), slabs, reports, errors)


# --------------------------------------------------------------------------
# conditioning along the depth ladder
# --------------------------------------------------------------------------


@dataclass
class ProbeRow:
    c: float
    sigma_min: float
    sigma_max: float
    condition: float
    converged: bool


def _power(apply, n, iters, rng):
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    lam_prev = lam = 0.0
    for _ in range(iters):
        w = apply(v)
        lam_prev, lam = lam, float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, False
        v = w / nw
    return lam, abs(lam - lam_prev) <= 1e-6 * abs(lam)


def normal_matrix(op, F):
    A = op.matrix * np.sqrt(op.weights(F))[:, None]
    return A.T @ A


def contraction_probe(scene, cfg=InversionConfig(), n_chart=16, n_lam=9, n_profile=16,
                      h=1e-2, iters=30, seed=0):
    """Extreme singular values of the weighted restricted operator for each ladder depth.

    Uses ``iters`` steps of power and inverse-power iteration on the normal
    matrix; rows whose iterations have not settled are flagged.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for c in cfg.c_ladder:
        acq = Acquisition.for_scene(scene.with_depth(c), n_chart, n_lam, h)
        op = build_operator(acq, n_profile=n_profile)
        N = normal_matrix(op, cfg.F)
        lmax, ok1 = _power(lambda v: N @ v, N.shape[0], iters, rng)
        try:
            chol = np.linalg.cholesky(N)
        except np.linalg.LinAlgError:
            rows.append(ProbeRow(c, 0.0, float(np.sqrt(lmax)), np.inf, False))
            continue
        solve = lambda v: np.linalg.solve(chol.T, np.linalg.solve(chol, v))
        inv_l, ok2 = _power(solve, N.shape[0], iters, rng)
        smin = float(np.sqrt(1.0 / inv_l)) if inv_l > 0 else 0.0
        smax = float(np.sqrt(lmax))
        rows.append(ProbeRow(c, smin, smax, smax / smin if smin > 0 else np.inf, ok1 and ok2))
    return rows


# --------------------------------------------------------------------------
# stability constant
# --------------------------------------------------------------------------


def field_norm(op, profile_values, F):
    """Weighted discrete L2 norm of the lifted profile over the base cells."""
    a = op.acq
    dx, dy, _ = a.cell_volume()
    inside = op.mask[:, :, 0, 0]
    xg = np.broadcast_to(a.x[:, None], inside.shape)[inside]
    basis = AdaptedProfile(op.nodes, np.zeros_like(op.nodes)).basis(xg - a.fol.c)
    f = basis @ np.asarray(profile_values, dtype=float)
    w = np.exp(-F / np.maximum(xg, 0.5 * dx))
    return float(np.sqrt(np.sum((w * f) ** 2) * dx * dy))


def sinogram_norm(op, ray_values, F, order=1):
    """Weighted discrete ``H^order`` proxy (``order`` 0 or 1) of sinogram data.

    Difference quotients are taken along ``x``, ``y`` and ``lam_hat`` between
    neighbouring valid entries, with the weight at the midpoint ``x``.
    """
    a = op.acq
    dx, dy, dl = a.cell_volume()
    vals = np.zeros(op.mask.shape)
    vals[op.index] = ray_values
    xw = np.broadcast_to(a.x[:, None, None, None], vals.shape)
    wt = lambda x: np.exp(-F / np.maximum(x, 0.5 * dx))
    vol = dx * dy * dl
    total = np.sum((wt(xw) * vals)[op.mask] ** 2) * vol
    if order >= 1:
        for axis, step in ((0, dx), (1, dy), (2, dl)):
            if vals.shape[axis] < 2:
                continue
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[axis], hi[axis] = slice(None, -1), slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            both = op.mask[lo] & op.mask[hi]
            dq = (vals[hi] - vals[lo]) / step
            xm = 0.5 * (xw[lo] + xw[hi])
            total += np.sum((wt(xm) * dq)[both] ** 2) * vol
    return float(np.sqrt(total))


def random_profiles(rng, c, n_family, n_bumps=3):
    """Callables ``u(s)``: sums of Gaussian bumps of width ``0.08c``-``0.25c``."""
    fams = []
    for _ in range(n_family):
        amp = rng.normal(size=n_bumps)
        mid = rng.uniform(-c, 0.0, n_bumps)
        wid = rng.uniform(0.08, 0.25, n_bumps) * c

        def u(s, amp=amp, mid=mid, wid=wid):
            s = np.asarray(s, dtype=float)[..., None]
            return np.sum(amp * np.exp(-0.5 * ((s - mid) / wid) ** 2), axis=-1)
        fams.append(u)
    return fams


@dataclass
class StabilityResult:
    ratios: np.ndarray
    field_norms: np.ndarray
    data_norms: np.ndarray
    alarm: bool

    @property
    def max(self):
        return float(np.max(self.ratios))

    @property
    def median(self):
        return float(np.median(self.ratios))


def phantom_ratios(op, profiles, F, order=1, alarm_tol=1e-10):
    """``||f||_w / ||I f||_w`` for adapted phantoms given as node value arrays.

    The alarm is raised when a nonzero phantom has unweighted data norm below
    ``alarm_tol`` times its unweighted field norm.
    """
    ratios, fn, dn = [], [], []
    alarm = False
    for vals in profiles:
        g = op.forward(vals)
        f_w = field_norm(op, vals, F)
        g_w = sinogram_norm(op, g, F, order)
        f0 = field_norm(op, vals, 0.0)
        if f0 > 0 and sinogram_norm(op, g, 0.0, 0) <= alarm_tol * f0:
            alarm = True
        ratios.append(f_w / g_w if g_w > 0 else np.inf)
        fn.append(f_w)
        dn.append(g_w)
    return StabilityResult(np.array(ratios), np.array(fn), np.array(dn), alarm)


@dataclass
class StabilityReport:
    resolutions: tuple
    results: list
    drift: float
    passed: bool

    @property
    def alarm(self):
        return any(r.alarm for r in self.results)


def stability_report(scene, cfg=InversionConfig(), n_family=20, resolutions=(12, 24),
                     n_lam=(7, 13), profile_nodes=(32, 64), h=1e-2, seed=0, order=1):
    """Empirical stability ratios of a random adapted family at two resolutions.

    Passes when every ratio is finite, no phantom raises the alarm and the
    ratios change by at most 30 % between the resolutions.
    """
    if n_family < 20:
        raise ValueError("the stability family needs at least 20 phantoms")
    rng = np.random.default_rng(seed)
    family = random_profiles(rng, scene.fol.c, n_family)
    results = []
    for nc, nl, npf in zip(resolutions, n_lam, profile_nodes):
        acq = Acquisition.for_scene(scene, nc, nl, h)
        op = build_operator(acq, n_profile=npf)
        vals = [u(op.nodes) for u in family]
        results.append(phantom_ratios(op, vals, cfg.F, order))
    base = results[0].ratios
    drift = max(float(np.max(np.abs(r.ratios / base - 1))) for r in results[1:]) \
        if len(results) > 1 else 0.0
    finite = all(np.all(np.isfinite(r.ratios)) for r in results)
    alarm = any(r.alarm for r in results)
    return StabilityReport(tuple(resolutions), results, drift,
                           bool(finite and not alarm and drift <= 0.3))
