import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folixray.normal_op import CutoffChi, NormalOpConfig, boundary_alpha
from folixray.presets import conformal_axis, conformal_strip, euclidean_disk
from folixray.symbols import (AccuracyError, ConeSpec, ConvexityError, PreconditionError,
                              SymbolGrid, boundary_symbol_closed, build_elliptic_completion,
                              calibrate, certify_cone, closed_form_fft_symbol,
                              completion_chi, cone_grid, critical_points,
                              ellipticity_scan, gaussian_config, numeric_symbol,
                              phase, phase_gradient, quantize_left,
                              stationary_phase_symbol, verify_annihilation)
from folixray.transform import AdaptedProfile, lift_adapted

# --- closed form -----------------------------------------------------------


def test_closed_form_examples():
    assert boundary_symbol_closed(0, 1, 0, 1, 1) / boundary_symbol_closed(0, 0, 0, 1, 1) == pytest.approx(
        1 / np.sqrt(2), rel=1e-12)
    assert boundary_symbol_closed(0, 1, 1, 1, 1) == pytest.approx(np.exp(-0.25) / np.sqrt(2), rel=1e-12)
    assert float(boundary_symbol_closed(0, 1, 1, 1, 1)) == pytest.approx(0.550695, abs=5e-7)


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(0.5, 3), st.floats(0.2, 2))
def test_closed_form_even_and_positive(xi, eta, F, alpha):
    a = boundary_symbol_closed(0, xi, eta, F, alpha)
    assert a > 0
    assert a == boundary_symbol_closed(0, xi, -eta, F, alpha)


def test_closed_form_rejects_concave():
    with pytest.raises(ConvexityError):
        boundary_symbol_closed(0, 1, 1, 1, -0.1)


# --- critical points -----------------------------------------------------


def test_critical_point_examples():
    cp = critical_points(1.0, 0.5, 1, 0.3)
    assert cp.t_hat == 0 and cp.lam_hat == -0.5
    assert critical_points(2.0, 0.3, -1, 0.3).det == -4.0
    assert critical_points(3.0, 0.0, 1, 0.3).lam_hat == 0 and critical_points(3.0, 0.0, -1, 0.3).lam_hat == 0
    with pytest.raises(ValueError):
        critical_points(0.0, 1.0, 1, 0.3)


@settings(max_examples=50)
@given(st.floats(1, 200), st.floats(-1, 1), st.sampled_from([1, -1]), st.floats(0.05, 2))
def test_critical_point_certificate(r, s, omega, alpha):
    xi, eta = r, r * s
    cp = critical_points(xi, eta, omega, alpha)
    assert cp.grad_norm <= 1e-10
    assert cp.det == -xi * xi
    # the analytic gradient agrees with central differences of the phase
    d = 1e-5
    fd = [(phase(cp.t_hat + d, cp.lam_hat, xi, eta, omega, alpha)
           - phase(cp.t_hat - d, cp.lam_hat, xi, eta, omega, alpha)) / (2 * d),
          (phase(cp.t_hat, cp.lam_hat + d, xi, eta, omega, alpha)
           - phase(cp.t_hat, cp.lam_hat - d, xi, eta, omega, alpha)) / (2 * d)]
    g = phase_gradient(cp.t_hat, cp.lam_hat, xi, eta, omega, alpha)
    np.testing.assert_allclose(fd, g, atol=1e-6 * r)


# --- numeric symbol --------------------------------------------------------


@pytest.mark.parametrize("factory", [conformal_strip, euclidean_disk])
def test_boundary_symbol_matches_closed_form(factory):
    sc = factory()
    F = 1.0
    alpha = float(boundary_alpha(sc.metric, sc.fol, np.array([0.0]))[0])
    cfg = gaussian_config(F, sc.metric, sc.fol)
    pts = [(4.0, 0.0), (8.0, 3.0), (-16.0, 5.0), (30.0, -30.0), (64.0, 10.0), (5.0, -4.0)]
    num = [numeric_symbol((0.0, 0.0), z, cfg, sc.metric, sc.fol) for z in pts]
    closed = [boundary_symbol_closed(0.0, xi, eta, F, alpha) for xi, eta in pts]
    cal = calibrate(num, closed)
    assert cal.max_rel_error <= 0.02
    # the constant is 2 pi sqrt(alpha / F) in this normalization
    assert cal.c == pytest.approx(2 * np.pi * np.sqrt(alpha / F), rel=1e-6)


def test_kernel_route_agrees():
    sc = conformal_strip()
    cfg = gaussian_config(0.5, sc.metric, sc.fol)
    for z in [(4.0, 1.0), (12.0, -8.0), (40.0, 20.0)]:
        a = numeric_symbol((0.0, 0.0), z, cfg, sc.metric, sc.fol)
        b = numeric_symbol((0.0, 0.0), z, cfg, sc.metric, sc.fol, route="kernel")
        assert abs(a - b) <= 0.02 * abs(a)


def test_kernel_route_with_bump_cutoff():
    sc = euclidean_disk()
    cfg = NormalOpConfig(F=1.0, chi=CutoffChi(C=1.5))
    a = numeric_symbol((0.0, 0.1), (10.0, 4.0), cfg, sc.metric, sc.fol)
    b = numeric_symbol((0.0, 0.1), (10.0, 4.0), cfg, sc.metric, sc.fol, route="kernel")
    assert abs(a - b) <= 1e-5 * abs(a)


def test_gaussian_truncation_stability():
    sc = conformal_strip()
    F = 1.0
    alpha = float(boundary_alpha(sc.metric, sc.fol, np.array([0.0]))[0])
    cfg = gaussian_config(F, sc.metric, sc.fol)
    # exact value of the untruncated Gaussian: 2 pi (F^2 + xi^2)^-1/2 e^{...}
    for xi, eta in [(4.0, 2.0), (10.0, -10.0), (50.0, 5.0)]:
        a = numeric_symbol((0.0, 0.0), (xi, eta), cfg, sc.metric, sc.fol)
        exact = 2 * np.pi * np.sqrt(alpha / F) * boundary_symbol_closed(0, xi, eta, F, alpha)
        assert abs(a - exact) <= 1e-6 * exact


def test_decay_order_and_leading_coefficient():
    sc = conformal_strip()
    cfg = NormalOpConfig(F=1.0, chi=CutoffChi(C=2.0))
    a = {xi: numeric_symbol((0.0, 0.0), (xi, 0.0), cfg, sc.metric, sc.fol) for xi in (32.0, 64.0, 128.0)}
    assert abs(a[64.0]) / abs(a[32.0]) == pytest.approx(0.5, rel=0.05)
    assert abs(a[128.0]) / abs(a[64.0]) == pytest.approx(0.5, rel=0.05)
    # |xi| a -> pi (chi(0) + chi(0)) rho_ff
    assert 64.0 * abs(a[64.0]) == pytest.approx(2 * np.pi, rel=0.05)


def test_stationary_phase_consistency():
    sc = conformal_strip()
    cfg = gaussian_config(1.0, sc.metric, sc.fol)
    rng = np.random.default_rng(4)
    for th in rng.uniform(-np.pi / 4, np.pi / 4, 6):
        xi, eta = 64 * np.cos(th), 64 * np.sin(th)
        a = numeric_symbol((0.0, 0.0), (xi, eta), cfg, sc.metric, sc.fol)
        sp = stationary_phase_symbol(xi, eta, cfg.chi)
        assert abs(a - sp) <= 0.1 * abs(sp)


def test_zero_cutoff_and_domain():
    sc = conformal_strip()
    assert numeric_symbol((0.0, 0.0), (4, 1), NormalOpConfig(chi=CutoffChi("zero")), sc.metric, sc.fol) == 0
    with pytest.raises(ValueError):
        numeric_symbol((-0.1, 0.0), (4, 1), NormalOpConfig(), sc.metric, sc.fol)


def test_accuracy_error_carries_estimate():
    sc = conformal_strip()
    with pytest.raises(AccuracyError) as err:
        numeric_symbol((0.0, 0.0), (6.0, 1.0), NormalOpConfig(), sc.metric, sc.fol, rtol=0.0, max_level=1)
    assert np.isfinite(err.value.best)


def test_interior_symbol_tends_to_boundary_value():
    sc = conformal_strip()
    cfg = NormalOpConfig(F=1.0, chi=CutoffChi(C=2.0))
    b = numeric_symbol((0.0, 0.0), (8.0, 2.0), cfg, sc.metric, sc.fol)
    a = numeric_symbol((0.01, 0.0), (8.0, 2.0), cfg, sc.metric, sc.fol, rtol=1e-3, max_level=4)
    assert abs(a - b) <= 0.02 * abs(b)


# --- symbol grids and ellipticity -------------------------------------------


def closed_polar(F=1.0, alpha=1.0, radii=(1, 2, 4, 8, 16, 32, 64, 128), n_angles=24):
    th = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    return SymbolGrid.polar([0.0], [0.0], radii, th,
                            lambda x, y, xi, eta: boundary_symbol_closed(y, xi, eta, F, alpha))


def test_symbol_grid_validation():
    with pytest.raises(ValueError):
        SymbolGrid([0.0], [0.0], np.ones((1, 1, 2, 3)), radii=[1, 2], angles=[0, 1])
    with pytest.raises(ValueError):
        SymbolGrid([0.0], [0.0], np.full((1, 1, 1, 1), np.nan), radii=[1], angles=[0])


def test_numeric_symbol_grid_conjugate_symmetric():
    sc = conformal_strip()
    cfg = NormalOpConfig(F=1.0, chi=CutoffChi(C=1.5))
    g = SymbolGrid.polar([0.0], [0.0], [4.0, 9.0], [0.3, 0.3 + np.pi],
                         lambda x, y, xi, eta: numeric_symbol((x, y), (xi, eta), cfg, sc.metric, sc.fol))
    assert g.conjugate_defect() <= 1e-8


def test_scan_of_closed_form_on_cone(tmp_path):
    a = closed_polar()
    rep = ellipticity_scan(a, ConeSpec(1.0), zeta_min=4.0, csv_path=tmp_path / "cert.csv")
    assert rep.minimum > 0.5 and rep.passed
    rows = list(csv.reader(open(tmp_path / "cert.csv")))
    assert rows[0] == ["x", "y", "direction", "zeta_norm", "zeta_norm_abs_a", "pass"]
    assert len(rows) - 1 == rep.n_scanned and all(r[-1] == "PASS" for r in rows[1:])


def test_scan_of_zero_symbol():
    a = closed_polar()
    zero = a.with_values(np.zeros_like(a.values))
    rep = ellipticity_scan(zero, None, zeta_min=4.0)
    assert rep.minimum == 0 and len(rep.violations) == rep.n_scanned > 0


def test_completion_chi_properties():
    C = 0.7
    t = np.linspace(-0.5, 3, 2001)
    b1 = completion_chi(t, C)
    assert np.all(b1[t >= C] == 0)
    np.testing.assert_allclose((t + b1)[t <= C / 2], C / 2, atol=1e-15)
    lo = t <= 2 * C
    assert np.all(np.abs(t + b1)[lo & (t >= 0)] >= C / 2 - 1e-15)
    assert np.all(np.abs(t + b1)[lo & (t >= 0)] <= 2 * C + 1e-15)
    assert np.all(np.diff(t + b1) >= -1e-15)


def test_completion_makes_symbol_elliptic_everywhere():
    a0 = closed_polar(F=1.0, alpha=0.5)
    cone = certify_cone(a0, 1.0, 4.0)
    comp = build_elliptic_completion(a0, cone)
    xi, eta = a0.zeta()
    on_cone = np.broadcast_to(cone.contains(xi, eta), a0.values.shape)
    assert np.all(comp.a1.values[on_cone] == 0)
    assert np.all(comp.a1.values.imag == 0)
    full = ellipticity_scan(comp.completed, None, zeta_min=4.0)
    assert full.minimum >= 0.9 * min(comp.C / 2, cone.C_ell)
    s = comp.b0 + comp.b1
    assert np.all(s >= comp.C / 2 - 1e-12) and np.all(s <= 2 * comp.C + 1e-12)


def test_completion_requires_certification():
    a0 = closed_polar()
    with pytest.raises(PreconditionError):
        build_elliptic_completion(a0, ConeSpec(1.0))


# --- quantization ------------------------------------------------------------


def small_grid(n=16):
    x = np.linspace(0.05, 0.3, n)
    y = np.linspace(-0.5, 0.5, n, endpoint=False)
    return x, y


def test_quantize_identity_and_multiplication():
    x, y = small_grid()
    f = np.random.default_rng(0).normal(size=(x.size, y.size))
    one = SymbolGrid.fft(x, y, lambda X, Y, xi, eta: 1.0 + 0 * xi)
    np.testing.assert_allclose(quantize_left(one, f), f, atol=1e-10)
    m = SymbolGrid.fft(x, y, lambda X, Y, xi, eta: (1 + X + Y ** 2) + 0 * xi)
    np.testing.assert_allclose(quantize_left(m, f), (1 + x[:, None] + y[None, :] ** 2) * f, atol=1e-10)
    one_fast = SymbolGrid.fft(x, y, lambda X, Y, xi, eta: 1.0 + 0 * xi, y_independent=True)
    np.testing.assert_allclose(quantize_left(one_fast, f), f, atol=1e-10)


def test_quantize_high_eta_symbol_kills_y_constant_fields():
    x, y = small_grid()
    f = np.cos(7 * x)[:, None] * np.ones(y.size)[None, :]
    a = SymbolGrid.fft(x, y, lambda X, Y, xi, eta: (np.abs(eta) >= 1) * (1 + X) + 0 * Y)
    assert np.max(np.abs(quantize_left(a, f))) <= 1e-8


def test_quantize_fast_path_matches_general_path():
    x, y = small_grid(12)
    f = np.random.default_rng(1).normal(size=(x.size, y.size))
    func = lambda X, Y, xi, eta: 1 / (1 + xi ** 2 + eta ** 2) + 0 * Y
    fast = quantize_left(SymbolGrid.fft(x, y, func, y_independent=True), f)
    general = quantize_left(SymbolGrid.fft(x, y, func), f)
    np.testing.assert_allclose(fast, general, atol=1e-12)


def test_quantize_shape_mismatch():
    x, y = small_grid()
    with pytest.raises(ValueError):
        quantize_left(SymbolGrid.fft(x, y, lambda X, Y, xi, eta: 1 + 0 * xi), np.zeros((3, 3)))


# --- annihilation ------------------------------------------------------------


def axis_completion(n, phi=0.0):
    sc = conformal_axis(phi=phi)
    c = sc.fol.c
    x = np.linspace(c / n, c, n)
    y = np.linspace(-0.8, 0.8, n, endpoint=False)
    a0 = closed_form_fft_symbol(x, y, 1.0, lambda X: 0.5 * sc.metric.kappa + 0 * X)
    return sc, build_elliptic_completion(a0, certify_cone(a0, 1.0, 4.0))


def test_annihilation_on_axis_aligned_foliation():
    sc, comp = axis_completion(64)
    c = sc.fol.c
    prof = AdaptedProfile.sample(lambda s: np.exp(-(s + 0.15) ** 2 / 0.002), c, 64)
    zero = AdaptedProfile.sample(lambda s: 0.0, c, 8)
    assert verify_annihilation(comp.a1, zero, sc.fol) == 0
    assert verify_annihilation(comp.a1, prof, sc.fol) <= 1e-6
    k = 2 * np.pi * 10 / 1.6
    mod = lambda z: lift_adapted(prof, sc.fol, z, warn=False) * np.cos(k * sc.fol.y(z))
    assert verify_annihilation(comp.a1, prof, sc.fol, perturb=mod) >= 1e-2


def test_annihilation_on_rotated_foliation():
    sc, comp = axis_completion(64, phi=0.3)
    prof = AdaptedProfile.sample(lambda s: np.exp(-(s + 0.15) ** 2 / 0.004), sc.fol.c, 64)
    g = np.linspace(-1.3, 1.3, 521)
    assert verify_annihilation(comp.a1, prof, sc.fol, chart_axes=(g, g)) <= 1e-3
