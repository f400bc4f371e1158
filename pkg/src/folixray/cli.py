"""Command-line experiment driver.

Usage::

    folixray SUBCOMMAND [--config FILE] [--threads N] [--key=value ...]

The configuration is a JSON object (see :data:`DEFAULTS`); ``--key=value``
overrides are parsed as JSON when possible and as plain strings otherwise,
and dotted keys address nested entries (``--preset_params.c=0.2``).

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

Only the standard library is imported at module level so that ``--threads``
can cap the BLAS/OpenMP pools before numpy is loaded.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

SUBCOMMANDS = ("forward", "normal-op", "symbol-check", "reconstruct", "layer-strip",
               "stability", "probe")

DEFAULTS = {
    "preset": "euclidean-disk",
    "preset_params": {},
    "weight": "constant",
    "weight_params": {},
    "phantom": "gaussian-bump",
    "phantom_params": {},
    "chi": "compact",
    "chi_C": 1.0,
    "chi_tail": 1e-16,
    "F": 1.0,
    "n_chart": 32,
    "n_lam": 9,
    "n_profile": 64,
    "h": 1e-2,
    "lam_step": 0.05,
    "rays": [],
    "ray_h": None,
    "noise": 0.0,
    "seed": 0,
    "data": None,
    "out": "out",
    "recon_F": 0.05,
    "mu": None,
    "max_iter": 500,
    "tol": 1e-10,
    "max_error": None,
    "c_ladder": [0.3, 0.2, 0.1],
    "n_slabs": 2,
    "n_family": 20,
    "resolutions": [12, 24],
    "symbol_radii": [4.0, 8.0, 16.0, 32.0, 64.0],
    "symbol_angles": 8,
    "C_cone": 1.0,
    "C_ell": 1e-2,
    "zeta_min": 4.0,
    "calibration_tol": 0.02,
}


class UsageError(Exception):
    """Invalid command line or configuration (exit code 2)."""


class CheckFailed(Exception):
    """A verification performed by the subcommand did not pass (exit code 1)."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg, key, value):
    parts = key.split(".")
    if parts[0] not in DEFAULTS:
        raise UsageError(f"unknown configuration key {parts[0]!r}")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"configuration key {p!r} is not a mapping")
        node = node[p]
    node[parts[-1]] = value


def load_config(path=None, overrides=()):
    """Defaults, then the JSON file at ``path``, then ``--key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise UsageError(f"{path}: the configuration must be a JSON object")
        for key, value in user.items():
            _set_dotted(cfg, key, value)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"overrides take the form --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        _set_dotted(cfg, key, _parse_value(value))
    return cfg


# --------------------------------------------------------------------------
# phantoms and scene assembly
# --------------------------------------------------------------------------

PHANTOM_KINDS = ("gaussian-bump", "piecewise-linear", "step", "deep-support")


def make_phantom(kind, params, fol, n=64):
    """Adapted phantom profile on ``n`` nodes of ``[-c, 0]``.

    * ``gaussian-bump``: ``amplitude * exp(-(s - center)^2 / (2 width^2))``
      (defaults ``center=-c/2``, ``width=0.1c``);
    * ``piecewise-linear``: linear interpolation of ``knots``/``values``;
    * ``step``: ``amplitude * (1 + erf((s - at) / width)) / 2`` (``width > 0``);
    * ``deep-support``: a smooth bump that vanishes identically on
      ``xt > -c/2``, including between nodes.
    """
    import numpy as np
    from scipy.special import erf

    from .transform import AdaptedProfile

    c = fol.c
    p = dict(params or {})
    s = np.linspace(-c, 0.0, n)
    amp = float(p.pop("amplitude", 1.0))
    if kind == "gaussian-bump":
        m, w = float(p.pop("center", -0.5 * c)), float(p.pop("width", 0.1 * c))
        if w <= 0:
            raise ValueError("gaussian-bump width must be positive")
        vals = amp * np.exp(-(s - m) ** 2 / (2 * w * w))
    elif kind == "piecewise-linear":
        knots = np.asarray(p.pop("knots", [-c, -2 * c / 3, -c / 3, 0.0]), dtype=float)
        kv = np.asarray(p.pop("values", [0.0, 1.0, 0.3, 0.8]), dtype=float)
        if knots.shape != kv.shape or np.any(np.diff(knots) <= 0):
            raise ValueError("piecewise-linear needs increasing knots matching the values")
        vals = amp * np.interp(s, knots, kv)
    elif kind == "step":
        at, w = float(p.pop("at", -0.5 * c)), float(p.pop("width", 0.05 * c))
        if not w > 0:
            raise ValueError("a step phantom needs a positive mollification width")
        vals = amp * 0.5 * (1 + erf((s - at) / w))
    elif kind == "deep-support":
        # the Hermite basis of a node reaches two cells to each side, so the
        # bump ends one node before the last node at or below -c/2
        k = int(np.searchsorted(s, -0.5 * c, side="right")) - 1
        lo, hi = -c, s[max(k - 1, 1)]
        r = (2 * s - (lo + hi)) / (hi - lo)
        inside = np.abs(r) < 1
        vals = np.zeros(n)
        vals[inside] = amp * np.exp(1 - 1 / (1 - r[inside] ** 2))
    else:
        raise ValueError(f"unknown phantom {kind!r}; choose from {PHANTOM_KINDS}")
    if p:
        raise ValueError(f"unknown parameters for phantom {kind!r}: {sorted(p)}")
    return AdaptedProfile(s, vals)


def _field(cfg, scene):
    """The chart field ``f(z)`` and (for adapted phantoms) its profile."""
    import numpy as np

    from .transform import lift_adapted

    kind = cfg["phantom"]
    params = dict(cfg["phantom_params"])
    if kind == "zero":
        return (lambda z: np.zeros(np.shape(z)[:-1])), None
    if kind == "disk":
        center = np.asarray(params.get("center", [0.0, 0.0]), dtype=float)
        radius = float(params.get("radius", 1.0))
        return (lambda z: (np.hypot(*np.moveaxis(z - center, -1, 0)) <= radius).astype(float)), None
    prof = make_phantom(kind, params, scene.fol, cfg["n_profile"])
    return lift_adapted(prof, scene.fol, warn=False), prof


def _scene(cfg):
    from .presets import make_scene

    try:
        return make_scene(cfg["preset"], **cfg["preset_params"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except TypeError as exc:
        raise UsageError(f"bad preset parameters: {exc}") from None


def _weight(cfg):
    from .transform import make_weight

    try:
        return make_weight(cfg["weight"], **cfg["weight_params"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _compact_chi(cfg):
    from .normal_op import CutoffChi

    kind = {"compact": "bump"}.get(cfg["chi"], cfg["chi"])
    return CutoffChi(kind, float(cfg["chi_C"]))


def _inversion_config(cfg):
    from .inversion import InversionConfig

    return InversionConfig(mu=cfg["mu"], max_iter=int(cfg["max_iter"]), tol=float(cfg["tol"]),
                           c_ladder=tuple(cfg["c_ladder"]), F=float(cfg["recon_F"]),
                           n_profile=int(cfg["n_profile"]))


def _acquisition(cfg, scene, certify=True):
    from .inversion import Acquisition

    return Acquisition.for_scene(scene, int(cfg["n_chart"]), int(cfg["n_lam"]), float(cfg["h"]),
                                 weight=_weight(cfg), certify=certify)


def _meta(cfg, command):
    return {"command": command, "config": cfg}


def _out(cfg, name):
    os.makedirs(cfg["out"], exist_ok=True)
    return os.path.join(cfg["out"], name)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_forward(cfg):
    import numpy as np

    from .io import save_sinogram, write_csv
    from .transform import sinogram, xray

    scene = _scene(cfg)
    w = _weight(cfg)
    f, _ = _field(cfg, scene)
    acq = _acquisition(cfg, scene, certify=False)
    S = sinogram(scene.metric, scene.fol, w, f, acq.x, acq.y, acq.lam_hat, acq.omega, h=acq.h)
    save_sinogram(_out(cfg, "sinogram.grid"), S, _meta(cfg, "forward"))
    v = S.values[S.mask]
    write_csv(_out(cfg, "forward_summary.csv"), ["n_rays", "n_capped", "min", "max", "l2"],
              [(int(S.mask.sum()), int(S.capped.sum()), float(v.min(initial=0.0)),
                float(v.max(initial=0.0)), float(np.sqrt(np.sum(v * v))))])
    if cfg["rays"]:
        rows = []
        for r in cfg["rays"]:
            if len(r) != 4:
                raise UsageError("each ray is [z1, z2, v1, v2]")
            val = xray(scene.metric, scene.fol, w, f, r[:2], r[2:], h=float(cfg["ray_h"] or acq.h))
            rows.append((*map(float, r), val.value, int(val.capped)))
        write_csv(_out(cfg, "forward_rays.csv"), ["z1", "z2", "v1", "v2", "value", "capped"], rows)
    return 0


def cmd_normal_op(cfg):
    import numpy as np

    from .io import write_csv, write_grid
    from .normal_op import NormalOpConfig, apply_AF, apply_AF_composed
    from .symbols import gaussian_config

    scene = _scene(cfg)
    f, _ = _field(cfg, scene)
    n = int(cfg["n_chart"])
    c = scene.fol.c
    acq = _acquisition(cfg, scene, certify=False)
    xs = np.linspace(0.1 * c, 0.9 * c, n)
    ys = np.linspace(acq.y[0], acq.y[-1], n) * 0.5
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    z = scene.fol.to_chart(X.ravel(), Y.ravel())
    kw = dict(lam_step=float(cfg["lam_step"]), h=float(cfg["h"]))
    if cfg["chi"] == "gaussian":
        nop = gaussian_config(float(cfg["F"]), scene.metric, scene.fol, tail=cfg["chi_tail"], **kw)
    else:
        nop = NormalOpConfig(F=float(cfg["F"]), chi=_compact_chi(cfg), **kw)
    w = _weight(cfg)
    a = apply_AF(f, nop, scene.metric, scene.fol, w, z=z)
    b = apply_AF_composed(f, nop, scene.metric, scene.fol, w, z=z)
    write_grid(_out(cfg, "normal_op.grid"),
               dict(_meta(cfg, "normal-op"), kind="field", axes=[("x", xs), ("y", ys)]),
               a.values.reshape(n, n))
    delta = np.abs(a.values - b.values) / np.maximum(np.abs(b.values), 1e-300)
    write_csv(_out(cfg, "normal_op.csv"), ["x", "y", "AF", "AF_composed", "rel_delta"],
              zip(X.ravel(), Y.ravel(), a.values, b.values, delta))
    write_csv(_out(cfg, "normal_op_summary.csv"), ["dropped", "dropped_composed", "max_rel_delta"],
              [(a.dropped, b.dropped, float(delta.max()))])
    return 0


def cmd_symbol_check(cfg):
    import numpy as np

    from .io import write_csv
    from .normal_op import NormalOpConfig, boundary_alpha
    from .symbols import boundary_symbol_closed, calibrate, gaussian_config, numeric_symbol

    scene = _scene(cfg)
    F = float(cfg["F"])
    y = 0.0
    alpha = float(boundary_alpha(scene.metric, scene.fol, np.array([y]))[0])
    if cfg["chi"] == "gaussian":
        nop = gaussian_config(F, scene.metric, scene.fol, y, tail=cfg["chi_tail"])
    else:
        nop = NormalOpConfig(F=F, chi=_compact_chi(cfg))
    radii = np.asarray(cfg["symbol_radii"], dtype=float)
    angles = np.linspace(-np.pi, np.pi, int(cfg["symbol_angles"]), endpoint=False)
    C_cone, C_ell, zmin = float(cfg["C_cone"]), float(cfg["C_ell"]), float(cfg["zeta_min"])
    rows, on_vals, on_closed = [], [], []
    for r in radii:
        for th in angles:
            xi, eta = r * np.cos(th), r * np.sin(th)
            if abs(xi) < C_cone * abs(eta) * (1 - 1e-12) or r < zmin:
                rows.append((float(th), float(r), "", "not certified"))
                continue
            a = numeric_symbol((0.0, y), (xi, eta), nop, scene.metric, scene.fol, _weight(cfg))
            val = float(r * abs(a))
            rows.append((float(th), float(r), val, "PASS" if val > 0 and val >= C_ell else "FAIL"))
            on_vals.append(a)
            on_closed.append(boundary_symbol_closed(y, xi, eta, F, alpha))
    write_csv(_out(cfg, "certificate.csv"), ["direction", "zeta_norm", "zeta_norm_abs_a", "status"],
              rows)
    certified = [r for r in rows if r[3] != "not certified"]
    minimum = min((r[2] for r in certified), default=float("nan"))
    ok = bool(certified) and all(r[3] == "PASS" for r in certified)
    cal_rows = [("alpha", alpha), ("minimum", minimum), ("certificate", "PASS" if ok else "FAIL")]
    if cfg["chi"] == "gaussian" and on_vals and ok:
        cal = calibrate(np.array(on_vals), np.array(on_closed), fit=slice(None))
        cal_ok = cal.max_rel_error <= float(cfg["calibration_tol"])
        cal_rows += [("c", cal.c), ("c_expected", 2 * np.pi * np.sqrt(alpha / F)),
                     ("max_rel_error", cal.max_rel_error),
                     ("calibration", "PASS" if cal_ok else "FAIL")]
        ok = ok and cal_ok
    write_csv(_out(cfg, "calibration.csv"), ["quantity", "value"], cal_rows)
    print(f"symbol-check: min |zeta||a| = {minimum:.6g} over {len(certified)} cone nodes; "
          f"{'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CheckFailed("ellipticity certificate or calibration failed")
    return 0


def _data_and_truth(cfg, scene, op):
    import numpy as np

    from .io import load_sinogram

    if cfg["data"] is not None:
        if not os.path.exists(cfg["data"]):
            raise UsageError(f"data file {cfg['data']} does not exist")
        S = load_sinogram(cfg["data"])
        try:
            op.from_sinogram(S)
        except ValueError as exc:
            raise UsageError(f"{cfg['data']}: {exc}") from None
        return S, None
    prof = make_phantom(cfg["phantom"], cfg["phantom_params"], scene.fol, cfg["n_profile"])
    d = op.forward(prof.values)
    if cfg["noise"]:
        rng = np.random.default_rng(int(cfg["seed"]))
        d = d + float(cfg["noise"]) * np.sqrt(np.mean(d * d)) * rng.normal(size=d.size)
    return op.to_sinogram(d), prof


def cmd_reconstruct(cfg):
    from .inversion import build_operator, local_reconstruct
    from .io import save_profile

    scene = _scene(cfg)
    inv = _inversion_config(cfg)
    op = build_operator(_acquisition(cfg, scene), n_profile=inv.n_profile)
    S, truth = _data_and_truth(cfg, scene, op)
    prof, rep = local_reconstruct(S, op, inv, truth=truth)
    save_profile(_out(cfg, "profile.grid"), prof, _meta(cfg, "reconstruct"))
    rep.write_csv(_out(cfg, "recon_report.csv"))
    print(f"reconstruct: {rep.iterations} iterations, relative error {rep.rel_error}")
    if cfg["max_error"] is not None and rep.rel_error is not None \
            and rep.rel_error > float(cfg["max_error"]):
        raise CheckFailed(f"relative error {rep.rel_error:.3g} exceeds {cfg['max_error']}")
    return 0


def cmd_layer_strip(cfg):
    from .inversion import build_operator, layer_strip
    from .io import save_profile, write_csv

    scene = _scene(cfg)
    inv = _inversion_config(cfg)
    op = build_operator(_acquisition(cfg, scene), n_profile=inv.n_profile)
    S, truth = _data_and_truth(cfg, scene, op)
    res = layer_strip(S, op, inv, int(cfg["n_slabs"]), truth=truth)
    save_profile(_out(cfg, "profile.grid"), res.profile, _meta(cfg, "layer-strip"))
    errs = res.slab_errors or [""] * len(res.slabs)
    write_csv(_out(cfg, "layer_report.csv"),
              ["slab", "bottom", "top", "iterations", "converged", "mu", "rel_error"],
              [(k, b, t, r.iterations, r.converged, r.mu, e)
               for k, ((b, t), r, e) in enumerate(zip(res.slabs, res.reports, errs))])
    print("layer-strip: per-slab errors " + ", ".join(f"{e:.3g}" for e in res.slab_errors))
    if cfg["max_error"] is not None and res.slab_errors \
            and max(res.slab_errors) > float(cfg["max_error"]):
        raise CheckFailed("a slab exceeds the error tolerance")
    return 0


def cmd_stability(cfg):
    from .inversion import stability_report
    from .io import write_csv

    scene = _scene(cfg)
    res = [int(r) for r in cfg["resolutions"]]
    rep = stability_report(scene, _inversion_config(cfg), int(cfg["n_family"]),
                           resolutions=res, n_lam=[int(cfg["n_lam"])] * len(res),
                           profile_nodes=[max(16, 2 * r) for r in res], h=float(cfg["h"]),
                           seed=int(cfg["seed"]))
    rows = [(n, k, r) for n, result in zip(res, rep.results) for k, r in enumerate(result.ratios)]
    write_csv(_out(cfg, "stability.csv"), ["resolution", "phantom", "ratio"], rows)
    write_csv(_out(cfg, "stability_summary.csv"),
              ["resolution", "max_ratio", "median_ratio", "alarm"],
              [(n, r.max, r.median, r.alarm) for n, r in zip(res, rep.results)])
    print(f"stability: drift {rep.drift:.3g}, alarm {rep.alarm}, "
          f"{'PASS' if rep.passed else 'FAIL'}")
    if rep.alarm:
        raise CheckFailed("injectivity alarm: a nonzero phantom has a vanishing transform")
    if not rep.passed:
        raise CheckFailed("stability ratios drift by more than 30% under refinement")
    return 0


def cmd_probe(cfg):
    from .inversion import contraction_probe
    from .io import write_csv

    rows = contraction_probe(_scene(cfg), _inversion_config(cfg), n_chart=int(cfg["n_chart"]),
                             n_lam=int(cfg["n_lam"]), h=float(cfg["h"]))
    write_csv(_out(cfg, "probe.csv"), ["c", "sigma_min", "sigma_max", "condition", "converged"],
              [(r.c, r.sigma_min, r.sigma_max, r.condition, r.converged) for r in rows])
    return 0


COMMANDS = {"forward": cmd_forward, "normal-op": cmd_normal_op, "symbol-check": cmd_symbol_check,
            "reconstruct": cmd_reconstruct, "layer-strip": cmd_layer_strip,
            "stability": cmd_stability, "probe": cmd_probe}


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="folixray", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--threads", type=int, help="cap on worker threads")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            _limit_threads(args.threads)
        cfg = load_config(args.config, rest)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"folixray: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"folixray: check failed: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        print(f"folixray: configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
