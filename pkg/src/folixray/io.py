"""Flat binary grid files with a JSON sidecar header.

A grid stored at ``path`` consists of

* ``path``: the payload, little-endian float64 in row-major order, complex
  values interleaved as ``re, im``;
* ``path + ".hdr"``: a UTF-8 JSON object with at least ``dims`` (positive
  integers), ``dtype`` (``"float64"`` or ``"complex128"``) and ``axes`` (one
  ``{"name", "values"}`` entry per dimension, or ``[]``).  Any other keys are
  carried through unchanged.

Python's JSON encoder writes floats with ``repr``, so axis values and other
metadata also round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .symbols import SymbolGrid
from .transform import AdaptedProfile, Sinogram

FORMAT = "folixray-grid"
VERSION = 1
_WIDTH = {"float64": 8, "complex128": 16}


class GridFormatError(ValueError):
    """Header and payload are inconsistent, or the header is invalid."""


class HeaderParseError(GridFormatError):
    """The sidecar header is not valid JSON; ``lineno`` names the bad line."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}: header line {lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class GridIOError(OSError):
    """Reading or writing a grid file failed at the operating-system level."""


def header_path(path):
    return os.fspath(path) + ".hdr"


def _axes_entries(axes, shape):
    if axes is None:
        return []
    entries = []
    for ax in axes:
        if isinstance(ax, dict):
            entries.append({"name": str(ax["name"]),
                            "values": [float(v) for v in np.ravel(ax.get("values", []))]})
        else:
            name, values = ax
            entries.append({"name": str(name), "values": [float(v) for v in np.ravel(values)]})
    if len(entries) != len(shape):
        raise GridFormatError(f"{len(entries)} axes given for a {len(shape)}-d grid")
    for ax, n in zip(entries, shape):
        if ax["values"] and len(ax["values"]) != n:
            raise GridFormatError(f"axis {ax['name']!r} has {len(ax['values'])} values, "
                                  f"dimension is {n}")
    return entries


def write_grid(path, header, values):
    """Write ``values`` with metadata ``header`` (``dims``/``dtype`` are filled in).

    A ``dims`` entry in ``header`` must match ``values.shape``.
    """
    values = np.asarray(values)
    complex_ = np.iscomplexobj(values)
    values = values.astype(np.complex128 if complex_ else np.float64)
    if values.size == 0 or values.ndim == 0:
        raise GridFormatError("grids need at least one dimension and one value")
    header = dict(header or {})
    if "dims" in header and tuple(header["dims"]) != values.shape:
        raise GridFormatError(f"header dims {list(header['dims'])} do not match "
                              f"values of shape {list(values.shape)}")
    header["axes"] = _axes_entries(header.get("axes"), values.shape)
    header.update(format=FORMAT, version=VERSION, dims=list(values.shape),
                  dtype="complex128" if complex_ else "float64")
    if not complex_:
        payload = values.astype("<f8").tobytes(order="C")
    else:
        payload = np.stack([values.real, values.imag], axis=-1).astype("<f8").tobytes(order="C")
    text = json.dumps(header, indent=1, sort_keys=True, allow_nan=True)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
        with open(header_path(path), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    except OSError as exc:
        raise GridIOError(f"cannot write grid {os.fspath(path)}: {exc.strerror or exc}") from exc


def read_header(path):
    hp = header_path(path)
    try:
        with open(hp, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise GridIOError(f"cannot read header {hp}: {exc.strerror or exc}") from exc
    if not text.strip():
        raise HeaderParseError(hp, 1, "empty header")
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeaderParseError(hp, exc.lineno, exc.msg) from None
    if not isinstance(header, dict):
        raise HeaderParseError(hp, 1, "header must be a JSON object")
    dims = header.get("dims")
    if (not isinstance(dims, list) or not dims
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)):
        raise GridFormatError(f"{hp}: dims must be a non-empty list of positive integers")
    if header.get("dtype") not in _WIDTH:
        raise GridFormatError(f"{hp}: unknown element type {header.get('dtype')!r}")
    return header


def read_grid(path):
    """Inverse of :func:`write_grid`; returns ``(header, values)``."""
    header = read_header(path)
    dims = tuple(header["dims"])
    width = _WIDTH[header["dtype"]]
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise GridIOError(f"cannot read grid {os.fspath(path)}: {exc.strerror or exc}") from exc
    expected = int(np.prod(dims)) * width
    if len(payload) != expected:
        raise GridFormatError(f"{os.fspath(path)}: payload has {len(payload)} bytes, "
                              f"expected {expected} for dims {list(dims)} of {header['dtype']}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if header["dtype"] == "complex128":
        pairs = flat.reshape(*dims, 2)
        values = pairs[..., 0] + 1j * pairs[..., 1]
    else:
        values = flat.reshape(dims)
    return header, values


def axis_values(header, name):
    for ax in header.get("axes", []):
        if ax["name"] == name:
            return np.asarray(ax["values"], dtype=float)
    raise KeyError(f"grid has no axis {name!r}")


# --------------------------------------------------------------------------
# typed wrappers
# --------------------------------------------------------------------------


def save_sinogram(path, sino, meta=None):
    """Values, mask and capped flags as the trailing ``field`` axis."""
    stacked = np.stack([sino.values, sino.mask.astype(float), sino.capped.astype(float)], -1)
    header = dict(meta or {})
    header.update(kind="sinogram", h=float(sino.h), weight=sino.weight, param=sino.param,
                  symmetric=bool(sino.symmetric),
                  axes=[("x", sino.x), ("y", sino.y), ("lam_hat", sino.lam_hat),
                        ("omega", sino.omega), ("field", [0.0, 1.0, 2.0])])
    write_grid(path, header, stacked)


def load_sinogram(path):
    header, vals = read_grid(path)
    _expect_kind(header, path, "sinogram")
    ax = {n: axis_values(header, n) for n in ("x", "y", "lam_hat", "omega")}
    return Sinogram(ax["x"], ax["y"], ax["lam_hat"], ax["omega"], vals[..., 0].copy(),
                    vals[..., 1] != 0, vals[..., 2] != 0, header["h"], header["weight"],
                    header["param"], header["symmetric"])


def save_profile(path, profile, meta=None):
    header = dict(meta or {})
    header.update(kind="profile", axes=[("s", profile.nodes)])
    write_grid(path, header, profile.values)


def load_profile(path):
    header, vals = read_grid(path)
    _expect_kind(header, path, "profile")
    return AdaptedProfile(axis_values(header, "s"), vals)


def save_symbol_grid(path, a, meta=None):
    header = dict(meta or {})
    if a.layout == "polar":
        tail = [("radius", a.radii), ("angle", a.angles)]
    else:
        tail = [("k1", a.k1), ("k2", a.k2)]
    y_axis = a.y if a.values.shape[1] == a.y.size else np.zeros(0)
    header.update(kind="symbol", layout=a.layout, order=list(a.order),
                  y_values=[float(v) for v in a.y],
                  axes=[("x", a.x), ("y", y_axis)] + tail)
    write_grid(path, header, a.values)


def load_symbol_grid(path):
    header, vals = read_grid(path)
    _expect_kind(header, path, "symbol")
    x = axis_values(header, "x")
    y = np.asarray(header["y_values"], dtype=float)
    kw = dict(order=tuple(header["order"]))
    if header["layout"] == "polar":
        kw.update(radii=axis_values(header, "radius"), angles=axis_values(header, "angle"))
    else:
        kw.update(k1=axis_values(header, "k1"), k2=axis_values(header, "k2"))
    return SymbolGrid(x, y, np.asarray(vals, dtype=complex), header["layout"], **kw)


def _expect_kind(header, path, kind):
    if header.get("kind") != kind:
        raise GridFormatError(f"{os.fspath(path)} holds a {header.get('kind')!r} grid, "
                              f"expected {kind!r}")


def write_csv(path, columns, rows):
    """Plain CSV table with a header row; floats are written with ``repr``."""
    try:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(columns)
            for row in rows:
                out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                              for v in row])
    except OSError as exc:
        raise GridIOError(f"cannot write table {os.fspath(path)}: {exc.strerror or exc}") from exc


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
