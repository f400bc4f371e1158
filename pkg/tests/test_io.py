import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from folixray.io import (GridFormatError, GridIOError, HeaderParseError, header_path,
                         load_profile, load_sinogram, load_symbol_grid, read_csv, read_grid,
                         save_profile, save_sinogram, save_symbol_grid, write_csv, write_grid)
from folixray.symbols import SymbolGrid
from folixray.transform import AdaptedProfile, Sinogram


def bits(a):
    a = np.ascontiguousarray(a)
    if np.iscomplexobj(a):
        a = np.stack([a.real, a.imag], -1)
    return a.astype("<f8").view("<u8")


def test_round_trip_3x4(tmp_path):
    v = np.arange(12.0).reshape(3, 4) / 7
    write_grid(tmp_path / "g", {"axes": [("x", [0, 1, 2]), ("y", np.linspace(0, 1, 4))],
                                "note": "hello"}, v)
    hdr, w = read_grid(tmp_path / "g")
    assert np.array_equal(bits(v), bits(w))
    assert hdr["dims"] == [3, 4] and hdr["dtype"] == "float64" and hdr["note"] == "hello"
    assert (tmp_path / "g").stat().st_size == 12 * 8


def test_payload_is_little_endian_row_major(tmp_path):
    v = np.array([[1.5, -2.0], [3.25, 0.0]])
    write_grid(tmp_path / "g", {}, v)
    raw = (tmp_path / "g").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8"), [1.5, -2.0, 3.25, 0.0])
    z = np.array([1 + 2j, -3j])
    write_grid(tmp_path / "z", {}, z)
    np.testing.assert_array_equal(np.frombuffer((tmp_path / "z").read_bytes(), "<f8"),
                                  [1, 2, 0, -3])


def test_complex_symbol_grid_round_trip(tmp_path):
    a = SymbolGrid.polar([0.0, 0.1], [0.0], [4.0, 8.0], np.linspace(0, 1, 3),
                         lambda x, y, xi, eta: complex(xi + x, eta - 1))
    save_symbol_grid(tmp_path / "a", a, {"F": 1.0})
    b = load_symbol_grid(tmp_path / "a")
    assert np.array_equal(bits(a.values), bits(b.values))
    assert b.layout == "polar" and np.array_equal(b.angles, a.angles) and b.order == a.order


def test_fft_symbol_grid_without_y_dependence(tmp_path):
    x, y = np.linspace(0.1, 0.3, 4), np.linspace(-1, 1, 6, endpoint=False)
    a = SymbolGrid.fft(x, y, lambda X, Y, xi, eta: 1 / (1 + xi ** 2 + eta ** 2) + 0j,
                       y_independent=True)
    save_symbol_grid(tmp_path / "a", a)
    b = load_symbol_grid(tmp_path / "a")
    assert b.values.shape == a.values.shape and np.array_equal(b.y, a.y)
    assert np.array_equal(bits(a.values), bits(b.values))


def test_sinogram_and_profile_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.random((3, 4, 5, 2)) > 0.3
    s = Sinogram(np.arange(3.0), np.arange(4.0), np.linspace(-1, 1, 5), np.array([1.0, -1.0]),
                 rng.normal(size=(3, 4, 5, 2)) * mask, mask, mask & (rng.random(mask.shape) > 0.8),
                 1e-2, "exit")
    save_sinogram(tmp_path / "s", s, {"config": {"seed": 3}})
    t = load_sinogram(tmp_path / "s")
    assert np.array_equal(bits(s.values), bits(t.values))
    assert np.array_equal(t.mask, s.mask) and np.array_equal(t.capped, s.capped)
    assert t.weight == "exit" and t.h == 1e-2
    p = AdaptedProfile(np.linspace(-0.3, 0, 7), rng.normal(size=7))
    save_profile(tmp_path / "p", p)
    q = load_profile(tmp_path / "p")
    assert np.array_equal(bits(p.values), bits(q.values)) and np.array_equal(p.nodes, q.nodes)
    with pytest.raises(GridFormatError):
        load_profile(tmp_path / "s")


def test_truncated_payload_names_byte_counts(tmp_path):
    write_grid(tmp_path / "g", {}, np.ones((3, 4)))
    raw = (tmp_path / "g").read_bytes()
    (tmp_path / "g").write_bytes(raw[:-5])
    with pytest.raises(GridFormatError, match="91 bytes, expected 96"):
        read_grid(tmp_path / "g")


def test_empty_header_is_a_parse_error(tmp_path):
    write_grid(tmp_path / "g", {}, np.ones(2))
    open(header_path(tmp_path / "g"), "w").close()
    with pytest.raises(HeaderParseError) as err:
        read_grid(tmp_path / "g")
    assert err.value.lineno == 1


def test_malformed_header_reports_line_number(tmp_path):
    write_grid(tmp_path / "g", {}, np.ones(2))
    hp = header_path(tmp_path / "g")
    lines = open(hp).read().splitlines()
    lines[2] = lines[2] + " oops"
    open(hp, "w").write("\n".join(lines))
    with pytest.raises(HeaderParseError, match="line 3") as err:
        read_grid(tmp_path / "g")
    assert err.value.lineno == 3


@pytest.mark.parametrize("bad", [{"dims": [0, 2]}, {"dims": []}, {"dims": [2.5]},
                                 {"dims": [2], "dtype": "int8"}])
def test_invalid_header_fields(tmp_path, bad):
    write_grid(tmp_path / "g", {}, np.ones(2))
    hp = header_path(tmp_path / "g")
    hdr = json.load(open(hp))
    hdr.update(bad)
    json.dump(hdr, open(hp, "w"))
    with pytest.raises(GridFormatError):
        read_grid(tmp_path / "g")


def test_dim_mismatch_on_write(tmp_path):
    with pytest.raises(GridFormatError):
        write_grid(tmp_path / "g", {"dims": [2, 2]}, np.ones((2, 3)))
    with pytest.raises(GridFormatError):
        write_grid(tmp_path / "g", {"axes": [("x", [1, 2, 3])]}, np.ones(2))


def test_io_errors_carry_the_path(tmp_path):
    missing = tmp_path / "nowhere" / "g"
    with pytest.raises(GridIOError, match="nowhere"):
        write_grid(missing, {}, np.ones(2))
    with pytest.raises(GridIOError, match="nowhere"):
        read_grid(missing)


def test_csv_table(tmp_path):
    write_csv(tmp_path / "t.csv", ["a", "b"], [(0.1, "PASS"), (np.float64(2.5), "FAIL")])
    cols, rows = read_csv(tmp_path / "t.csv")
    assert cols == ["a", "b"] and rows == [["0.1", "PASS"], ["2.5", "FAIL"]]


def test_round_trip_1000_random_grids(tmp_path):
    rng = np.random.default_rng(11)
    for k in range(1000):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        v = rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300)
        if k % 3 == 0:
            v = v + 1j * rng.normal(size=shape)
        write_grid(tmp_path / "g", {"k": k}, v)
        hdr, w = read_grid(tmp_path / "g")
        assert hdr["k"] == k and np.array_equal(bits(v), bits(w))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_round_trip_special_values(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("h") / "g"
    write_grid(path, {}, v)
    assert np.array_equal(bits(v), bits(read_grid(path)[1]))
