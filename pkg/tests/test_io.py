import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fraclab.energy import standard_bump
from fraclab.extension import extend
from fraclab.fracop import ContractError, GridFunction, TailModel
from fraclab.io import (CsvBlock, load_extension, load_grid, load_grid_csv, read_csv, save_extension,
                        save_extension_csv, save_grid, save_grid_csv)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
tails = st.sampled_from([TailModel.constant(0.0), TailModel.constant(-2.5), TailModel.edge(),
                         TailModel.constant_pm1(axis=0, direction=-1), TailModel.periodic()])


def _same(a: GridFunction, b: GridFunction):
    assert a.values.tobytes() == b.values.tobytes()
    assert a.shape == b.shape and a.spacing == b.spacing and a.origin == b.origin
    assert a.tail == b.tail


@settings(max_examples=40, deadline=None)
@given(vals=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite),
       h=st.floats(1e-3, 10.0), o=st.tuples(finite, finite), tail=tails)
def test_binary_round_trip_is_bit_exact(tmp_path_factory, vals, h, o, tail):
    p = tmp_path_factory.mktemp("grd") / "u.grd"
    u = GridFunction(vals, h, o, tail)
    save_grid(p, u)
    _same(u, load_grid(p))


@settings(max_examples=25, deadline=None)
@given(vals=arrays(np.float64, st.integers(1, 12), elements=finite), h=st.floats(1e-3, 10.0), tail=tails)
def test_csv_round_trip_is_exact(tmp_path_factory, vals, h, tail):
    p = tmp_path_factory.mktemp("csv") / "u.csv"
    u = GridFunction(vals, h, (-1.0,), tail)
    save_grid_csv(p, u)
    _same(u, load_grid_csv(p))


def test_extension_round_trip(tmp_path):
    x = np.linspace(-4, 4, 41)
    v = GridFunction(standard_bump([x], radius=2.0), x[1] - x[0], (x[0],), TailModel.constant(0.0))
    E = extend(v, 0.3, 3.0, 8)
    save_extension(tmp_path / "e.ext", E)
    F = load_extension(tmp_path / "e.ext")
    assert F.nodal.tobytes() == E.nodal.tobytes()
    assert np.array_equal(F.zmesh, E.zmesh) and F.R == E.R and F.s == E.s
    _same(E.base, F.base)
    save_extension_csv(tmp_path / "e.csv", E)
    cols, rows = read_csv(tmp_path / "e.csv")
    assert cols == ["x0", "z", "value"] and len(rows) == E.nodal.size
    assert float(rows[-1]["value"]) == E.nodal.ravel()[-1]


def test_wrong_magic_and_missing_header(tmp_path):
    x = np.linspace(0, 1, 5)
    u = GridFunction(x, 0.25, (0.0,), TailModel.edge())
    save_grid(tmp_path / "u.grd", u)
    with pytest.raises(ContractError):
        load_extension(tmp_path / "u.grd")
    (tmp_path / "plain.csv").write_text("x0,value\n0.0,1.0\n")
    with pytest.raises(ContractError):
        load_grid_csv(tmp_path / "plain.csv")


def test_csv_block_formatting(tmp_path):
    b = CsvBlock("t", ("a", "b", "c"))
    b.add(1, 0.1, True)
    b.add(np.int64(2), np.float64(1 / 3), "x")
    assert b.text == "a,b,c\n1,0.1,1\n2,0.3333333333333333,x\n"
    with pytest.raises(ValueError):
        b.add(1, 2)
    cols, rows = read_csv(b.write(tmp_path / "t.csv"))
    assert cols == ["a", "b", "c"] and rows[1]["b"] == "0.3333333333333333"
