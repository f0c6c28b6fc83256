import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from dyadic_t1.coeffs import (CoeffTable, PairKey, Regime, RegimeTag, bound_for_pair,
                              compute_table, fmt17, matrix_element, param_bound,
                              param_regime, paraproduct_symbol, phi_split, regime_classify,
                              thread_cap, wcp_and_diag_values)
from dyadic_t1.grid import HaarIndex, cube_geometry
from dyadic_t1.kernels import (BoundFunctionals, Factor, FuncTriple, KernelModel, PartialBound,
                               builtin_kernel)
from dyadic_t1.quad import PiecewiseConstant, QuadSpec, pair_integral_1d

from conftest import D

COMPACT = builtin_kernel("compact_model")
HILBERT = builtin_kernel("tensor_hilbert")
FLAT = Factor.custom(lambda x, y: np.ones(np.broadcast(x, y).shape), singular=False,
                     tail=lambda lo, hi, tol: 4.0)

cube1 = st.builds(lambda l, m: D(l, m), st.integers(-4, 4), st.integers(-12, 12))


def log_rect(c, d, a, b):
    def G(t):
        return 0.0 if t == 0 else t * math.log(abs(t)) - t
    return -(G(d - b) - G(d - a) - G(c - b) + G(c - a))


# ---------------------------------------------------------------- regimes

def test_regime_examples():
    assert param_regime(D(0, 0), D(2, 1)) is Regime.NEARBY
    assert param_regime(D(0, 0), D(0, 0)) is Regime.EQUAL
    assert param_regime(D(-2, 0), D(0, 0)) is Regime.INSIDE_B
    assert param_regime(D(0, 0), D(2, 2)) is Regime.SEPARATED
    assert param_regime(D(-6, 16), D(0, 0)) is Regime.INSIDE_G
    key = PairKey.make(D(0, 0), D(0, 0), D(2, 1), D(0, 0))
    assert str(regime_classify(key)) == "NEAR/EQ"
    assert RegimeTag.parse("NEAR/EQ") == regime_classify(key)


@given(cube1, cube1)
def test_regime_against_float_geometry(I, J):
    if I.edge > J.edge:
        I, J = J, I
    reg = param_regime(I, J)
    a, b = float(I.lower[0]), float(I.upper[0])
    c, d = float(J.lower[0]), float(J.upper[0])
    if I == J:
        assert reg is Regime.EQUAL
    elif c <= a and b <= d:
        mid = (c + d) / 2
        lo, hi = (c, mid) if b <= mid else (mid, d)
        dist = min(a - lo, hi - b)
        want = Regime.INSIDE_G if dist > math.sqrt((b - a) * (d - c)) else Regime.INSIDE_B
        assert reg is want
    else:
        gap = max(0.0, c - b, a - d)
        assert reg is (Regime.SEPARATED if gap / (d - c) >= 1 else Regime.NEARBY)


def test_pair_key_canonical_order():
    k = PairKey.make(D(2, 0), D(0, 0), D(0, 5), D(1, 3))
    assert k.swap == (True, False)
    assert k.I1.cube == D(0, 5)
    assert [h.cube for h in k.original()] == [D(2, 0), D(0, 0), D(0, 5), D(1, 3)]


# ---------------------------------------------------------------- phi split

def test_phi_split_examples():
    J = D(0, 0)
    sp = phi_split(D(-3, 1), J)
    assert sp.mean == 1.0
    assert sp.phi(0.1) == 0.0 and sp.phi(0.45) == 0.0
    assert sp.sup <= 2 * float(J.edge) ** -0.5
    assert phi_split(D(-2, 3), J).mean == -1.0
    with pytest.raises(ValueError):
        phi_split(J, J)


@given(st.integers(1, 6), st.integers(0, 63))
def test_phi_split_recombines(k, m):
    J = D(0, 0)
    I = D(-k, m % 2 ** k)
    sp = phi_split(I, J)
    hJ = PiecewiseConstant.haar(J)
    xs = np.linspace(-0.5, 1.5, 401)
    inside = next(c for c in J.children() if c.contains(I))
    lo, hi = float(inside.lower[0]), float(inside.upper[0])
    on_JI = (xs >= lo) & (xs < hi)
    # h_J = phi + <h_J>_I on the complement of J_I, and h_J = <h_J>_I on J_I
    assert np.allclose(np.where(on_JI, sp.mean, sp.phi(xs) + sp.mean), hJ(xs))


# ---------------------------------------------------------------- matrix elements

def test_hilbert_matrix_element_closed_form():
    key = PairKey.make(D(0, 0), D(0, 0), D(0, 4), D(0, 2))
    res = matrix_element(key, HILBERT)
    want = 1.0
    for I, J in ((D(0, 0), D(0, 4)), (D(0, 0), D(0, 2))):
        f, g = PiecewiseConstant.haar(I), PiecewiseConstant.haar(J)
        want *= math.fsum(fv * gv * log_rect(c, d, a, b)
                          for a, b, fv in f.pieces() for c, d, gv in g.pieces())
    assert res.value == pytest.approx(want, rel=1e-10)


def test_separable_element_is_product(rng):
    spec = QuadSpec(tol=1e-11)
    for _ in range(10):
        c = [D(int(rng.integers(-2, 2)), int(rng.integers(-3, 3))) for _ in range(4)]
        key = PairKey.make(*c)
        res = matrix_element(key, COMPACT, spec)
        I1, I2, J1, J2 = key.original()
        a = pair_integral_1d(COMPACT.factors[0], I1, J1, spec).value
        b = pair_integral_1d(COMPACT.factors[1], I2, J2, spec).value
        assert res.value == pytest.approx(a * b, rel=1e-8, abs=1e-14)


@pytest.mark.parametrize("K", [COMPACT, HILBERT])
def test_antisymmetric_kernel_diagonal_vanishes(K):
    key = PairKey.make(D(-1, 1), D(0, 3), D(-1, 1), D(1, -2))
    assert abs(matrix_element(key, K).value) < 1e-13


def test_inside_split_reassembles():
    # phi-part plus mean times paraproduct part equals the direct pairing
    key = PairKey.make(D(-3, 1), D(0, 0), D(0, 0), D(0, 3))
    res = matrix_element(key, COMPACT, QuadSpec(tol=1e-12))
    pp = res.parts["pairings"][0]
    direct = pair_integral_1d(COMPACT.factors[0], HaarIndex(D(-3, 1)), HaarIndex(D(0, 0)),
                              QuadSpec(tol=1e-12)).value
    assert pp.value == pytest.approx(direct, rel=1e-9)
    assert pp.phi + pp.mean * pp.para == pytest.approx(pp.value, rel=1e-12)


def test_transposed_parameter():
    spec = QuadSpec(tol=1e-12)
    key = PairKey.make(D(1, 0), D(0, 0), D(-1, 3), D(0, 2))
    assert key.swap[0]
    a = matrix_element(key, COMPACT, spec).value
    f1 = pair_integral_1d(COMPACT.factors[0], HaarIndex(D(1, 0)), HaarIndex(D(-1, 3)), spec).value
    f2 = pair_integral_1d(COMPACT.factors[1], HaarIndex(D(0, 0)), HaarIndex(D(0, 2)), spec).value
    assert a == pytest.approx(f1 * f2, rel=1e-9)


# ---------------------------------------------------------------- bounds

def unit_functionals(delta=1.0):
    return BoundFunctionals(FuncTriple.constant(1.0, form="p5"), PartialBound.constant(), delta)


def test_separated_bound_formula():
    fun = unit_functionals()
    I, J = D(0, 0), D(2, 2)
    g = cube_geometry(I, J)
    want = float(g.rs) ** 1.5 / float(g.rd) ** 2
    assert param_bound(I, J, Regime.SEPARATED, fun) == pytest.approx(want, rel=1e-12)
    assert param_bound(D(0, 0), D(0, 2), Regime.SEPARATED, fun) == pytest.approx(1.0, rel=1e-12)


def test_nearby_bound_formula():
    fun = unit_functionals()
    I, J = D(0, 0), D(1, 1)
    g = cube_geometry(I, J)
    assert g.ird == 2 and g.rs == Fraction(1, 2)
    got = param_bound(I, J, Regime.NEARBY, fun)
    assert got == pytest.approx(fun.Ft_pair(I, J) * math.sqrt(0.5) / 2, rel=1e-12)


def test_bound_for_pair_is_product():
    key = PairKey.make(D(0, 0), D(-2, 1), D(2, 2), D(0, 0))
    tag = regime_classify(key)
    want = (param_bound(D(0, 0), D(2, 2), tag.first, COMPACT.functionals(0))
            * param_bound(D(-2, 1), D(0, 0), tag.second, COMPACT.functionals(1)))
    assert bound_for_pair(key, COMPACT) == pytest.approx(want, rel=1e-14)


# ---------------------------------------------------------------- symbols and pairings

def test_symbol_vanishes_for_flat_second_factor():
    K = KernelModel("custom_separable", (COMPACT.factors[0], FLAT))
    sym = paraproduct_symbol(D(0, 0), D(0, 3), K, N=1)
    assert max(abs(v) for v in sym.values()) < 1e-14


def test_symbol_is_product_of_pairings():
    I1, J1 = D(0, 0), D(0, 3)
    sym = paraproduct_symbol(I1, J1, COMPACT, N=1)
    first = pair_integral_1d(COMPACT.factors[0], HaarIndex(I1), HaarIndex(J1)).value
    for I2 in (D(-1, 0), D(0, -1), D(1, 0)):
        second = pair_integral_1d(COMPACT.factors[1], HaarIndex(I2),
                                  PiecewiseConstant.one()).value
        assert sym[I2] == pytest.approx(first * second, rel=1e-12)


def test_wcp_antisymmetric_kernel():
    vals = wcp_and_diag_values(D(0, 0), D(0, 0), COMPACT)
    assert all(abs(r.value) < 1e-12 for r in vals.values())


def test_wcp_against_scipy():
    bump = Factor.custom(lambda x, y: np.exp(-(x - y) ** 2) * (1 + x), singular=False)
    K = KernelModel("custom_separable", (bump, bump))
    vals = wcp_and_diag_values(D(0, 0), D(0, 0), K, QuadSpec(tol=1e-12))
    one, _ = integrate.dblquad(lambda y, x: math.exp(-(x - y) ** 2) * (1 + x), 0, 1, 0, 1,
                               epsabs=1e-14)
    assert vals["wcp"].value == pytest.approx(one ** 2, rel=1e-10)


def test_diag_pairing_mean_zero_in_constant_variable():
    # kernel independent of y: the y-side bump integrates to zero
    g = Factor.custom(lambda x, y: np.cos(x) + 0 * y, singular=False)
    K = KernelModel("custom_separable", (g, g))
    vals = wcp_and_diag_values(D(0, 0), D(-1, 1), K)
    assert abs(vals["a_one__one_one"].value) < 1e-14
    assert abs(vals["one_a__one_one"].value) < 1e-14


# ---------------------------------------------------------------- tables

def _keys():
    cs = [D(-1, 0), D(0, 0), D(0, 2), D(-2, 1)]
    return [PairKey.make(a, b, c, d) for a in cs for b in cs[:2] for c in cs for d in cs[:2]]


def test_table_csv_round_trip(tmp_path):
    tab = compute_table(_keys(), COMPACT, threads=1)
    p = tmp_path / "t.csv"
    tab.save(str(p), {"config_hash": "abc"})
    back = CoeffTable.load(str(p))
    assert back.keys() == tab.keys()
    for k in tab.keys():
        assert back.entries[k].value == tab.entries[k].value
        assert back.entries[k].regime == tab.entries[k].regime
    assert back.meta["config_hash"] == "abc"


def test_fmt17_round_trips(rng):
    for x in rng.standard_normal(50) * 10.0 ** rng.integers(-30, 30, 50):
        assert float(fmt17(x)) == x
        assert len(fmt17(x).split("e")[0].replace("-", "").replace(".", "")) == 17


def test_threaded_table_matches_serial(monkeypatch):
    keys = _keys()
    serial = compute_table(keys, COMPACT, threads=1)
    monkeypatch.setenv("DYADIC_T1_THREADS", "4")
    threaded = compute_table(keys, COMPACT)
    assert [threaded.entries[k].value for k in keys] == [serial.entries[k].value for k in keys]


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("DYADIC_T1_THREADS", "3")
    assert thread_cap() == 3
    monkeypatch.setenv("DYADIC_T1_THREADS", "zero")
    with pytest.raises(ValueError):
        thread_cap()


def test_threshold_ledger():
    tab = compute_table(_keys(), COMPACT, threads=1)
    cut = tab.threshold(1e-3)
    assert len(cut) + cut.dropped["count"] == len(tab)
    assert cut.dropped["sum_sq"] >= 0.0
