import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadic_t1.grid import (Box, DyadicCube, HaarIndex, count_family, cube_containing,
                            cube_geometry, enumerate_family, format_cube, format_haar,
                            formula_count, grid_from_shift, haar_eval, haar_gram_1d,
                            haar_inner, haar_mean, parse_cube, parse_haar, standard_grid,
                            tile, truncation_family, truncation_membership)

from conftest import D, H

levels = st.integers(-6, 6)
indices = st.integers(-40, 40)
cubes1 = st.builds(lambda l, m: D(l, m), levels, indices)
cubes2 = st.builds(lambda l, a, b: D(l, a, b), levels, indices, indices)


# ---------------------------------------------------------------- cubes

@given(cubes1)
def test_edge_and_endpoints_are_exact(I):
    assert I.edge == Fraction(2) ** I.level
    assert isinstance(I.lower[0], Fraction)
    assert I.lower[0] == I.index[0] * I.edge
    assert I.upper[0] - I.lower[0] == I.edge


@given(cubes2)
def test_children_and_ancestor(I):
    kids = I.children()
    assert len(kids) == 4
    assert len(set(kids)) == 4
    assert all(c.parent() == I and I.contains(c) for c in kids)
    assert sum(c.measure for c in kids) == I.measure
    assert I.ancestor(3) == I.parent().parent().parent()


@given(levels, indices, indices)
def test_same_level_cubes_disjoint_or_equal(l, a, b):
    I, J = D(l, a), D(l, b)
    assert I.intersects(J) == (a == b)


def test_children_at_extreme_level():
    I = D(-60, 5)
    assert [c.index for c in I.children()] == [(10,), (11,)]


def test_cube_text_round_trip():
    for I in (D(-2, 3), D(4, -1, 7)):
        assert parse_cube(format_cube(I)) == I
    h = H(-2, 3)
    assert format_haar(h) == "g:0/L-2/(3)#1"
    assert parse_haar(format_haar(h)) == h
    with pytest.raises(ValueError):
        parse_cube("L3/(1)")


def test_cube_containing_point():
    I = cube_containing(standard_grid(1), -2, (Fraction(5, 8),))
    assert I == D(-2, 2)


# ---------------------------------------------------------------- geometry

def test_geometry_examples():
    assert cube_geometry(D(0, 0), D(2, 0)).rs == Fraction(1, 4)
    assert cube_geometry(D(0, 0), D(2, 2)).rd == Fraction(7, 4)
    # [1,3) is not dyadic; the box form is accepted
    g = cube_geometry(D(0, 0), Box((Fraction(1),), Fraction(2)))
    assert g.d == 0 and g.ird == 1


@given(cubes2, cubes2)
def test_geometry_symmetric(I, J):
    a, b = cube_geometry(I, J), cube_geometry(J, I)
    assert (a.rs, a.rd, a.ird, a.d) == (b.rs, b.rd, b.ird, b.d)
    assert 0 < a.rs <= 1
    assert a.ird >= 1
    assert a.join.contains_box(I.box) and a.join.contains_box(J.box)


# ---------------------------------------------------------------- Haar functions

def test_haar_eval_examples():
    h = H(0, 0)
    assert haar_eval(h, (0.25,)) == 1.0
    assert haar_eval(h, (0.75,)) == -1.0
    assert haar_eval(h, (1.5,)) == 0.0
    assert haar_eval(H(-2, 0), (0.1,)) == 2.0


def test_haar_normalisation_and_father_mass():
    assert haar_inner(H(0, 0), H(0, 0)) == pytest.approx(1.0, abs=1e-15)
    # integral of the father term on [0,1) is |I|^{1/2} = 1
    assert haar_mean(H(0, 0, eta=0), D(0, 0)) == pytest.approx(1.0)
    assert haar_mean(H(2, 0, eta=0), D(2, 0)) == pytest.approx(0.5)


@given(cubes1, cubes1)
def test_haar_inner_is_kronecker(I, J):
    v = haar_inner(HaarIndex(I), HaarIndex(J))
    assert v == pytest.approx(1.0 if I == J else 0.0, abs=1e-14)


def test_haar_mean_on_halves():
    J = D(0, 0)
    assert haar_mean(HaarIndex(J), D(-2, 1)) == pytest.approx(1.0)
    assert haar_mean(HaarIndex(J), D(-1, 1)) == pytest.approx(-1.0)


def test_haar_gram_identity_on_truncated_family():
    cubes = truncation_family(3)
    G = haar_gram_1d(cubes)
    E = G - np.eye(len(cubes))
    e = np.max(np.abs(E))
    assert e < 1e-12
    # entries of G x G - I are E_ac + E_bd + E_ac E_bd
    assert 2 * e + e * e < 1e-12


def test_haar_gram_matches_pairwise_inner():
    cubes = [D(l, m) for l in (-2, -1, 0, 1) for m in (-3, 0, 2)]
    G = haar_gram_1d(cubes)
    for a, I in enumerate(cubes):
        for b, J in enumerate(cubes):
            assert G[a, b] == pytest.approx(haar_inner(HaarIndex(I), HaarIndex(J)), abs=1e-15)


def test_haar_eval_riemann_sum():
    # midpoint sum oracle for the L2 norm of a 2-d tensor Haar function
    h = H(-1, 1, -1)
    xs = (np.arange(64) + 0.5) / 64
    x0, y0 = 0.5, -0.5
    vals = [haar_eval(h, (x0 + 0.5 * a, y0 + 0.5 * b)) for a in xs for b in xs]
    assert np.sum(np.square(vals)) * (0.5 / 64) ** 2 == pytest.approx(1.0)


# ---------------------------------------------------------------- truncation

def test_truncation_membership_examples():
    assert truncation_membership(D(0, 0), 1)
    assert not truncation_membership(D(-3, 0), 2)
    assert not truncation_membership(D(0, 10 * 4 * 3), 2)
    with pytest.raises(ValueError):
        truncation_membership(D(0, 0), 0)


def _rd_to_window(I, N):
    # independent rd(I, 2^N [-1/2,1/2)) from floats
    s = 2.0 ** N
    lo, hi = float(I.lower[0]), float(I.upper[0])
    gap = max(0.0, -s / 2 - hi, lo - s / 2)
    return gap / max(s, float(I.edge))


@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_truncation_family_matches_brute_force(N):
    fam = set(truncation_family(N))
    brute = set()
    for l in range(-N, N + 1):
        e = 2.0 ** l
        for m in range(-int(2 ** (2 * N + 2) / e) - 8, int(2 ** (2 * N + 2) / e) + 8):
            I = D(l, m)
            if _rd_to_window(I, N) <= N:
                brute.add(I)
    assert fam == brute
    assert all(truncation_membership(I, N) for I in fam)


def test_truncation_family_sizes():
    assert [len(truncation_family(N)) for N in (1, 2, 3, 4)] == [26, 164, 902, 4616]


def test_tile_covers_window():
    W = Box.centered(4)
    cubes = tile(standard_grid(1), -1, W)
    assert len(cubes) == 8
    assert sum(c.measure for c in cubes) == W.measure


# ---------------------------------------------------------------- families

def test_family_examples():
    J = D(0, 0)
    assert count_family(J, "D^k", k=2) == 4
    assert count_family(J, "J(k,j)", k=1, j=1) == 4
    assert set(enumerate_family(J, "B^k", k=1)) == set(J.children())
    assert enumerate_family(J, "ancestor", k=2) == [D(2, 0)]


def _brute_family(J, mode, k, j=None, m=None):
    lvl = J.level - k
    reach = (j or m or 1) + 4
    span = int(reach * 2 ** k) + 8
    out = []
    for idx in itertools.product(*[range(c * 2 ** k - span, c * 2 ** k + span) for c in J.index]):
        I = DyadicCube(lvl, idx)
        g = cube_geometry(I, J)
        if mode == "J(k,j)" and j <= g.rd < j + 1:
            out.append(I)
        if mode == "J(k,0,m)" and g.rd < 1 and not I.intersects(J) and m <= g.ird < m + 1:
            out.append(I)
    return set(out)


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("k", [0, 1, 2])
def test_family_enumeration_against_scan(n, k):
    J = DyadicCube(1, (1,) * n)
    for j in (1, 2, 3):
        got = set(enumerate_family(J, "J(k,j)", k=k, j=j))
        assert got == _brute_family(J, "J(k,j)", k, j=j)
        assert len(got) == formula_count("J(k,j)", n, k, j=j)
    for m in (1, 2, 3):
        got = set(enumerate_family(J, "J(k,0,m)", k=k, m=m))
        assert got == _brute_family(J, "J(k,0,m)", k, m=m)
        assert len(got) == formula_count("J(k,0,m)", n, k, m=m)


def _skeleton_scan(J, k):
    # B^k by direct distance to the skeleton: faces of the children of J
    planes = [(J.lower[i], J.center[i], J.upper[i]) for i in range(J.dim)]
    bad, good = set(), set()
    for I in enumerate_family(J, "D^k", k=k):
        d = min(max(0, p - I.upper[i], I.lower[i] - p)
                for i in range(J.dim) for p in planes[i])
        (bad if d * d <= I.edge * J.edge else good).add(I)
    return bad, good


@pytest.mark.parametrize("n", [1, 2])
def test_bad_good_split(n):
    J = DyadicCube(0, (0,) * n)
    for k in range(0, 7):
        bad, good = _skeleton_scan(J, k)
        assert set(enumerate_family(J, "B^k", k=k)) == bad
        assert set(enumerate_family(J, "G^k", k=k)) == good
        assert len(bad) == formula_count("B^k", n, k)
        assert count_family(J, "D^k", k=k) == 2 ** (k * n)


# ---------------------------------------------------------------- shifted grids

def test_zero_shift_is_standard_grid():
    assert grid_from_shift({}, 1) is standard_grid(1)
    assert grid_from_shift([0] * 25, 1) is standard_grid(1)


def test_single_shift_moves_unit_cubes_by_half():
    g = grid_from_shift({1: 1}, 1)
    I = DyadicCube(0, (3,), g)
    assert I.lower == (Fraction(7, 2),)


@pytest.mark.parametrize("omega", [{1: 1}, {-2: 1, 0: 1, 3: 1}, {j: (j % 2) for j in range(-6, 7)}])
def test_shifted_grid_nesting(omega):
    g = grid_from_shift(omega, 1)
    for l in range(-4, 5):
        for m in range(-6, 7):
            I = DyadicCube(l, (m,), g)
            parents = [DyadicCube(l + 1, (p,), g) for p in range(m // 2 - 3, m // 2 + 4)]
            hosts = [P for P in parents if P.box.contains_box(I.box)]
            assert hosts == [I.parent()]


def test_shift_validation():
    with pytest.raises(ValueError):
        grid_from_shift({40: 1}, 1)
    with pytest.raises(ValueError):
        grid_from_shift({1: (1, 2)}, 2)
