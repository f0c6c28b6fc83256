import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadic_t1.analysis import (HaarCoeffVector, PiecewiseGrid, TruncatedOperator,
                                assemble_operator, bmo_norm, cmo_tail, compactness_curve,
                                curve_csv_text, expand, galerkin_matrix_1d, limiting_predicates,
                                mdt_check, paraproduct_apply, paraproduct_operator, project,
                                spectral_norm)
from dyadic_t1.coeffs import PairKey, matrix_element
from dyadic_t1.grid import HaarIndex, haar_eval, truncation_family, truncation_membership
from dyadic_t1.kernels import BoundFunctionals, Factor, FuncTriple, PartialBound, builtin_kernel
from dyadic_t1.quad import QuadSpec

from conftest import D, H

FAM3 = [HaarIndex(c) for c in truncation_family(3)]


def random_sparse(rng, n_terms, fam=FAM3, rank=2):
    data = {}
    for _ in range(n_terms):
        key = tuple(fam[int(rng.integers(len(fam)))] for _ in range(rank))
        data[key] = rng.standard_normal()
    return HaarCoeffVector(data, rank)


def far_sparse(rng, n_terms):
    # mix of keys inside and outside D(1) products
    near = [HaarIndex(c) for c in truncation_family(1)]
    far = [H(l, m) for l in (-4, -3, 3, 4) for m in (-40, -1, 0, 7, 200)]
    pool = near + far
    return random_sparse(rng, n_terms, pool)


# ---------------------------------------------------------------- coefficient vectors

def test_vector_algebra_and_round_trip():
    a = HaarCoeffVector({(H(0, 0), H(1, 0)): 2.0, (H(0, 1), H(0, 0)): 0.0})
    assert len(a) == 1
    b = HaarCoeffVector.unit((H(0, 0), H(1, 0)))
    assert (a - 2 * b).norm() == 0.0
    assert a.dot(b) == 2.0
    assert HaarCoeffVector.from_dict(a.to_dict()).items() == a.items()
    with pytest.raises(ValueError):
        HaarCoeffVector({(H(0, 0),): 1.0})
    with pytest.raises(ValueError):
        HaarCoeffVector({(H(0, 0), H(0, 0)): math.nan})


# ---------------------------------------------------------------- expand

def test_expand_basis_function_is_unit_vector():
    key = (H(-1, 1), H(0, -1))
    v = expand(key, 2)
    assert v.items() == [(key, 1.0)]
    assert len(expand((H(-6, 0), H(0, 0)), 2)) == 0


def test_expand_indicator_of_unit_square():
    v = expand((D(0, 0), D(0, 0)), 2)
    unit = D(0, 0)
    assert len(v) > 0
    for key, _ in v.items():
        assert not any(unit.contains(h.cube) for h in key)
    # cubes that contain [0,1) see half a Haar step: coefficient |I|^(-1/2) each
    key = (H(1, 0), H(1, 0))
    assert v[key] == pytest.approx(0.5, rel=1e-15)


def test_expand_random_piecewise_parseval(rng):
    N = 2
    side = 2 ** N
    edges = np.arange(0, side * 4 + 1) / 4.0
    vals = np.zeros((edges.size - 1, edges.size - 1))
    vals[:4, :4] = rng.standard_normal((4, 4))
    f = PiecewiseGrid(edges, edges, vals)
    v = expand(f, N)
    # oracle: remove the averages over [0, 2^N) in each variable
    g = vals - vals.mean(axis=0, keepdims=True) - vals.mean(axis=1, keepdims=True) + vals.mean()
    want = math.sqrt(float(np.sum(g * g)) / 16)
    assert v.norm() == pytest.approx(want, rel=1e-12)
    assert v.norm() < f.l2_norm()


def test_expand_rejects_unbounded_factor():
    from dyadic_t1.quad import PiecewiseConstant
    with pytest.raises(ValueError, match="unbounded"):
        expand((PiecewiseConstant.one(), D(0, 0)), 1)


# ---------------------------------------------------------------- project

def test_project_of_supported_vector():
    v = random_sparse(np.random.default_rng(1), 30, [HaarIndex(c) for c in truncation_family(1)])
    assert len(project(v, 1, "perp")) == 0
    assert project(v, 1).items() == v.items()


def test_project_partition_and_parseval(rng):
    for _ in range(100):
        v = far_sparse(rng, int(rng.integers(1, 40)))
        p, q = project(v, 1), project(v, 1, "perp")
        assert (p + q - v).norm() == 0.0
        assert not set(p.keys()) & set(q.keys())
        lhs = p.norm() ** 2 + q.norm() ** 2
        assert lhs == pytest.approx(v.norm() ** 2, rel=1e-12)


# ---------------------------------------------------------------- paraproducts

def test_paraproduct_of_its_own_basis_function_vanishes():
    R = (H(0, 0), H(-1, 1))
    b = HaarCoeffVector.unit(R)
    assert len(paraproduct_apply(b, HaarCoeffVector.unit(R), "pi")) == 0


def test_paraproduct_unit_average():
    R = (H(0, 0), H(-1, 1))
    b = HaarCoeffVector({R: -3.5})
    W = H(3, 0, eta=0)
    # 1 on [0,8)^2 is |W| times the father product
    f = HaarCoeffVector({(W, W): 8.0})
    out = paraproduct_apply(b, f, "pi")
    assert out.items() == [(R, pytest.approx(-3.5, rel=1e-15))]


def test_paraproduct_undetermined_average_raises():
    b = HaarCoeffVector.unit((H(2, 0), H(2, 0)))
    f = HaarCoeffVector.unit((H(0, 0, eta=0), H(0, 0, eta=0)))
    with pytest.raises(ValueError, match="not determined"):
        paraproduct_apply(b, f, "pi")


def _avg_oracle(f, R):
    # average over R of a sum of cancellative Haar products by point evaluation
    centre = tuple(float(c.lower[0] + c.edge / 2) for c in R)
    total = 0.0
    for key, v in f.items():
        if all(S.cube.contains(c) and S.cube != c for S, c in zip(key, R)):
            total += v * math.prod(haar_eval(S, (x,)) for S, x in zip(key, centre))
    return total


def test_paraproduct_duality(rng):
    fam = [HaarIndex(c) for c in truncation_family(2)]
    for _ in range(10):
        b, f, g = (random_sparse(rng, 25, fam) for _ in range(3))
        f = HaarCoeffVector(f.data, 2, 2)
        lhs = paraproduct_apply(b, f, "pi").dot(g)
        rhs = f.dot(paraproduct_apply(b, g, "pi_star", N=2))
        oracle = math.fsum(bR * g[R] * _avg_oracle(f, tuple(h.cube for h in R))
                           for R, bR in b.items())
        assert lhs == pytest.approx(rhs, abs=1e-10)
        assert lhs == pytest.approx(oracle, abs=1e-10)


def test_one_parameter_duality(rng):
    fam = [HaarIndex(c) for c in truncation_family(3)]
    for _ in range(10):
        b, f, g = (random_sparse(rng, 15, fam, rank=1) for _ in range(3))
        lhs = paraproduct_apply(b, f, "pi1").dot(g)
        rhs = f.dot(paraproduct_apply(b, g, "pi1_star", N=3))
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_paraproduct_operator_matches_apply(rng):
    fam = [HaarIndex(c) for c in truncation_family(2)]
    b = random_sparse(rng, 10, fam)
    A = paraproduct_operator(b, 2)
    for _ in range(5):
        f = HaarCoeffVector({S: rng.standard_normal() for S in A.cols}, 2, 2)
        x = np.array([f[S] for S in A.cols])
        out = paraproduct_apply(b, f, "pi")
        assert np.allclose(A.matrix @ x, [out[R] for R in A.rows], atol=1e-12)


def test_paraproduct_rejects_bad_variant():
    b = HaarCoeffVector.unit((H(0, 0), H(0, 0)))
    with pytest.raises(ValueError):
        paraproduct_apply(b, b, "sigma")
    with pytest.raises(ValueError):
        paraproduct_apply(b, b, "pi_star")


# ---------------------------------------------------------------- BMO

def test_bmo_single_term():
    rep = bmo_norm(HaarCoeffVector.unit((H(0, 0), H(0, 3))))
    assert rep.norm == pytest.approx(1.0, rel=1e-15)
    assert rep.attaining == ["g:0/L0/(0) x g:0/L0/(3)"]


@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-6))
def test_bmo_homogeneity(c):
    b = HaarCoeffVector({(H(0, 0), H(0, 0)): 1.0, (H(-1, 1), H(-2, 0)): -0.7,
                         (H(2, 0), H(-1, 5)): 2.0})
    assert bmo_norm(b * c).norm == pytest.approx(abs(c) * bmo_norm(b).norm, rel=1e-12)


def test_bmo_nested_against_brute_force():
    b = HaarCoeffVector({(H(0, 0), H(0, 0)): 1.0, (H(-2, 1), H(-1, 0)): 3.0})
    cubes = truncation_family(3)
    supp = [(tuple(h.cube for h in k), v * v) for k, v in b.items()]
    # containment tables over every cube of D(3) in each parameter
    C1 = np.array([[A.contains(c[0]) for c, _ in supp] for A in cubes], dtype=float)
    C2 = np.array([[B.contains(c[1]) for c, _ in supp] for B in cubes], dtype=float)
    w = np.array([x for _, x in supp])
    edge = np.array([float(A.edge) for A in cubes])
    brute = float(np.max((C1 * w) @ C2.T / np.outer(edge, edge)))
    rep = bmo_norm(b, "truncated", N=3, max_union=1)
    assert rep.norm == pytest.approx(math.sqrt(brute), rel=1e-14)
    assert bmo_norm(b, "truncated", N=3).norm >= rep.norm


def test_bmo_empty_and_explicit_families():
    assert bmo_norm(HaarCoeffVector.zeros()).norm == 0.0
    b = HaarCoeffVector.unit((H(0, 0), H(0, 0)))
    with pytest.raises(ValueError):
        bmo_norm(b, family=[])
    with pytest.raises(ValueError):
        bmo_norm(b, "truncated")
    # the union of [0,1)^2 and [1,2)x[0,1) halves the score
    rep = bmo_norm(b, family=[[(D(0, 0), D(0, 0)), (D(0, 1), D(0, 0))]])
    assert rep.norm == pytest.approx(math.sqrt(0.5), rel=1e-15)


def test_cmo_tail_of_supported_symbol():
    b = HaarCoeffVector({(H(0, 0), H(1, -1)): 1.0, (H(-1, 0), H(0, 0)): 2.0})
    assert all(truncation_membership(h.cube, 1) for k in b for h in k)
    rep = cmo_tail(b, (1, 2, 3))
    assert rep.tails == {1: 0.0, 2: 0.0, 3: 0.0}


def test_cmo_tail_of_far_term():
    b = HaarCoeffVector.unit((H(0, 0), H(-3, 0)))
    rep = cmo_tail(b, (1, 2, 3))
    assert rep.norm == pytest.approx(math.sqrt(8))
    assert rep.tails[1] == rep.tails[2] == rep.norm
    assert rep.tails[3] == 0.0


def test_cmo_tail_geometric_decay():
    K = 7
    b = HaarCoeffVector({(H(-k, 0), H(-k, 0)): 2.0 ** -k for k in range(K + 1)})
    rep = cmo_tail(b, (1, 2, 3, 4))
    # nested chain I_k x I_k: best test set is the largest rectangle left in the tail
    for N in (1, 2, 3, 4):
        scores = [sum(4.0 ** -k for k in range(j, K + 1)) / 4.0 ** -j for j in range(N + 1, K + 1)]
        assert rep.tails[N] == pytest.approx(math.sqrt(max(scores)), rel=1e-12)
    assert rep.norm == pytest.approx(math.sqrt(4 / 3 * (1 - 4.0 ** -(K + 1))), rel=1e-12)
    assert "N,tail_norm" in rep.to_csv_text()


# ---------------------------------------------------------------- operators

def test_assemble_zero_kernel():
    A = assemble_operator(None, 1, builtin_kernel("zero"))
    assert A.shape == (26 * 26, 26 * 26)
    assert not A.matrix.any()


def test_assemble_separable_is_kronecker(rng):
    K = builtin_kernel("compact_model")
    spec = QuadSpec(tol=1e-11)
    A = assemble_operator(None, 1, K, spec=spec)
    n = len(truncation_family(1))
    assert A.shape == (n * n, n * n)
    assert A.rows == A.cols
    assert np.all(np.isfinite(A.matrix))
    for _ in range(30):
        r, c = (int(x) for x in rng.integers(n * n, size=2))
        J1, J2 = A.rows[r]
        I1, I2 = A.cols[c]
        want = matrix_element(PairKey.make(I1, I2, J1, J2), K, spec)
        assert A.matrix[r, c] == pytest.approx(want.value, abs=max(10 * want.err_est, 1e-12))


def test_assemble_missing_entries_need_kernel():
    from dyadic_t1.coeffs import CoeffTable
    with pytest.raises(ValueError):
        assemble_operator(CoeffTable(), 1)


def test_operator_triplets_round_trip(tmp_path, rng):
    keys = [(H(0, 0), H(0, 1)), (H(-1, 0), H(0, 0)), (H(1, -1), H(2, 0))]
    M = rng.standard_normal((3, 3))
    M[1, 2] = 0.0
    op = TruncatedOperator(keys, keys, M, source="fixture")
    p = tmp_path / "op.txt"
    op.save(str(p))
    back = TruncatedOperator.load(str(p), keys, keys)
    assert np.array_equal(back.matrix, M)
    assert back.source == "fixture"
    assert op.outside_rows(1).rows == [keys[2]]


def test_spectral_norm_identity_and_rank_one(rng):
    assert spectral_norm(np.eye(7)).value == pytest.approx(1.0, rel=1e-14)
    u, v = rng.standard_normal(9), rng.standard_normal(5)
    r = spectral_norm(np.outer(u, v))
    assert r.value == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)
    assert r.converged
    assert spectral_norm(np.zeros((0, 3))).value == 0.0


def test_spectral_norm_against_svd(rng):
    A = rng.standard_normal((20, 20))
    r = spectral_norm(A)
    assert r.converged
    assert float(r) == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-8)


# ---------------------------------------------------------------- compactness

FAM20 = [c for c in truncation_family(2) if abs(float(c.lower[0])) < 3][:20]


@pytest.mark.parametrize("name", ["compact_model", "tensor_hilbert"])
def test_masked_row_identity(name):
    K = builtin_kernel(name)
    pts = compactness_curve(K, (1,), M=2, family=FAM20, bracket_tol=0)
    A1 = galerkin_matrix_1d(K.factors[0], FAM20)
    A2 = galerkin_matrix_1d(K.factors[1], FAM20)
    keys = [(HaarIndex(a), HaarIndex(b)) for a in FAM20 for b in FAM20]
    T = TruncatedOperator(keys, keys, np.kron(A1, A2))
    dense = spectral_norm(T.outside_rows(1), tol=1e-15, max_iter=200000)
    assert pts[0].sigma == pytest.approx(dense.value, rel=1e-12)
    assert pts[0].lower <= pts[0].sigma <= pts[0].upper


def test_compactness_zero_kernel_and_full_mask():
    pts = compactness_curve(builtin_kernel("zero"), (1, 2), M=2, family=FAM20)
    assert [p.sigma for p in pts] == [0.0, 0.0]
    pts = compactness_curve(builtin_kernel("compact_model"), (1, 2), M=2)
    assert pts[-1].sigma == 0.0
    assert pts[0].sigma > 0.0
    text = curve_csv_text(pts, {"seed": 0}, "compact_model")
    assert text.splitlines()[1] == "kernel,N,sigma,sigma_ratio"


def test_compactness_schedule_beyond_M():
    with pytest.raises(ValueError):
        compactness_curve(builtin_kernel("compact_model"), (3,), M=2)


def test_galerkin_matches_adaptive_pairings():
    cubes = [D(-1, 0), D(-1, 3), D(0, 2), D(1, -1)]
    fam = [HaarIndex(c) for c in cubes]
    for f in (Factor.hilbert(), Factor.compact()):
        G = galerkin_matrix_1d(f, cubes, order=12)
        from dyadic_t1.quad import pair_integral_1d
        for j, J in enumerate(fam):
            for i, I in enumerate(fam):
                want = pair_integral_1d(f, I, J, QuadSpec(tol=1e-12)).value
                assert G[j, i] == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------- predicates and MDT

def test_predicates_trivial_for_zero_functionals():
    zero = BoundFunctionals(FuncTriple.constant(0.0, form="p5"), PartialBound.constant(0.0))
    rep = limiting_predicates(zero, schedule=(1, 2, 3))
    assert rep.holds["a"] == [True, True, True]
    assert rep.holds["b"] == [True, True, True]
    assert rep.holds["d"] == [True, True, True]


def test_predicate_c_integer_oracle():
    rep = limiting_predicates(builtin_kernel("compact_model").functionals(0, improved=False),
                              schedule=(1, 2, 3, 4))
    assert all(rep.holds["c"])
    # integer check: a cube of D(N) has level >= -N; J outside D(2N) with l(J) = 2^(-2N-1)
    for N in (1, 2, 3, 4):
        for lev in range(-N, N + 1):
            assert abs((-2 * N - 1) - lev) >= N


def test_mdt_examples():
    assert mdt_check(0, 0.5, 0.4)[0] == 1.0
    lhs, rhs = mdt_check(4, 0.5, 0.4)
    assert lhs == pytest.approx(math.fsum(1 / m for m in range(1, 17)) / 16, rel=1e-15)
    assert rhs == pytest.approx(2 ** -1.6)
    vals = [mdt_check(6, d, 0.1)[0] for d in (0.1, 0.25, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        mdt_check(3, 0.5, 0.5)
