"""Quadrature of kernel factors against piecewise-constant test functions.

Haar functions, indicators, bumps and the phi-splittings are all piecewise
constant on finitely many intervals (outer pieces may be unbounded), so a
pairing reduces to a sum over rectangles.  The Hilbert factor uses the
double antiderivative ``G(t) = t log|t| - t`` in closed form; every other
factor goes through a global adaptive tensor Gauss-Legendre rule with
refinement graded toward singular corners.

Tolerances are relative: a result is *converged* when ``err_est <=
tol_q * scale`` where ``scale`` is the quadrature estimate of the integral
of the absolute integrand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import DyadicCube, HaarIndex, cube_geometry, distance, haar_mean
from .kernels import (BoundFunctionals, Factor, FuncTriple, KernelModel, factor_base,
                      factor_sign)

__all__ = ["QuadSpec", "IntegralResult", "PiecewiseConstant", "adapt2d", "pair_integral_1d",
           "pair_integral", "quantity", "quantity_bound", "diag_lemma_check", "QUANTITIES"]


@dataclass(frozen=True)
class QuadSpec:
    order: int = 8
    depth: int = 12
    tol: float = 1e-9
    grading: float = 0.5
    max_leaves: int = 200_000

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("quadrature order must be >= 2")
        if self.depth < 1:
            raise ValueError("refinement depth must be >= 1")
        if not (0 < self.grading <= 0.5):
            raise ValueError("grading ratio must lie in (0, 1/2]")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")

    def deeper(self, depth: int) -> "QuadSpec":
        return QuadSpec(self.order, max(self.depth, depth), self.tol, self.grading,
                        self.max_leaves)


DEFAULT_SPEC = QuadSpec()


@dataclass
class IntegralResult:
    value: float
    err_est: float
    n_evals: int
    converged: bool
    scale: float = 0.0
    radius: float | None = None
    parts: dict = field(default_factory=dict)

    def __add__(self, other: "IntegralResult") -> "IntegralResult":
        return IntegralResult(math.fsum([self.value, other.value]),
                              self.err_est + other.err_est, self.n_evals + other.n_evals,
                              self.converged and other.converged, self.scale + other.scale,
                              _max_radius(self.radius, other.radius))

    def scaled(self, c: float) -> "IntegralResult":
        c = float(c)
        return IntegralResult(self.value * c, self.err_est * abs(c), self.n_evals, self.converged,
                              self.scale * abs(c), self.radius, dict(self.parts))


def _max_radius(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


def _zero_result():
    return IntegralResult(0.0, 0.0, 0, True, 0.0)


def _product(results, tol):
    vals = [r.value for r in results]
    value = float(np.prod(vals))
    err = 0.0
    for i, r in enumerate(results):
        others = np.prod([abs(v) for j, v in enumerate(vals) if j != i])
        err += r.err_est * others
    err += float(np.prod([r.err_est for r in results]))
    scale = float(np.prod([max(r.scale, abs(r.value)) for r in results]))
    conv = all(r.converged for r in results)
    return IntegralResult(value, err, sum(r.n_evals for r in results), conv, scale,
                          max((r.radius for r in results if r.radius is not None), default=None))


# ---------------------------------------------------------------- test functions

@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """f = values[k] on [breaks[k], breaks[k+1]); the ends may be infinite."""

    breaks: tuple
    values: tuple

    def __post_init__(self):
        b = tuple(float(x) for x in self.breaks)
        v = tuple(float(x) for x in self.values)
        if len(b) != len(v) + 1:
            raise ValueError("need one more break than values")
        if any(b[i + 1] <= b[i] for i in range(len(v))):
            raise ValueError("breaks must increase")
        if any(math.isinf(x) for x in b[1:-1]):
            raise ValueError("only the outer breaks may be infinite")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def indicator(cls, I: DyadicCube):
        return cls((float(I.lower[0]), float(I.upper[0])), (1.0,))

    @classmethod
    def bump(cls, I: DyadicCube):
        lo, hi = float(I.lower[0]), float(I.upper[0])
        return cls((lo, (lo + hi) / 2, hi), (1.0, -1.0))

    @classmethod
    def haar(cls, h):
        if isinstance(h, DyadicCube):
            h = HaarIndex(h)
        I = h.cube
        if I.dim != 1:
            raise ValueError("one-dimensional Haar functions only")
        c = 2.0 ** (-I.level / 2)
        if h.eta[0]:
            return cls.bump(I).scale(c)
        return cls.indicator(I).scale(c)

    @classmethod
    def one(cls):
        return cls((-math.inf, math.inf), (1.0,))

    @classmethod
    def phi(cls, I: DyadicCube, J: DyadicCube, eta=1):
        """(h_J - <h_J>_I) 1_{J_I^c} for I strictly inside J."""
        if not (J.contains(I) and I != J):
            raise ValueError("phi needs I strictly inside J")
        hJ = HaarIndex(J, (eta,))
        m = haar_mean(hJ, I)
        lo, hi = float(J.lower[0]), float(J.upper[0])
        mid = (lo + hi) / 2
        h = cls.haar(hJ)
        left_half = float(I.lower[0]) < mid
        if left_half:
            sib = h.values[-1] if eta else h.values[0]
            return cls((-math.inf, lo, mid, hi, math.inf), (-m, 0.0, sib - m, -m))
        sib = h.values[0]
        return cls((-math.inf, lo, mid, hi, math.inf), (-m, sib - m, 0.0, -m))

    def scale(self, c: float) -> "PiecewiseConstant":
        return PiecewiseConstant(self.breaks, tuple(c * v for v in self.values))

    def pieces(self):
        return [(self.breaks[k], self.breaks[k + 1], v)
                for k, v in enumerate(self.values) if v != 0.0]

    @property
    def bounded_support(self) -> bool:
        return all(math.isfinite(a) and math.isfinite(b) for a, b, _ in self.pieces())

    def mass(self) -> float:
        if not self.bounded_support:
            raise ValueError("mass of an unbounded piecewise function")
        return math.fsum(v * (b - a) for a, b, v in self.pieces())

    @property
    def sup(self) -> float:
        return max((abs(v) for v in self.values), default=0.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        i = np.searchsorted(np.asarray(self.breaks), x, side="right") - 1
        vals = np.concatenate([[0.0], self.values, [0.0]])
        return vals[np.clip(i + 1, 0, len(self.values) + 1)]


def as_piecewise(f) -> PiecewiseConstant:
    if isinstance(f, PiecewiseConstant):
        return f
    if isinstance(f, HaarIndex):
        return PiecewiseConstant.haar(f)
    if isinstance(f, DyadicCube):
        return PiecewiseConstant.indicator(f)
    raise TypeError(f"cannot use {type(f).__name__} as a test function")


# ---------------------------------------------------------------- adaptive 2-d rule

@lru_cache(maxsize=16)
def _unit_rule(p: int):
    x, w = np.polynomial.legendre.leggauss(p)
    return (x + 1) / 2, w / 2


def _rule(func, x0, x1, y0, y1, p):
    """Tensor rule on a batch of cells: (integral, integral of |f|)."""
    u, w = _unit_rule(p)
    hx, hy = x1 - x0, y1 - y0
    X = x0[:, None, None] + hx[:, None, None] * u[None, :, None]
    Y = y0[:, None, None] + hy[:, None, None] * u[None, None, :]
    F = func(X, Y)
    W = w[:, None] * w[None, :]
    area = hx * hy
    q = np.einsum("cij,ij->c", F, W) * area
    a = np.einsum("cij,ij->c", np.abs(F), W) * area
    return q, a


def _split_points(lo, hi, sing, sigma):
    mid = (lo + hi) / 2
    if sing is None or sigma == 0.5:
        return mid
    w = hi - lo
    out = mid.copy()
    at_lo = lo == sing
    at_hi = hi == sing
    out[at_lo] = lo[at_lo] + sigma * w[at_lo]
    out[at_hi] = hi[at_hi] - sigma * w[at_hi]
    return out


def _children(x0, x1, y0, y1, sing, sigma):
    sx = sy = None
    if sing is not None:
        sx, sy = sing
    xm = _split_points(x0, x1, sx, sigma)
    ym = _split_points(y0, y1, sy, sigma)
    cx0 = np.concatenate([x0, xm, x0, xm])
    cx1 = np.concatenate([xm, x1, xm, x1])
    cy0 = np.concatenate([y0, y0, ym, ym])
    cy1 = np.concatenate([ym, ym, y1, y1])
    return cx0, cx1, cy0, cy1


def _leaf_data(func, x0, x1, y0, y1, p, sing, sigma):
    n = x0.size
    q, _ = _rule(func, x0, x1, y0, y1, p)
    cx0, cx1, cy0, cy1 = _children(x0, x1, y0, y1, sing, sigma)
    cq, ca = _rule(func, cx0, cx1, cy0, cy1, p)
    v = cq.reshape(4, n).sum(axis=0)
    a = ca.reshape(4, n).sum(axis=0)
    return v, a, np.abs(q - v), 5 * n * p * p


def adapt2d(func, x_range, y_range, spec: QuadSpec = DEFAULT_SPEC, sing=None) -> IntegralResult:
    """Integrate func(x, y) over a rectangle.

    Each leaf carries the 4-child estimate and its difference from the
    single-cell rule as error estimate.  Leaves with error above the mean
    share of the target are split until the total meets ``tol * scale`` or
    all offending leaves sit at the depth cap.  ``sing`` is an optional
    singular corner (x*, y*) toward which splits are graded.
    """
    p, sigma = spec.order, spec.grading
    x0 = np.array([float(x_range[0])])
    x1 = np.array([float(x_range[1])])
    y0 = np.array([float(y_range[0])])
    y1 = np.array([float(y_range[1])])
    if not (x1[0] > x0[0] and y1[0] > y0[0]):
        return _zero_result()
    depth = np.zeros(1, dtype=int)
    v, a, err, nev = _leaf_data(func, x0, x1, y0, y1, p, sing, sigma)
    converged = False
    while True:
        total = math.fsum(err)
        scale = math.fsum(a)
        target = spec.tol * scale
        if total <= target:
            converged = True
            break
        share = target / err.size
        pick = (err > share) & (depth < spec.depth)
        if not pick.any() or err.size + 3 * int(pick.sum()) > spec.max_leaves:
            break
        keep = ~pick
        cx0, cx1, cy0, cy1 = _children(x0[pick], x1[pick], y0[pick], y1[pick], sing, sigma)
        cd = np.tile(depth[pick] + 1, 4)
        nv, na, ne, k = _leaf_data(func, cx0, cx1, cy0, cy1, p, sing, sigma)
        nev += k
        x0 = np.concatenate([x0[keep], cx0])
        x1 = np.concatenate([x1[keep], cx1])
        y0 = np.concatenate([y0[keep], cy0])
        y1 = np.concatenate([y1[keep], cy1])
        depth = np.concatenate([depth[keep], cd])
        v = np.concatenate([v[keep], nv])
        a = np.concatenate([a[keep], na])
        err = np.concatenate([err[keep], ne])
    return IntegralResult(math.fsum(v), math.fsum(err), nev, converged, math.fsum(a))


# ---------------------------------------------------------------- 1-parameter pairings

def _G(t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = t * np.log(np.abs(t)) - t
    return np.where(t == 0, 0.0, out)


def _hilbert_rect(c, d, a, b):
    """Terms of the p.v. integral of 1/(x-y), x in [c,d], y in [a,b]; infinite ends dropped."""
    terms = []
    for x, sx in ((d, 1.0), (c, -1.0)):
        for y, sy in ((a, 1.0), (b, -1.0)):
            if math.isfinite(x) and math.isfinite(y):
                terms.append(sx * sy * float(_G(x - y)))
    return terms


def _separated(c, d, a, b, factor=4.0):
    if not all(math.isfinite(z) for z in (a, b, c, d)):
        return False
    gap = max(c - b, a - d)
    return gap > factor * max(d - c, b - a)


def _hilbert_pairing(f: PiecewiseConstant, g: PiecewiseConstant, sign: float) -> IntegralResult:
    fp, gp = f.pieces(), g.pieces()
    f_inf = not f.bounded_support
    g_inf = not g.bounded_support
    if f_inf and g_inf:
        raise ValueError("Hilbert pairing of two unbounded test functions diverges")
    if g_inf and abs(f.mass()) > 1e-15 * max(f.sup, 1.0) * sum(b - a for a, b, _ in fp):
        raise ValueError("Hilbert pairing with an unbounded piece needs a mean-zero partner")
    if f_inf and abs(g.mass()) > 1e-15 * max(g.sup, 1.0) * sum(b - a for a, b, _ in gp):
        raise ValueError("Hilbert pairing with an unbounded piece needs a mean-zero partner")
    terms, absum, nev = [], 0.0, 0
    u, w = _unit_rule(16)
    for a, b, fv in fp:
        for c, d, gv in gp:
            wgt = sign * fv * gv
            if _separated(c, d, a, b):
                X = c + (d - c) * u
                Y = a + (b - a) * u
                F = 1.0 / (X[:, None] - Y[None, :])
                val = float(w @ F @ w) * (d - c) * (b - a)
                terms.append(wgt * val)
                absum += abs(wgt * val)
                nev += 256
            else:
                t = _hilbert_rect(c, d, a, b)
                terms.extend(wgt * x for x in t)
                absum += sum(abs(wgt * x) for x in t)
                nev += 4
    value = math.fsum(terms)
    err = 64 * np.finfo(float).eps * absum
    return IntegralResult(value, err, nev, True, absum)


def _window(factor: Factor, a, b):
    base = factor_base(factor)
    if base.family == "compact":
        p, q, sig = base.params
        V = 2.0 * sig * math.sqrt(46.0 * math.log(10.0))
        return -b - V, -a + V
    if base.tail is not None:
        R = base.tail(a, b, 1e-20)
        return -R, R
    return -math.inf, math.inf


def _overlap_split(c, d, a, b):
    """Split x-piece [c,d] and y-piece [a,b] on their common breakpoints."""
    pts = sorted({c, d, a, b})
    xs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1) if c <= pts[i] and pts[i + 1] <= d]
    ys = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1) if a <= pts[i] and pts[i + 1] <= b]
    return xs, ys


def _rect_integral(factor: Factor, c, d, a, b, spec, allow_overlap: bool):
    """Integral of factor(x, y) over x in [c,d], y in [a,b] (finite after windowing)."""
    lo, hi = _window(factor, a, b)
    c2, d2 = max(c, lo), min(d, hi)
    if not (math.isfinite(c2) and math.isfinite(d2)):
        raise ValueError(f"{factor.family} factor has no decay model for an unbounded piece")
    if d2 <= c2:
        return _zero_result(), c2 != c or d2 != d
    truncated = (c2 != c) or (d2 != d)
    overlap = min(d2, b) - max(c2, a) > 0
    if not factor.singular or not overlap:
        sing = None
        if factor.singular:
            if d2 == a:
                sing = (a, a)
            elif c2 == b:
                sing = (b, b)
        return adapt2d(factor, (c2, d2), (a, b), spec, sing), truncated
    if not allow_overlap:
        raise ValueError("overlapping supports need an odd factor")
    xs, ys = _overlap_split(c2, d2, a, b)
    res = _zero_result()
    for x0, x1 in xs:
        for y0, y1 in ys:
            if x0 == y0 and x1 == y1:
                continue  # antisymmetric cell: principal value 0
            sing = None
            if x1 == y0:
                sing = (y0, y0)
            elif x0 == y1:
                sing = (y1, y1)
            res = res + adapt2d(factor, (x0, x1), (y0, y1), spec, sing)
    return res, truncated


def pair_integral_1d(factor: Factor, f, g, spec: QuadSpec | None = None) -> IntegralResult:
    """int int k(x, y) f(y) g(x) dx dy for one-dimensional test functions."""
    spec = spec or DEFAULT_SPEC
    f, g = as_piecewise(f), as_piecewise(g)
    base = factor_base(factor)
    if base.family == "zero":
        return _zero_result()
    if base.family == "hilbert":
        return _hilbert_pairing(f, g, factor_sign(factor))
    allow = bool(factor.odd)
    res = _zero_result()
    radius = None
    for a, b, fv in f.pieces():
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError("the y-side test function must have bounded support")
        for c, d, gv in g.pieces():
            r, trunc = _rect_integral(factor, c, d, a, b, spec, allow)
            res = res + r.scaled(fv * gv)
            if trunc:
                lo, hi = _window(factor, a, b)
                radius = _max_radius(radius, max(abs(lo), abs(hi)))
    res.radius = radius
    res.converged = res.err_est <= spec.tol * res.scale
    return res


def _fourd(K: KernelModel, f, g, spec: QuadSpec) -> IntegralResult:
    """Direct tensor quadrature of a non-separable kernel on separated pieces."""
    p = spec.order
    u, w = _unit_rule(p)
    terms, errs, absum, nev = [], [], 0.0, 0
    for a1, b1, f1 in f[0].pieces():
        for a2, b2, f2 in f[1].pieces():
            for c1, d1, g1 in g[0].pieces():
                for c2, d2, g2 in g[1].pieces():
                    boxes = [(c1, d1), (c2, d2), (a1, b1), (a2, b2)]
                    if not all(math.isfinite(z) for bx in boxes for z in bx):
                        raise ValueError("non-separable kernels need bounded test functions")
                    if max(c1, a1) < min(d1, b1) or max(c2, a2) < min(d2, b2) or \
                            c1 == b1 or d1 == a1 or c2 == b2 or d2 == a2:
                        raise ValueError("non-separable kernels need separated supports")
                    prev = None
                    for level in range(6):
                        val, aval = _tensor4(K, boxes, u, w, 2 ** level)
                        nev += (p * 2 ** level) ** 4
                        if prev is not None and abs(val - prev) <= spec.tol * aval:
                            break
                        prev = val
                    wgt = f1 * f2 * g1 * g2
                    terms.append(wgt * val)
                    errs.append(abs(wgt) * abs(val - prev) if prev is not None else 0.0)
                    absum += abs(wgt) * aval
    err = math.fsum(errs)
    return IntegralResult(math.fsum(terms), err, nev, err <= spec.tol * absum, absum)


def _tensor4(K, boxes, u, w, m):
    pts, wts = [], []
    for lo, hi in boxes:
        h = (hi - lo) / m
        starts = lo + h * np.arange(m)
        pts.append((starts[:, None] + h * u[None, :]).ravel())
        wts.append(np.tile(w * h, m))
    X1, X2, Y1, Y2 = np.meshgrid(*pts, indexing="ij", sparse=True)
    F = np.asarray(K.full(X1, X2, Y1, Y2), dtype=float)
    W = wts[0][:, None, None, None] * wts[1][None, :, None, None] \
        * wts[2][None, None, :, None] * wts[3][None, None, None, :]
    return float(np.sum(F * W)), float(np.sum(np.abs(F) * W))


def pair_integral(K: KernelModel, f_left, f_right, spec: QuadSpec | None = None) -> IntegralResult:
    """<T(f1 x f2), g1 x g2> for a bi-parameter kernel.

    ``f_left = (f1, f2)`` act in y, ``f_right = (g1, g2)`` in x; entries may
    be PiecewiseConstant, HaarIndex (the Haar function) or DyadicCube (the
    indicator).  Separable models factor exactly into two 1-d pairings.
    """
    spec = spec or DEFAULT_SPEC
    f = tuple(as_piecewise(x) for x in f_left)
    g = tuple(as_piecewise(x) for x in f_right)
    if K.separable:
        parts = [pair_integral_1d(K.factors[i], f[i], g[i], spec) for i in range(2)]
        out = _product(parts, spec.tol)
        out.parts = {"factor1": parts[0], "factor2": parts[1]}
        return out
    return _fourd(K, f, g, spec)


# ---------------------------------------------------------------- Lemma-type quantities

QUANTITIES = ("P", "Q", "QIJ", "R", "RIJ")


def _F_form(T: FuncTriple, form: str, cI: float):
    def F(x, y):
        r = np.abs(x - y)
        tau = 1.0 + np.abs(x + y) / (1.0 + r)
        first = np.abs(y - cI) if form == "FF1" else r
        return T.F1(first) * T.F2(r) * T.F3(tau)
    return F


def _interval(I):
    return float(I.lower[0]), float(I.upper[0])


def _check_1d(*cubes):
    for c in cubes:
        if c is not None and c.dim != 1:
            raise ValueError("quantities are implemented for one-dimensional cubes")


def quantity(which: str, I: DyadicCube, J: DyadicCube | None, triple: FuncTriple,
             delta: float = 1.0, spec: QuadSpec | None = None) -> IntegralResult:
    """Numerical value of one of the integral quantities P, Q, QIJ, R, RIJ.

    P    int_I int_J      F1(|y-c|)F2F3  l^d / |x-y|^(1+d)     needs rd(I,J) >= 1
    Q    int_I int_{3I\\I}  F1(|x-y|)F2F3 / |x-y|
    QIJ  int_I int_{J\\3I} F1(|y-c|)F2F3  l^d / |x-c|^(1+d)     needs rd < 1, disjoint
    R    int_I int_{(3I)^c} F1(|y-c|)F2F3 l^d / |x-y|^(1+d)
    RIJ  int_I int_{J_I^c}  same integrand                      needs d(I, J_I^c) > sqrt(l(I) l(J))
    """
    spec = spec or DEFAULT_SPEC
    if which not in QUANTITIES:
        raise ValueError(f"unknown quantity {which!r}")
    _check_1d(I, J)
    a, b = _interval(I)
    ell = b - a
    cI = (a + b) / 2
    if which == "P":
        g = _geometry_or_fail(I, J)
        if g.rd < 1:
            raise ValueError("P needs rd(I, J) >= 1")
        F = _F_form(triple, "FF1", cI)
        func = lambda x, y: F(x, y) * ell ** delta / np.abs(x - y) ** (1 + delta)
        c, d = _interval(J)
        return adapt2d(func, (c, d), (a, b), spec)
    if which == "Q":
        F = _F_form(triple, "FF2", cI)
        func = lambda x, y: F(x, y) / np.abs(x - y)
        r1 = adapt2d(func, (a - ell, a), (a, b), spec, sing=(a, a))
        r2 = adapt2d(func, (b, b + ell), (a, b), spec, sing=(b, b))
        return r1 + r2
    if which == "QIJ":
        g = _geometry_or_fail(I, J)
        if g.rd >= 1 or I.intersects(J):
            raise ValueError("QIJ needs rd(I, J) < 1 and disjoint cubes")
        F = _F_form(triple, "FF1", cI)
        func = lambda x, y: F(x, y) * ell ** delta / np.abs(x - cI) ** (1 + delta)
        c, d = _interval(J)
        res = _zero_result()
        for lo, hi in _minus(c, d, a - ell, b + ell):
            res = res + adapt2d(func, (lo, hi), (a, b), spec)
        return res
    F = _F_form(triple, "FF1", cI)
    func = lambda x, y: F(x, y) * ell ** delta / np.abs(x - y) ** (1 + delta)
    if which == "R":
        left, right = a - ell, b + ell
    else:
        if J is None or not (J.contains(I) and I != J):
            raise ValueError("RIJ needs I strictly inside J")
        JI = next(ch for ch in J.children() if ch.contains(I))
        dd = float(_dist_to_complement(I, JI.lower[0], JI.upper[0]))
        if not dd > math.sqrt(ell * float(J.edge)):
            raise ValueError("RIJ needs d(I, J_I^c) > sqrt(l(I) l(J))")
        left, right = _interval(JI)
    return _outer_integral(func, triple, a, b, left, right, ell, delta, spec)


def _dist_to_complement(I, lo, hi):
    a, b = I.lower[0], I.upper[0]
    return min(a - lo, hi - b)


def _minus(c, d, lo, hi):
    """[c,d] minus (lo,hi) as a list of intervals."""
    out = []
    if c < lo:
        out.append((c, min(d, lo)))
    if d > hi:
        out.append((max(c, hi), d))
    return [(x, y) for x, y in out if y > x]


def _outer_integral(func, triple: FuncTriple, a, b, left, right, ell, delta, spec):
    """Integral over x outside [left, right], truncated where the tail bound is negligible.

    For |x - y| >= u the integrand is at most sup F1 sup F3 F2(u) l^d / u^(1+d),
    so the x-tail beyond distance u from I contributes at most
    2 (b - a) sup F1 sup F3 F2(u) l^d u^(-d) / d.
    """
    m1, m3 = triple.F1.max, triple.F3.max
    if triple.F1.rule == "exact":
        m1 = max(m1, float(np.max(triple.F1(np.array([ell, 1e6])))))
    width = b - a
    R = max(right - a, b - left, 4 * width)
    res = None
    while True:
        parts = _zero_result()
        for lo, hi in ((left - R, left), (right, right + R)):
            parts = parts + _graded_outer(func, lo, hi, a, b, spec)
        tail_u = R
        tail = 2 * width * m1 * m3 * float(triple.F2(tail_u)) * ell ** delta * tail_u ** (-delta) / delta
        res = parts
        if tail <= spec.tol * max(parts.scale, 1e-300) or R > 1e12:
            break
        R *= 4
    res.err_est += tail
    res.radius = R
    res.converged = res.err_est <= spec.tol * max(res.scale, 1e-300) * 1.0000001
    return res


def _graded_outer(func, lo, hi, a, b, spec):
    """Split a long x-interval geometrically away from [a, b] before integrating."""
    res = _zero_result()
    if hi <= lo:
        return res
    if hi <= a:  # left side: grow leftwards from hi
        edges = [hi]
        step = max(b - a, hi - lo) if hi - lo < (b - a) else (b - a)
        x = hi
        while x > lo:
            x = max(lo, x - step)
            edges.append(x)
            step *= 2
        edges = edges[::-1]
    else:
        edges = [lo]
        step = b - a
        x = lo
        while x < hi:
            x = min(hi, x + step)
            edges.append(x)
            step *= 2
    for x0, x1 in zip(edges[:-1], edges[1:]):
        res = res + adapt2d(func, (x0, x1), (a, b), spec)
    return res


def _geometry_or_fail(I, J):
    if J is None:
        raise ValueError("this quantity needs a second cube")
    return _GeomF(cube_geometry(I, J))


class _GeomF:
    def __init__(self, g):
        self.rs, self.rd, self.ird = float(g.rs), float(g.rd), float(g.ird)


def quantity_bound(which: str, I, J, fun: BoundFunctionals) -> float:
    """The cited right-hand side (without its implicit constant)."""
    ell = float(I.edge)
    size = ell ** I.dim
    d = fun.delta
    if which == "P":
        g = _GeomF(cube_geometry(I, J))
        n = I.dim
        return (fun.F_pair(I, J) * g.rs ** (n / 2 + d) / g.rd ** (n + d)
                * math.sqrt(size * float(J.edge) ** J.dim))
    if which in ("Q", "R"):
        return fun.Ft(I) * size
    if which == "QIJ":
        g = _GeomF(cube_geometry(I, J))
        return fun.Ft_pair(I, J) * size / g.ird ** d
    if which == "RIJ":
        return fun.Ft_pair(I, J) * size * (ell / float(J.edge)) ** (d / 2)
    raise ValueError(f"unknown quantity {which!r}")


# ---------------------------------------------------------------- adjacent cubes

def diag_lemma_check(I: DyadicCube, J: DyadicCube, F2, r: float = 2.0, s: float = 1.5,
                     spec: QuadSpec | None = None, theta: float | None = None):
    """(I1, I2, F2~(l(I)), |I|^-1) for adjacent equal-size cubes.

    I1 = (avg_I avg_J F2(|x-y|)^r)^(1/r),  I2 = (avg_I avg_J |x-y|^(-s n))^(1/s);
    F2~ uses the weights 2^(-k/r) unless ``theta`` is given.
    """
    spec = (spec or DEFAULT_SPEC).deeper(64)
    _check_1d(I, J)
    if I.edge != J.edge or I.intersects(J) or distance(I, J) != 0:
        raise ValueError("need equal-size, disjoint, touching cubes")
    if not r > 1:
        raise ValueError("need r > 1")
    if not (1 < s < 1 + 1 / I.dim):
        raise ValueError("need 1 < s < 1 + 1/n")
    a, b = _interval(I)
    c, d = _interval(J)
    corner = b if b == c else a
    sing = (corner, corner)
    area = (b - a) * (d - c)
    f2 = F2 if callable(F2) else (lambda t: np.asarray(F2) * np.ones_like(t))
    r1 = adapt2d(lambda x, y: np.asarray(f2(np.abs(x - y)), dtype=float) ** r,
                 (c, d), (a, b), spec, sing)
    r2 = adapt2d(lambda x, y: np.abs(x - y) ** (-s * I.dim), (c, d), (a, b), spec, sing)
    I1 = max(r1.value / area, 0.0) ** (1 / r)
    I2 = (r2.value / area) ** (1 / s)
    th = 1.0 / r if theta is None else theta
    ell = b - a
    k = np.arange(int(math.ceil(60 / th)) + 1)
    F2t = float(np.sum(np.exp2(-k * th) * np.asarray(f2(ell * np.exp2(-k)), dtype=float)))
    return I1, I2, F2t, 1.0 / (ell ** I.dim)
