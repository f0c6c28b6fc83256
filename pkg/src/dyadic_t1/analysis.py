"""Haar coefficient vectors, paraproducts, product BMO and the compactness harness.

Coefficient vectors are keyed by tuples of :class:`HaarIndex` (one per
parameter).  Two-parameter operators are assembled on products of a
one-dimensional family, with the index ``(i1, i2)`` of the product mapped
to ``i1 * n2 + i2`` so that separable operators are ``np.kron(A1, A2)``.
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from ._backend import core
from .coeffs import (CoeffTable, PairKey, PairingCache, _param_pairing, atomic_write, fmt17,
                     thread_cap)
from .grid import (DyadicCube, HaarIndex, format_haar, haar_mean, parse_haar,
                   truncation_family, truncation_membership)
from .kernels import BoundFunctionals, Factor, KernelModel
from .quad import DEFAULT_SPEC, PiecewiseConstant, QuadSpec, as_piecewise

__all__ = [
    "HaarCoeffVector", "PiecewiseGrid", "expand", "project", "paraproduct_apply",
    "paraproduct_operator", "bmo_norm", "cmo_tail", "BmoReport", "TruncatedOperator",
    "assemble_operator", "spectral_norm", "SpectralNorm", "galerkin_matrix_1d",
    "compactness_curve", "CurvePoint", "limiting_predicates", "PredicateReport", "mdt_check",
]


@lru_cache(maxsize=None)
def _member(cube: DyadicCube, N: int) -> bool:
    return truncation_membership(cube, N)


def _as_key(key) -> tuple:
    return tuple(k if isinstance(k, HaarIndex) else HaarIndex(k) for k in key)


def _key_order(key):
    return tuple(h.sort_key() for h in key)


# ---------------------------------------------------------------- coefficient vectors

@dataclass(frozen=True, eq=False)
class HaarCoeffVector:
    """Finitely supported map (h_1, ..., h_rank) -> coefficient.

    ``N`` records the truncation the vector was built on (None if free).
    Exact zeros are dropped.
    """

    data: dict
    rank: int = 2
    N: int | None = None

    def __post_init__(self):
        clean = {}
        for k, v in dict(self.data).items():
            k = _as_key(k)
            if len(k) != self.rank:
                raise ValueError(f"key {k} does not have {self.rank} Haar indices")
            v = float(v)
            if not math.isfinite(v):
                raise ValueError("coefficients must be finite")
            if v != 0.0:
                clean[k] = v
        object.__setattr__(self, "data", clean)

    @classmethod
    def unit(cls, key, N=None):
        key = _as_key(key)
        return cls({key: 1.0}, len(key), N)

    @classmethod
    def zeros(cls, rank=2, N=None):
        return cls({}, rank, N)

    def keys(self):
        return sorted(self.data, key=_key_order)

    def items(self):
        return [(k, self.data[k]) for k in self.keys()]

    def __getitem__(self, key) -> float:
        return self.data.get(_as_key(key), 0.0)

    def __len__(self):
        return len(self.data)

    def __iter__(self):
        return iter(self.keys())

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.data.values()))

    def dot(self, other: "HaarCoeffVector") -> float:
        small, big = (self, other) if len(self) <= len(other) else (other, self)
        return math.fsum(v * big.data.get(k, 0.0) for k, v in small.data.items())

    def _combine(self, other, sign):
        if self.rank != other.rank:
            raise ValueError("rank mismatch")
        out = dict(self.data)
        for k, v in other.data.items():
            out[k] = out.get(k, 0.0) + sign * v
        N = self.N if self.N == other.N else None
        return HaarCoeffVector(out, self.rank, N)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, c: float):
        return HaarCoeffVector({k: c * v for k, v in self.data.items()}, self.rank, self.N)

    __rmul__ = __mul__

    def filter(self, pred) -> "HaarCoeffVector":
        return HaarCoeffVector({k: v for k, v in self.data.items() if pred(k)}, self.rank, self.N)

    def membership(self, N: int) -> dict:
        """key -> True when every cube of the key lies in D(N)."""
        return {k: all(_member(h.cube, N) for h in k) for k in self.data}

    def cubes(self, param: int) -> list:
        return sorted({k[param].cube for k in self.data}, key=lambda c: c.sort_key())

    def to_dict(self) -> dict:
        return {"rank": self.rank, "N": self.N,
                "terms": [["|".join(format_haar(h) for h in k), v] for k, v in self.items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "HaarCoeffVector":
        data = {}
        for key, v in d.get("terms", []):
            data[tuple(parse_haar(s) for s in key.split("|"))] = v
        return cls(data, int(d.get("rank", 2)), d.get("N"))


# ---------------------------------------------------------------- expansion

@dataclass(frozen=True, eq=False)
class PiecewiseGrid:
    """Sampled function: ``values[a, b]`` on the cell ``[x_a, x_a+1) x [y_b, y_b+1)``."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_edges, dtype=float)
        y = np.asarray(self.y_edges, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (x.size - 1, y.size - 1):
            raise ValueError("values must have shape (len(x_edges)-1, len(y_edges)-1)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("sampled function needs a bounded support window")
        if not np.all(np.isfinite(v)):
            raise ValueError("sampled values must be finite")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(y) <= 0):
            raise ValueError("cell edges must increase")
        object.__setattr__(self, "x_edges", x)
        object.__setattr__(self, "y_edges", y)
        object.__setattr__(self, "values", v)

    def l2_norm(self) -> float:
        area = np.diff(self.x_edges)[:, None] * np.diff(self.y_edges)[None, :]
        return math.sqrt(float(np.sum(self.values ** 2 * area)))


def _overlap(a0, a1, b0, b1):
    return np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)


def _haar_cell_weights(fam: Sequence[HaarIndex], edges: np.ndarray) -> np.ndarray:
    """W[i, c] = integral of h_i over cell c."""
    lo = np.array([float(h.cube.lower[0]) for h in fam])
    e = np.array([float(h.cube.edge) for h in fam])
    canc = np.array([bool(h.eta[0]) for h in fam])
    amp = e ** -0.5
    c0, c1 = edges[None, :-1], edges[None, 1:]
    mid = (lo + e / 2)[:, None]
    left = _overlap(lo[:, None], mid, c0, c1)
    right = _overlap(mid, (lo + e)[:, None], c0, c1)
    return amp[:, None] * np.where(canc[:, None], left - right, left + right)


def _coef_1d(g, fam: Sequence[HaarIndex]) -> np.ndarray:
    """<g, h> for every h in fam; g a Haar function, cube or piecewise constant."""
    if isinstance(g, HaarIndex):
        gc = g.cube
        out = np.zeros(len(fam))
        for i, h in enumerate(fam):
            if h.cube.intersects(gc):
                from .grid import haar_inner
                out[i] = haar_inner(h, g)
        return out
    g = as_piecewise(g)
    pieces = [(a, b, v) for a, b, v in g.pieces()]
    if any(not (math.isfinite(a) and math.isfinite(b)) for a, b, _ in pieces):
        raise ValueError("factor is not integrable against the Haar family (unbounded support)")
    if not pieces:
        return np.zeros(len(fam))
    edges = np.array(sorted({x for a, b, _ in pieces for x in (a, b)}))
    mid = (edges[:-1] + edges[1:]) / 2
    vals = g(mid)
    return _haar_cell_weights(fam, edges) @ vals


def _family(N: int, fam=None) -> list:
    if fam is not None:
        return [c if isinstance(c, HaarIndex) else HaarIndex(c) for c in fam]
    return [HaarIndex(c) for c in truncation_family(N, 1)]


def expand(f, N: int, rank: int = 2, family=None) -> HaarCoeffVector:
    """Haar coefficients of ``f`` over D(N) (or ``family``) in each parameter.

    ``f`` may be a tuple of Haar indices (a basis function), a tuple of
    one-dimensional factors (Haar index, cube indicator or
    :class:`~dyadic_t1.quad.PiecewiseConstant`), a list of
    ``(coefficient, factors)`` terms, or a :class:`PiecewiseGrid`.
    """
    fam = _family(N, family)
    index = {h: i for i, h in enumerate(fam)}
    if isinstance(f, PiecewiseGrid):
        if rank != 2:
            raise ValueError("sampled grids are two-parameter")
        Wx = _haar_cell_weights(fam, f.x_edges)
        Wy = _haar_cell_weights(fam, f.y_edges)
        C = Wx @ f.values @ Wy.T
        data = {(fam[i], fam[j]): C[i, j] for i, j in zip(*np.nonzero(C))}
        return HaarCoeffVector(data, 2, N)
    if isinstance(f, tuple) and len(f) == rank and all(isinstance(g, HaarIndex) for g in f):
        if all(g in index for g in f):
            return HaarCoeffVector({f: 1.0}, rank, N)
        return HaarCoeffVector({}, rank, N)
    terms = f if isinstance(f, list) else [(1.0, f)]
    acc = {}
    for c, factors in terms:
        factors = factors if isinstance(factors, tuple) else (factors,)
        if len(factors) != rank:
            raise ValueError(f"term needs {rank} factors")
        coefs = [_coef_1d(g, fam) for g in factors]
        nz = [np.nonzero(v)[0] for v in coefs]
        for idx in itertools.product(*nz):
            key = tuple(fam[i] for i in idx)
            val = c * math.prod(coefs[p][i] for p, i in enumerate(idx))
            acc[key] = acc.get(key, 0.0) + val
    return HaarCoeffVector(acc, rank, N)


def project(v: HaarCoeffVector, N: int, side: str = "P") -> HaarCoeffVector:
    """P_N keeps keys with every cube in D(N); P_N^perp (``side='perp'``) keeps the rest."""
    if side not in ("P", "perp"):
        raise ValueError("side must be 'P' or 'perp'")
    inside = side == "P"
    return v.filter(lambda k: all(_member(h.cube, N) for h in k) == inside)


# ---------------------------------------------------------------- paraproducts

def _avg_factor(S: HaarIndex, R: DyadicCube) -> float:
    try:
        return haar_mean(S, R)
    except ValueError as exc:
        raise ValueError(f"average over {R} is not determined by the represented span: {exc}") \
            from None


def _average(f: HaarCoeffVector, R: tuple) -> float:
    terms = []
    for key, val in f.data.items():
        m = val
        for S, Rc in zip(key, R):
            if m == 0.0:
                break
            m *= _avg_factor(S, Rc)
        if m != 0.0:
            terms.append(m)
    return math.fsum(terms)


def _ancestors_in(cube: DyadicCube, N: int | None, fam_set=None) -> list:
    out, c = [], cube
    while True:
        c = c.parent()
        if fam_set is not None:
            if c.level > max(x.level for x in fam_set):
                break
            if c in fam_set:
                out.append(c)
            continue
        if c.level > N:
            break
        if _member(c, N):
            out.append(c)
    return out


PARAPRODUCT_VARIANTS = ("pi", "pi_star", "pi1", "pi1_star")


def paraproduct_apply(b: HaarCoeffVector, f: HaarCoeffVector, variant: str = "pi",
                      N: int | None = None) -> HaarCoeffVector:
    """Pi_b f or Pi*_b f on Haar data.

    ``pi``/``pi_star`` are bi-parameter (rank 2), ``pi1``/``pi1_star`` the
    one-parameter forms (rank 1).  Pi* produces sums of normalised
    indicators, which are expanded back on D(N) with N from the argument
    or from ``f``.
    """
    if variant not in PARAPRODUCT_VARIANTS:
        raise ValueError(f"variant must be one of {PARAPRODUCT_VARIANTS}")
    rank = 1 if variant.startswith("pi1") else 2
    if b.rank != rank or f.rank != rank:
        raise ValueError(f"variant {variant} needs rank-{rank} vectors")
    if not variant.endswith("star"):
        out = {}
        for R, bR in b.items():
            out[R] = bR * _average(f, tuple(h.cube for h in R))
        return HaarCoeffVector(out, rank, f.N)
    Nout = N if N is not None else f.N
    if Nout is None:
        raise ValueError("Pi* output needs a truncation N for its Haar expansion")
    out = {}
    for R, bR in b.items():
        gR = f[R]
        if gR == 0.0:
            continue
        cubes = [h.cube for h in R]
        anc = [[HaarIndex(a) for a in _ancestors_in(c, Nout)] for c in cubes]
        for S in itertools.product(*anc):
            m = bR * gR
            for Si, c in zip(S, cubes):
                m *= haar_mean(Si, c)
            out[S] = out.get(S, 0.0) + m
    return HaarCoeffVector(out, rank, Nout)


def paraproduct_operator(b: HaarCoeffVector, M: int, N: int | None = None,
                         family=None) -> "TruncatedOperator":
    """Matrix of f -> P_N^perp Pi_b f on the span of D(M) products (P_N^perp omitted if N is None).

    Rows are the rectangles of b, columns the basis functions with a
    nonzero average on some row rectangle.
    """
    fam_set = None if family is None else {c.cube if isinstance(c, HaarIndex) else c
                                           for c in family}
    rows = b.keys()
    if N is not None:
        rows = [R for R in rows if not all(_member(h.cube, N) for h in R)]
    cols, col_index, trip = [], {}, []
    for r, R in enumerate(rows):
        cubes = [h.cube for h in R]
        anc = [[HaarIndex(a) for a in _ancestors_in(c, M, fam_set)] for c in cubes]
        for S in itertools.product(*anc):
            m = b[R]
            for Si, c in zip(S, cubes):
                m *= haar_mean(Si, c)
            if m == 0.0:
                continue
            if S not in col_index:
                col_index[S] = len(cols)
                cols.append(S)
            trip.append((r, col_index[S], m))
    A = np.zeros((len(rows), len(cols)))
    for r, c, v in trip:
        A[r, c] += v
    return TruncatedOperator(list(rows), cols, A, source="paraproduct")


# ---------------------------------------------------------------- BMO

@dataclass
class BmoReport:
    norm: float
    attaining: list = field(default_factory=list)
    tails: dict = field(default_factory=dict)
    candidates: int = 0

    def to_dict(self) -> dict:
        return {"norm": self.norm, "attaining": self.attaining,
                "tails": {str(k): v for k, v in sorted(self.tails.items())},
                "candidates": self.candidates}

    def to_csv_text(self, header: dict | None = None) -> str:
        lines = [f"# {k}: {v}" for k, v in sorted((header or {}).items())]
        lines.append("N,tail_norm")
        for N, v in sorted(self.tails.items()):
            lines.append(f"{N},{fmt17(v)}")
        return "\n".join(lines) + "\n"


def _cover_level(cubes: Iterable[DyadicCube]) -> int:
    cubes = list(cubes)
    ext = max(max(abs(float(c.lower[0])), abs(float(c.upper[0]))) for c in cubes)
    return max(max(c.level for c in cubes), math.ceil(math.log2(max(ext, 1e-300))) + 1)


def _candidate_cubes(cubes, N, restrict):
    top = _cover_level(cubes)
    out = set()
    for c in cubes:
        a = c
        while True:
            if not restrict or _member(a, N):
                out.add(a)
            if a.level >= top:
                break
            a = a.parent()
    return sorted(out, key=lambda c: c.sort_key())


def _rect_inter(A, B):
    out = []
    for a, b in zip(A, B):
        lo = max(a[0], b[0])
        hi = min(a[1], b[1])
        if hi <= lo:
            return None
        out.append((lo, hi))
    return tuple(out)


def _area(rect):
    return math.prod(hi - lo for lo, hi in rect)


def _union_area(rects) -> float:
    total = 0.0
    for r in range(1, len(rects) + 1):
        for sub in itertools.combinations(rects, r):
            acc = sub[0]
            for s in sub[1:]:
                acc = _rect_inter(acc, s)
                if acc is None:
                    break
            if acc is not None:
                total += (-1) ** (r + 1) * _area(acc)
    return total


def _box(cubes):
    return tuple((float(c.lower[0]), float(c.upper[0])) for c in cubes)


def bmo_norm(b: HaarCoeffVector, family="rectangles", N: int | None = None,
             pool: int = 6, max_union: int = 4) -> BmoReport:
    """Rectangular proxy for the dyadic product BMO norm.

    sup over Omega of ((1/|Omega|) sum_{R in Omega} <b, h_R>^2)^(1/2), with
    Omega running over dyadic rectangles built from ancestors of the
    support (``rectangles``; ``truncated`` keeps only cubes in D(N)) and
    over unions of up to ``max_union`` rectangles from the best ``pool``.
    ``family`` may also be an explicit list of sets, each a list of
    rectangles (tuples of cubes).
    """
    if isinstance(family, (list, tuple)):
        if len(family) == 0:
            raise ValueError("empty test-set family")
        sets = [[tuple(c.cube if isinstance(c, HaarIndex) else c for c in R) for R in Om]
                for Om in family]
        best, arg = 0.0, []
        supp = [(tuple(h.cube for h in k), v * v) for k, v in b.data.items()]
        for Om in sets:
            s = _set_score(Om, supp)
            if s > best:
                best, arg = s, Om
        return BmoReport(math.sqrt(best), [[_fmt_rect(R) for R in arg]], candidates=len(sets))
    if family not in ("rectangles", "truncated"):
        raise ValueError("family must be 'rectangles', 'truncated' or a list of sets")
    if family == "truncated" and N is None:
        raise ValueError("truncated family needs N")
    if len(b) == 0:
        return BmoReport(0.0, [], candidates=0)
    keys = b.keys()
    rank = b.rank
    w = np.array([b.data[k] ** 2 for k in keys])
    cand, masks = [], []
    for p in range(rank):
        cubes = [k[p].cube for k in keys]
        cp = _candidate_cubes(set(cubes), N, family == "truncated")
        if not cp:
            return BmoReport(0.0, [], candidates=0)
        M = np.array([[a.contains(c) for c in cubes] for a in cp], dtype=float)
        cand.append(cp)
        masks.append(M)
    vols = [np.array([float(a.edge) for a in cp]) for cp in cand]
    if rank == 1:
        S = masks[0] @ w
        score = S / vols[0]
        flat = score
        shape = (len(cand[0]),)
    else:
        S = masks[0] @ (w[:, None] * masks[1].T)
        score = S / (vols[0][:, None] * vols[1][None, :])
        flat = score.ravel()
        shape = score.shape
    order = np.argsort(-flat, kind="stable")
    i0 = np.unravel_index(order[0], shape)
    best = float(flat[order[0]])
    arg = [tuple(cand[p][i0[p]] for p in range(rank))]
    n_cand = flat.size
    if max_union > 1 and pool > 1:
        top = [tuple(cand[p][np.unravel_index(o, shape)[p]] for p in range(rank))
               for o in order[:pool] if flat[o] > 0]
        supp = [(tuple(h.cube for h in k), float(wk)) for k, wk in zip(keys, w)]
        for r in range(2, min(max_union, len(top)) + 1):
            for combo in itertools.combinations(top, r):
                n_cand += 1
                s = _set_score(list(combo), supp)
                if s > best * (1 + 1e-15):
                    best, arg = s, list(combo)
    return BmoReport(math.sqrt(best), [_fmt_rect(R) for R in arg], candidates=n_cand)


def _fmt_rect(R) -> str:
    from .grid import format_cube
    return " x ".join(format_cube(c) for c in R)


def _set_score(rects, supp) -> float:
    boxes = [_box(R) for R in rects]
    area = _union_area(boxes)
    if area <= 0:
        return 0.0
    acc = []
    for cubes, w2 in supp:
        rb = _box(cubes)
        if any(all(a.contains(c) for a, c in zip(R, cubes)) for R in rects):
            acc.append(w2)
            continue
        parts = [x for x in (_rect_inter(rb, B) for B in boxes) if x is not None]
        if parts and _union_area(parts) >= _area(rb) * (1 - 1e-15):
            acc.append(w2)
    return math.fsum(acc) / area


def cmo_tail(b: HaarCoeffVector, schedule: Sequence[int] = (1, 2, 3), **kw) -> BmoReport:
    """BMO proxy of b with the tails ||P_N^perp b|| for N in ``schedule``."""
    rep = bmo_norm(b, **kw)
    for N in schedule:
        rep.tails[int(N)] = bmo_norm(project(b, N, "perp"), **kw).norm
    return rep


# ---------------------------------------------------------------- operators

@dataclass(eq=False)
class TruncatedOperator:
    """Dense matrix with row and column Haar-key lists."""

    rows: list
    cols: list
    matrix: np.ndarray
    source: str = ""

    @property
    def shape(self):
        return self.matrix.shape

    def restrict_rows(self, keep) -> "TruncatedOperator":
        keep = np.asarray(keep, dtype=bool)
        return TruncatedOperator([r for r, k in zip(self.rows, keep) if k], self.cols,
                                 self.matrix[keep], self.source)

    def outside_rows(self, N: int) -> "TruncatedOperator":
        """Rows whose key has some cube outside D(N)."""
        return self.restrict_rows([not all(_member(h.cube, N) for h in r) for r in self.rows])

    def to_triplets(self) -> str:
        fmt = lambda k: "|".join(format_haar(h) for h in k)
        rk = [fmt(r) for r in self.rows]
        ck = [fmt(c) for c in self.cols]
        lines = [f"# source: {self.source}", f"# shape: {self.shape[0]} {self.shape[1]}"]
        for i, j in sorted(zip(*np.nonzero(self.matrix)), key=lambda ij: (rk[ij[0]], ck[ij[1]])):
            lines.append(f"{rk[i]} {ck[j]} {fmt17(self.matrix[i, j])}")
        return "\n".join(lines) + "\n"

    def save(self, path: str):
        atomic_write(path, self.to_triplets())

    @classmethod
    def load(cls, path: str, rows=None, cols=None) -> "TruncatedOperator":
        """Read a triplet file; without explicit index lists the keys present are used."""
        trip, source = [], ""
        with open(path) as fh:
            for ln in fh:
                ln = ln.strip()
                if not ln:
                    continue
                if ln.startswith("#"):
                    k, _, v = ln[1:].partition(":")
                    if k.strip() == "source":
                        source = v.strip()
                    continue
                r, c, v = ln.split()
                parse = lambda s: tuple(parse_haar(x) for x in s.split("|"))
                trip.append((parse(r), parse(c), float(v)))
        if rows is None:
            rows = sorted({t[0] for t in trip}, key=_key_order)
        if cols is None:
            cols = sorted({t[1] for t in trip}, key=_key_order)
        ri = {k: i for i, k in enumerate(rows)}
        ci = {k: i for i, k in enumerate(cols)}
        A = np.zeros((len(rows), len(cols)))
        for r, c, v in trip:
            A[ri[r], ci[c]] = v
        return cls(list(rows), list(cols), A, source)


def _pairing_matrix(K: KernelModel, i: int, fam: list, spec: QuadSpec,
                    cache: PairingCache) -> np.ndarray:
    n = len(fam)
    B = np.zeros((n, n))
    for r, J in enumerate(fam):
        for c, I in enumerate(fam):
            swapped = I.cube.edge > J.cube.edge
            a, b = (J, I) if swapped else (I, J)
            B[r, c] = _param_pairing(K, i, a, b, swapped, spec, cache).value
    return B


def assemble_operator(table: CoeffTable | None, N: int, K: KernelModel | None = None,
                      spec: QuadSpec | None = None, family=None) -> TruncatedOperator:
    """A[(J1, J2), (I1, I2)] = <T(h_I1 x h_I2), h_J1 x h_J2> on D(N) products.

    Entries come from ``table``; missing ones are computed from the
    separable model ``K`` (one-parameter pairings, multiplied).
    """
    spec = spec or DEFAULT_SPEC
    fam = _family(N, family)
    n = len(fam)
    keys = [(a, b) for a in fam for b in fam]
    A = np.full((n * n, n * n), np.nan)
    if table is not None and len(table):
        pos = {k: i for i, k in enumerate(keys)}
        for pk, e in table.entries.items():
            I1, I2, J1, J2 = pk.original()
            r, c = pos.get((J1, J2)), pos.get((I1, I2))
            if r is not None and c is not None:
                A[r, c] = e.value
    missing = np.isnan(A)
    if missing.any():
        if K is None:
            raise ValueError(f"{int(missing.sum())} entries missing from the table and no kernel given")
        if not K.separable:
            raise ValueError("entries of non-separable models cannot be filled on demand")
        cache = PairingCache()
        B1 = _pairing_matrix(K, 0, fam, spec, cache)
        B2 = B1 if K.factors[1] is K.factors[0] else _pairing_matrix(K, 1, fam, spec, cache)
        A = np.where(missing, np.kron(B1, B2), A)
    return TruncatedOperator(keys, keys, A, source=f"table:{table.meta.get('config_hash', '')}"
                             if table is not None else "kernel")


# ---------------------------------------------------------------- spectral norm

@dataclass
class SpectralNorm:
    value: float
    iterations: int
    converged: bool
    starts: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _as_matvecs(A):
    if isinstance(A, TruncatedOperator):
        A = A.matrix
    if isinstance(A, LinearOperator):
        return A.shape, A.matvec, A.rmatvec
    if sp.issparse(A):
        A = A.tocsr()
        return A.shape, (lambda v: A @ v), (lambda v: A.T @ v)
    A = np.asarray(A, dtype=float)
    return A.shape, (lambda v: A @ v), (lambda v: A.T @ v)


def _power(mv, rmv, v, tol, max_iter):
    """Power iteration on A^T A with a geometric estimate of the remaining error.

    Rayleigh quotients increase monotonically; with successive increments
    d_k and ratio rho = d_k / d_(k-1), the tail still to come is about
    d_k rho / (1 - rho), which is what the tolerance is compared against.
    """
    lam_prev, d_prev = None, None
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = rmv(mv(v))
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, it, True
        v = w / nw
        if lam_prev is not None:
            d = abs(lam - lam_prev)
            if d == 0.0:
                return lam, it, True
            rest = d
            if d_prev:
                rho = d / d_prev
                rest = d * rho / (1.0 - rho) if rho < 1.0 else math.inf
            if d <= tol * abs(lam) and rest <= tol * abs(lam):
                return lam, it, True
            d_prev = d
        lam_prev = lam
    return lam, max_iter, False


def spectral_norm(A, tol: float = 1e-13, max_iter: int = 20000, seed: int = 0) -> SpectralNorm:
    """Largest singular value by power iteration on A^T A.

    The first start is the normalised all-ones vector; a second run from a
    seeded Gaussian vector guards against a start orthogonal to the top
    singular space, and the larger estimate is kept.
    """
    (m, n), mv, rmv = _as_matvecs(A)
    if m == 0 or n == 0:
        return SpectralNorm(0.0, 0, True)
    v0 = np.ones(n) / math.sqrt(n)
    lam0, it0, ok0 = _power(mv, rmv, v0, tol, max_iter)
    v1 = np.random.default_rng(seed).standard_normal(n)
    v1 /= np.linalg.norm(v1)
    lam1, it1, ok1 = _power(mv, rmv, v1, tol, max_iter)
    lam, ok = (lam0, ok0) if lam0 >= lam1 else (lam1, ok1)
    return SpectralNorm(math.sqrt(max(lam, 0.0)), it0 + it1, ok,
                        {"ones": math.sqrt(max(lam0, 0.0)), "seeded": math.sqrt(max(lam1, 0.0))})


# ---------------------------------------------------------------- cell-Galerkin assembly

def _cell_layout(fam: Sequence[HaarIndex]):
    w = min(h.cube.edge for h in fam) / 2
    lo = min(h.cube.lower[0] for h in fam)
    hi = max(h.cube.upper[0] for h in fam)
    nc = int((hi - lo) / w)
    rows, cols, vals = [], [], []
    for i, h in enumerate(fam):
        c = h.cube
        a0 = int((c.lower[0] - lo) / w)
        half = int(c.edge / 2 / w)
        amp = float(c.edge) ** -0.5
        sgn = -1.0 if h.eta[0] else 1.0
        rows.extend([i] * (2 * half))
        cols.extend(range(a0, a0 + 2 * half))
        vals.extend([amp] * half + [sgn * amp] * half)
    W = sp.csr_matrix((vals, (rows, cols)), shape=(len(fam), nc))
    return float(lo), float(w), nc, W


GAUSS_CUTOFF = 2.0 * math.sqrt(46.0 * math.log(10.0))


def _cell_matrix(factor: Factor, x0: float, w: float, nc: int, order: int, threads: int):
    base = factor
    sign = 1.0
    while hasattr(base, "inner"):
        base, sign = base.inner, -sign
    fam = base.family
    if fam == "zero":
        return np.zeros((nc, nc))
    if fam == "hilbert":
        return sign * core.hilbert_cells(x0, x0, w, nc, nc)
    if fam == "compact":
        p, q, sigma = base.params
        nodes, weights = np.polynomial.legendre.leggauss(order)
        nodes, weights = np.ascontiguousarray(nodes), np.ascontiguousarray(weights)
        cut = GAUSS_CUTOFF * sigma
        chunks = np.array_split(np.arange(nc), max(1, min(threads, nc)))
        spans = [(int(c[0]), int(c[-1]) + 1) for c in chunks if c.size]

        def block(span):
            return core.compact_cells(x0, x0, w, nc, nc, p, q, sigma, nodes, weights, cut,
                                      span[0], span[1])
        if len(spans) > 1:
            with ThreadPoolExecutor(max_workers=len(spans)) as ex:
                parts = list(ex.map(block, spans))
        else:
            parts = [block(spans[0])]
        return sign * np.vstack(parts)
    if fam == "custom":
        if base.singular:
            raise ValueError("cell assembly of singular custom factors is not supported")
        u, wt = np.polynomial.legendre.leggauss(order)
        t = x0 + (np.arange(nc)[:, None] + (u[None, :] + 1) / 2) * w
        X = t[:, None, :, None]
        Y = t[None, :, None, :]
        F = base.func(X, Y)
        return sign * np.einsum("abij,i,j->ab", F, wt, wt) * (w / 2) ** 2
    raise ValueError(f"no cell assembly for factor family {fam!r}")


def galerkin_matrix_1d(factor: Factor, cubes: Sequence, order: int = 8,
                       threads: int | None = None) -> np.ndarray:
    """A[j, i] = <k h_i, h_j> for the cancellative Haar functions of ``cubes``.

    Every Haar function is constant on the cells of half the finest edge,
    so A = W C W^T with C the cell-pair integrals of the factor.
    """
    fam = _family(0, cubes)
    x0, w, nc, W = _cell_layout(fam)
    C = _cell_matrix(factor, x0, w, nc, order, thread_cap(threads))
    WC = W @ C
    return np.asarray((W @ WC.T).T)


@dataclass
class CurvePoint:
    N: int
    sigma: float
    ratio: float
    lower: float
    upper: float
    rank: tuple
    weyl_error: float

    def to_dict(self):
        return {"N": self.N, "sigma": self.sigma, "sigma_ratio": self.ratio,
                "lower": self.lower, "upper": self.upper, "rank": list(self.rank),
                "weyl_error": self.weyl_error}


def _masked_norm(U, s, P):
    """|| Q A_r || with Q = 1 - diag(P), from the truncated SVD A_r = U diag(s) V^T.

    A_r = A V V^T, so the value never exceeds || Q A ||.
    """
    Q = ~P
    if not Q.any() or s.size == 0:
        return 0.0
    Uq = U[Q]
    G = (Uq.T @ Uq) * s[:, None] * s[None, :]
    return math.sqrt(max(float(np.linalg.eigvalsh(G)[-1]), 0.0))


def _kron_masked_top(S1, B1, S2, B2, seed=0, tol=1e-10):
    """lambda_max of (S1 x S2)(1 - B1 x B2)(S1 x S2) for diagonal S and symmetric B.

    Identical factors make the operator commute with X -> X^T and the top
    eigenvector may be antisymmetric, so the Lanczos start is a seeded
    Gaussian vector rather than a symmetric one.
    """
    r1, r2 = S1.size, S2.size
    if r1 * r2 <= 2500:
        D = np.kron(S1, S2)
        X = np.eye(r1 * r2) - np.kron(B1, B2)
        return float(np.linalg.eigvalsh(D[:, None] * X * D[None, :])[-1])

    def mv(x):
        X = x.reshape(r1, r2)
        Y = S1[:, None] * X * S2[None, :]
        Z = Y - B1 @ Y @ B2
        return (S1[:, None] * Z * S2[None, :]).ravel()
    op = LinearOperator((r1 * r2, r1 * r2), matvec=mv, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(r1 * r2)
    try:
        lam = eigsh(op, k=1, which="LA", v0=v0, tol=tol, ncv=40, maxiter=5000,
                    return_eigenvectors=False)[0]
    except ArpackNoConvergence as exc:
        if exc.eigenvalues.size == 0:
            raise
        lam = exc.eigenvalues.max()
    return float(lam)


def compactness_curve(K: KernelModel, schedule: Sequence[int] = (1, 2, 3), M: int = 4,
                      family=None, rank_cap: int = 400, rank_tol: float = 1e-15,
                      order: int = 8, threads: int | None = None,
                      bracket_tol: float = 1e-4) -> list:
    """sigma_max(P_N^perp T_M) for N in ``schedule`` (separable models).

    T_M = A1 x A2 on D(M) products.  With SVDs A_i = U_i S_i V_i^T,
    sigma^2 = lambda_max((S1 x S2)(1 - B1 x B2)(S1 x S2)), B_i = U_i^T P_i U_i.
    Ranks are truncated to ``rank_cap``; the Weyl bound on the truncation
    and the exact bracket max_i ||Q_i A_i|| ||A_j|| <= sigma <= ||A1|| ||A2||
    are reported with each point.  When that bracket is already narrower
    than ``bracket_tol`` (relative) the Lanczos solve is skipped and sigma is
    the bracket midpoint; pass ``bracket_tol=0`` to always iterate.
    """
    if not K.separable:
        raise ValueError("compactness curves need a separable kernel model")
    if any(N > M for N in schedule):
        raise ValueError("schedule exceeds M")
    if any(N < 1 for N in schedule):
        raise ValueError("schedule entries must be >= 1")
    fam = _family(M, family)
    cubes = [h.cube for h in fam]
    mats, svds = {}, []
    for i in range(2):
        f = K.factors[i]
        key = id(f)
        if key not in mats:
            A = galerkin_matrix_1d(f, fam, order, threads)
            U, s, _ = np.linalg.svd(A)
            mats[key] = (U, s)
        svds.append(mats[key])
    (U1, s1), (U2, s2) = svds
    norm_T = float(s1[0] * s2[0]) if s1.size and s2.size else 0.0

    def rank(s):
        if s.size == 0 or s[0] == 0:
            return 0
        return int(min(rank_cap, np.count_nonzero(s > rank_tol * s[0])))
    r1, r2 = rank(s1), rank(s2)
    err = 0.0
    if r1 < s1.size:
        err += float(s1[r1] * s2[0])
    if r2 < s2.size:
        err += float(s1[0] * s2[r2])
    out = []
    for N in schedule:
        P = np.array([_member(c, N) for c in cubes])
        if P.all() or norm_T == 0.0:
            out.append(CurvePoint(int(N), 0.0, 0.0, 0.0, 0.0 if P.all() else norm_T,
                                  (r1, r2), 0.0 if P.all() else err))
            continue
        q1 = _masked_norm(U1[:, :r1], s1[:r1], P)
        q2 = q1 if U2 is U1 else _masked_norm(U2[:, :r2], s2[:r2], P)
        upper = norm_T
        lower = min(max(q1 * float(s2[0]), float(s1[0]) * q2), upper)
        if upper - lower <= bracket_tol * upper:
            sigma = 0.5 * (lower + upper)
            out.append(CurvePoint(int(N), sigma, sigma / norm_T, lower, upper, (r1, r2), err))
            continue
        Ur1, Ur2 = U1[:, :r1], U2[:, :r2]
        B1 = Ur1[P].T @ Ur1[P]
        B2 = Ur2[P].T @ Ur2[P]
        lam = _kron_masked_top(s1[:r1], B1, s2[:r2], B2)
        est = math.sqrt(max(lam, 0.0))
        sigma = min(max(est, lower), upper)
        lo_b = max(lower, est - err)
        hi_b = min(upper, est + err)
        out.append(CurvePoint(int(N), sigma, sigma / norm_T, lo_b, hi_b, (r1, r2), err))
    return out


def curve_csv_text(points: Sequence[CurvePoint], header: dict | None = None,
                   label: str | None = None) -> str:
    lines = [f"# {k}: {v}" for k, v in sorted((header or {}).items())]
    lines.append(("kernel," if label else "") + "N,sigma,sigma_ratio")
    for p in points:
        pre = f"{label}," if label else ""
        lines.append(f"{pre}{p.N},{fmt17(p.sigma)},{fmt17(p.ratio)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- limiting predicates

DEFAULT_N_SCHEDULE = tuple(range(1, 13)) + (16, 24, 32, 48, 64, 96, 128, 160, 192, 256)


@dataclass
class PredicateReport:
    eps: float
    schedule: tuple
    holds: dict
    N0: dict
    sups: dict
    samples: dict

    @property
    def passed(self) -> bool:
        return all(v is not None for v in self.N0.values())

    def to_dict(self):
        return {"eps": self.eps, "schedule": list(self.schedule),
                "N0": self.N0, "passed": self.passed,
                "holds": {k: [bool(x) for x in v] for k, v in self.holds.items()},
                "sup_outside": {k: [float(x) for x in v] for k, v in self.sups.items()},
                "samples": self.samples}


def _i_samples(N: int) -> list:
    out = []
    for lev in sorted({-N - 1, -N, -(N // 2), 0, N // 2, N, N + 1}):
        e = Fraction(2) ** lev
        for m in (0, 1, -1, 3):
            out.append(DyadicCube(lev, (m,)))
        far = int((N + 2) * max(Fraction(2) ** N, e) / e) + 1
        out.append(DyadicCube(lev, (far,)))
    return out


def _j_outside(N2: int) -> list:
    out = []
    for lev in (-N2 - 1, -N2 - 3, N2 + 1, N2 + 3):
        for m in (0, -1, 5):
            out.append(DyadicCube(lev, (m,)))
    big = Fraction(2) ** N2
    for lev in (0, N2 // 2, -(N2 // 2)):
        e = Fraction(2) ** lev
        far = int((N2 + 1) * big * 2 / e) + 2
        out.append(DyadicCube(lev, (far,)))
        out.append(DyadicCube(lev, (-far,)))
    return [J for J in out if not _member(J, N2)]


def _i_outside(N: int) -> list:
    out = []
    for lev in (N + 1, N + 2, N + 4, -N - 1, -N - 3):
        out.append(DyadicCube(lev, (0,)))
        out.append(DyadicCube(lev, (-1,)))
    big = Fraction(2) ** N
    for lev in (0, -N // 2):
        e = Fraction(2) ** lev
        far = int((N + 1) * big * 2 / e) + 2
        out.append(DyadicCube(lev, (far,)))
    return [I for I in out if not _member(I, N)]


def _first_tail_true(flags):
    """Smallest index from which every flag is True (None if the last is False)."""
    idx = None
    for i in range(len(flags) - 1, -1, -1):
        if not flags[i]:
            break
        idx = i
    return idx


def limiting_predicates(fun: BoundFunctionals, eps: float = 0.05,
                        schedule: Sequence[int] = DEFAULT_N_SCHEDULE) -> PredicateReport:
    """Evaluate parts (a)-(d) of the limiting lemma on sampled cube families.

    For each N: I runs over cubes near and far from the origin at scales
    around 2^-N..2^N, J over representatives outside D(2N) (too small, too
    large, too far).  N0 of a part is the first schedule entry from which
    the part holds at every later entry.
    """
    from .grid import cube_geometry
    holds = {p: [] for p in "abcd"}
    sups = {"Ft": [], "Fhat": []}
    n_pairs = 0
    for N in schedule:
        Is = _i_samples(N)
        Js = _j_outside(2 * N)
        ok = {"a": True, "b": True, "c": True}
        thr_rd = 2.0 * N ** 0.125
        for I in Is:
            in_DN = _member(I, N)
            for J in Js:
                n_pairs += 1
                g = cube_geometry(I, J)
                lo, hi = (I, J) if I.edge <= J.edge else (J, I)
                rd, rs = float(g.rd), float(g.rs)
                if ok["a"] and not (rd >= thr_rd or fun.F_pair(lo, hi) < eps):
                    ok["a"] = False
                if ok["b"] and rd < 1 and not (rs <= 2.0 ** -N or fun.Ft_pair(lo, hi) < eps):
                    ok["b"] = False
                if ok["c"] and in_DN:
                    k = J.level - I.level
                    if not (abs(k) >= N or g.rd >= 2 * N):
                        ok["c"] = False
        for p in "abc":
            holds[p].append(ok[p])
        outs = _i_outside(N)
        ft = max(fun.Ft(I) for I in outs)
        fh = max(fun.Fhat(I) for I in outs)
        sups["Ft"].append(ft)
        sups["Fhat"].append(fh)
        holds["d"].append(ft < eps and fh < eps)
    N0 = {}
    for p in "abcd":
        i = _first_tail_true(holds[p])
        N0[p] = None if i is None else int(schedule[i])
    return PredicateReport(eps, tuple(schedule), holds, N0, sups, {"pairs": n_pairs})


def mdt_check(k: int, delta: float, theta: float) -> tuple:
    """(2^-k sum_{m <= 2^k} m^(-2 delta), 2^(-2 k theta delta)); needs 0 < theta < 1/(1+2 delta)."""
    if not (0 < theta < 1.0 / (1.0 + 2.0 * delta)):
        raise ValueError("theta must lie in (0, 1/(1+2 delta))")
    if k < 0:
        raise ValueError("k must be >= 0")
    m = np.arange(1, 2 ** k + 1, dtype=float)
    terms = m ** (-2.0 * delta)
    lhs = float(np.sum(terms[::-1])) / 2.0 ** k
    return lhs, 2.0 ** (-2.0 * k * theta * delta)
