"""Haar matrix elements of bi-parameter kernels, their regimes and bounds.

For each parameter the pair (I_i, J_i) is put in canonical order
l(I_i) <= l(J_i); a swap is recorded and handled through the transposed
kernel factor, so only the cases with the smaller cube first need code.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .grid import (DyadicCube, HaarIndex, cube_geometry, format_cube, haar_mean, parse_cube,
                   truncation_family, Box)
from .kernels import KernelModel, BoundFunctionals
from .quad import (DEFAULT_SPEC, IntegralResult, PiecewiseConstant, QuadSpec, pair_integral_1d,
                   _product)

__all__ = ["Regime", "RegimeTag", "PairKey", "CoeffEntry", "CoeffTable", "regime_classify",
           "param_regime", "matrix_element", "phi_split", "bound_for_pair", "param_bound",
           "paraproduct_symbol", "wcp_and_diag_values", "compute_table", "thread_cap",
           "CSV_COLUMNS"]


class Regime(str, Enum):
    SEPARATED = "SEP"
    NEARBY = "NEAR"
    EQUAL = "EQ"
    INSIDE_B = "IN_B"
    INSIDE_G = "IN_G"

    @property
    def inside(self) -> bool:
        return self in (Regime.INSIDE_B, Regime.INSIDE_G)


@dataclass(frozen=True)
class RegimeTag:
    first: Regime
    second: Regime

    def __str__(self):
        return f"{self.first.value}/{self.second.value}"

    @classmethod
    def parse(cls, text: str) -> "RegimeTag":
        a, b = text.split("/")
        return cls(Regime(a), Regime(b))

    def __iter__(self):
        return iter((self.first, self.second))


def _as_haar(h) -> HaarIndex:
    return h if isinstance(h, HaarIndex) else HaarIndex(h)


@dataclass(frozen=True)
class PairKey:
    """Canonical (I1, I2, J1, J2) with l(I_i) <= l(J_i) and per-parameter swap flags."""

    I1: HaarIndex
    I2: HaarIndex
    J1: HaarIndex
    J2: HaarIndex
    swap: tuple = (False, False)

    @classmethod
    def make(cls, I1, I2, J1, J2) -> "PairKey":
        I = [_as_haar(I1), _as_haar(I2)]
        J = [_as_haar(J1), _as_haar(J2)]
        swap = []
        for i in range(2):
            s = I[i].cube.edge > J[i].cube.edge
            if s:
                I[i], J[i] = J[i], I[i]
            swap.append(bool(s))
        return cls(I[0], I[1], J[0], J[1], tuple(swap))

    def original(self):
        """(I1, I2, J1, J2) as first given."""
        I, J = [self.I1, self.I2], [self.J1, self.J2]
        for i in range(2):
            if self.swap[i]:
                I[i], J[i] = J[i], I[i]
        return I[0], I[1], J[0], J[1]

    def param(self, i: int):
        return (self.I1, self.J1) if i == 0 else (self.I2, self.J2)

    def sort_key(self):
        return tuple(h.sort_key() for h in self.original())

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()


def param_regime(I: DyadicCube, J: DyadicCube) -> Regime:
    """Regime of a canonical pair l(I) <= l(J) (exact arithmetic)."""
    if I.edge > J.edge:
        raise ValueError("canonical pairs need l(I) <= l(J)")
    if I == J:
        return Regime.EQUAL
    if J.contains(I):
        JI = next(c for c in J.children() if c.contains(I))
        d = min(min(a - lo, hi - (a + I.edge)) for a, lo, hi in zip(I.lower, JI.lower, JI.upper))
        # d > sqrt(l(I) l(J))  <=>  d^2 > l(I) l(J)
        return Regime.INSIDE_G if d * d > I.edge * J.edge else Regime.INSIDE_B
    g = cube_geometry(I, J)
    return Regime.SEPARATED if g.rd >= 1 else Regime.NEARBY


def regime_classify(key: PairKey) -> RegimeTag:
    return RegimeTag(param_regime(key.I1.cube, key.J1.cube),
                     param_regime(key.I2.cube, key.J2.cube))


@dataclass(frozen=True)
class PhiSplit:
    phi: PiecewiseConstant
    mean: float
    sup: float


def phi_split(I: DyadicCube, J: DyadicCube, eta: int = 1) -> PhiSplit:
    """phi_{IJ} = (h_J - <h_J>_I) 1_{J_I^c} and the constant <h_J>_I."""
    if I == J or not J.contains(I):
        raise ValueError("phi_split needs I strictly inside J")
    phi = PiecewiseConstant.phi(I, J, eta)
    mean = haar_mean(HaarIndex(J, (eta,)), I)
    sup = phi.sup
    if sup > 2 * float(J.edge) ** (-J.dim / 2) * (1 + 1e-15):
        raise AssertionError("phi exceeds 2 |J|^(-1/2)")
    return PhiSplit(phi, mean, sup)


# ---------------------------------------------------------------- matrix elements

@dataclass
class ParamPairing:
    value: float
    err: float
    phi: float | None = None
    para: float | None = None
    mean: float | None = None
    result: IntegralResult | None = None


class PairingCache:
    """Memo of one-parameter pairings shared across the keys of a table."""

    def __init__(self):
        self._d = {}

    def get(self, k):
        return self._d.get(k)

    def put(self, k, v):
        self._d[k] = v
        return v


def _param_pairing(K: KernelModel, i: int, Ih: HaarIndex, Jh: HaarIndex, swapped: bool,
                   spec: QuadSpec, cache: PairingCache | None) -> ParamPairing:
    ck = (i, Ih, Jh, swapped)
    if cache is not None:
        hit = cache.get(ck)
        if hit is not None:
            return hit
    factor = K.factors[i].transpose() if swapped else K.factors[i]
    I, J = Ih.cube, Jh.cube
    if J.contains(I) and I != J:
        sp = phi_split(I, J, Jh.eta[0])
        rphi = pair_integral_1d(factor, Ih, sp.phi, spec)
        rpara = pair_integral_1d(factor, Ih, PiecewiseConstant.one(), spec)
        val = math.fsum([rphi.value, sp.mean * rpara.value])
        err = rphi.err_est + abs(sp.mean) * rpara.err_est
        res = IntegralResult(val, err, rphi.n_evals + rpara.n_evals,
                             rphi.converged and rpara.converged, rphi.scale + abs(sp.mean) * rpara.scale)
        out = ParamPairing(val, err, rphi.value, rpara.value, sp.mean, res)
    else:
        r = pair_integral_1d(factor, Ih, Jh, spec)
        out = ParamPairing(r.value, r.err_est, result=r)
    return cache.put(ck, out) if cache is not None else out


def matrix_element(key: PairKey, K: KernelModel, spec: QuadSpec | None = None,
                   cache: PairingCache | None = None) -> IntegralResult:
    """<T(h_I1 x h_I2), h_J1 x h_J2>; STRICT_INSIDE parameters go through the phi-splitting.

    ``parts`` carries ``phi`` (the part the regime bound controls), the
    per-parameter pairings and the regime tag.
    """
    spec = spec or DEFAULT_SPEC
    if not K.separable:
        raise ValueError("matrix elements need a separable kernel model")
    for h in (key.I1, key.I2, key.J1, key.J2):
        if h.cube.dim != 1:
            raise ValueError("matrix elements are implemented for one-dimensional factors")
    tag = regime_classify(key)
    pp = [_param_pairing(K, i, *key.param(i), key.swap[i], spec, cache) for i in range(2)]
    res = _product([p.result for p in pp], spec.tol)
    phi_val = 1.0
    for p in pp:
        phi_val *= p.phi if p.phi is not None else p.value
    res.parts = {"phi": phi_val, "regime": tag, "pairings": pp}
    return res


# ---------------------------------------------------------------- bounds

def param_bound(I: DyadicCube, J: DyadicCube, regime: Regime, fun: BoundFunctionals) -> float:
    n = I.dim
    d = fun.delta
    if regime is Regime.EQUAL:
        return fun.Fhat(I)
    g = cube_geometry(I, J)
    rs, rd, ird = float(g.rs), float(g.rd), float(g.ird)
    if regime is Regime.SEPARATED:
        return fun.F_pair(I, J) * rs ** (n / 2 + d) / rd ** (n + d)
    if regime is Regime.NEARBY:
        return fun.Ft_pair(I, J) * rs ** (n / 2) / ird ** d
    if regime is Regime.INSIDE_B:
        return fun.Ft(I) * rs ** (n / 2)
    return fun.Ft_pair(I, J) * rs ** (n / 2 + d / 2)


def bound_for_pair(key: PairKey, K: KernelModel) -> float:
    """Product over parameters of the regime bound (phi-part for inside pairs)."""
    tag = regime_classify(key)
    out = 1.0
    for i, reg in enumerate(tag):
        Ih, Jh = key.param(i)
        out *= param_bound(Ih.cube, Jh.cube, reg, K.functionals(i))
    return out


# ---------------------------------------------------------------- symbols

def default_window(N: int) -> Box:
    fam = truncation_family(N, 1)
    lo = min(c.lower[0] for c in fam)
    hi = max(c.upper[0] for c in fam)
    half = max(abs(lo), abs(hi), 2 ** (N + 1))
    side = 1
    while side / 2 < half:
        side *= 2
    return Box.centered(side, 1)


def paraproduct_symbol(I1: DyadicCube, J1: DyadicCube, K: KernelModel, N: int = 3,
                       window: Box | None = None, spec: QuadSpec | None = None,
                       family=None) -> dict:
    """{I2: <b, h_I2>} for the first-parameter symbol attached to (I1, J1).

    J1 disjoint from I1 or equal: b = <T*(h_J1 x 1), h_I1>; I1 strictly
    inside J1: b = <T*(phi_{I1 J1} x 1), h_I1>.  Coefficients run over
    the truncation family (or ``family``) inside the window.
    """
    spec = spec or DEFAULT_SPEC
    if not K.separable:
        raise ValueError("paraproduct symbols need a separable kernel model")
    need = default_window(N)
    W = window or need
    if not W.contains_box(need):
        raise ValueError("window does not contain the truncation family")
    f1 = K.factors[0]
    if I1.edge > J1.edge:
        raise ValueError("symbols are defined for l(I1) <= l(J1)")
    g1 = PiecewiseConstant.phi(I1, J1) if (J1.contains(I1) and I1 != J1) else \
        PiecewiseConstant.haar(J1)
    first = pair_integral_1d(f1, HaarIndex(I1), g1, spec)
    fam = family if family is not None else truncation_family(N, 1)
    out = {}
    for I2 in fam:
        if not W.contains_box(I2.box):
            continue
        second = pair_integral_1d(K.factors[1], HaarIndex(I2), PiecewiseConstant.one(), spec)
        out[I2] = first.value * second.value
    return out


def wcp_and_diag_values(I1: DyadicCube, I2: DyadicCube, K: KernelModel,
                        spec: QuadSpec | None = None) -> dict:
    """Weak-compactness pairing and the four diagonal-CMO pairings on I1 x I2.

    The mean-zero test function a_I is the bump 1_left - 1_right.
    """
    spec = spec or DEFAULT_SPEC
    if not K.separable:
        raise ValueError("needs a separable kernel model")
    one = [PiecewiseConstant.indicator(I1), PiecewiseConstant.indicator(I2)]
    bump = [PiecewiseConstant.bump(I1), PiecewiseConstant.bump(I2)]

    def pair(f, g):
        parts = [pair_integral_1d(K.factors[i], f[i], g[i], spec) for i in range(2)]
        return _product(parts, spec.tol)

    return {
        "wcp": pair(one, one),
        "one_one__one_a": pair(one, [one[0], bump[1]]),
        "one_one__a_one": pair(one, [bump[0], one[1]]),
        "a_one__one_one": pair([bump[0], one[1]], one),
        "one_a__one_one": pair([one[0], bump[1]], one),
    }


# ---------------------------------------------------------------- tables

CSV_COLUMNS = ["I1", "eta1", "I2", "eta2", "J1", "mu1", "J2", "mu2", "regime", "value",
               "err_est", "bound", "ratio"]


def fmt17(x: float) -> str:
    return f"{x:.16e}"


@dataclass
class CoeffEntry:
    value: float
    err_est: float
    regime: RegimeTag
    bound: float
    phi: float
    converged: bool = True

    @property
    def ratio(self) -> float:
        if self.bound == 0:
            return 0.0 if self.phi == 0 else math.inf
        return abs(self.phi) / self.bound


@dataclass
class CoeffTable:
    entries: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=lambda: {"count": 0, "sum_sq": 0.0})
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return sorted(self.entries)

    def insert(self, key: PairKey, entry: CoeffEntry):
        self.entries[key] = entry

    def merge(self, other: "CoeffTable"):
        for k in other.keys():
            self.entries[k] = other.entries[k]
        self.dropped["count"] += other.dropped["count"]
        self.dropped["sum_sq"] += other.dropped["sum_sq"]

    def threshold(self, rel: float = 1e-14) -> "CoeffTable":
        """Drop entries below rel * max|value|; the dropped mass goes to the ledger."""
        vmax = max((abs(e.value) for e in self.entries.values()), default=0.0)
        tau = rel * vmax
        keep, dropped = {}, dict(self.dropped)
        for k in self.keys():
            e = self.entries[k]
            if abs(e.value) < tau:
                dropped["count"] += 1
                dropped["sum_sq"] += e.value ** 2
            else:
                keep[k] = e
        return CoeffTable(keep, dropped, dict(self.meta, tau=tau))

    def value(self, key: PairKey) -> float:
        e = self.entries.get(key)
        return 0.0 if e is None else e.value

    def rows(self):
        for k in self.keys():
            e = self.entries[k]
            I1, I2, J1, J2 = k.original()
            yield [format_cube(I1.cube), "".join(map(str, I1.eta)),
                   format_cube(I2.cube), "".join(map(str, I2.eta)),
                   format_cube(J1.cube), "".join(map(str, J1.eta)),
                   format_cube(J2.cube), "".join(map(str, J2.eta)),
                   str(e.regime), fmt17(e.value), fmt17(e.err_est), fmt17(e.bound),
                   fmt17(e.ratio)]

    def to_csv_text(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in sorted((header or {}).items()):
            buf.write(f"# {k}: {v}\n")
        buf.write(f"# dropped_count: {self.dropped['count']}\n")
        buf.write(f"# dropped_sum_sq: {fmt17(self.dropped['sum_sq'])}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows():
            w.writerow(r)
        return buf.getvalue()

    def save(self, path: str, header: dict | None = None):
        atomic_write(path, self.to_csv_text(header))

    @classmethod
    def load(cls, path: str) -> "CoeffTable":
        tab = cls()
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = []
        for ln in lines:
            if ln.startswith("#"):
                k, _, v = ln[1:].partition(":")
                k, v = k.strip(), v.strip()
                if k == "dropped_count":
                    tab.dropped["count"] = int(v)
                elif k == "dropped_sum_sq":
                    tab.dropped["sum_sq"] = float(v)
                else:
                    tab.meta[k] = v
            else:
                body.append(ln)
        rd = csv.DictReader(body)
        if rd.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected coefficient CSV columns {rd.fieldnames}")
        for row in rd:
            hs = [HaarIndex(parse_cube(row[c]), tuple(int(x) for x in row[e]))
                  for c, e in (("I1", "eta1"), ("I2", "eta2"), ("J1", "mu1"), ("J2", "mu2"))]
            key = PairKey.make(*hs)
            bound = float(row["bound"])
            ratio = float(row["ratio"])
            tab.entries[key] = CoeffEntry(float(row["value"]), float(row["err_est"]),
                                          RegimeTag.parse(row["regime"]), bound,
                                          ratio * bound if math.isfinite(ratio) else float(row["value"]))
        return tab


def atomic_write(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def thread_cap(default: int | None = None) -> int:
    """Worker count: DYADIC_T1_THREADS if set, else the CPU count."""
    env = os.environ.get("DYADIC_T1_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError("DYADIC_T1_THREADS must be a positive integer") from None
        if n < 1:
            raise ValueError("DYADIC_T1_THREADS must be a positive integer")
        return n
    return default or os.cpu_count() or 1


def compute_table(keys, K: KernelModel, spec: QuadSpec | None = None,
                  threads: int | None = None, with_bounds: bool = True) -> CoeffTable:
    """Matrix elements for ``keys``; results are merged in sorted key order."""
    spec = spec or DEFAULT_SPEC
    keys = sorted(set(keys))
    cache = PairingCache()
    n = thread_cap(threads)

    def one(k):
        r = matrix_element(k, K, spec, cache)
        b = bound_for_pair(k, K) if with_bounds else math.nan
        return k, CoeffEntry(r.value, r.err_est, r.parts["regime"], b, r.parts["phi"], r.converged)

    if n > 1 and len(keys) > 64:
        with ThreadPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(one, keys))
    else:
        results = [one(k) for k in keys]
    tab = CoeffTable()
    for k, e in results:
        tab.insert(k, e)
    return tab
