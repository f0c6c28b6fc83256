"""Admissible bound triples, monotone envelopes and kernel models.

A bound triple ``(F1, F2, F3)`` is stored as samples on a log-spaced grid
(default ``2^-12 .. 2^12``, 8 points per octave).  Triples carry a *form*:

``def``  F(x, y) = F1(|x-y|) F2(|x-y|) F3(|x+y|)
``p5``   F(x, y) = F1(|x-y|) F2(|x-y|) F3(1 + |x+y| / (1 + |x-y|))

Envelopes always come out in ``p5`` form.  Kernel models are bi-parameter
and separable, ``K(x, y) = k1(x1, y1) k2(x2, y2)`` with one-dimensional
factors; a non-separable callable is accepted for direct evaluation and
quadrature of disjoint supports.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from ._backend import core
from .grid import Box, DyadicCube, distance, join, rd_to_unit

__all__ = [
    "SampledFunction", "FuncTriple", "PartialBound", "Factor", "KernelModel",
    "BoundFunctionals", "ConditionReport", "envelope", "holder_envelope",
    "monotone_fix", "minimal_triple", "kernel_eval", "bound_size",
    "bound_holder", "verify_kernel_conditions", "partial_constants",
    "load_kernel", "builtin_kernel", "default_grid", "HOLDER_VARIANTS",
]

_EPS = np.finfo(float).eps


def default_grid(t_min_exp: int = -12, t_max_exp: int = 12, per_octave: int = 8) -> np.ndarray:
    n = (t_max_exp - t_min_exp) * per_octave
    return np.exp2(t_min_exp + np.arange(n + 1) / per_octave)


# ---------------------------------------------------------------- sampled functions

@dataclass(frozen=True, eq=False)
class SampledFunction:
    """Scalar function on [0, inf) given by samples.

    ``rule`` selects the evaluation between samples:
    ``loglinear`` (linear in log t, monotone between samples), ``floor``
    (value of the largest sample point <= s), ``ceil`` (smallest sample
    point >= s) or ``exact`` (call ``func``).  Outside the grid the end
    values are held.
    """

    t: np.ndarray
    v: np.ndarray
    rule: str = "loglinear"
    func: Callable | None = None
    monotone: str | None = None  # "increasing", "decreasing" or None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if t.ndim != 1 or t.size == 0 or t.shape != v.shape:
            raise ValueError("samples must be non-empty 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample abscissae must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("sampled values must be finite and nonnegative")
        if self.rule not in ("loglinear", "floor", "ceil", "exact"):
            raise ValueError(f"unknown interpolation rule {self.rule!r}")
        if self.rule == "exact" and self.func is None:
            raise ValueError("rule 'exact' needs func")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_callable(cls, func, t=None, monotone=None, rule="exact"):
        t = default_grid() if t is None else np.asarray(t, dtype=float)
        v = np.asarray(func(t), dtype=float) * np.ones_like(t)
        return cls(t, v, rule=rule, func=func if rule == "exact" else None, monotone=monotone)

    @classmethod
    def constant(cls, c: float, t=None):
        t = default_grid() if t is None else np.asarray(t, dtype=float)
        return cls(t, np.full_like(t, float(c)), rule="floor")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.rule == "exact":
            return np.asarray(self.func(s), dtype=float) * np.ones_like(s)
        t, v = self.t, self.v
        if self.rule == "loglinear":
            with np.errstate(divide="ignore"):
                ls = np.log2(np.maximum(s, t[0]))
            return np.interp(ls, np.log2(t), v)
        if self.rule == "floor":
            i = np.searchsorted(t, s, side="right") - 1
            return v[np.clip(i, 0, t.size - 1)]
        i = np.searchsorted(t, s, side="left")
        return v[np.clip(i, 0, t.size - 1)]

    @property
    def max(self) -> float:
        return float(self.v.max())

    def is_monotone(self, direction: str) -> bool:
        d = np.diff(self.v)
        return bool(np.all(d >= 0) if direction == "increasing" else np.all(d <= 0))

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "v": self.v.tolist(),
                "rule": "loglinear" if self.rule == "exact" else self.rule}

    @classmethod
    def from_dict(cls, d: dict, monotone=None):
        return cls(np.asarray(d["t"]), np.asarray(d["v"]), rule=d.get("rule", "loglinear"),
                   monotone=monotone)


@dataclass(frozen=True, eq=False)
class FuncTriple:
    F1: SampledFunction
    F2: SampledFunction
    F3: SampledFunction
    form: str = "def"

    def __post_init__(self):
        if self.form not in ("def", "p5"):
            raise ValueError("form must be 'def' or 'p5'")

    @classmethod
    def from_callables(cls, f1, f2, f3, form="def", t=None, rule="exact"):
        t = default_grid() if t is None else t
        if form == "p5":
            t3 = 1.0 + np.concatenate([[0.0], t])
        else:
            t3 = t
        return cls(SampledFunction.from_callable(f1, t, "increasing", rule),
                   SampledFunction.from_callable(f2, t, "decreasing", rule),
                   SampledFunction.from_callable(f3, t3, "decreasing", rule), form)

    @classmethod
    def constant(cls, c: float = 1.0, form="p5", t=None):
        t = default_grid() if t is None else t
        t3 = 1.0 + np.concatenate([[0.0], t]) if form == "p5" else t
        c3 = float(c) ** (1.0 / 3.0)
        return cls(SampledFunction.constant(c3, t), SampledFunction.constant(c3, t),
                   SampledFunction.constant(c3, t3), form)

    def third_arg(self, r, s):
        """Argument handed to F3 for |x-y| = r, |x+y| = s."""
        r, s = np.asarray(r, dtype=float), np.asarray(s, dtype=float)
        return s if self.form == "def" else 1.0 + s / (1.0 + r)

    def pointwise(self, x, y, first=None):
        """F(x, y) of the triple; ``first`` overrides the argument of F1."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        r, s = np.abs(x - y), np.abs(x + y)
        a1 = r if first is None else first
        return self.F1(a1) * self.F2(r) * self.F3(self.third_arg(r, s))

    def limits_report(self, tol_limit: float = 0.05) -> dict:
        out = {}
        for name, f, end in (("F1", self.F1, 0), ("F2", self.F2, -1), ("F3", self.F3, -1)):
            m = f.max
            out[name] = {"extreme": float(f.v[end]), "max": m,
                         "vanishes": bool(f.v[end] <= tol_limit * m) if m > 0 else True}
        out["admissible"] = all(out[n]["vanishes"] for n in ("F1", "F2", "F3"))
        return out

    def monotone_flags(self) -> dict:
        return {"F1_increasing": self.F1.is_monotone("increasing"),
                "F2_decreasing": self.F2.is_monotone("decreasing"),
                "F3_decreasing": self.F3.is_monotone("decreasing")}

    def scaled(self, c: float) -> "FuncTriple":
        f1 = self.F1
        if f1.rule == "exact":
            g = f1.func
            nf = SampledFunction(f1.t, f1.v * c, "exact", lambda s, g=g: c * g(s), f1.monotone)
        else:
            nf = SampledFunction(f1.t, f1.v * c, f1.rule, None, f1.monotone)
        return FuncTriple(nf, self.F2, self.F3, self.form)

    def to_dict(self) -> dict:
        return {"form": self.form, "F1": self.F1.to_dict(), "F2": self.F2.to_dict(),
                "F3": self.F3.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FuncTriple":
        return cls(SampledFunction.from_dict(d["F1"], "increasing"),
                   SampledFunction.from_dict(d["F2"], "decreasing"),
                   SampledFunction.from_dict(d["F3"], "decreasing"), d.get("form", "def"))


def _cbrt_up(p):
    # cube root nudged upward so that c*c*c >= p survives rounding
    return np.cbrt(p) * (1.0 + 8 * _EPS)


def _tau_grid(t: np.ndarray) -> np.ndarray:
    return 1.0 + np.concatenate([[0.0], t])


def _sup_at_or_above(keys: np.ndarray, vals: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """For each g in grid: max of vals over keys >= g.

    Grid points beyond the largest key hold the value at that key, since
    nothing on the lattice says the function drops there.
    """
    order = np.argsort(keys, kind="stable")
    k, v = keys[order], vals[order]
    suffix = np.maximum.accumulate(v[::-1])[::-1]
    i = np.searchsorted(k, grid, side="left")
    return suffix[np.minimum(i, k.size - 1)]


def envelope(F: FuncTriple) -> FuncTriple:
    """Monotone envelope triple dominating F on every sample pair.

    With c = F(x,y)^(1/3) sampled at |x-y| = r_i, |x+y| in {0} u grid:
    F1' is the running max of c over r <= t, F2' over r >= t and F3' over
    pairs with 1 + |x+y|/(1+|x-y|) >= t.
    """
    t = F.F1.t
    if t.size == 0:
        raise ValueError("empty sample grid")
    s = np.concatenate([[0.0], t])
    R, S = np.meshgrid(t, s, indexing="ij")
    P = F.F1(R) * F.F2(R) * F.F3(F.third_arg(R, S))
    c = _cbrt_up(P)
    row = c.max(axis=1)
    f1 = np.maximum.accumulate(row)
    f2 = np.maximum.accumulate(row[::-1])[::-1]
    tau = 1.0 + S / (1.0 + R)
    g = _tau_grid(t)
    f3 = _sup_at_or_above(tau.ravel(), c.ravel(), g)
    return FuncTriple(SampledFunction(t, f1, "floor", monotone="increasing"),
                      SampledFunction(t, f2, "ceil", monotone="decreasing"),
                      SampledFunction(g, f3, "floor", monotone="decreasing"), "p5")


def envelope_domination(F: FuncTriple, E: FuncTriple) -> float:
    """max over sample pairs of F / (E1 E2 E3); <= 1 means domination."""
    t = F.F1.t
    s = np.concatenate([[0.0], t])
    R, S = np.meshgrid(t, s, indexing="ij")
    P = F.F1(R) * F.F2(R) * F.F3(F.third_arg(R, S))
    Q = E.F1(R) * E.F2(R) * E.F3(E.third_arg(R, S))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(P > 0, P / Q, 0.0)
    return float(np.max(ratio))


def _holder_lattice(F: FuncTriple, delta, delta_p, ratios=None):
    t = F.F1.t
    eps = delta - delta_p
    s = np.concatenate([[0.0], t])
    base = F.F1(t)[:, None] * F.F2(t)[:, None] * F.F3(F.third_arg(t[:, None], s[None, :]))
    if ratios is None:
        rho = t[None, :, None] * np.ones((t.size, 1, 1))
        q = t[None, :, None] / t[:, None, None]
        valid = q <= 0.5
    else:
        q = np.asarray(ratios, dtype=float)[None, :, None] * np.ones((t.size, 1, 1))
        rho = q * t[:, None, None]
        valid = np.ones(q.shape, dtype=bool)
    vals = base[:, None, :] * np.where(valid, q, 0.0) ** eps
    vals = np.where(valid, vals, 0.0)
    return t, s, rho, vals, valid


def holder_envelope(F: FuncTriple, delta: float, delta_p: float | None = None,
                    ratios: Sequence[float] | None = None) -> FuncTriple:
    """Envelope of F(x,y) (|y-y'|/|x-y|)^(delta-delta') on the sample lattice.

    The lattice runs over |x-y| = r and |y-y'| = rho on the sample grid with
    rho <= r/2 (or rho = q r for the given ``ratios``) and |x+y| in
    {0} u grid.  F1' is indexed by rho, F2' by r and F3' by the p5
    argument.  The factor (rho/r)^eps grows with rho, so the F2' and F3'
    sups sit at the largest admissible rho for each r.
    """
    if delta_p is None:
        delta_p = delta / 2
    if not (0 < delta_p < delta):
        raise ValueError("need 0 < delta' < delta")
    eps = delta - delta_p
    t = F.F1.t
    s = np.concatenate([[0.0], t])
    base = F.F1(t)[:, None] * F.F2(t)[:, None] * F.F3(F.third_arg(t[:, None], s[None, :]))
    peak = base.max(axis=1)
    if ratios is None:
        q = t[None, :] / t[:, None]
        valid = q <= 0.5
        rho = np.broadcast_to(t[None, :], q.shape)
    else:
        qs = np.asarray(ratios, dtype=float)
        q = np.broadcast_to(qs[None, :], (t.size, qs.size))
        valid = np.ones(q.shape, dtype=bool)
        rho = q * t[:, None]
    by_pair = np.where(valid, _cbrt_up(peak[:, None] * np.where(valid, q, 0.0) ** eps), 0.0)
    rk, vk = rho[valid], by_pair[valid]
    order = np.argsort(rk, kind="stable")
    prefix = np.maximum.accumulate(vk[order])
    j = np.searchsorted(rk[order], t, side="right") - 1
    f1 = np.where(j >= 0, prefix[np.clip(j, 0, prefix.size - 1)], 0.0)
    qmax = np.where(valid, q, 0.0).max(axis=1)
    c = _cbrt_up(base * qmax[:, None] ** eps)
    f2 = np.maximum.accumulate(c.max(axis=1)[::-1])[::-1]
    tau = 1.0 + s[None, :] / (1.0 + t[:, None])
    g = _tau_grid(t)
    f3 = _sup_at_or_above(np.broadcast_to(tau, c.shape).ravel(), c.ravel(), g)
    return FuncTriple(SampledFunction(t, f1, "floor", monotone="increasing"),
                      SampledFunction(t, f2, "ceil", monotone="decreasing"),
                      SampledFunction(g, f3, "floor", monotone="decreasing"), "p5")


def holder_domination(F: FuncTriple, E: FuncTriple, delta, delta_p, ratios=None) -> float:
    """max over lattice triples of lhs / rhs of the improved Hölder bound."""
    t, s, rho, vals, valid = _holder_lattice(F, delta, delta_p, ratios)
    R = t[:, None, None]
    rhs = E.F1(rho) * E.F2(R) * E.F3(1.0 + s[None, None, :] / (1.0 + R))
    rhs = np.broadcast_to(rhs, vals.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vals > 0, vals / rhs, 0.0)
    return float(ratio.max())


def monotone_fix(F: FuncTriple) -> FuncTriple:
    """(F1*, F2*, F3*): running sups making F1 increasing, F2 and F3 decreasing."""
    def up(f):
        return SampledFunction(f.t, np.maximum.accumulate(f.v), "floor", monotone="increasing")

    def down(f):
        return SampledFunction(f.t, np.maximum.accumulate(f.v[::-1])[::-1], "ceil",
                               monotone="decreasing")
    return FuncTriple(up(F.F1), down(F.F2), down(F.F3), F.form)


# ---------------------------------------------------------------- cube functions

@dataclass(frozen=True, eq=False)
class PartialBound:
    """F(I) = c G1(l(I)) G2(l(I)) G3(rd(I, II))."""

    G1: SampledFunction
    G2: SampledFunction
    G3: SampledFunction
    const: float = 1.0

    @classmethod
    def from_callables(cls, g1, g2, g3, const=1.0):
        t = default_grid()
        t3 = np.concatenate([[0.0], t])
        return cls(SampledFunction.from_callable(g1, t, "increasing"),
                   SampledFunction.from_callable(g2, t, "decreasing"),
                   SampledFunction.from_callable(g3, t3, "decreasing"), const)

    @classmethod
    def constant(cls, c=1.0):
        t = default_grid()
        one = SampledFunction.constant(1.0, t)
        return cls(one, one, SampledFunction.constant(1.0, np.concatenate([[0.0], t])), c)

    def __call__(self, I) -> float:
        box = I if isinstance(I, Box) else I.box
        ell = float(box.edge)
        rd = float(rd_to_unit(box))
        return float(self.const * self.G1(ell) * self.G2(ell) * self.G3(rd))

    def limits_report(self, tol_limit: float = 0.05) -> dict:
        small = self.G1.v[0] * self.G2.v[0]
        large = self.G1.v[-1] * self.G2.v[-1]
        peak = float(np.max(self.G1.v * self.G2(self.G1.t)))
        far = self.G3.v[-1]
        rep = {"small": float(small), "large": float(large), "far": float(far), "peak": peak,
               "vanishes_small": bool(small <= tol_limit * peak),
               "vanishes_large": bool(large <= tol_limit * peak),
               "vanishes_far": bool(far <= tol_limit * self.G3.max)}
        rep["admissible"] = rep["vanishes_small"] and rep["vanishes_large"] and rep["vanishes_far"]
        return rep

    def to_dict(self):
        return {"G1": self.G1.to_dict(), "G2": self.G2.to_dict(), "G3": self.G3.to_dict(),
                "const": self.const}


# ---------------------------------------------------------------- kernel factors

@dataclass(frozen=True, eq=False)
class Factor:
    """One-parameter kernel factor k(x, y).

    ``family`` is ``hilbert`` (1/(x-y)), ``compact`` (psi(r) sign(x-y)/r
    times a Gaussian in x+y), ``zero`` or ``custom`` (vectorised callable).
    ``singular`` marks factors of size ~1/|x-y| at the diagonal; bounded
    factors may be integrated across it.
    """

    family: str
    params: tuple = ()
    func: Callable | None = None
    odd: bool = False
    singular: bool = False
    tail: Callable | None = None  # custom: (y_lo, y_hi, tol) -> radius

    @classmethod
    def hilbert(cls):
        return cls("hilbert", (), None, odd=True, singular=True)

    @classmethod
    def compact(cls, p: float = 2.0, q: float = 4.0, sigma: float = 1.0):
        if not (p >= 2.0 and q > p):
            raise ValueError("psi(r) = r^p/(1+r^q) needs p >= 2 and q > p")
        if sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        return cls("compact", (float(p), float(q), float(sigma)), None, odd=True, singular=False)

    @classmethod
    def zero(cls):
        return cls("zero", (), None, odd=True, singular=False)

    @classmethod
    def custom(cls, func, odd=False, singular=True, tail=None):
        return cls("custom", (), func, odd=odd, singular=singular, tail=tail)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.family == "hilbert":
            with np.errstate(divide="ignore"):
                return 1.0 / (x - y)
        if self.family == "compact":
            p, q, sig = self.params
            u, v = np.broadcast_arrays(x - y, x + y)
            shp = u.shape
            out = core.compact_eval(np.ascontiguousarray(u.ravel()),
                                    np.ascontiguousarray(v.ravel()), p, q, sig)
            return np.asarray(out).reshape(shp)
        if self.family == "zero":
            return np.zeros(np.broadcast(x, y).shape)
        return np.asarray(self.func(x, y), dtype=float)

    def transpose(self) -> "Factor":
        """k^T(x, y) = k(y, x)."""
        if self.family in ("hilbert", "compact", "zero") or self.odd:
            return self if self.family == "zero" else _Negated(self)
        f = self.func
        return Factor.custom(lambda x, y: f(y, x), odd=False, singular=self.singular,
                             tail=self.tail)

    @property
    def is_zero(self) -> bool:
        return self.family == "zero"

    def tail_radius(self, y_lo: float, y_hi: float, tol: float) -> float | None:
        """Radius R such that x outside [-R, R] contributes < tol per unit y-mass.

        None when the factor has no integrable decay (the Hilbert factor
        relies on cancellation instead).
        """
        if self.family == "zero":
            return max(abs(y_lo), abs(y_hi))
        if self.family == "compact":
            p, q, sig = self.params
            # |k| <= gmax exp(-(x+y)^2 / 4 sig^2); tail mass of the Gaussian in x
            gmax = _gmax(p, q)
            ymax = max(abs(y_lo), abs(y_hi))
            target = max(tol, 1e-300) / (gmax * sig * math.sqrt(math.pi) * 2.0)
            V = 2.0 * sig * _erfc_inv(target)
            return ymax + V
        if self.tail is not None:
            return self.tail(y_lo, y_hi, tol)
        return None

    def to_dict(self):
        if self.family == "custom":
            raise ValueError("custom factors are not serialisable")
        d = {"family": self.family}
        if self.family == "compact":
            p, q, s = self.params
            d.update(psi_params=[p, q], gaussian_sigma=s)
        return d


class _Negated(Factor):
    def __init__(self, base: Factor):
        object.__setattr__(self, "family", base.family)
        object.__setattr__(self, "params", base.params)
        object.__setattr__(self, "func", base.func)
        object.__setattr__(self, "odd", base.odd)
        object.__setattr__(self, "singular", base.singular)
        object.__setattr__(self, "tail", base.tail)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "negated", True)

    def __call__(self, x, y):
        return -self.base(x, y)

    def transpose(self):
        return self.base


def _gmax(p, q):
    r = np.exp2(np.linspace(-20, 20, 4001))
    return float(np.max(r ** (p - 1) / (1 + r ** q))) * 1.01


def _erfc_inv(y):
    from scipy.special import erfcinv
    return float(erfcinv(min(max(y, 1e-300), 1.0)))


def factor_sign(f: Factor) -> float:
    return -1.0 if getattr(f, "negated", False) else 1.0


def factor_base(f: Factor) -> Factor:
    return getattr(f, "base", f)


# ---------------------------------------------------------------- bound functionals

@dataclass(frozen=True, eq=False)
class BoundFunctionals:
    """Cube functionals built from one parameter's triple (p5 form).

    F(I,J)  = F1(l(I)) F2(l(I v J)) F3(rd(I v J, II))
    F~(I,J) = F1(l(I)) F2~(l(I)) F3~(I v J)
    F~(I)   = F1(l(I)) F2~(l(I)) F3~(I)
    F^(I)   = F~(I) + F(I) + sum over children F(I')
    with F2~(t) = sum_k 2^(-k theta) F2(2^-k t) and
    F3~(B) = sum_k 2^(-k delta) F3(rd(2^k B, II)).
    """

    triple: FuncTriple
    partial: PartialBound
    delta: float = 1.0
    theta: float = 0.1

    def F_pair(self, I, J) -> float:
        a = I.box if hasattr(I, "box") else I
        b = J.box if hasattr(J, "box") else J
        B = join(a, b)
        return float(self.triple.F1(float(a.edge)) * self.triple.F2(float(B.edge))
                     * self.triple.F3(float(rd_to_unit(B))))

    def F2_tilde(self, t: float, exponent: float | None = None) -> float:
        th = self.theta if exponent is None else exponent
        kmax = int(math.ceil(60.0 / th)) + 1
        k = np.arange(kmax)
        return float(np.sum(np.exp2(-k * th) * self.triple.F2(t * np.exp2(-k))))

    def F3_tilde(self, B) -> float:
        box = B.box if hasattr(B, "box") else B
        kmax = int(math.ceil(60.0 / self.delta)) + 1
        c = [float(x) for x in box.center]
        e = float(box.edge)
        rds = []
        for k in range(kmax):
            ek = e * 2.0 ** k
            gap = max(max(abs(ci) - ek / 2 - 0.5, 0.0) for ci in c)
            rds.append(gap / max(ek, 1.0))
        k = np.arange(kmax)
        return float(np.sum(np.exp2(-k * self.delta) * self.triple.F3(np.array(rds))))

    def Ft_pair(self, I, J) -> float:
        a = I.box if hasattr(I, "box") else I
        b = J.box if hasattr(J, "box") else J
        ell = float(a.edge)
        return float(self.triple.F1(ell)) * self.F2_tilde(ell) * self.F3_tilde(join(a, b))

    def Ft(self, I) -> float:
        a = I.box if hasattr(I, "box") else I
        ell = float(a.edge)
        return float(self.triple.F1(ell)) * self.F2_tilde(ell) * self.F3_tilde(a)

    def F_cube(self, I) -> float:
        return self.partial(I)

    def Fhat(self, I: DyadicCube) -> float:
        return self.Ft(I) + self.F_cube(I) + sum(self.F_cube(c) for c in I.children())


# ---------------------------------------------------------------- kernel models

KINDS = ("tensor_hilbert", "compact_model", "custom_separable", "zero")


@dataclass(frozen=True, eq=False)
class KernelModel:
    kind: str
    factors: tuple
    delta: tuple = (1.0, 1.0)
    triples: tuple = None
    partials: tuple = None
    theta: float = 0.1
    full: Callable | None = None  # non-separable evaluator K(x1, x2, y1, y2)
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        for d in self.delta:
            if not (0 < d <= 1):
                raise ValueError("Hölder exponents must lie in (0, 1]")
        if self.triples is None:
            object.__setattr__(self, "triples", (FuncTriple.constant(), FuncTriple.constant()))
        if self.partials is None:
            object.__setattr__(self, "partials", (PartialBound.constant(), PartialBound.constant()))

    @property
    def separable(self) -> bool:
        return self.full is None

    def factor(self, i: int) -> Factor:
        return self.factors[i]

    @property
    def delta_p(self) -> tuple:
        """Exponents of the improved (envelope) conditions, delta/2."""
        return tuple(d / 2 for d in self.delta)

    def _cached(self, key, make):
        cache = self.__dict__.setdefault("_cache", {})
        if key not in cache:
            cache[key] = make()
        return cache[key]

    def size_triple(self, i: int) -> FuncTriple:
        """Monotone p5-form triple for the size condition."""
        return self._cached(("size", i), lambda: envelope(self.triples[i]))

    def holder_triple(self, i: int) -> FuncTriple:
        """p5-form triple with F1 taken at the displacement and exponent delta/2."""
        return self._cached(("holder", i), lambda: holder_envelope(
            self.triples[i], self.delta[i], self.delta_p[i]))

    def bound_triple(self, i: int) -> FuncTriple:
        """Pointwise max of the size and Hölder triples, used by all cube bounds."""
        def make():
            a, b = self.size_triple(i), self.holder_triple(i)
            return FuncTriple(*(SampledFunction(fa.t, np.maximum(fa.v, fb.v), fa.rule,
                                                monotone=fa.monotone)
                                for fa, fb in ((a.F1, b.F1), (a.F2, b.F2), (a.F3, b.F3))), "p5")
        return self._cached(("bound", i), make)

    def functionals(self, i: int, improved: bool = True) -> BoundFunctionals:
        """Cube functionals of parameter i; ``improved=False`` uses the attached triple and delta."""
        if not improved:
            return BoundFunctionals(self.triples[i], self.partials[i], self.delta[i], self.theta)
        return BoundFunctionals(self.bound_triple(i), self.partials[i], self.delta_p[i],
                                self.theta)

    def __call__(self, x, y):
        x1, x2 = x
        y1, y2 = y
        if self.full is not None:
            return self.full(x1, x2, y1, y2)
        return self.factors[0](x1, y1) * self.factors[1](x2, y2)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "delta1": self.delta[0], "delta2": self.delta[1],
             "theta": self.theta, "factors": [f.to_dict() for f in self.factors]}
        f0 = self.factors[0]
        if f0.family == "compact":
            d["psi_params"] = list(f0.params[:2])
            d["gaussian_sigma"] = f0.params[2]
        d["functriple"] = [t.to_dict() for t in self.triples]
        return d


def _compact_triple(c1: float = 6.0) -> FuncTriple:
    return FuncTriple.from_callables(
        lambda t: c1 * t * t / (1.0 + t * t),
        lambda t: 1.0 / (1.0 + t),
        lambda s: 4.0 / (4.0 + s),
        form="def")


def _compact_partial(c: float = 4.0) -> PartialBound:
    return PartialBound.from_callables(
        lambda t: t * t / (1.0 + t * t),
        lambda t: 1.0 / (1.0 + t),
        lambda r: np.exp(-np.asarray(r) ** 2 / 4.0),
        const=c)


def builtin_kernel(name: str) -> KernelModel:
    if name == "compact_model":
        f = Factor.compact()
        return KernelModel("compact_model", (f, f), (1.0, 1.0),
                           (_compact_triple(), _compact_triple()),
                           (_compact_partial(), _compact_partial()), name=name)
    if name == "tensor_hilbert":
        f = Factor.hilbert()
        return KernelModel("tensor_hilbert", (f, f), (1.0, 1.0),
                           (FuncTriple.constant(form="def"), FuncTriple.constant(form="def")),
                           (PartialBound.constant(2.0), PartialBound.constant(2.0)), name=name)
    if name == "zero":
        f = Factor.zero()
        return KernelModel("zero", (f, f), (1.0, 1.0), name=name)
    raise KeyError(f"unknown builtin kernel {name!r}")


def _factor_from_dict(d: dict, defaults: dict) -> Factor:
    fam = d.get("family", "compact")
    if fam == "hilbert":
        return Factor.hilbert()
    if fam == "zero":
        return Factor.zero()
    if fam == "compact":
        p, q = d.get("psi_params", defaults.get("psi_params", [2.0, 4.0]))
        return Factor.compact(p, q, d.get("gaussian_sigma", defaults.get("gaussian_sigma", 1.0)))
    raise ValueError(f"unknown factor family {fam!r}")


def load_kernel(spec) -> KernelModel:
    """Kernel from a builtin name, a JSON file path or a config dict.

    Config keys: ``kind``, ``delta1``, ``delta2``, ``psi_params``,
    ``gaussian_sigma``, optional ``factors`` (two dicts with ``family``)
    and optional ``functriple`` (one dict or two, each with F1/F2/F3
    sample dicts ``{"t": [...], "v": [...]}``).
    """
    if isinstance(spec, KernelModel):
        return spec
    if isinstance(spec, str):
        if spec in ("compact_model", "tensor_hilbert", "zero"):
            return builtin_kernel(spec)
        with open(spec) as fh:
            try:
                spec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"kernel config {fh.name}: {exc}") from None
    if not isinstance(spec, dict):
        raise ValueError("kernel config must be a JSON object")
    kind = spec.get("kind")
    if kind not in KINDS:
        raise ValueError(f"kernel config: 'kind' must be one of {KINDS}, got {kind!r}")
    base = builtin_kernel(kind) if kind in ("compact_model", "tensor_hilbert", "zero") else None
    delta = (float(spec.get("delta1", 1.0)), float(spec.get("delta2", 1.0)))
    if "factors" in spec:
        fl = spec["factors"]
        if len(fl) != 2:
            raise ValueError("kernel config: 'factors' needs two entries")
        factors = tuple(_factor_from_dict(f, spec) for f in fl)
    elif kind == "compact_model":
        f = _factor_from_dict({"family": "compact"}, spec)
        factors = (f, f)
    elif base is not None:
        factors = base.factors
    else:
        raise ValueError("custom_separable config needs 'factors'")
    triples = base.triples if base is not None else None
    partials = base.partials if base is not None else None
    if "functriple" in spec:
        ft = spec["functriple"]
        ft = ft if isinstance(ft, list) else [ft, ft]
        triples = tuple(FuncTriple.from_dict(t) for t in ft)
    return KernelModel(kind, factors, delta, triples, partials,
                       theta=float(spec.get("theta", 0.1)), name=spec.get("name", kind))


# ---------------------------------------------------------------- pointwise bounds

HOLDER_VARIANTS = ("size", "holder_xx", "holder_yx", "holder_xy", "holder_yy",
                   "mixed_x1", "mixed_x2", "mixed_y1", "mixed_y2")

# per variant: displacement kind in parameter 1 and 2 ('x', 'y' or None)
_VARIANT_MOVES = {
    "size": (None, None),
    "holder_xx": ("x", "x"), "holder_yx": ("y", "x"),
    "holder_xy": ("x", "y"), "holder_yy": ("y", "y"),
    "mixed_x1": ("x", None), "mixed_x2": (None, "x"),
    "mixed_y1": ("y", None), "mixed_y2": (None, "y"),
}


def _diag_guard(x, y, eps):
    if np.any(np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) <= eps):
        raise ValueError("point pair within the diagonal guard band")


def kernel_eval(K: KernelModel, x, y, eps_diag: float = 0.0):
    """K(x, y) for x = (x1, x2), y = (y1, y2), off both diagonals."""
    _diag_guard(x[0], y[0], eps_diag)
    _diag_guard(x[1], y[1], eps_diag)
    return K(x, y)


def _param_bound(K: KernelModel, i: int, x, y, disp, form: str = "p5"):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    r = np.abs(x - y)
    if form == "def":
        out = K.triples[i].pointwise(x, y) / r
        return out if disp is None else out * (disp / r) ** K.delta[i]
    if form != "p5":
        raise ValueError("form must be 'def' or 'p5'")
    if disp is None:
        return K.size_triple(i).pointwise(x, y) / r
    T = K.holder_triple(i)
    return T.pointwise(x, y, first=disp) / r * (disp / r) ** K.delta_p[i]


def bound_size(K: KernelModel, x, y, form: str = "p5"):
    return (_param_bound(K, 0, x[0], y[0], None, form)
            * _param_bound(K, 1, x[1], y[1], None, form))


def bound_holder(K: KernelModel, x, y, xp, yp, variant: str, form: str = "p5"):
    """Right-hand side of the size / Hölder / mixed condition ``variant``.

    ``p5`` uses the monotone envelopes of the attached triples: F1 at
    |x-y| for size, F1 at the displacement with exponent delta/2 for
    Hölder parts.  ``def`` uses the attached triples and delta directly.
    """
    if variant not in _VARIANT_MOVES:
        raise ValueError(f"unknown variant {variant!r}")
    moves = _VARIANT_MOVES[variant]
    out = 1.0
    for i in range(2):
        xi, yi = np.asarray(x[i], dtype=float), np.asarray(y[i], dtype=float)
        r = np.abs(xi - yi)
        mv = moves[i]
        disp = None
        if mv == "x":
            disp = np.abs(np.asarray(xp[i], dtype=float) - xi)
        elif mv == "y":
            disp = np.abs(np.asarray(yp[i], dtype=float) - yi)
        if disp is not None and np.any(disp > r / 2 * (1 + 1e-12)):
            raise ValueError(f"displacement constraint violated in parameter {i + 1}")
        out = out * _param_bound(K, i, xi, yi, disp, form)
    return out


def _measured(K: KernelModel, x, y, xp, yp, variant):
    moves = _VARIANT_MOVES[variant]
    if moves == (None, None):
        return np.abs(K(x, y))
    if None in moves:
        i = 0 if moves[0] else 1
        x2, y2 = list(x), list(y)
        if moves[i] == "x":
            x2[i] = xp[i]
        else:
            y2[i] = yp[i]
        return np.abs(K(x, y) - K(tuple(x2), tuple(y2)))
    # double difference
    def moved(i_set):
        xx, yy = list(x), list(y)
        for i in i_set:
            if moves[i] == "x":
                xx[i] = xp[i]
            else:
                yy[i] = yp[i]
        return K(tuple(xx), tuple(yy))
    return np.abs(moved(()) - moved((1,)) - moved((0,)) + moved((0, 1)))


@dataclass
class ConditionReport:
    ratios: dict
    worst: dict
    c_max: float
    passed: bool
    limits: dict = field(default_factory=dict)

    def to_dict(self):
        return {"c_max": self.c_max, "passed": self.passed, "max_ratio": self.ratios,
                "worst_case": self.worst, "limits": self.limits}


def _param_configs(spec: dict, rng):
    r = np.exp2(np.arange(spec.get("r_min_exp", -8), spec.get("r_max_exp", 8) + 1e-9,
                          spec.get("r_step", 0.5)))
    s = np.array(spec.get("centers", [-16, -4, -1, -0.25, 0, 0.25, 1, 4, 16]), dtype=float)
    fr = np.array(spec.get("fractions", [1 / 64, 1 / 8, 1 / 2]), dtype=float)
    R, S, Q, G = np.meshgrid(r, s, fr, [-1.0, 1.0], indexing="ij")
    R, S, Q, G = R.ravel(), S.ravel(), Q.ravel(), G.ravel()
    x = (S + R) / 2
    y = (S - R) / 2
    disp = G * Q * R
    return x, y, disp


def verify_kernel_conditions(K: KernelModel, sample_spec: dict | None = None,
                             c_max: float = 10.0, form: str = "p5") -> ConditionReport:
    """Max of measured / claimed over lattices of admissible configurations.

    Each parameter runs over |x-y| on a log grid, a set of centres x+y,
    displacement fractions of |x-y|/2 and both signs; the bi-parameter
    lattice is a seeded random pairing of the two one-parameter lattices.
    """
    spec = dict(sample_spec or {})
    rng = np.random.default_rng(spec.get("seed", 0))
    x1, y1, d1 = _param_configs(spec, rng)
    n_pairs = spec.get("pairs", 40000)
    i1 = rng.integers(0, x1.size, n_pairs)
    i2 = rng.integers(0, x1.size, n_pairs)
    x = (x1[i1], x1[i2])
    y = (y1[i1], y1[i2])
    d = (d1[i1], d1[i2])
    ratios, worst = {}, {}
    for variant, moves in _VARIANT_MOVES.items():
        xp = (x[0] + (d[0] if moves[0] == "x" else 0), x[1] + (d[1] if moves[1] == "x" else 0))
        yp = (y[0] + (d[0] if moves[0] == "y" else 0), y[1] + (d[1] if moves[1] == "y" else 0))
        meas = _measured(K, x, y, xp, yp, variant)
        bnd = bound_holder(K, x, y, xp, yp, variant, form)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(meas > 0, meas / bnd, 0.0)
        q = np.nan_to_num(q, nan=np.inf)
        k = int(np.argmax(q))
        ratios[variant] = float(q[k])
        worst[variant] = {"x": [float(x[0][k]), float(x[1][k])],
                          "y": [float(y[0][k]), float(y[1][k])]}
    limits = {"triple1": K.triples[0].limits_report(), "triple2": K.triples[1].limits_report()}
    passed = all(v <= c_max for v in ratios.values())
    return ConditionReport(ratios, worst, c_max, passed, limits)


def minimal_triple(K: KernelModel, i: int = 0, t=None) -> FuncTriple:
    """Smallest sampled bound of factor i, |k(x,y)| |x-y|, passed through the envelope.

    Any admissible triple for the factor dominates this one up to a constant.
    """
    t = default_grid(-8, 8, 4) if t is None else t
    f = K.factors[i]

    def sampled(r, s):
        x, y = (s + r) / 2, (s - r) / 2
        return np.abs(f(x, y)) * r

    s = np.concatenate([[0.0], t])
    R, S = np.meshgrid(t, s, indexing="ij")
    P = sampled(R, S)
    c = _cbrt_up(P)
    row = c.max(axis=1)
    f1 = np.maximum.accumulate(row)
    f2 = np.maximum.accumulate(row[::-1])[::-1]
    tau = 1.0 + S / (1.0 + R)
    g = _tau_grid(t)
    f3 = _sup_at_or_above(tau.ravel(), c.ravel(), g)
    return FuncTriple(SampledFunction(t, f1, "floor", monotone="increasing"),
                      SampledFunction(t, f2, "ceil", monotone="decreasing"),
                      SampledFunction(g, f3, "floor", monotone="decreasing"), "p5")


def vanishing_fit_exists(T: FuncTriple, ratio: float = 0.5) -> bool:
    """Whether the extremes of a fitted triple fall below ``ratio`` times its interior peak."""
    ok1 = T.F1.v[0] < ratio * T.F1.max
    ok2 = T.F2.v[-1] < ratio * T.F2.max
    ok3 = T.F3.v[-1] < ratio * T.F3.max
    return bool(ok1 and ok2 and ok3)


def partial_constants(K: KernelModel, I2: DyadicCube, a: str, param: int = 1,
                      spec=None, sign: int = 1) -> float:
    """C(f, g) = |int int k(x, y) f(y) g(x)| for the pairs of Def. (iv).

    ``a`` names the pair: ``"11"`` (indicator, indicator), ``"1a"``
    (f = indicator, g = bump), ``"a1"`` (f = bump, g = indicator).  The
    bump is the Haar-type sign pattern 1_left - 1_right (times ``sign``).
    """
    from . import quad
    if not K.separable:
        raise ValueError("partial kernel constants are implemented for separable models only")
    if I2.dim != 1:
        raise ValueError("partial constants are implemented for one-dimensional factors")
    ind = quad.PiecewiseConstant.indicator(I2)
    bump = quad.PiecewiseConstant.bump(I2).scale(sign)
    f, g = {"11": (ind, ind), "1a": (ind, bump), "a1": (bump, ind),
            "indicator": (ind, ind)}[a]
    res = quad.pair_integral_1d(K.factors[param], f, g, spec)
    return res.value if sign < 0 else abs(res.value)
