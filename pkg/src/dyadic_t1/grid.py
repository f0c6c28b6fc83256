"""Exact dyadic-grid geometry.

Cubes are stored as ``(level, integer index)`` relative to a :class:`Grid`;
every coordinate is a dyadic rational held as :class:`fractions.Fraction`,
so distances, relative sizes and family memberships are decided exactly.
Floating point only appears when a value leaves this module (Haar
normalisations ``2**(-level*n/2)``).

Family enumeration works on integer coordinates measured in a common
dyadic unit and is vectorised with numpy; cube objects are built only for
the survivors.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Grid", "Box", "DyadicCube", "HaarIndex", "GeometrySummary",
    "standard_grid", "grid_from_shift", "register_grid", "lookup_grid",
    "cube_geometry", "distance", "join", "rd_to_unit", "haar_eval",
    "haar_inner", "haar_mean", "haar_gram_1d", "enumerate_family",
    "count_family", "formula_count", "truncation_membership",
    "truncation_family", "tile", "cube_containing", "format_cube",
    "parse_cube", "format_haar", "parse_haar", "FAMILY_MODES",
]

FAMILY_MODES = ("J(k,j)", "J(k,0,m)", "I(k,j)", "I(k,0,m)", "D^k", "B^k",
                "G^k", "children", "ancestor")


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class Grid:
    """A dyadic grid on R^n, possibly shifted.

    ``omega`` holds the shift bits for ``j = -L_max .. L_max`` (position
    ``j + L_max``), each an n-tuple of 0/1.  A level-``l`` cube of the
    standard lattice is translated by ``sum_{j > -l} 2^{-j} omega_j``.
    """

    dim: int = 1
    omega: tuple = ()
    L_max: int = 12
    name: str = "0"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dim}")
        if self.omega and len(self.omega) != 2 * self.L_max + 1:
            raise ValueError("omega must cover j = -L_max..L_max")
        for w in self.omega:
            if len(w) != self.dim or any(b not in (0, 1) for b in w):
                raise ValueError(f"shift components must lie in {{0,1}}^n, got {w}")

    @property
    def is_standard(self) -> bool:
        return not any(any(w) for w in self.omega)

    def check_level(self, level: int) -> None:
        if not self.is_standard and abs(level) > self.L_max:
            raise ValueError(
                f"level {level} outside shift range |l| <= {self.L_max} of grid {self.name!r}")

    def offset(self, level: int) -> tuple:
        """Translation of level-``level`` cubes relative to the standard lattice."""
        if self.is_standard:
            return (Fraction(0),) * self.dim
        self.check_level(level)
        off = [Fraction(0)] * self.dim
        for j in range(-level + 1, self.L_max + 1):
            w = self.omega[j + self.L_max]
            for c in range(self.dim):
                if w[c]:
                    off[c] += Fraction(1, 2 ** j) if j >= 0 else Fraction(2 ** (-j))
        return tuple(off)

    @property
    def finest_unit(self) -> int | None:
        """Exponent u such that every offset is an integer multiple of 2^u."""
        return None if self.is_standard else -self.L_max


_STANDARD = {1: Grid(1), 2: Grid(2)}
_REGISTRY: dict[str, dict[int, Grid]] = {"0": dict(_STANDARD)}


def standard_grid(dim: int = 1) -> Grid:
    return _STANDARD[dim]


def register_grid(grid: Grid) -> Grid:
    _REGISTRY.setdefault(grid.name, {})[grid.dim] = grid
    return grid


def lookup_grid(name: str, dim: int) -> Grid:
    try:
        return _REGISTRY[name][dim]
    except KeyError:
        raise KeyError(f"unknown grid {name!r} (dim {dim})") from None


def grid_from_shift(omega, dim: int = 1, L_max: int = 12, name: str | None = None) -> Grid:
    """Build a shifted grid from ``omega``.

    ``omega`` may be a mapping ``j -> bits`` (missing j are zero) or a
    sequence of length ``2*L_max+1`` indexed by ``j + L_max``.  Bits may be
    given as ints when ``dim == 1``.
    """
    def norm(w):
        if isinstance(w, (int, np.integer)):
            return (int(w),) * 1 if dim == 1 else _bad(w)
        return tuple(int(b) for b in w)

    def _bad(w):
        raise ValueError(f"shift {w!r} must be an n-tuple for dim {dim}")

    if isinstance(omega, Mapping):
        for j in omega:
            if abs(j) > L_max:
                raise ValueError(f"shift index j={j} outside |j| <= {L_max}")
        seq = tuple(norm(omega.get(j, (0,) * dim)) for j in range(-L_max, L_max + 1))
    else:
        seq = tuple(norm(w) for w in omega)
    if len(seq) != 2 * L_max + 1:
        raise ValueError("omega must cover j = -L_max..L_max")
    if name is None:
        if not any(any(w) for w in seq):
            name = "0"
        else:
            bits = "".join("".join(map(str, w)) for w in seq)
            name = "w" + hashlib.sha1(f"{dim}:{L_max}:{bits}".encode()).hexdigest()[:10]
    if name == "0":
        if any(any(w) for w in seq):
            raise ValueError("grid id '0' is reserved for the standard grid")
        return standard_grid(dim)
    return register_grid(Grid(dim=dim, omega=seq, L_max=L_max, name=name))


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class Box:
    """Closed-open cube ``lower + [0, edge)^n`` with rational data."""

    lower: tuple
    edge: Fraction

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def upper(self) -> tuple:
        return tuple(a + self.edge for a in self.lower)

    @property
    def center(self) -> tuple:
        return tuple(a + self.edge / 2 for a in self.lower)

    @property
    def measure(self) -> Fraction:
        return self.edge ** self.dim

    @classmethod
    def centered(cls, scale, dim: int = 1) -> "Box":
        """The cube ``scale * [-1/2, 1/2]^n``."""
        s = Fraction(scale)
        return cls((-s / 2,) * dim, s)

    def dilate(self, factor) -> "Box":
        f = Fraction(factor)
        c = self.center
        e = self.edge * f
        return Box(tuple(x - e / 2 for x in c), e)

    def contains_box(self, other: "Box") -> bool:
        return all(a <= b and b + other.edge <= a + self.edge
                   for a, b in zip(self.lower, other.lower))


def _as_box(x) -> Box:
    return x if isinstance(x, Box) else x.box


def distance(A, B) -> Fraction:
    """l-infinity distance between two cubes or boxes (0 when touching)."""
    a, b = _as_box(A), _as_box(B)
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    gap = Fraction(0)
    for x, y in zip(a.lower, b.lower):
        g = max(y - (x + a.edge), x - (y + b.edge), 0)
        if g > gap:
            gap = g
    return Fraction(gap)


def join(A, B) -> Box:
    """Minimal-edge cube containing both, anchored at the lowest coordinates."""
    a, b = _as_box(A), _as_box(B)
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    lo = tuple(min(x, y) for x, y in zip(a.lower, b.lower))
    edge = max(max(x + a.edge, y + b.edge) - m for x, y, m in zip(a.lower, b.lower, lo))
    return Box(lo, edge)


def rd_to_unit(A, scale=1) -> Fraction:
    """rd(A, scale*II) with II the centred unit cube."""
    a = _as_box(A)
    unit = Box.centered(scale, a.dim)
    return distance(a, unit) / max(a.edge, unit.edge)


# ---------------------------------------------------------------- cubes

@dataclass(frozen=True)
class DyadicCube:
    level: int
    index: tuple
    grid: Grid = None

    def __post_init__(self):
        idx = tuple(int(m) for m in (self.index if isinstance(self.index, Iterable) else (self.index,)))
        object.__setattr__(self, "index", idx)
        if self.grid is None:
            object.__setattr__(self, "grid", standard_grid(len(idx)))
        if len(idx) != self.grid.dim:
            raise ValueError("index length does not match grid dimension")
        object.__setattr__(self, "level", int(self.level))
        self.grid.check_level(self.level)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @cached_property
    def edge(self) -> Fraction:
        return Fraction(2) ** self.level

    @cached_property
    def lower(self) -> tuple:
        e = self.edge
        return tuple(m * e + o for m, o in zip(self.index, self.grid.offset(self.level)))

    @property
    def upper(self) -> tuple:
        e = self.edge
        return tuple(a + e for a in self.lower)

    @property
    def center(self) -> tuple:
        h = self.edge / 2
        return tuple(a + h for a in self.lower)

    @cached_property
    def box(self) -> Box:
        return Box(self.lower, self.edge)

    @property
    def measure(self) -> Fraction:
        return self.edge ** self.dim

    def children(self) -> list["DyadicCube"]:
        if self.grid.is_standard:
            return [DyadicCube(self.level - 1, tuple(2 * m + b for m, b in zip(self.index, bits)),
                               self.grid)
                    for bits in itertools.product((0, 1), repeat=self.dim)]
        return enumerate_family(self, "children")

    def ancestor(self, k: int = 1) -> "DyadicCube":
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0:
            return self
        return cube_containing(self.grid, self.level + k, self.lower)

    def parent(self) -> "DyadicCube":
        return self.ancestor(1)

    def contains(self, other: "DyadicCube") -> bool:
        return self.box.contains_box(other.box)

    def intersects(self, other: "DyadicCube") -> bool:
        a, b = self.box, other.box
        return all(x < y + b.edge and y < x + a.edge for x, y in zip(a.lower, b.lower))

    def half_of(self, other: "DyadicCube") -> tuple:
        """Per coordinate: 0 if ``other`` lies in the lower half of self, 1 if upper."""
        mid = self.center
        return tuple(0 if b < m else 1 for b, m in zip(other.lower, mid))

    def sort_key(self):
        return (self.grid.name, self.level, self.index)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __str__(self):
        return format_cube(self)


def cube_containing(grid: Grid, level: int, point) -> DyadicCube:
    e = Fraction(2) ** level
    off = grid.offset(level)
    idx = tuple(math.floor((Fraction(x) - o) / e) for x, o in zip(point, off))
    return DyadicCube(level, idx, grid)


_CUBE_RE = re.compile(r"^g:([^/]+)/L(-?\d+)/\(\s*(-?\d+(?:\s*,\s*-?\d+)*)\s*,?\s*\)$")


def format_cube(I: DyadicCube) -> str:
    return f"g:{I.grid.name}/L{I.level}/({','.join(str(m) for m in I.index)})"


def parse_cube(text: str) -> DyadicCube:
    m = _CUBE_RE.match(text.strip())
    if not m:
        raise ValueError(f"malformed cube string {text!r}")
    idx = tuple(int(t) for t in m.group(3).split(","))
    grid = lookup_grid(m.group(1), len(idx))
    return DyadicCube(int(m.group(2)), idx, grid)


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class GeometrySummary:
    rs: Fraction
    rd: Fraction
    ird: Fraction
    d: Fraction
    join: Box

    def as_floats(self) -> dict:
        return {"rs": float(self.rs), "rd": float(self.rd), "ird": float(self.ird),
                "d": float(self.d), "join_edge": float(self.join.edge)}


def cube_geometry(I, J) -> GeometrySummary:
    """rs, rd, ird, the l-inf distance and the join of two cubes."""
    a, b = _as_box(I), _as_box(J)
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if isinstance(I, DyadicCube) and isinstance(J, DyadicCube) and I.grid != J.grid:
        raise ValueError("cubes belong to different grids")
    lo, hi = min(a.edge, b.edge), max(a.edge, b.edge)
    d = distance(a, b)
    return GeometrySummary(rs=lo / hi, rd=d / hi, ird=1 + d / lo, d=d, join=join(a, b))


# ---------------------------------------------------------------- Haar functions

@dataclass(frozen=True)
class HaarIndex:
    cube: DyadicCube
    eta: tuple = None

    def __post_init__(self):
        eta = self.eta
        if eta is None:
            eta = (1,) * self.cube.dim
        elif isinstance(eta, (int, np.integer)):
            eta = (int(eta),)
        eta = tuple(int(e) for e in eta)
        if len(eta) != self.cube.dim or any(e not in (0, 1) for e in eta):
            raise ValueError(f"bad signature {eta} for a {self.cube.dim}-d cube")
        object.__setattr__(self, "eta", eta)

    @property
    def cancellative(self) -> bool:
        return any(self.eta)

    def sort_key(self):
        return (self.cube.sort_key(), self.eta)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __str__(self):
        return format_haar(self)


def format_haar(h: HaarIndex) -> str:
    return f"{format_cube(h.cube)}#{''.join(map(str, h.eta))}"


def parse_haar(text: str) -> HaarIndex:
    cube, _, sig = text.strip().rpartition("#")
    if not cube:
        I = parse_cube(text)
        return HaarIndex(I)
    return HaarIndex(parse_cube(cube), tuple(int(c) for c in sig))


def _norm(level: int, dim: int) -> float:
    return 2.0 ** (-level * dim / 2)


def haar_eval(h: HaarIndex, x) -> float:
    """Exact value of h_I^eta at a point: +-|I|^{-1/2} or 0."""
    I = h.cube
    lo, mid, e = I.lower, I.center, I.edge
    sign = 1
    for xc, a, m, eta in zip(x, lo, mid, h.eta):
        xc = Fraction(xc)
        if not (a <= xc < a + e):
            return 0.0
        if eta and xc >= m:
            sign = -sign
    return sign * _norm(I.level, I.dim)


def _signed_overlap_1d(a, e, s, b, f, t) -> Fraction:
    """Integral of the 1-d profiles (sign pattern s / t) of two intervals."""
    def pieces(lo, edge, eta):
        if eta:
            return [(lo, lo + edge / 2, 1), (lo + edge / 2, lo + edge, -1)]
        return [(lo, lo + edge, 1)]

    tot = Fraction(0)
    for (p0, p1, sp), (q0, q1, sq) in itertools.product(pieces(a, e, s), pieces(b, f, t)):
        ov = min(p1, q1) - max(p0, q0)
        if ov > 0:
            tot += sp * sq * ov
    return tot


def haar_inner(h: HaarIndex, g: HaarIndex) -> float:
    """<h, g> computed from exact signed overlaps (0 and 1 are exact)."""
    I, J = h.cube, g.cube
    if I.dim != J.dim:
        raise ValueError("dimension mismatch")
    prod = Fraction(1)
    for a, b, s, t in zip(I.lower, J.lower, h.eta, g.eta):
        prod *= _signed_overlap_1d(a, I.edge, s, b, J.edge, t)
        if prod == 0:
            return 0.0
    # |I|^{-1/2}|J|^{-1/2} = 2^{-(lI+lJ) n / 2}
    twice = -(I.level + J.level) * I.dim
    if twice % 2 == 0:
        return float(prod * Fraction(2) ** (twice // 2))
    return float(prod * Fraction(2) ** ((twice - 1) // 2)) * math.sqrt(2.0)


def haar_mean(h: HaarIndex, I: DyadicCube) -> float:
    """Average of h over the cube I (exact sign pattern)."""
    J = h.cube
    if not J.contains(I):
        if not J.intersects(I):
            return 0.0
        # I strictly larger: mean of a cancellative function over I vanishes
        if h.cancellative:
            return 0.0
        raise ValueError("average of a non-cancellative Haar function over a larger cube")
    if I == J:
        return 0.0 if h.cancellative else _norm(J.level, J.dim)
    sign = 1
    for half, eta in zip(J.half_of(I), h.eta):
        if eta and half:
            sign = -sign
    return sign * _norm(J.level, J.dim)


def haar_gram_1d(cubes: Sequence[DyadicCube]) -> np.ndarray:
    """Gram matrix of the 1-d cancellative Haar functions on ``cubes``.

    Signed overlaps are integers in a common dyadic unit; the only rounding
    is the final multiplication by a power of two (and sqrt 2 for odd level
    sums), so diagonal ones and off-diagonal zeros are exact.
    """
    if not cubes:
        return np.zeros((0, 0))
    grid = cubes[0].grid
    if grid.dim != 1 or any(c.grid != grid for c in cubes):
        raise ValueError("haar_gram_1d needs 1-d cubes on one grid")
    levels = np.array([c.level for c in cubes], dtype=np.int64)
    u = int(levels.min()) - 1
    if grid.finest_unit is not None:
        u = min(u, grid.finest_unit)
    lo = np.array([int(c.lower[0] / Fraction(2) ** u) for c in cubes], dtype=np.int64)
    half = np.left_shift(np.int64(1), levels - 1 - u)
    mid, hi = lo + half, lo + 2 * half
    pieces = [(lo, mid, 1), (mid, hi, -1)]
    S = np.zeros((len(cubes), len(cubes)), dtype=np.int64)
    for p0, p1, sp in pieces:
        for q0, q1, sq in pieces:
            ov = np.minimum(p1[:, None], q1[None, :]) - np.maximum(p0[:, None], q0[None, :])
            S += sp * sq * np.clip(ov, 0, None)
    expo = u - (levels[:, None] + levels[None, :]) / 2.0
    return S * np.exp2(expo)


# ---------------------------------------------------------------- truncation families

def truncation_membership(I: DyadicCube, N: int) -> bool:
    """I in D(N): 2^-N <= l(I) <= 2^N and rd(I, 2^N II) <= N."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not (-N <= I.level <= N):
        return False
    return rd_to_unit(I, Fraction(2) ** N) <= N


def _unit_for(grid: Grid, levels: Iterable[int]) -> int:
    u = min(levels)
    if grid.finest_unit is not None:
        u = min(u, grid.finest_unit)
    return u


def _to_units(x: Fraction, u: int) -> int:
    v = x / Fraction(2) ** u
    if v.denominator != 1:
        raise ArithmeticError("coordinate not representable in the chosen unit")
    return v.numerator


def _level_axis(grid: Grid, level: int, lo: Fraction, hi: Fraction, u: int, c: int):
    """Indices and integer lower corners of level cubes meeting [lo, hi] in coordinate c."""
    e = Fraction(2) ** level
    off = grid.offset(level)[c]
    m0 = math.floor((lo - off) / e) - 1
    m1 = math.ceil((hi - off) / e) + 1
    ms = np.arange(m0, m1 + 1, dtype=np.int64)
    base = _to_units(off, u)
    step = _to_units(e, u)
    return ms, ms * step + base, step


def tile(grid: Grid, level: int, window: Box) -> list[DyadicCube]:
    """All level cubes of ``grid`` meeting the open window (exact)."""
    grid.check_level(level)
    u = _unit_for(grid, [level, _floor_log2(window.edge)])
    axes = []
    for c in range(grid.dim):
        lo, hi = window.lower[c], window.lower[c] + window.edge
        ms, a, w = _level_axis(grid, level, lo, hi, u, c)
        L, H = _to_units(lo, u), _to_units(hi, u)
        keep = (a < H) & (a + w > L)
        axes.append(ms[keep])
    return [DyadicCube(level, idx, grid) for idx in itertools.product(*[a.tolist() for a in axes])]


def _floor_log2(x: Fraction) -> int:
    n, d = x.numerator, x.denominator
    return n.bit_length() - d.bit_length() - (1 if n < (d << (n.bit_length() - d.bit_length())) else 0)


def truncation_family(N: int, dim: int = 1, grid: Grid | None = None) -> list[DyadicCube]:
    """Sorted list of every cube of D(N)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    grid = grid or standard_grid(dim)
    out = []
    big = Fraction(2) ** N
    unit = Box.centered(big, grid.dim)
    reach = N * big  # d <= N * max(l, 2^N) = N 2^N
    u = _unit_for(grid, [-N])
    for level in range(-N, N + 1):
        masks, axes = [], []
        for c in range(grid.dim):
            lo, hi = unit.lower[c] - reach, unit.lower[c] + unit.edge + reach
            ms, a, w = _level_axis(grid, level, lo, hi, u, c)
            L, H = _to_units(unit.lower[c], u), _to_units(unit.lower[c] + unit.edge, u)
            gap = np.maximum(np.maximum(L - (a + w), a - H), 0)
            axes.append(ms)
            masks.append(gap)
        R = _to_units(reach, u)
        if grid.dim == 1:
            sel = [(int(m),) for m in axes[0][masks[0] <= R]]
        else:
            G = np.maximum(masks[0][:, None], masks[1][None, :])
            ii, jj = np.nonzero(G <= R)
            sel = list(zip(axes[0][ii].tolist(), axes[1][jj].tolist()))
        out.extend(DyadicCube(level, idx, grid) for idx in sel)
    out.sort()
    return out


# ---------------------------------------------------------------- family enumeration

def _check_params(mode, k, j, m):
    if mode not in FAMILY_MODES:
        raise ValueError(f"unknown family mode {mode!r}; expected one of {FAMILY_MODES}")
    if mode not in ("children",) and (k is None or k < 0):
        raise ValueError(f"mode {mode} needs k >= 0")
    if mode in ("J(k,j)", "I(k,j)") and (j is None or j < 1):
        raise ValueError(f"mode {mode} needs j >= 1")
    if mode in ("J(k,0,m)", "I(k,0,m)") and (m is None or m < 1):
        raise ValueError(f"mode {mode} needs m >= 1")


def _candidates(J: DyadicCube, level: int, reach: Fraction):
    """Integer data for every level cube within l-inf distance ``reach`` of J.

    Returns (index arrays per axis, per-axis gap arrays, per-axis
    inside-J arrays, unit exponent) in the broadcastable form used by the
    mask builders.
    """
    grid = J.grid
    u = _unit_for(grid, [level, J.level])
    idx, gaps, inside, dists = [], [], [], []
    for c in range(grid.dim):
        A = J.lower[c]
        lo, hi = A - reach, A + J.edge + reach
        ms, a, w = _level_axis(grid, level, lo, hi, u, c)
        L, H = _to_units(A, u), _to_units(A + J.edge, u)
        idx.append(ms)
        gaps.append(np.maximum(np.maximum(L - (a + w), a - H), 0))
        inside.append((a >= L) & (a + w <= H))
        dists.append((a, w))
    return idx, gaps, inside, dists, u


def _combine(arrs, how):
    if len(arrs) == 1:
        return arrs[0]
    x, y = arrs
    return how(x[:, None], y[None, :])


def _family_mask(J: DyadicCube, mode: str, k: int, j, m):
    n = J.dim
    if mode in ("J(k,j)", "J(k,0,m)", "D^k", "B^k", "G^k"):
        level = J.level - k
    elif mode in ("I(k,j)", "I(k,0,m)"):
        level = J.level + k
    else:
        raise AssertionError(mode)
    J.grid.check_level(level)
    e_t = Fraction(2) ** level
    if mode == "J(k,j)":
        reach = (j + 1) * J.edge
    elif mode == "I(k,j)":
        reach = (j + 1) * e_t
    elif mode in ("J(k,0,m)", "I(k,0,m)"):
        reach = max(J.edge, e_t)
    else:
        reach = Fraction(0)
    idx, gaps, inside, _, u = _candidates(J, level, reach)
    d = _combine(gaps, np.maximum)
    ins = _combine(inside, np.logical_and)
    big = _to_units(max(J.edge, e_t), u)
    small = _to_units(min(J.edge, e_t), u)
    if mode in ("J(k,j)", "I(k,j)"):
        mask = (d >= j * big) & (d < (j + 1) * big)
    elif mode in ("J(k,0,m)", "I(k,0,m)"):
        # rd < 1, disjoint, m <= 1 + d/l(small) < m + 1
        if mode == "J(k,0,m)":
            disjoint = ~ins
        else:
            # candidates are the larger cubes; disjoint unless they contain J
            _, _, cont, _, _ = _candidates_contain(J, level, reach)
            disjoint = ~cont
        mask = (d < big) & disjoint & (d >= (m - 1) * small) & (d < m * small)
    else:
        mask = ins
        if mode in ("B^k", "G^k"):
            dsk = _skeleton_distance(J, level, idx, u)
            if k == 0:
                bad = np.ones_like(mask)
            else:
                # d(I, sk(J)) <= sqrt(l(I) l(J))  <=>  d^2 <= l(I) l(J)
                bad = dsk * dsk <= _to_units(e_t, u) * _to_units(J.edge, u)
            mask = mask & (bad if mode == "B^k" else ~bad)
    return idx, mask, level


def _candidates_contain(J, level, reach):
    # whether candidate (coarser) cubes contain J
    grid = J.grid
    u = _unit_for(grid, [level, J.level])
    cont = []
    for c in range(grid.dim):
        A = J.lower[c]
        ms, a, w = _level_axis(grid, level, A - reach, A + J.edge + reach, u, c)
        L, H = _to_units(A, u), _to_units(A + J.edge, u)
        cont.append((a <= L) & (a + w >= H))
    return None, None, _combine(cont, np.logical_and), None, u


def _skeleton_distance(J: DyadicCube, level: int, idx, u: int):
    """d(I, sk(J)) for candidate cubes I inside J (l-inf, integer units).

    For I inside the child J' the nearest skeleton point lies on the
    boundary of J', so the distance is the smallest coordinate gap to the
    faces of J'.
    """
    per_axis = []
    e = _to_units(Fraction(2) ** level, u)
    for c in range(J.dim):
        A = _to_units(J.lower[c], u)
        W = _to_units(J.edge, u)
        off = _to_units(J.grid.offset(level)[c], u)
        a = idx[c] * e + off
        mid = A + W // 2
        lo_face = np.where(a < mid, A, mid)
        hi_face = np.where(a < mid, mid, A + W)
        per_axis.append(np.minimum(a - lo_face, hi_face - (a + e)))
    return _combine(per_axis, np.minimum)


def _mask_to_cubes(J, idx, mask, level):
    if J.dim == 1:
        sel = [(int(m),) for m in idx[0][mask]]
    else:
        ii, jj = np.nonzero(mask)
        sel = list(zip(idx[0][ii].tolist(), idx[1][jj].tolist()))
    return sorted(DyadicCube(level, s, J.grid) for s in sel)


def enumerate_family(J: DyadicCube, mode: str, k: int | None = None,
                     j: int | None = None, m: int | None = None) -> list[DyadicCube]:
    """Exact list of the cubes in a family attached to ``J``.

    Modes (``J`` is the anchor):

    ``J(k,j)``    l(I) = 2^-k l(J), j <= rd(I,J) < j+1
    ``J(k,0,m)``  l(I) = 2^-k l(J), rd < 1, I and J disjoint, m <= ird < m+1
    ``I(k,j)``    the dual families: cubes K with l(K) = 2^k l(J) and
    ``I(k,0,m)``  the same conditions, J playing the role of the small cube
    ``D^k``       I with I^(k) = J
    ``B^k``/``G^k`` split of D^k by d(I, sk(J)) <= / > sqrt(l(I) l(J))
    ``children``  D^1
    ``ancestor``  [J^(k)]
    """
    if mode == "children":
        k = 1
        mode = "D^k"
    _check_params(mode, k, j, m)
    if mode == "ancestor":
        return [J.ancestor(k)]
    idx, mask, level = _family_mask(J, mode, k, j, m)
    return _mask_to_cubes(J, idx, mask, level)


def count_family(J: DyadicCube, mode: str, k: int | None = None,
                 j: int | None = None, m: int | None = None) -> int:
    if mode == "children":
        k, mode = 1, "D^k"
    _check_params(mode, k, j, m)
    if mode == "ancestor":
        return 1
    _, mask, _ = _family_mask(J, mode, k, j, m)
    return int(np.count_nonzero(mask))


def formula_count(mode: str, n: int, k: int, j: int | None = None, m: int | None = None) -> int:
    """Closed-form family sizes on a single grid (standard or shifted).

    Derived by counting integer positions with a prescribed l-inf gap to a
    block of side S = 2^k: a coordinate has S+2 positions at gap 0 and two
    at every positive gap.
    """
    S = 2 ** k
    if mode == "J(k,j)":
        return S ** n * ((2 * j + 3) ** n - (2 * j + 1) ** n)
    if mode == "J(k,0,m)":
        if m - 1 >= S:
            return 0
        if m == 1:
            return (S + 2) ** n - S ** n
        return (S + 2 * m) ** n - (S + 2 * m - 2) ** n
    if mode == "D^k":
        return S ** n
    if mode in ("B^k", "G^k"):
        if k == 0:
            good = 0
        else:
            t = math.isqrt(S)
            good = 2 ** n * max(0, S // 2 - 2 * t - 2) ** n
        return S ** n - good if mode == "B^k" else good
    raise ValueError(f"no closed form for mode {mode!r}")
