"""Command line front end.

    python -m dyadic_t1 coeff        regime sweep of matrix elements against their bounds
    python -m dyadic_t1 compactness  sigma_max(P_N^perp T_M) curves, compact model vs Hilbert
    python -m dyadic_t1 verify       counting, kernel conditions, quantities, small lemmas
    python -m dyadic_t1 bmo          product BMO proxy and CMO tails of a symbol

Exit codes: 0 pass, 1 a checked property failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .analysis import (HaarCoeffVector, bmo_norm, cmo_tail, compactness_curve, curve_csv_text,
                       limiting_predicates, mdt_check)
from .coeffs import (PairKey, atomic_write, compute_table, fmt17, param_bound, param_regime,
                     paraproduct_symbol)
from .grid import (DyadicCube, HaarIndex, count_family, enumerate_family, formula_count,
                   parse_cube, parse_haar)
from .kernels import (FuncTriple, SampledFunction, builtin_kernel, envelope,
                      envelope_domination, load_kernel, verify_kernel_conditions)
from .quad import QUANTITIES, QuadSpec, diag_lemma_check, quantity, quantity_bound

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_SWEEP = {"l": [-3, 3], "k": [0, 5], "j": [1, 6], "m": [1, 6], "per": 2}
DEFAULT_CMAX = {"regime": 10.0, "conditions": 10.0, "quantities": 50.0, "diag": 50.0,
                "counting": 64.0, "mdt": 50.0, "bmo": 50.0}
VERIFY_SECTIONS = ("counting", "conditions", "quantities", "diag", "mdt", "predicates",
                   "envelope")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    command: str
    kernel: str = "compact_model"
    n1: int = 1
    n2: int = 1
    N: int = 3
    M: int = 4
    quad_tol: float = 1e-9
    quad_order: int = 8
    quad_depth: int = 12
    sweep: dict = field(default_factory=lambda: dict(DEFAULT_SWEEP))
    out: str = "out"
    seed: int = 0
    cmax: dict = field(default_factory=lambda: dict(DEFAULT_CMAX))
    only: list = field(default_factory=list)
    symbol: str | None = None
    pair: list | None = None
    eps: float = 0.05

    def validate(self):
        if self.n1 != 1 or self.n2 != 1:
            raise ConfigError("only n1 = n2 = 1 is supported by the operator pipeline")
        if self.N < 1 or self.M < 1:
            raise ConfigError("N and M must be >= 1")
        if self.command == "compactness" and self.N > self.M:
            raise ConfigError(f"schedule 1..{self.N} exceeds M = {self.M}")
        try:
            self.quad()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        s = self.sweep
        for key in ("l", "k", "j", "m"):
            lo, hi = s[key]
            if lo > hi:
                raise ConfigError(f"sweep range {key}={lo}:{hi} is empty")
        if s["k"][0] < 0 or s["j"][0] < 1 or s["m"][0] < 1 or s["per"] < 1:
            raise ConfigError("sweep needs k >= 0, j >= 1, m >= 1 and per >= 1")
        bad = [c for c in self.only if c not in VERIFY_SECTIONS]
        if bad:
            raise ConfigError(f"unknown section(s) {bad}; choose from {list(VERIFY_SECTIONS)}")
        if any(v < 0 for v in self.cmax.values()):
            raise ConfigError("C_max values must be >= 0")
        if not (0 < self.eps):
            raise ConfigError("eps must be positive")
        return self

    def quad(self) -> QuadSpec:
        return QuadSpec(order=self.quad_order, depth=self.quad_depth, tol=self.quad_tol)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def header(self, **extra) -> dict:
        h = {"config": self.canonical(), "config_hash": self.digest(),
             "version": __version__}
        h.update(extra)
        return h


def _parse_range(text: str):
    if ":" in text:
        a, b = text.split(":", 1)
        return [int(a), int(b)]
    v = int(text)
    return [v, v]


def parse_sweep(text: str | None) -> dict:
    """``k=0:5,j=1:6,m=1:6,l=-3:3,per=2`` or the path of a JSON object with those keys."""
    out = dict(DEFAULT_SWEEP)
    if not text:
        return out
    if os.path.exists(text):
        try:
            with open(text) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"sweep file {text}: {exc}") from None
        items = data.items()
    else:
        items = []
        for part in text.split(","):
            if "=" not in part:
                raise ConfigError(f"bad sweep item {part!r} (expected key=lo:hi)")
            k, v = part.split("=", 1)
            items.append((k.strip(), v.strip()))
    for k, v in items:
        if k not in DEFAULT_SWEEP:
            raise ConfigError(f"unknown sweep key {k!r}")
        try:
            if k == "per":
                out[k] = int(v)
            else:
                out[k] = list(v) if isinstance(v, list) else _parse_range(str(v))
        except ValueError:
            raise ConfigError(f"bad sweep value {k}={v!r}") from None
    return out


def parse_cmax(text: str | None) -> dict:
    """A single number for every check, or ``name=value`` items overriding the defaults."""
    out = dict(DEFAULT_CMAX)
    if text is None:
        return out
    try:
        v = float(text)
        return {k: v for k in out}
    except ValueError:
        pass
    for part in text.split(","):
        k, _, v = part.partition("=")
        k = k.strip()
        if k not in out:
            raise ConfigError(f"unknown C_max key {k!r}; choose from {sorted(out)}")
        try:
            out[k] = float(v)
        except ValueError:
            raise ConfigError(f"bad C_max value {part!r}") from None
    return out


def _kernel(cfg: RunConfig):
    try:
        return load_kernel(cfg.kernel)
    except FileNotFoundError:
        raise ConfigError(f"kernel file not found: {cfg.kernel}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"kernel config: {exc}") from None


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _csv_header(header: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in sorted(header.items()))


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _rng(values):
    lo, hi = values
    return range(lo, hi + 1)


# ---------------------------------------------------------------- sweeps

def regime_pairs(sweep: dict) -> list:
    """One-parameter (small, large) cube pairs covering every regime of the sweep.

    For each anchor J = [2^l, 2^(l+1)) the pairs come from the families
    J(k, j), J(k, 0, m) and the ancestors of J; ``per`` cubes are kept per
    family.
    """
    per = sweep["per"]
    out = []
    for l in _rng(sweep["l"]):
        J = DyadicCube(l, (1,))
        for k in _rng(sweep["k"]):
            for j in _rng(sweep["j"]):
                out += [(I, J) for I in enumerate_family(J, "J(k,j)", k=k, j=j)[:per]]
            for m in _rng(sweep["m"]):
                out += [(I, J) for I in enumerate_family(J, "J(k,0,m)", k=k, m=m)[:per]]
            if k >= 1:
                out += [(I, J) for I in enumerate_family(J, "B^k", k=k)[:per]]
                out += [(I, J) for I in enumerate_family(J, "G^k", k=k)[:per]]
                out.append((J, J.ancestor(k)))
            else:
                out.append((J, J))
    seen, uniq = set(), []
    for p in out:
        if p not in seen:
            seen.add(p)
            uniq.append(p)
    return uniq


def regime_keys(sweep: dict) -> list:
    """Bi-parameter keys: every one-parameter pair, partnered with a rotating second pair."""
    pairs = regime_pairs(sweep)
    n = len(pairs)
    keys = []
    for i, (I1, J1) in enumerate(pairs):
        for I2, J2 in (pairs[i], pairs[(7 * i + n // 2) % n]):
            keys.append(PairKey.make(HaarIndex(I1), HaarIndex(I2), HaarIndex(J1), HaarIndex(J2)))
    return sorted(set(keys))


# ---------------------------------------------------------------- coeff

def cmd_coeff(cfg: RunConfig) -> int:
    K = _kernel(cfg)
    if not K.separable:
        raise ConfigError("the coefficient sweep needs a separable kernel")
    keys = regime_keys(cfg.sweep)
    t0 = time.perf_counter()
    tab = compute_table(keys, K, cfg.quad())
    worst = defaultdict(float)
    for e in tab.entries.values():
        worst[str(e.regime)] = max(worst[str(e.regime)], e.ratio)
    cmax = cfg.cmax["regime"]
    passed = all(v <= cmax for v in worst.values())
    hdr = cfg.header(kernel=K.name or K.kind, rows=len(tab))
    tab.save(_out(cfg, "coeff.csv"), hdr)
    summary = {"config_hash": cfg.digest(), "rows": len(tab), "c_max": cmax,
               "max_ratio_by_regime": dict(sorted(worst.items())), "passed": passed}
    atomic_write(_out(cfg, "coeff_summary.json"), _json_text(summary))
    _say(f"coeff: {len(tab)} rows, max ratio {max(worst.values(), default=0.0):.3g} "
         f"(C_max {cmax:g}) in {time.perf_counter() - t0:.1f}s -> {'pass' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- compactness

def curve_property(points, contrast: bool) -> dict:
    """Compact: nonincreasing ratios and < 0.1 at the last N.  Contrast (Hilbert): >= 0.9 for N < M."""
    ratios = [p.ratio for p in points]
    if contrast:
        inner = [p.ratio for p in points if p.sigma or p.upper]
        ok = all(r >= 0.9 for r in inner)
        return {"property": "ratio >= 0.9 at every N < M", "passed": ok}
    mono = all(b <= a * (1 + 1e-12) for a, b in zip(ratios, ratios[1:]))
    last = ratios[-1] if ratios else 0.0
    return {"property": "nonincreasing, last ratio < 0.1", "nonincreasing": mono,
            "last_ratio": last, "passed": bool(mono and last < 0.1)}


def cmd_compactness(cfg: RunConfig) -> int:
    K = _kernel(cfg)
    if not K.separable:
        raise ConfigError("compactness curves need a separable kernel")
    schedule = list(range(1, cfg.N + 1))
    models = [(K.name or K.kind, K, K.kind == "tensor_hilbert")]
    if K.kind != "tensor_hilbert":
        models.append(("tensor_hilbert", builtin_kernel("tensor_hilbert"), True))
    report, passed = {"config_hash": cfg.digest(), "M": cfg.M, "schedule": schedule,
                      "curves": {}}, True
    for label, model, contrast in models:
        t0 = time.perf_counter()
        pts = compactness_curve(model, schedule, cfg.M, order=cfg.quad_order)
        dt = time.perf_counter() - t0
        prop = curve_property(pts, contrast)
        passed &= prop["passed"]
        atomic_write(_out(cfg, f"curve_{label}.csv"),
                     curve_csv_text(pts, cfg.header(kernel=label)))
        report["curves"][label] = {"points": [p.to_dict() for p in pts], "seconds": round(dt, 3),
                                   **prop}
        _say(f"compactness {label}: " + ", ".join(f"N={p.N} ratio={p.ratio:.4f}" for p in pts)
             + f" ({dt:.1f}s) -> {'pass' if prop['passed'] else 'FAIL'}")
    report["passed"] = passed
    atomic_write(_out(cfg, "curves.json"), _json_text(report))
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- verify sections

def section_counting(cfg: RunConfig, K) -> dict:
    """Exact family counts against closed forms, and the empirical constants."""
    mismatches, c_j, c_b, c_u = [], 0.0, 0.0, 0.0
    rows = []
    kmax = 6
    jmax = 8
    for n in (1, 2):
        for l in range(-3, 4):
            J = DyadicCube(l, (1,) * n)
            for k in range(kmax + 1):
                d = count_family(J, "D^k", k=k)
                rows.append({"n": n, "level": l, "k": k, "D^k": d, "2^(kn)": 2 ** (k * n)})
                if d != 2 ** (k * n):
                    mismatches.append(("D^k", n, l, k, d))
                b = count_family(J, "B^k", k=k)
                if b != formula_count("B^k", n, k):
                    mismatches.append(("B^k", n, l, k, b))
                c_b = max(c_b, b / 2 ** (k * (n - 0.5)))
                union = sum(count_family(J, "I(k,0,m)", k=k, m=m) for m in range(1, 2 ** k + 1))
                c_u = max(c_u, float(union))
                for j in range(1, jmax + 1):
                    cj = count_family(J, "J(k,j)", k=k, j=j)
                    if cj != formula_count("J(k,j)", n, k, j=j):
                        mismatches.append(("J(k,j)", n, l, k, j, cj))
                    c_j = max(c_j, cj / (2 ** (k * n) * j ** (n - 1)))
    cmax = cfg.cmax["counting"]
    consts = {"C_J(k,j)": c_j, "C_B^k": c_b, "C_union_I(k,0,m)": c_u}
    ok = not mismatches and all(v <= cmax for v in consts.values())
    return {"status": "pass" if ok else "fail", "constants": consts, "c_max": cmax,
            "mismatches": [list(map(str, m)) for m in mismatches], "D^k_rows": rows}


def section_conditions(cfg: RunConfig, K) -> dict:
    rep = verify_kernel_conditions(K, {"seed": cfg.seed}, c_max=cfg.cmax["conditions"])
    d = rep.to_dict()
    d["status"] = "pass" if rep.passed else "fail"
    return d


def quantity_cases(sweep: dict) -> list:
    """(which, I, J) for the five integral quantities over the sweep (l clipped to -2..2)."""
    per = sweep["per"]
    lo, hi = max(sweep["l"][0], -2), min(sweep["l"][1], 2)
    out = []
    for l in range(lo, hi + 1):
        J = DyadicCube(l, (1,))
        out += [("Q", J, None), ("R", J, None)]
        for k in _rng(sweep["k"]):
            for j in _rng(sweep["j"]):
                out += [("P", I, J) for I in enumerate_family(J, "J(k,j)", k=k, j=j)[:per]]
            for m in _rng(sweep["m"]):
                out += [("QIJ", I, J) for I in enumerate_family(J, "J(k,0,m)", k=k, m=m)[:per]]
            if k >= 1:
                out += [("RIJ", I, J) for I in enumerate_family(J, "G^k", k=k)[:per]]
    return out


def section_quantities(cfg: RunConfig, K) -> dict:
    spec = cfg.quad()
    fun = K.functionals(0)
    T, delta = K.triples[0], K.delta[0]
    worst = {q: 0.0 for q in QUANTITIES}
    where = {}
    count = defaultdict(int)
    for which, I, J in quantity_cases(cfg.sweep):
        val = abs(quantity(which, I, J, T, delta, spec).value)
        bnd = quantity_bound(which, I, J, fun)
        r = val / bnd if bnd > 0 else (0.0 if val == 0 else math.inf)
        count[which] += 1
        if r > worst[which]:
            worst[which] = r
            where[which] = [str(I), str(J) if J is not None else None]
    cmax = cfg.cmax["quantities"]
    ok = all(v <= cmax for v in worst.values())
    return {"status": "pass" if ok else "fail", "max_ratio": worst, "worst_case": where,
            "cases": dict(count), "c_max": cmax}


def section_diag(cfg: RunConfig, K, r: float = 2.0, s: float = 1.5) -> dict:
    F2 = K.triples[0].F2
    c1 = c2 = 0.0
    rows = []
    for l in range(-3, 4):
        I = DyadicCube(l, (1,))
        J = DyadicCube(l, (2,))
        I1, I2, F2t, inv = diag_lemma_check(I, J, F2, r=r, s=s, spec=cfg.quad())
        c1 = max(c1, I1 / F2t)
        c2 = max(c2, I2 / inv)
        rows.append({"l": l, "I1": I1, "F2_tilde": F2t, "I2": I2, "inv_measure": inv})
    cmax = cfg.cmax["diag"]
    ok = c1 <= cmax and c2 <= cmax
    return {"status": "pass" if ok else "fail", "C_I1": c1, "C_I2": c2, "r": r, "s": s,
            "c_max": cmax, "rows": rows}


def section_mdt(cfg: RunConfig, K) -> dict:
    out, C = {}, 0.0
    for delta in (0.25, 0.5, 1.0):
        theta = 0.4 / (1 + 2 * delta)
        cd = 0.0
        for k in range(0, 21):
            lhs, rhs = mdt_check(k, delta, theta)
            cd = max(cd, lhs / rhs)
        out[str(delta)] = {"theta": theta, "C": cd}
        C = max(C, cd)
    cmax = cfg.cmax["mdt"]
    return {"status": "pass" if C <= cmax else "fail", "C": C, "by_delta": out, "c_max": cmax}


def section_predicates(cfg: RunConfig, K) -> dict:
    parts = {}
    ok = True
    for i in range(2):
        rep = limiting_predicates(K.functionals(i, improved=False), eps=cfg.eps)
        parts[f"param{i + 1}"] = {"N0": rep.N0, "passed": rep.passed}
        ok &= rep.passed
    return {"status": "pass" if ok else "fail", "eps": cfg.eps, **parts}


def synthetic_triples(seed: int = 0, count: int = 10) -> list:
    """Seeded random sampled triples, deliberately non-monotone."""
    rng = np.random.default_rng(seed)
    t = np.exp2(np.arange(-8, 8.01, 0.5))
    out = []
    for _ in range(count):
        f = [SampledFunction(t, rng.uniform(0.05, 2.0, t.size) * (1 + (rng.random(t.size) < 0.2) * 3),
                             "floor") for _ in range(3)]
        out.append(FuncTriple(*f, "def"))
    return out


def section_envelope(cfg: RunConfig, K) -> dict:
    rows = []
    ok = True
    for T in synthetic_triples(cfg.seed):
        E = envelope(T)
        dom = envelope_domination(T, E)
        mono = (bool(np.all(np.diff(E.F1.v) >= 0)) and bool(np.all(np.diff(E.F2.v) <= 0))
                and bool(np.all(np.diff(E.F3.v) <= 0)))
        good = dom <= 1.0 and mono
        ok &= good
        rows.append({"domination": dom, "monotone": mono})
    return {"status": "pass" if ok else "fail", "triples": rows}


SECTION_FUNCS = {"counting": section_counting, "conditions": section_conditions,
                 "quantities": section_quantities, "diag": section_diag, "mdt": section_mdt,
                 "predicates": section_predicates, "envelope": section_envelope}


def cmd_verify(cfg: RunConfig) -> int:
    K = _kernel(cfg)
    sections = cfg.only or list(VERIFY_SECTIONS)
    report = {"config_hash": cfg.digest(), "config": cfg.to_dict(),
              "kernel": K.name or K.kind, "sections": {}}
    ok = True
    for name in sections:
        t0 = time.perf_counter()
        res = SECTION_FUNCS[name](cfg, K)
        res["seconds"] = round(time.perf_counter() - t0, 3)
        report["sections"][name] = res
        ok &= res["status"] == "pass"
        _say(f"verify {name}: {res['status']} ({res['seconds']:.1f}s)")
    report["passed"] = ok
    timings = {k: v.pop("seconds") for k, v in report["sections"].items()}
    atomic_write(_out(cfg, "verify.json"), _json_text(report))
    atomic_write(_out(cfg, "verify_timings.json"), _json_text(timings))
    if "counting" in sections:
        rows = report["sections"]["counting"]["D^k_rows"]
        lines = ["n,level,k,count,formula"] + [
            f"{r['n']},{r['level']},{r['k']},{r['D^k']},{r['2^(kn)']}" for r in rows]
        atomic_write(_out(cfg, "counting.csv"),
                     _csv_header(cfg.header()) + "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- bmo

def load_symbol(path: str) -> HaarCoeffVector:
    """JSON (``{"rank": r, "terms": [[key, value], ...]}``) or text lines ``key value``.

    A key is one Haar index per parameter joined by ``|``.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"symbol file: {exc}") from None
    try:
        if text.lstrip().startswith("{"):
            return HaarCoeffVector.from_dict(json.loads(text))
        data, rank = {}, None
        for ln in text.splitlines():
            ln = ln.split("#", 1)[0].strip() if not ln.lstrip().startswith("g:") else ln.strip()
            if not ln:
                continue
            key, val = ln.rsplit(None, 1)
            hs = tuple(parse_haar(s) for s in key.split("|"))
            rank = rank or len(hs)
            data[hs] = float(val)
        return HaarCoeffVector(data, rank or 2)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"symbol file {path}: {exc}") from None


def cmd_bmo(cfg: RunConfig) -> int:
    schedule = list(range(1, cfg.N + 1))
    extra = {}
    if cfg.symbol:
        b = load_symbol(cfg.symbol)
    else:
        K = _kernel(cfg)
        try:
            I1, J1 = (parse_cube(c) for c in (cfg.pair or ["g:0/L0/(0)", "g:0/L0/(3)"]))
        except ValueError as exc:
            raise ConfigError(f"--pair: {exc}") from None
        if I1.edge > J1.edge:
            I1, J1 = J1, I1
        sym = paraproduct_symbol(I1, J1, K, N=cfg.N, spec=cfg.quad())
        b = HaarCoeffVector({(HaarIndex(c),): v for c, v in sym.items()}, 1, cfg.N)
        reg = param_regime(I1, J1)
        bound = param_bound(I1, J1, reg, K.functionals(0))
        extra = {"pair": [str(I1), str(J1)], "regime": reg.value, "param_bound": bound}
    rep = cmo_tail(b, schedule)
    out = rep.to_dict()
    out.update(config_hash=cfg.digest(), terms=len(b), rank=b.rank, **extra)
    passed = True
    if extra:
        ratio = rep.norm / extra["param_bound"] if extra["param_bound"] > 0 else math.inf
        passed = ratio <= cfg.cmax["bmo"]
        out.update(ratio=ratio, c_max=cfg.cmax["bmo"])
    out["passed"] = passed
    atomic_write(_out(cfg, "bmo.json"), _json_text(out))
    atomic_write(_out(cfg, "bmo.csv"), rep.to_csv_text(cfg.header(norm=fmt17(rep.norm))))
    _say(f"bmo: norm {rep.norm:.6g} over {len(b)} terms -> {'pass' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- entry point

COMMANDS = {"coeff": cmd_coeff, "compactness": cmd_compactness, "verify": cmd_verify,
            "bmo": cmd_bmo}

_QUIET = False


def _say(msg: str):
    if not _QUIET:
        print(msg, flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--kernel", default="compact_model",
                        help="builtin name (compact_model, tensor_hilbert, zero) or JSON file")
    common.add_argument("--n1", type=int, default=1)
    common.add_argument("--n2", type=int, default=1)
    common.add_argument("-N", type=int, default=3, help="truncation / schedule end (default 3)")
    common.add_argument("-M", type=int, default=4, help="operator truncation (default 4)")
    common.add_argument("--quad-tol", type=float, default=1e-9)
    common.add_argument("--quad-order", type=int, default=8)
    common.add_argument("--quad-depth", type=int, default=12)
    common.add_argument("--sweep", default=None,
                        help="k=0:5,j=1:6,m=1:6,l=-3:3,per=2 or a JSON file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--cmax", default=None,
                        help="one value for every check, or name=value,... "
                             f"({', '.join(sorted(DEFAULT_CMAX))})")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="dyadic-t1", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("coeff", parents=[common], help="matrix elements against regime bounds")
    sub.add_parser("compactness", parents=[common], help="compactness curves")
    v = sub.add_parser("verify", parents=[common], help="kernel, counting and lemma checks")
    v.add_argument("--only", default="", help=f"comma list from {', '.join(VERIFY_SECTIONS)}")
    v.add_argument("--eps", type=float, default=0.05)
    b = sub.add_parser("bmo", parents=[common], help="BMO proxy and CMO tails of a symbol")
    b.add_argument("--symbol", default=None, help="symbol file (JSON or 'key value' lines)")
    b.add_argument("--pair", nargs=2, metavar=("I1", "J1"), default=None,
                   help="cubes of the first-parameter paraproduct symbol")
    return p


def config_from_args(ns) -> RunConfig:
    cfg = RunConfig(command=ns.command, kernel=ns.kernel, n1=ns.n1, n2=ns.n2, N=ns.N, M=ns.M,
                    quad_tol=ns.quad_tol, quad_order=ns.quad_order, quad_depth=ns.quad_depth,
                    sweep=parse_sweep(ns.sweep), out=ns.out, seed=ns.seed,
                    cmax=parse_cmax(ns.cmax),
                    only=[s.strip() for s in getattr(ns, "only", "").split(",") if s.strip()],
                    symbol=getattr(ns, "symbol", None), pair=getattr(ns, "pair", None),
                    eps=getattr(ns, "eps", 0.05))
    return cfg.validate()


def main(argv=None) -> int:
    global _QUIET
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _QUIET = ns.quiet
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
