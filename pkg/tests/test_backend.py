import math
import os
import subprocess
import sys

import numpy as np
import pytest

import dyadic_t1
from dyadic_t1 import _pycore

try:
    from dyadic_t1 import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled core not built")
NODES, WEIGHTS = (np.ascontiguousarray(a) for a in np.polynomial.legendre.leggauss(8))
CUT = 2.0 * math.sqrt(46.0 * math.log(10.0))


@needs_core
@pytest.mark.parametrize("x0,w,n", [(-1.0, 0.25, 8), (-3.3, 1 / 16, 96), (0.0, 2.0, 5)])
def test_hilbert_cells_agree(x0, w, n):
    a = _core.hilbert_cells(x0, x0, w, n, n)
    b = _pycore.hilbert_cells(x0, x0, w, n, n)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


@needs_core
@pytest.mark.parametrize("x0,w,n", [(-1.0, 0.25, 8), (-3.3, 1 / 16, 96)])
def test_compact_cells_agree(x0, w, n):
    args = (x0, x0, w, n, n, 2.0, 4.0, 1.0, NODES, WEIGHTS, CUT)
    a = _core.compact_cells(*args)
    b = _pycore.compact_cells(*args)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-16)
    # a row block equals the matching rows of the full matrix
    blk = _core.compact_cells(*args, 2, 5)
    assert np.allclose(blk, a[2:5], rtol=1e-14, atol=0)


@needs_core
def test_compact_eval_agrees(rng):
    u, v = rng.normal(0, 3, 200), rng.normal(0, 3, 200)
    a = _core.compact_eval(u, v, 2.0, 4.0, 1.0)
    b = _pycore.compact_eval(u, v, 2.0, 4.0, 1.0)
    assert np.allclose(a, b, rtol=1e-14, atol=0)


def test_hilbert_cells_against_closed_form():
    # adjacent unit cells: int_0^1 int_1^2 dy dx / (x - y) = -2 ln 2
    M = _pycore.hilbert_cells(0.0, 0.0, 1.0, 2, 2)
    assert M[0, 1] == pytest.approx(-2 * math.log(2), rel=1e-13)
    assert M[1, 0] == pytest.approx(2 * math.log(2), rel=1e-13)
    assert M[0, 0] == 0.0


def test_pure_fallback_selected_by_env():
    env = dict(os.environ, DYADIC_T1_PURE="1")
    r = subprocess.run([sys.executable, "-c", "import dyadic_t1; print(dyadic_t1.BACKEND)"],
                       capture_output=True, text=True, env=env)
    assert r.stdout.strip() == "python"
    assert dyadic_t1.BACKEND == ("cython" if _core is not None
                                 and not os.environ.get("DYADIC_T1_PURE") else "python")
