import csv
import json
import os
import subprocess
import sys

import pytest

from dyadic_t1 import cli
from dyadic_t1.analysis import HaarCoeffVector

from conftest import H

SMALL = "k=0:1,j=1:2,m=1:1,l=0:0,per=1"


def run(*argv):
    return cli.main([*argv, "--quiet"])


def data_rows(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def test_coeff_zero_kernel(tmp_path):
    assert run("coeff", "--kernel", "zero", "--sweep", SMALL, "--out", str(tmp_path)) == 0
    rows = data_rows(tmp_path / "coeff.csv")
    assert rows
    assert all(float(r["value"]) == 0.0 for r in rows)


def test_coeff_header_and_precision(tmp_path):
    assert run("coeff", "--sweep", SMALL, "--out", str(tmp_path)) == 0
    text = (tmp_path / "coeff.csv").read_text()
    cfg = cli.config_from_args(cli.build_parser().parse_args(
        ["coeff", "--sweep", SMALL, "--out", str(tmp_path)]))
    assert f"# config_hash: {cfg.digest()}" in text
    vals = [r["value"] for r in data_rows(tmp_path / "coeff.csv") if float(r["value"]) != 0]
    assert vals
    assert all(len(v.split("e")[0].replace("-", "").replace(".", "")) == 17 for v in vals)


def test_outputs_are_reproducible_and_atomic(tmp_path):
    first = {}
    for _ in range(2):
        assert run("coeff", "--sweep", SMALL, "--out", str(tmp_path)) == 0
        for name in ("coeff.csv", "coeff_summary.json"):
            data = (tmp_path / name).read_bytes()
            assert first.setdefault(name, data) == data
    assert not [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]


@pytest.mark.parametrize("argv", [
    ["coeff", "--sweep", "k=3:1"],
    ["coeff", "--sweep", "bogus"],
    ["coeff", "--cmax", "regime=x"],
    ["coeff", "--n1", "2"],
    ["compactness", "-N", "5", "-M", "4"],
    ["verify", "--only", "nothing"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2


def test_malformed_kernel_config(tmp_path):
    p = tmp_path / "k.json"
    p.write_text("{not json")
    assert run("coeff", "--kernel", str(p), "--out", str(tmp_path)) == 2
    p.write_text(json.dumps({"kind": "compact_model", "psi_params": [1, 4]}))
    assert run("coeff", "--kernel", str(p), "--out", str(tmp_path)) == 2


def test_missing_kernel_file(tmp_path):
    assert run("compactness", "--kernel", str(tmp_path / "none.json"), "--out", str(tmp_path)) == 2


def test_compactness_edge_M_equals_N(tmp_path):
    code = run("compactness", "-N", "2", "-M", "2", "--out", str(tmp_path))
    assert code in (0, 1)
    for label in ("compact_model", "tensor_hilbert"):
        rows = data_rows(tmp_path / f"curve_{label}.csv")
        assert [int(r["N"]) for r in rows] == [1, 2]
        assert float(rows[-1]["sigma"]) == 0.0
    rep = json.loads((tmp_path / "curves.json").read_text())
    assert set(rep["curves"]) == {"compact_model", "tensor_hilbert"}


def test_verify_counting_only(tmp_path):
    assert run("verify", "--only", "counting", "--out", str(tmp_path)) == 0
    rows = data_rows(tmp_path / "counting.csv")
    assert len(rows) == 2 * 7 * 7
    assert all(r["count"] == r["formula"] == str(2 ** (int(r["k"]) * int(r["n"]))) for r in rows)
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert list(rep["sections"]) == ["counting"]


def test_verify_impossible_tolerance(tmp_path):
    assert run("verify", "--only", "counting,diag,mdt", "--cmax", "0", "--out", str(tmp_path)) == 1
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert all(s["status"] == "fail" for s in rep["sections"].values())


def test_verify_small_sections_pass(tmp_path):
    assert run("verify", "--only", "mdt,envelope,diag", "--out", str(tmp_path)) == 0


def _write_symbol(path, v):
    path.write_text(json.dumps(v.to_dict()))
    return str(path)


def test_bmo_single_haar_symbol(tmp_path):
    sym = _write_symbol(tmp_path / "b.json", HaarCoeffVector.unit((H(0, 0), H(0, 2))))
    assert run("bmo", "--symbol", sym, "--out", str(tmp_path)) == 0
    rep = json.loads((tmp_path / "bmo.json").read_text())
    assert rep["norm"] == pytest.approx(1.0)
    assert rep["tails"] == {"1": 0.0, "2": 0.0, "3": 0.0}
    assert "N,tail_norm" in (tmp_path / "bmo.csv").read_text()


def test_bmo_empty_symbol(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("# no terms\n")
    assert run("bmo", "--symbol", str(p), "--out", str(tmp_path)) == 0
    assert json.loads((tmp_path / "bmo.json").read_text())["norm"] == 0.0


def test_bmo_text_symbol_and_bad_file(tmp_path):
    p = tmp_path / "b.txt"
    p.write_text("g:0/L0/(0)|g:0/L0/(1) -2.0\n")
    assert run("bmo", "--symbol", str(p), "--out", str(tmp_path)) == 0
    assert json.loads((tmp_path / "bmo.json").read_text())["norm"] == pytest.approx(2.0)
    p.write_text("g:0/L0/(0)|nonsense 1\n")
    assert run("bmo", "--symbol", str(p), "--out", str(tmp_path)) == 2


def test_bmo_paraproduct_symbol(tmp_path):
    assert run("bmo", "--pair", "g:0/L0/(0)", "g:0/L0/(3)", "-N", "2", "--out", str(tmp_path)) == 0
    rep = json.loads((tmp_path / "bmo.json").read_text())
    assert rep["regime"] == "SEP"
    assert rep["ratio"] <= rep["c_max"]


def test_module_entry_point(tmp_path):
    env = dict(os.environ, DYADIC_T1_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "dyadic_t1", "verify", "--only", "mdt",
                        "--out", str(tmp_path)], capture_output=True, text=True, env=env)
    assert r.returncode == 0
    assert "verify mdt: pass" in r.stdout
