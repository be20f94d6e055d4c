import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from detbridge.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, run


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


@pytest.fixture
def basis(tmp_path):
    """A 4-site exact-scheme basis directory."""
    code = run([
        "generate-basis", "--outdir", str(tmp_path), "--geometry", "chain:4:periodic",
        "--h", "1.5", "--delta", "0.05", "--steps", "4", "--scheme", "exact", "--out", "basis",
    ])
    assert code == EXIT_OK
    return tmp_path


def test_model_dump(tmp_path):
    code = run(["model", "--outdir", str(tmp_path), "--geometry", "chain:2", "--h", "0", "--dump"])
    assert code == EXIT_OK
    _, dense = read_csv(tmp_path / "model.csv")
    np.testing.assert_array_equal(np.diag(dense), [-1, 1, 1, -1])
    assert (tmp_path / "model.config.json").exists() and (tmp_path / "model.log").exists()


def test_usage_errors_exit_two(tmp_path):
    assert run(["model", "--bogus"]) == EXIT_VALIDATION
    assert run(["bridge", "--outdir", str(tmp_path), "--manifest", str(tmp_path / "none.json"),
                "--rayleigh", "r.json"]) == EXIT_VALIDATION
    assert run(["generate-basis", "--outdir", str(tmp_path), "--geometry", "chain:3",
                "--delta", "0.1", "--steps", "2", "--noise", "g:-1"]) == EXIT_VALIDATION


def test_version_flag(capsys):
    assert run(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.strip()


def test_full_pipeline(basis):
    man = str(basis / "basis" / "manifest.json")
    manifest = json.loads((basis / "basis" / "manifest.json").read_text())
    assert len(manifest["files"]) == 5 and manifest["scheme"] == "exact"
    assert run(["rayleigh", "--outdir", str(basis), "--manifest", man, "--estimator", "exact",
                "--policy", "xp:100", "--out", "R.json"]) == EXIT_OK
    assert run(["bridge", "--outdir", str(basis), "--manifest", man, "--rayleigh",
                str(basis / "R.json"), "--digits", "100", "--extrapolate", "0.1",
                "--out", "traj.csv", "--json-out", "traj.json"]) == EXIT_OK
    header, data = read_csv(basis / "traj.csv")
    assert header == ["t", "alpha_norm", "obs_Mx", "infidelity"]
    assert data.shape[0] == 61
    assert np.max(data[:41, 3]) < 1e-10
    assert data[0, 1] == 1.0


def test_snapshot_rerun_is_identical(basis):
    man = str(basis / "basis" / "manifest.json")
    args = ["rayleigh", "--outdir", str(basis), "--manifest", man, "--estimator", "det",
            "--samples", "800", "--chains", "4", "--seed", "3", "--out", "R1.json"]
    assert run(args) == EXIT_OK
    snap = basis / "rayleigh.config.json"
    again = basis / "again"
    assert run(["rayleigh", "--config", str(snap), "--outdir", str(again)]) == EXIT_OK
    first = json.loads((basis / "R1.json").read_text())
    second = json.loads((again / "R1.json").read_text())
    assert first["M"] == second["M"]


def test_singular_family_exits_three(basis):
    f0 = str(basis / "basis" / "basis_000.qsv")
    code = run(["rayleigh", "--outdir", str(basis), "--family", f"{f0},{f0}",
                "--geometry", "chain:4:periodic", "--estimator", "exact", "--policy", "xp:60"])
    assert code == EXIT_NUMERICAL


def test_gs_interpolate(tmp_path):
    assert run(["model", "--outdir", str(tmp_path), "--geometry", "chain:6", "--split", "parts"]) == EXIT_OK
    parts = f"{tmp_path / 'parts' / 'H0.json'},{tmp_path / 'parts' / 'H1.json'}"
    assert run(["gs-interpolate", "--outdir", str(tmp_path), "--parts", parts,
                "--anchors", "0.5:1.5:3", "--grid", "0.5:1.5:5"]) == EXIT_OK
    header, data = read_csv(tmp_path / "curve.csv")
    assert header == ["gamma", "mu0", "infidelity_vs_exact"]
    assert data[0, 2] < 1e-10 and data[2, 2] < 1e-10 and data[4, 2] < 1e-10


def test_distance_and_excited(basis):
    files = sorted(str(p) for p in (basis / "basis").glob("*.qsv"))
    a, b = ",".join(files[:2]), ",".join(files[2:4])
    assert run(["distance", "--outdir", str(basis), "--family-a", a, "--family-b", a,
                "--samples", "0"]) == EXIT_OK
    assert json.loads((basis / "distance.json").read_text())["distance_exact"] < 1e-7
    assert run(["distance", "--outdir", str(basis), "--family-a", a, "--family-b", b,
                "--samples", "2000", "--chains", "4"]) == EXIT_OK
    out = json.loads((basis / "distance.json").read_text())
    assert abs(out["distance_mc"] - out["distance_exact"]) < 5 * out["distance_mc_error"] + 1e-9
    assert run(["excited", "--outdir", str(basis), "--family", ",".join(files[::4]),
                "--geometry", "chain:4:periodic", "--h", "1.5"]) == EXIT_OK
    _, ritz = read_csv(basis / "ritz.csv")
    assert np.all(np.diff(ritz[:, 1]) >= 0)


def test_bench_table(basis, capsys):
    code = run(["bench-estimators", "--outdir", str(basis), "--manifest",
                str(basis / "basis" / "manifest.json"), "--samples", "500", "--rcond", "1e-11"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "estimator" in out and "sos+pinv(1e-11)" in out
    with open(basis / "bench.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["estimator", "samples", "wall_time_s", "final_infidelity"]
    assert len(rows) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "detbridge.cli", "model", "--outdir", str(tmp_path), "--geometry", "chain:3"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n"] == 3


def test_pipeline_reproduces_discretization_rescue(tmp_path):
    h = 2 * 3.044
    common = ["--outdir", str(tmp_path)]
    assert run(["generate-basis", *common, "--geometry", "chain:10:periodic", "--h", str(h),
                "--delta", str(0.05 / h), "--steps", "27", "--scheme", "trotter2", "--seed", "1",
                "--out", "basis"]) == EXIT_OK
    man = str(tmp_path / "basis" / "manifest.json")
    assert run(["rayleigh", *common, "--manifest", man, "--estimator", "exact", "--policy", "xp:200"]) == EXIT_OK
    assert run(["bridge", *common, "--manifest", man, "--rayleigh", str(tmp_path / "rayleigh.json"),
                "--grid-refine", "1", "--obs", ""]) == EXIT_OK
    _, data = read_csv(tmp_path / "bridge.csv")
    raw = json.loads((tmp_path / "basis" / "manifest.json").read_text())["infidelity"]
    assert raw[-1] / data[-1, -1] >= 1e2
