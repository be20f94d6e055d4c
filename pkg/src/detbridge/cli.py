"""Command-line runner for the full pipeline.

Every command writes a resolved-config snapshot and a log next to its outputs.
Passing a snapshot back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, xprec
from .bridge import (
    bridge_infidelity,
    bridge_observable,
    bridge_solve,
    refined_grid,
)
from .det_state import DetSamplerConfig, SamplerError
from .dynamics import Noise, generate_basis, parse_scheme
from .oracle import MAX_DENSE_DIAG_SITES, ExactPropagator, ground_state, infidelity
from .rayleigh import (
    EstimationError,
    GramPack,
    Policy,
    RayleighEstimate,
    assemble_rayleigh,
    estimate_det_state,
    estimate_sum_of_states,
    exact_gram_pack,
    realify_eigenvalues,
    with_identity,
)
from .spin_model import (
    Geometry,
    ModelError,
    OperatorTerms,
    SpinConfig,
    build_tfim,
    combine_terms,
    magnetization_x,
)
from .states import (
    AmplitudeState,
    BasisFamily,
    StateFileError,
    basis_state,
    load_family,
    save_family,
    uniform_state,
)
from .subspace import (
    DegenerateRitzError,
    GroundStateInterpolator,
    ritz_spectrum,
    subspace_distance_exact,
    subspace_distance_mc,
)

OUTDIR_ENV = "DETBRIDGE_OUTDIR"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("detbridge")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# small helpers

def _fmt(x) -> str:
    return "%.17g" % x


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _csv_list(text: str | None) -> list[str]:
    return [t for t in (text or "").split(",") if t]


def _float_grid(text: str) -> np.ndarray:
    """``a:b:N`` inclusive grid or a comma list."""
    if ":" in text:
        a, b, num = text.split(":")
        return np.linspace(float(a), float(b), int(num))
    return np.array([float(t) for t in _csv_list(text)])


def _operator(args) -> OperatorTerms:
    if getattr(args, "op", None):
        return OperatorTerms.load(args.op)
    if args.model != "tfim":
        raise UsageError(f"unknown model {args.model!r}")
    if args.geometry is None:
        raise UsageError("give --op FILE or --model tfim --geometry ...")
    return build_tfim(Geometry.parse(args.geometry), args.J, args.h)


def _initial_state(spec: str, n: int) -> AmplitudeState:
    if spec == "uniform":
        return uniform_state(n)
    if spec.startswith("config:"):
        return basis_state(SpinConfig.from_string(spec[7:]))
    raise UsageError(f"unknown initial state {spec!r} (uniform or config:<spins>)")


def _resolve_out(outdir: Path, name: str | None, default: str) -> Path:
    p = Path(name or default)
    return p if p.is_absolute() else outdir / p


class Manifest:
    """Basis directory written by ``generate-basis``."""

    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            self.data = json.loads(self.path.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"manifest not found: {self.path}") from None
        self.files = [self.path.parent / f for f in self.data["files"]]
        self.times = np.asarray(self.data["times"], dtype=float)

    def family(self):
        return load_family(self.files)

    def hamiltonian(self) -> OperatorTerms:
        return OperatorTerms.from_json(self.data["model"], label="H")


def _family_and_model(args):
    """Family plus the manifest (when given) from ``--manifest`` or ``--family``."""
    if getattr(args, "manifest", None):
        man = Manifest(args.manifest)
        return man.family(), man
    paths = _csv_list(getattr(args, "family", None))
    if not paths:
        raise UsageError("give --manifest or --family")
    return load_family(paths), None


def _sampler(args) -> DetSamplerConfig:
    return DetSamplerConfig.with_total(args.samples, args.chains, seed=args.seed)


# --------------------------------------------------------------------------
# commands

def cmd_model(args, outdir: Path) -> dict:
    H = _operator(args)
    out = {"n": H.n, "terms": len(H.terms)}
    if args.dump:
        if H.n > 12:
            raise UsageError("--dump limited to n <= 12")
        dense = H.to_dense()
        path = _resolve_out(outdir, args.out, "model.csv")
        rows = dense.real if np.all(dense.imag == 0) else dense
        _write_csv(path, [f"c{j}" for j in range(H.dim)], rows.tolist())
        out["dump"] = str(path)
    if args.write:
        path = _resolve_out(outdir, args.write, "model.json")
        H.save(path)
        out["operator"] = str(path)
    if args.split:
        if args.geometry is None:
            raise UsageError("--split needs --model tfim --geometry")
        d = _resolve_out(outdir, args.split, "parts")
        d.mkdir(parents=True, exist_ok=True)
        geom = Geometry.parse(args.geometry)
        build_tfim(geom, args.J, 0.0).save(d / "H0.json")
        build_tfim(geom, 0.0, 1.0).save(d / "H1.json")
        out["parts"] = [str(d / "H0.json"), str(d / "H1.json")]
    return out


def cmd_generate_basis(args, outdir: Path) -> dict:
    H = _operator(args)
    psi0 = _initial_state(args.init, H.n)
    family, report = generate_basis(
        H, psi0, args.delta, args.steps, parse_scheme(args.scheme), Noise.parse(args.noise), args.seed
    )
    d = _resolve_out(outdir, args.out, "basis")
    d.mkdir(parents=True, exist_ok=True)
    files = save_family(family, d)
    report.files = [p.name for p in files]
    manifest = report.to_json()
    manifest["model"] = H.to_json()
    manifest["init"] = args.init
    _write_json(d / "manifest.json", manifest)
    return {"manifest": str(d / "manifest.json"), "m": family.m, "final_infidelity": report.infidelity[-1]}


def _estimate(args, family, H):
    """Rayleigh estimate and the pack it came from (``None`` for det)."""
    policy = Policy.parse(args.policy)
    if args.estimator == "det":
        return estimate_det_state(family, H, _sampler(args)), None
    if args.estimator == "sos":
        pack = estimate_sum_of_states(family, with_identity([H], family.n), _sampler(args))
    elif args.estimator == "exact":
        digits = policy.digits if policy.kind == "xp" else None
        pack = exact_gram_pack(family, [H], digits)
    else:
        raise UsageError(f"unknown estimator {args.estimator!r}")
    return assemble_rayleigh(pack, policy, H.label or "O0"), pack


def cmd_rayleigh(args, outdir: Path) -> dict:
    family, man = _family_and_model(args)
    H = _operator(args) if (args.op or args.geometry) else man.hamiltonian() if man else None
    if H is None:
        raise UsageError("no operator: give --op, --model flags or a manifest with a model")
    if not H.label:
        H = OperatorTerms(H.n, H.terms, "H")
    est, pack = _estimate(args, family, H)
    if args.imag == "discard":
        est = realify_eigenvalues(est)
    est.diagnostics["estimator"] = args.estimator
    path = _resolve_out(outdir, args.out, "rayleigh.json")
    est.save(path)
    out = {"rayleigh": str(path), "m": est.m}
    if args.pack_out and pack is not None:
        ppath = _resolve_out(outdir, args.pack_out, "pack.json")
        _write_json(ppath, pack.to_json())
        out["pack"] = str(ppath)
    return out


def cmd_bridge(args, outdir: Path) -> dict:
    man = Manifest(args.manifest)
    family = man.family()
    est = RayleighEstimate.load(args.rayleigh)
    if est.m != family.m:
        raise UsageError(f"Rayleigh matrix is {est.m}x{est.m}, family has {family.m} members")
    grid = refined_grid(man.times, args.grid_refine, args.extrapolate)
    traj = bridge_solve(est, grid, digits=args.digits)

    header = ["t", "alpha_norm"]
    columns = [grid, np.linalg.norm(traj.alphas, axis=1)]
    labels = _csv_list(args.obs)
    if labels:
        ops = [magnetization_x(family.n) if lab == "Mx" else OperatorTerms.load(lab) for lab in labels]
        pack = exact_gram_pack(family, ops, args.digits)
        for op in ops:
            series = bridge_observable(pack, op.label, traj)
            header.append(f"obs_{op.label}")
            columns.append(series.values)
    oracle_done = False
    if not args.no_oracle and family.n <= MAX_DENSE_DIAG_SITES and "model" in man.data:
        prop = ExactPropagator(man.hamiltonian())
        exact = prop.states_at(family.matrix[:, 0], grid)
        header.append("infidelity")
        columns.append(bridge_infidelity(traj, family, exact))
        oracle_done = True
    path = _resolve_out(outdir, args.out, "bridge.csv")
    _write_csv(path, header, zip(*[c.tolist() for c in columns]))
    if args.json_out:
        _write_json(_resolve_out(outdir, args.json_out, "trajectory.json"), traj.to_json())
    out = {"csv": str(path), "points": int(grid.size)}
    if oracle_done:
        out["final_infidelity"] = float(columns[-1][-1])
    return out


def cmd_gs_interpolate(args, outdir: Path) -> dict:
    parts = [OperatorTerms.load(p) for p in _csv_list(args.parts)]
    if len(parts) < 2:
        raise UsageError("--parts needs at least two operator files")
    n = parts[0].n

    def gamma(g):
        return np.r_[np.ones(len(parts) - 1), g]

    def hamiltonian(g):
        return combine_terms(gamma(g).tolist(), parts)

    if args.anchors:
        states = [ground_state(hamiltonian(g))[1].amplitudes for g in _float_grid(args.anchors)]
        family = BasisFamily.from_matrix(np.stack(states, axis=1))
    else:
        family, _ = _family_and_model(args)
    pack = exact_gram_pack(family, parts)
    interp = GroundStateInterpolator(pack, [p.label for p in parts])
    oracle = n <= MAX_DENSE_DIAG_SITES and not args.no_oracle
    rows = []
    for g in _float_grid(args.grid):
        res = interp.query(gamma(g))
        row = [float(g), res.mu0]
        if oracle:
            row.append(infidelity(ground_state(hamiltonian(g))[1].amplitudes, family.matrix @ res.alpha))
        rows.append(row)
    header = ["gamma", "mu0"] + (["infidelity_vs_exact"] if oracle else [])
    path = _resolve_out(outdir, args.out, "curve.csv")
    _write_csv(path, header, rows)
    return {"csv": str(path), "points": len(rows)}


def cmd_distance(args, outdir: Path) -> dict:
    U = load_family(_csv_list(args.family_a))
    V = load_family(_csv_list(args.family_b))
    out = {}
    if U.n <= 20 and not args.mc_only:
        out["distance_exact"] = subspace_distance_exact(U, V)
    if args.samples > 0:
        est = subspace_distance_mc(U, V, _sampler(args))
        out.update(distance_mc=est.distance, distance_mc_error=est.error)
    _write_json(_resolve_out(outdir, args.out, "distance.json"), out)
    return out


def cmd_excited(args, outdir: Path) -> dict:
    family, man = _family_and_model(args)
    if args.pack:
        pack = GramPack.from_json(json.loads(Path(args.pack).read_text()))
        label = args.label
    else:
        H = _operator(args) if (args.op or args.geometry) else man.hamiltonian() if man else None
        if H is None:
            raise UsageError("no operator: give --op, --model flags, --pack or a manifest")
        label = H.label or "O0"
        pack = exact_gram_pack(family, [H])
    ritz = ritz_spectrum(pack, label)
    path = _resolve_out(outdir, args.out, "ritz.csv")
    _write_csv(path, ["k", "ritz_value", "imag"], [[k, float(v), float(i)] for k, (v, i) in enumerate(zip(ritz.values, ritz.imag))])
    vec = np.asarray(ritz.vectors)
    _write_json(
        _resolve_out(outdir, args.vectors_out, "ritz_vectors.json"),
        {"values": ritz.values.tolist(), "vectors": np.stack([vec.real, vec.imag], -1).tolist()},
    )
    return {"csv": str(path), "lowest": float(ritz.values[0])}


def _bench_row(job):
    """One bench entry; top-level so it can run in a worker process."""
    family_files, model, times, estimator, samples, seed, extra = job
    family = load_family(family_files)
    H = OperatorTerms.from_json(model, label="H")
    cfg = DetSamplerConfig.with_total(samples, 8, seed=seed)
    t0 = time.perf_counter()
    if estimator == "det":
        est = estimate_det_state(family, H, cfg)
    else:
        pack = estimate_sum_of_states(family, with_identity([H], family.n), cfg)
        est = assemble_rayleigh(pack, extra, "H")
    wall = time.perf_counter() - t0
    exact = ExactPropagator(H).states_at(family.matrix[:, 0], times)
    try:
        inf = float(bridge_infidelity(bridge_solve(est, times), family, exact)[-1])
    except xprec.XPrecError:
        inf = float("nan")
    name = "det" if estimator == "det" else f"sos+{Policy.parse(extra).name}"
    return [name, samples, wall, inf]


def cmd_bench_estimators(args, outdir: Path) -> dict:
    man = Manifest(args.manifest)
    if man.family().n > MAX_DENSE_DIAG_SITES:
        raise UsageError(f"bench needs an exact oracle (n <= {MAX_DENSE_DIAG_SITES})")
    files = [str(f) for f in man.files]
    jobs = []
    for s in [int(x) for x in _csv_list(args.samples)]:
        jobs.append((files, man.data["model"], man.times, "det", s, args.seed, None))
        for rc in _csv_list(args.rcond):
            jobs.append((files, man.data["model"], man.times, "sos", s, args.seed, f"pinv:{rc}"))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_bench_row, jobs))
    else:
        rows = [_bench_row(j) for j in jobs]
    path = _resolve_out(outdir, args.out, "bench.csv")
    _write_csv(path, ["estimator", "samples", "wall_time_s", "final_infidelity"], rows)
    width = max(len(r[0]) for r in rows)
    print(f"{'estimator':<{width}}  {'samples':>8}  {'wall[s]':>8}  final infidelity")
    for name, s, wall, inf in rows:
        print(f"{name:<{width}}  {s:>8d}  {wall:>8.2f}  {inf:.3e}")
    return {"csv": str(path), "rows": len(rows)}


# --------------------------------------------------------------------------
# parser

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--op", help="operator spec JSON file")
    p.add_argument("--model", default="tfim", help="built-in model (tfim)")
    p.add_argument("--geometry", help="e.g. chain:12:open or square:4:periodic")
    p.add_argument("--J", type=float, default=1.0, help="ZZ coupling")
    p.add_argument("--h", type=float, default=1.0, help="transverse field")


def _sampler_flags(p: argparse.ArgumentParser, samples=10000) -> None:
    p.add_argument("--samples", type=int, default=samples, help="total Monte Carlo samples")
    p.add_argument("--chains", type=int, default=8, help="independent Markov chains")
    p.add_argument("--seed", type=int, default=0, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detbridge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--outdir", help=f"output directory (default ${OUTDIR_ENV} or .)")
    common.add_argument("--config", help="resolved-config snapshot to rerun")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", parents=[common], help="build or dump a Hamiltonian")
    _model_flags(p)
    p.add_argument("--dump", action="store_true", help="write the dense matrix as CSV")
    p.add_argument("--write", help="write the operator spec JSON")
    p.add_argument("--split", help="directory for H0.json (ZZ part) and H1.json (unit X part)")
    p.add_argument("--out", help="CSV path for --dump")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("generate-basis", parents=[common], help="discretized dynamics basis")
    _model_flags(p)
    p.add_argument("--init", default="uniform", help="uniform or config:<spins>")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--scheme", default="trotter2", help="exact, trotter2, lpeK, slpe2, taylorK")
    p.add_argument("--noise", default="none", help="none or g:<eps>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="basis directory")
    p.set_defaults(func=cmd_generate_basis)

    p = sub.add_parser("rayleigh", parents=[common], help="estimate the Rayleigh matrix")
    _model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--family", help="comma-separated qsv files")
    p.add_argument("--estimator", choices=["det", "sos", "exact"], default="det")
    _sampler_flags(p)
    p.add_argument("--policy", default="xp:200", help="xp:<digits>, pinv:<rcond> or direct")
    p.add_argument("--imag", choices=["keep", "discard"], default="keep")
    p.add_argument("--out", help="Rayleigh JSON path")
    p.add_argument("--pack-out", help="also write the Gram pack (sos and exact only)")
    p.set_defaults(func=cmd_rayleigh)

    p = sub.add_parser("bridge", parents=[common], help="Bridge dynamics on a basis")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rayleigh", required=True)
    p.add_argument("--grid-refine", type=int, default=10)
    p.add_argument("--extrapolate", type=float, default=0.0)
    p.add_argument("--digits", type=int, default=xprec.DEFAULT_DIGITS)
    p.add_argument("--obs", default="Mx", help="comma list: Mx or operator JSON files")
    p.add_argument("--no-oracle", action="store_true", help="skip the exact infidelity column")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--json-out", help="trajectory JSON path")
    p.set_defaults(func=cmd_bridge)

    p = sub.add_parser("gs-interpolate", parents=[common], help="ground-state interpolation")
    p.add_argument("--manifest")
    p.add_argument("--family", help="comma-separated qsv files")
    p.add_argument("--anchors", help="build the family from exact ground states at a:b:N")
    p.add_argument("--parts", required=True, help="comma-separated operator files; the grid scales the last")
    p.add_argument("--grid", required=True, help="a:b:N or comma list")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_gs_interpolate)

    p = sub.add_parser("distance", parents=[common], help="subspace distance")
    p.add_argument("--family-a", required=True)
    p.add_argument("--family-b", required=True)
    _sampler_flags(p, samples=0)
    p.add_argument("--mc-only", action="store_true")
    p.add_argument("--out", help="JSON path")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("excited", parents=[common], help="Ritz values and vectors of a family")
    _model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--family")
    p.add_argument("--pack", help="Gram pack JSON instead of exact sums")
    p.add_argument("--label", default="H", help="operator label inside --pack")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--vectors-out", help="JSON path for Ritz vectors")
    p.set_defaults(func=cmd_excited)

    p = sub.add_parser("bench-estimators", parents=[common], help="estimator comparison table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", default="1000,10000", help="comma list of budgets")
    p.add_argument("--rcond", default="1e-9,1e-11,1e-13", help="pinv cutoffs for sum-of-states")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench_estimators)
    return parser


_SNAPSHOT_SKIP = {"func", "config", "outdir", "verbose"}


def _load_snapshot(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install snapshot values as defaults of the subcommand; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    data = json.loads(Path(known.config).read_text())
    if data.get("command") != known.command:
        raise UsageError(f"snapshot is for {data.get('command')!r}, not {known.command!r}")
    sub = parser._subparsers._group_actions[0].choices[known.command]
    values = {k: v for k, v in data["args"].items() if k not in _SNAPSHOT_SKIP}
    for action in sub._actions:
        if action.dest in values:
            action.default = values[action.dest]
            action.required = False


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _load_snapshot(parser, argv)
        args = parser.parse_args(argv)
        outdir = Path(args.outdir or os.environ.get(OUTDIR_ENV, "."))
        outdir.mkdir(parents=True, exist_ok=True)
    except SystemExit as exc:  # argparse: usage errors, --help, --version
        return int(exc.code or 0)
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    handler = logging.FileHandler(outdir / f"{args.command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        snapshot = {
            "command": args.command,
            "version": __version__,
            "args": {k: v for k, v in sorted(vars(args).items()) if k not in _SNAPSHOT_SKIP},
        }
        _write_json(outdir / f"{args.command}.config.json", snapshot)
        log.info("start %s", args.command)
        result = args.func(args, outdir)
        log.info("done %s: %s", args.command, result)
        print(json.dumps(result, sort_keys=True))
        return EXIT_OK
    except (UsageError, ModelError, StateFileError, FileNotFoundError, DegenerateRitzError, KeyError) as exc:
        log.error("validation error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (xprec.XPrecError, EstimationError, SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        root.removeHandler(handler)
        handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
