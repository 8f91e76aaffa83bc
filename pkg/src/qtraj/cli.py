"""Command-line interface: ``qtraj analyze|simulate|experiment <config>``.

Exit codes: 0 success, 1 input error, 2 model or precondition rejection,
3 failed assertion in an experiment.
"""

import argparse
from dataclasses import dataclass, field, replace
from importlib import metadata
import json
import logging
from pathlib import Path
import sys
import time

import numpy as np

from . import __version__
from . import structure as st
from .config import ConfigError, config_hash, dumps_toml, encode_matrix, load_config
from .experiments import ExperimentAborted, run_experiment
from .linalg import NumericalError
from .sde import KernelInclusionError, StepSizeError, TrajectoryError, simulate_pairs

log = logging.getLogger("qtraj")

EXIT_OK, EXIT_INPUT, EXIT_REJECTED, EXIT_ASSERTION = 0, 1, 2, 3


class InputError(Exception):
    """Bad command line or unreadable input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


@dataclass
class RunManifest:
    config_path: str
    config_hash: str
    out_dir: str
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "out_dir": self.out_dir,
            "artifacts": list(self.artifacts),
            "timings": dict(self.timings),
            "version": self.version,
            **self.extra,
        }


def tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def fmt(x):
    """Locale-independent float formatting with round-trip precision."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_text_csv(path, header, rows):
    def cell(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float, np.integer, np.floating)):
            return fmt(v)
        s = str(v)
        return '"' + s.replace('"', '""') + '"' if any(c in s for c in ',"\n') else s

    lines = [",".join(header)]
    lines.extend(",".join(cell(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_to_dict(report):
    """Structure report as a TOML-serializable document."""
    spec = report.liouvillian_spectrum
    return {
        "dim": report.dim,
        "n_enclosures": report.n_enclosures,
        "assumptions": {
            "spectral": bool(report.spectral_ok),
            "identifiable": bool(report.identifiable),
            "purification": report.purification.value,
            "purification_witness": report.purification_witness,
        },
        "unique_decomposition": bool(report.unique_decomposition),
        "liouvillian_spectrum": [[float(z.real), float(z.imag)] for z in spec],
        "invariant_states": [encode_matrix(r) for r in report.invariant_states],
        "enclosures": [encode_matrix(P) for P in report.enclosures],
        "dual_projectors": [encode_matrix(M) for M in report.dual_projectors],
        "fixed_point_basis": [encode_matrix(B) for B in report.fixed_point_basis],
        "channels": list(report.channel_labels),
        "identifiability_table": [[float(v) for v in row] for row in np.asarray(report.identifiability_table)],
        "notes": list(report.notes),
    }


def _out_dir(args, default):
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, manifest):
    path = out / "manifest.json"
    manifest.artifacts.append(path.name)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    missing = [a for a in manifest.artifacts if not (out / a).exists()]
    if missing:
        raise OSError(f"artifacts missing after run: {missing}")


def cmd_analyze(args):
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    try:
        report = st.analyze(cfg.spec, purification_method=args.purification, seed=cfg.sim.seed)
        code = EXIT_OK
    except st.UnsupportedModelError as exc:
        log.error("model rejected: %s", exc)
        report, code = exc.report, EXIT_REJECTED
    doc = report_to_dict(report)
    if code != EXIT_OK:
        doc["rejected"] = True
    text = dumps_toml(doc)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args, args.out)
        (out / "report.toml").write_text(text, encoding="utf-8")
        manifest = RunManifest(str(args.config), config_hash(cfg), str(out), ["report.toml"], version=tool_version())
        manifest.timings["analyze"] = time.perf_counter() - t0
        _write_manifest(out, manifest)
    return code


def _path_rows(batch, b, K):
    rec = batch.record(b)
    dist = rec.cesaro_distance
    rows = []
    for s, t in enumerate(rec.times):
        row = [t, rec.fidelity[s], rec.fidelity_via_M[s]]
        if K:
            row.extend(rec.q_rho[s])
            row.extend(rec.q_rho_hat[s])
        row.append(dist[s])
        row.extend(int(c) for c in rec.jump_counts[s])
        rows.append(row)
    return rows


def cmd_simulate(args):
    cfg = load_config(args.config)
    sim = cfg.sim if args.seed is None else replace(cfg.sim, seed=args.seed)
    n = cfg.n_traj if args.trajectories is None else args.trajectories
    if n < 1:
        raise InputError("--trajectories must be positive")
    try:
        enc = st.minimal_enclosures(cfg.spec)
        dual = st.dual_projectors(cfg.spec, enc)
    except (st.UnsupportedModelError, st.StructureError) as exc:
        log.warning("Q columns omitted: %s", exc)
        dual = None
    out = _out_dir(args, "qtraj-out")
    t0 = time.perf_counter()
    batch = simulate_pairs(
        cfg.spec, cfg.rho0, cfg.rho_hat0, sim, range(n), dualprojs=dual, sample_times=cfg.sample_times, workers=args.workers
    )
    elapsed = time.perf_counter() - t0
    K = 0 if dual is None else len(dual)
    header = ["time", "fidelity", "fidelity_via_M"]
    header += [f"Q{i + 1}_rho" for i in range(K)] + [f"Q{i + 1}_rhohat" for i in range(K)]
    header += ["cesaro_distance"] + [f"jumps_channel_{j + 1}" for j in range(cfg.spec.n_jumps)]
    manifest = RunManifest(str(args.config), config_hash(cfg), str(out), version=tool_version())
    manifest.timings["simulate"] = elapsed
    failed = []
    combined = []
    for b in range(len(batch)):
        idx = int(batch.indices[b])
        if batch.failed[b]:
            failed.append({"index": idx, "time": float(batch.fail_time[b]), "reason": batch.fail_reason[b]})
            log.warning("trajectory %d failed at t=%g: %s", idx, batch.fail_time[b], batch.fail_reason[b])
            continue
        rows = _path_rows(batch, b, K)
        if args.combined:
            combined.extend([idx] + r for r in rows)
        else:
            name = f"trajectory_{idx:05d}.csv"
            write_csv(out / name, header, rows)
            manifest.artifacts.append(name)
    if args.combined:
        write_csv(out / "trajectories.csv", ["trajectory"] + header, combined)
        manifest.artifacts.append("trajectories.csv")
    manifest.extra = {"seed": sim.seed, "n_traj": n, "failed": failed}
    _write_manifest(out, manifest)
    if len(failed) == n:
        log.error("all trajectories failed")
        return EXIT_REJECTED
    return EXIT_OK


def cmd_experiment(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
    if args.trajectories is not None:
        cfg = replace(cfg, n_traj=args.trajectories)
    out = _out_dir(args, "qtraj-out")
    t0 = time.perf_counter()
    summary = run_experiment(cfg, workers=args.workers)
    total = time.perf_counter() - t0
    cols = summary.columns()
    write_csv(out / "summary.csv", list(cols), zip(*cols.values()))
    artifacts = ["summary.csv"]
    write_text_csv(
        out / "checks.csv",
        ["name", "value", "threshold", "relation", "passed", "calibration", "detail"],
        [[c.name, c.value, c.threshold, c.relation, c.passed, c.calibration, c.detail] for c in summary.checks],
    )
    artifacts.append("checks.csv")
    if summary.gamma_law is not None:
        g = summary.gamma_law
        rows = [[f"{i + 1}", g["counts"][i], g["probabilities"][i], g["expected"][i]] for i in range(len(g["counts"]))]
        rows.append(["unresolved", int(round(g["unresolved_fraction"] * g["n"])), g["unresolved_fraction"], ""])
        write_text_csv(out / "gamma.csv", ["enclosure", "count", "probability", "expected"], rows)
        artifacts.append("gamma.csv")
    manifest = RunManifest(str(args.config), config_hash(cfg), str(out), artifacts, version=tool_version())
    manifest.timings = {"total": total, **summary.timings}
    manifest.extra = {
        "experiment": summary.experiment,
        "seed": summary.seed,
        "n_traj": summary.n_traj,
        "n_failed": summary.n_failed,
        "theorem_backed": summary.theorem_backed,
        "calibration_checks": [c.name for c in summary.checks if c.calibration],
        "notes": list(summary.notes),
    }
    _write_manifest(out, manifest)
    for c in summary.checks:
        status = "PASS" if c.passed else "FAIL"
        tag = " (calibration)" if c.calibration else ""
        print(f"{status} {c.name}{tag}: {c.value:.6g} {c.relation} {c.threshold:.6g}")
    for note in summary.notes:
        print(f"note: {note}")
    failed = summary.failed_checks()
    if failed:
        log.error("failed: %s", ", ".join(c.name for c in failed))
        return EXIT_ASSERTION
    return EXIT_OK


def build_parser():
    p = _Parser(prog="qtraj", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="structure report for the model in a config")
    a.add_argument("config")
    a.add_argument("--out", help="also write report.toml and a manifest here")
    a.add_argument("--purification", choices=["auto", "algebraic", "montecarlo"], default="auto")
    a.set_defaults(func=cmd_analyze)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "write per-trajectory CSV time series"),
        ("experiment", cmd_experiment, "run the configured Monte Carlo experiment"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config")
        s.add_argument("--trajectories", type=int, help="override n_traj")
        s.add_argument("--seed", type=int, help="override the simulation seed")
        s.add_argument("--out", help="output directory (default ./qtraj-out)")
        s.add_argument("--workers", type=int, help="worker processes (default $QTRAJ_WORKERS or 1)")
        if name == "simulate":
            s.add_argument("--combined", action="store_true", help="one long-format CSV instead of one file per trajectory")
        s.set_defaults(func=func)
    return p


def main(argv=None):
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except InputError as exc:
        print(f"qtraj: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.verbose:
        logging.getLogger("qtraj").setLevel(logging.INFO)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"qtraj: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KernelInclusionError as exc:
        print(f"qtraj: rejected: {exc}; offending vector: {np.array2string(exc.witness, precision=6)}", file=sys.stderr)
        return EXIT_REJECTED
    except (st.UnsupportedModelError, StepSizeError, ExperimentAborted, NumericalError, TrajectoryError) as exc:
        print(f"qtraj: rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except OSError as exc:
        print(f"qtraj: I/O error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
