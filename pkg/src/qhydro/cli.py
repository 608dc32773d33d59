"""Command-line entry point: ``qhydro run | analyze | compare``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, mwls
from .config import Settings, dump_config, load_config
from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateGeometryError,
    NumericalFailure,
    QHydroError,
    ResolutionError,
    SnapshotFormatError,
)
from .fileio import (
    OutputManifest,
    read_snapshot,
    snapshot_filename,
    write_snapshot,
    write_table,
    write_trajectories,
)
from .hydrodynamics import simulate
from .oracle import check_leakage, compare_snapshots, oracle_fields, run_oracle

log = logging.getLogger("qhydro")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ANALYSES = ("flux", "stress", "nsresidual", "divergence", "metrics")


class PartialRun(Exception):
    """Engine failure after some output was written."""

    def __init__(self, cause, last_time):
        super().__init__(str(cause))
        self.cause = cause
        self.last_time = last_time


# --------------------------------------------------------------------- run

def cmd_run(settings: Settings, mode: str, out: Path) -> OutputManifest:
    out.mkdir(parents=True, exist_ok=True)
    mwls.set_threads(settings.output.thread_count)
    manifest = OutputManifest(out, f"run --mode {mode}", dump_config(settings))
    try:
        if mode == "qtm":
            _run_qtm(settings, out, manifest)
        else:
            _run_oracle(settings, out, manifest)
    except PartialRun as exc:
        manifest.status = "failed"
        manifest.message = f"{exc.cause} (last completed snapshot t={exc.last_time})"
        manifest.write()
        raise
    manifest.write()
    return manifest


def _run_qtm(settings, out, manifest):
    stride = settings.output.snapshot_stride
    records, regrids = [], []
    last = None
    try:
        for n, frame in enumerate(simulate(settings.run)):
            records.extend(frame.records)
            if frame.regrid is not None:
                regrids.append(frame.regrid)
            if n % stride == 0:
                snap = frame.snapshot
                path = write_snapshot(out / snapshot_filename(snap.time), snap)
                manifest.add(path, "snapshot", snap.time)
            last = frame.snapshot.time
    except (NumericalFailure, DegenerateGeometryError) as exc:
        _write_qtm_tables(out, manifest, records, regrids)
        raise PartialRun(exc, last) from exc
    _write_qtm_tables(out, manifest, records, regrids)


def _write_qtm_tables(out, manifest, records, regrids):
    manifest.add(write_trajectories(out / "trajectories.txt", records), "trajectories")
    cols = {
        "t": [r.time for r in regrids],
        "n_elements": np.array([r.n_elements for r in regrids], dtype=np.int64),
        "norm_before": [r.norm_before for r in regrids],
        "renorm_factor": [r.renorm_factor for r in regrids],
        "hx": [r.spacing[0] for r in regrids],
        "hy": [r.spacing[1] for r in regrids],
        "n_extrapolated": np.array([r.n_extrapolated for r in regrids], dtype=np.int64),
    }
    path = write_table(out / "regrid_log.txt", cols, {"format": "qhydro-regrid-log 1"})
    manifest.add(path, "regrid-log")


def _run_oracle(settings, out, manifest):
    run = settings.run
    osettings = settings.oracle
    # same absolute masking level as the trajectory engine
    from .hydrodynamics import initialize_ensemble

    cutoff = initialize_ensemble(run.phys, run.sup, run.case, run.hydro).density_cutoff
    last = None
    try:
        states = run_oracle(
            run.phys, run.sup, run.case, osettings.grid, osettings.dt,
            run.hydro.t_final, run.hydro.regrid_interval, settings.output.snapshot_stride,
        )
        for state in states:
            check_leakage(state)
            snap = oracle_fields(state, run.phys.masses, cutoff, run.phys.hbar)
            path = write_snapshot(out / snapshot_filename(snap.time, "oracle"), snap)
            manifest.add(path, "snapshot", snap.time)
            last = snap.time
    except (NumericalFailure, ResolutionError) as exc:
        raise PartialRun(exc, last) from exc


# ----------------------------------------------------------------- analyze

def cmd_analyze(settings: Settings, files, which, out: Path) -> OutputManifest:
    out.mkdir(parents=True, exist_ok=True)
    mwls.set_threads(settings.output.thread_count)
    manifest = OutputManifest(out, f"analyze --fields {','.join(which)}", dump_config(settings))
    snaps = sorted((read_snapshot(f) for f in files), key=lambda s: s.time)
    phys, case = settings.run.phys, settings.run.case
    masses = phys.masses
    metrics = []
    for snap in snaps:
        base = {"time": repr(snap.time), "source": snap.source, "not_evaluated": "nan"}
        xy = {"x": snap.x, "y": snap.y}
        if "flux" in which:
            j = analysis.flux(snap)
            p = write_table(out / snapshot_filename(snap.time, "flux"), {**xy, "jx": j[:, 0], "jy": j[:, 1]}, base)
            manifest.add(p, "flux", snap.time)
        if "divergence" in which:
            d = analysis.flux_divergence(snap)
            p = write_table(out / snapshot_filename(snap.time, "divergence"), {**xy, "div_j": d}, base)
            manifest.add(p, "divergence", snap.time)
        if "stress" in which:
            st = analysis.stress_tensor(snap, masses, phys.hbar)
            cols = {
                **xy, "P": st.P, "ux": st.u[:, 0], "uy": st.u[:, 1], "w_abs": np.linalg.norm(st.w, axis=1),
                "Pi_00": st.Pi_00, "Pi_01": st.Pi_01, "Pi_11": st.Pi_11,
                "Pi_c_00": st.Pi_c_00, "Pi_c_01": st.Pi_c_01, "Pi_c_11": st.Pi_c_11,
                "Pi_q_00": st.Pi_q_00, "Pi_q_01": st.Pi_q_01, "Pi_q_11": st.Pi_q_11,
            }
            p = write_table(out / snapshot_filename(snap.time, "stress"), cols, base)
            manifest.add(p, "stress", snap.time)
        if "metrics" in which:
            metrics.append(analysis.decoherence_metrics(snap))
    if "nsresidual" in which:
        rows = []
        for s0, s1 in zip(snaps, snaps[1:]):
            try:
                r = analysis.ns_residual(s0, s1, phys, case)
            except AlignmentError as exc:
                log.warning("skipping NS residual %g -> %g: %s", s0.time, s1.time, exc)
                continue
            cols = {"x": r.x, "y": r.y, "res_x": r.residual[:, 0], "res_y": r.residual[:, 1],
                    "interior": r.interior.astype(np.int64)}
            hdr = {"t0": repr(s0.time), "t1": repr(s1.time), "relative": repr(r.relative)}
            p = write_table(out / snapshot_filename(r.time, "nsresidual"), cols, hdr)
            manifest.add(p, "nsresidual", r.time)
            rows.append((r.time, r.relative, r.norm))
        if rows:
            t, rel, norm = zip(*rows)
            p = write_table(out / "nsresidual_summary.txt", {"t": t, "relative": rel, "norm": norm})
            manifest.add(p, "nsresidual-summary")
    if metrics:
        cols = {
            "t": [m.time for m in metrics],
            "central_density": [m.central_density for m in metrics],
            "fringe_visibility": [m.fringe_visibility for m in metrics],
            "lobe_separation": [m.lobe_separation for m in metrics],
        }
        manifest.add(write_table(out / "metrics.txt", cols), "metrics")
    manifest.write()
    return manifest


# ----------------------------------------------------------------- compare

def cmd_compare(qtm_files, oracle_files, out: Path, time_tolerance: float = 0.25) -> OutputManifest:
    out.mkdir(parents=True, exist_ok=True)
    manifest = OutputManifest(out, "compare")
    qtm = {s.time: s for s in map(read_snapshot, qtm_files)}
    ref = {s.time: s for s in map(read_snapshot, oracle_files)}
    pairs, unmatched = [], []
    for t in sorted(qtm):
        match = [r for r in ref if abs(r - t) <= time_tolerance]
        if match:
            pairs.append((qtm[t], ref[match[0]]))
        else:
            unmatched.append(t)
    unmatched += [r for r in ref if not any(abs(r - t) <= time_tolerance for t in qtm)]
    if unmatched or not pairs:
        raise AlignmentError(
            "snapshot times do not match; qtm: "
            f"{sorted(qtm)} oracle: {sorted(ref)}"
        )
    reports = [compare_snapshots(q, r, time_tolerance) for q, r in pairs]
    cols = {
        "t": [r.time for r in reports],
        "L2_rho": [r.L2_rho for r in reports],
        "Linf_rho": [r.Linf_rho for r in reports],
        "v_rms_diff": [r.masked_v_rms_diff for r in reports],
    }
    summary = {
        "max_L2_rho": repr(max(cols["L2_rho"])),
        "max_Linf_rho": repr(max(cols["Linf_rho"])),
        "max_v_rms_diff": repr(max(cols["v_rms_diff"])),
        "matched_times": len(reports),
    }
    manifest.add(write_table(out / "compare.txt", cols, summary), "compare")
    manifest.write()
    return manifest


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qhydro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="configuration file")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--coupled", dest="coupled", action="store_const", const=True, default=None)
        g.add_argument("--uncoupled", dest="coupled", action="store_const", const=False)
        sp.add_argument("--out", help="output directory (default from config)")
        sp.add_argument("--threads", type=int, help="worker threads for stencil building (0 = all cores)")

    r = sub.add_parser("run", help="run the trajectory engine or the reference solver")
    common(r)
    r.add_argument("--mode", choices=("qtm", "oracle"), default="qtm")
    r.add_argument("--snapshot-stride", type=int, help="write every N-th snapshot")

    a = sub.add_parser("analyze", help="diagnostic fields from snapshot files")
    common(a)
    a.add_argument("--fields", default=",".join(ANALYSES), help=f"comma list from {','.join(ANALYSES)}")
    a.add_argument("snapshots", nargs="+")

    c = sub.add_parser("compare", help="error report of trajectory snapshots against reference snapshots")
    c.add_argument("--qtm", nargs="+", required=True)
    c.add_argument("--oracle", nargs="+", required=True)
    c.add_argument("--out", required=True)
    return p


def _settings(args) -> Settings:
    from .config import with_output

    settings = load_config(args.config, coupled=args.coupled)
    changes = {}
    if getattr(args, "out", None):
        changes["directory"] = args.out
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    if getattr(args, "snapshot_stride", None) is not None:
        changes["snapshot_stride"] = args.snapshot_stride
    try:
        return with_output(settings, **changes) if changes else settings
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.qtm, args.oracle, Path(args.out))
            return EXIT_OK
        settings = _settings(args)
        out = Path(settings.output.directory)
        if args.command == "run":
            m = cmd_run(settings, args.mode, out)
        else:
            which = [w.strip() for w in args.fields.split(",") if w.strip()]
            unknown = set(which) - set(ANALYSES)
            if unknown:
                raise ConfigError(f"unknown analysis field(s): {', '.join(sorted(unknown))}")
            m = cmd_analyze(settings, args.snapshots, which, out)
        log.info("wrote %d files to %s", len(m.entries), out)
        return EXIT_OK
    except (ConfigError, AlignmentError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except PartialRun as exc:
        log.error("%s (last completed snapshot t=%s; partial output kept)", exc.cause, exc.last_time)
        return EXIT_NUMERIC
    except (NumericalFailure, DegenerateGeometryError, ResolutionError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (SnapshotFormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except QHydroError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
