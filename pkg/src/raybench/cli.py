"""Command-line entry point: ``raybench bench|radiomap|trace|validate``.

Every run walks the same five steps (scene, EM setup, ray parameters,
transceiver configuration, simulation) and exits with a step-specific
status when one fails.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bench import SweepSpec, read_positions, read_table, run_sweep, emit_report
from .config import ManifestError, RunManifest, load_manifest, parse_bool, parse_point
from .em import load_materials
from .geometry import load_scene, read_obj
from .radiomap import GridSpec, compute_radio_map, export_map, parse_grid_table, read_pgm
from .repro import header_dict
from .tracer import trace
from .tracer.engine import path_record, write_path_dump

EXIT_OK = 0
EXIT_MANIFEST = 10
EXIT_SCENE = 11
EXIT_EM = 12
EXIT_PARAMS = 13
EXIT_CONFIG = 14
EXIT_SIMULATION = 15
EXIT_OUTPUT = 16

STEP_NAMES = {
    EXIT_MANIFEST: "manifest",
    EXIT_SCENE: "step 1 (load scenario)",
    EXIT_EM: "step 2 (EM setup)",
    EXIT_PARAMS: "step 3 (ray model parameters)",
    EXIT_CONFIG: "step 4 (load configuration)",
    EXIT_SIMULATION: "step 5 (simulation)",
    EXIT_OUTPUT: "output",
}

VERB_MODES = {"bench": "benchmark", "radiomap": "radiomap", "trace": "trace-dump"}


class StepError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"{STEP_NAMES[code]}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# validation


def _sweep_params(sweep: Optional[SweepSpec]):
    if sweep is None:
        return []
    seen, out = set(), []
    for _, sv, ds, depth in sweep.cells():
        key = (sv, ds, depth)
        if key not in seen:
            seen.add(key)
            out.append(sweep.params_for(sv, ds, depth))
    return out


def _radiomap_grid(manifest: RunManifest, scene) -> GridSpec:
    rm = manifest.radiomap
    if rm.extent is None:
        return GridSpec.covering(scene, rm.resolution, rm.rx_height)
    x0, y0, x1, y1 = rm.extent
    nx = max(1, int(math.floor((x1 - x0) / rm.resolution)))
    ny = max(1, int(math.floor((y1 - y0) / rm.resolution)))
    return GridSpec((x0, y0), nx, ny, rm.resolution, rm.rx_height)


def validate(manifest: RunManifest) -> list[str]:
    """Dry-run parse of every input; an empty list means the manifest is runnable."""
    diags: list[str] = []
    meshes_ok = True
    for p in manifest.scene:
        if not Path(p).is_file():
            diags.append(f"scene: missing mesh file {p}")
            meshes_ok = False
            continue
        try:
            read_obj(p)
        except (OSError, ValueError) as exc:
            diags.append(f"scene: {exc}")
            meshes_ok = False
    table = None
    if not Path(manifest.materials).is_file():
        diags.append(f"materials: missing material table {manifest.materials}")
    else:
        try:
            table = load_materials(manifest.materials)
        except (OSError, ValueError) as exc:
            diags.append(f"materials: {exc}")
    scene = None
    if meshes_ok and table is not None:
        try:
            scene = load_scene(manifest.scene, table, manifest.margin_m)
        except (OSError, ValueError) as exc:
            diags.append(f"scene: {exc}")

    seen = set()
    for msg in manifest.param_problems:
        if msg not in seen:
            seen.add(msg)
            diags.append(f"params: {msg}")
    if not manifest.param_problems:
        for p in _sweep_params(manifest.sweep) if manifest.mode == "benchmark" else []:
            for msg in p.problems():
                if msg not in seen:
                    seen.add(msg)
                    diags.append(f"sweep: {msg}")

    if manifest.mode in ("benchmark", "trace-dump"):
        if manifest.positions is None:
            diags.append("positions: no positions file given")
        elif not Path(manifest.positions).is_file():
            diags.append(f"positions: missing positions file {manifest.positions}")
        else:
            try:
                ts = read_positions(manifest.positions)
            except (OSError, ValueError) as exc:
                diags.append(f"positions: {exc}")
            else:
                if scene is not None:
                    for t in ts.transmitters:
                        if not scene.contains(t.position):
                            diags.append(f"positions: tx {t.id} outside scene bounds")
                    for r in ts.receivers:
                        if not scene.contains(r.position):
                            diags.append(f"positions: rx {r.id} outside scene bounds")
    if manifest.mode == "radiomap":
        rm = manifest.radiomap
        if rm.tx is None:
            diags.append("radiomap: no transmitter position given")
        elif scene is not None and not scene.contains(rm.tx):
            diags.append(f"radiomap: transmitter {list(rm.tx)} outside scene bounds")
        if rm.combine not in ("coherent", "incoherent"):
            diags.append(f"radiomap: combine must be coherent or incoherent, got {rm.combine!r}")
        if not rm.window[1] > rm.window[0]:
            diags.append("radiomap: render window needs hi > lo")
        if scene is not None:
            try:
                grid = _radiomap_grid(manifest, scene)
            except ValueError as exc:
                diags.append(f"radiomap: {exc}")
            else:
                c = grid.centers().reshape(-1, 3)
                lo, hi = scene.bounds
                if (c < lo).any() or (c > hi).any():
                    diags.append("radiomap: grid extends outside the scene bounds")

    out = Path(manifest.out)
    parent = out
    while not parent.exists() and parent != parent.parent:
        parent = parent.parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        diags.append(f"output: cannot create output directory {out}")
    return diags


# ---------------------------------------------------------------------------
# workflow


def _load_inputs(manifest: RunManifest, need_positions: bool):
    for p in manifest.scene:
        if not Path(p).is_file():
            raise StepError(EXIT_SCENE, f"missing mesh file {p}")
    try:
        table = load_materials(manifest.materials)
    except (OSError, ValueError) as exc:
        raise StepError(EXIT_EM, f"cannot load material table {manifest.materials}: {exc}") from None
    try:
        scene = load_scene(manifest.scene, table, manifest.margin_m)
    except (OSError, ValueError) as exc:
        raise StepError(EXIT_SCENE, str(exc)) from None
    if manifest.param_problems:
        raise StepError(EXIT_PARAMS, "; ".join(manifest.param_problems))
    ts = None
    if need_positions:
        if manifest.positions is None:
            raise StepError(EXIT_CONFIG, "no positions file given")
        try:
            ts = read_positions(manifest.positions).validate(scene)
        except (OSError, ValueError) as exc:
            raise StepError(EXIT_CONFIG, str(exc)) from None
    return scene, ts


def _header(manifest: RunManifest, verb: str) -> dict:
    hp = dict(manifest.header_params(), verb=verb)
    return hp


def _make_out(manifest: RunManifest) -> Path:
    out = Path(manifest.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StepError(EXIT_OUTPUT, f"cannot create {out}: {exc}") from None
    return out


def run_bench(manifest: RunManifest, log=None) -> list[Path]:
    scene, ts = _load_inputs(manifest, need_positions=True)
    sweep = manifest.sweep
    for p in _sweep_params(sweep):
        if p.problems():
            raise StepError(EXIT_PARAMS, "; ".join(p.problems()))
    sweep = replace(sweep, warmup=manifest.warmup, workers=manifest.workers)

    def progress(i, rep):
        if log is not None:
            m = rep.meta
            state = "FAILED" if rep.failed is not None else f"mu={rep.mu:.6f}s"
            log(f"[{i + 1}/{sweep.n_cells()}] {m['kind']} {sweep.sampling_kind}={m['sampling_value']} "
                f"ds={'on' if m['scattering'] else 'off'} depth={m['depth']} {state}")

    try:
        reports = run_sweep(scene, ts, sweep, carrier=manifest.carrier, progress=progress)
    except Exception as exc:  # numerical failure inside the engine
        raise StepError(EXIT_SIMULATION, f"{type(exc).__name__}: {exc}") from None
    out = _make_out(manifest)
    try:
        paths = emit_report(reports, out, _header(manifest, "bench"))
        expected = sum(max(1, len(r.config_ids)) if r.failed is None else 1 for r in reports)
        if len(read_table(paths["results"])) != expected:
            raise ValueError("results table does not parse back")
        if len(read_table(paths["summary"])) != len(reports):
            raise ValueError("summary table does not parse back")
        for key, p in paths.items():
            if key.startswith("plot_"):
                rows = read_table(p)
                if not rows or set(rows[0]) != {"series", "depth", "mu", "sigma"}:
                    raise ValueError(f"{p.name} does not parse back")
    except (OSError, ValueError) as exc:
        raise StepError(EXIT_OUTPUT, str(exc)) from None
    failed = [r for r in reports if r.failed is not None]
    if failed:
        raise StepError(EXIT_SIMULATION, f"{len(failed)} sweep cell(s) failed; first: {failed[0].meta.get('error')}")
    return list(paths.values())


def run_radiomap(manifest: RunManifest, log=None) -> list[Path]:
    scene, _ = _load_inputs(manifest, need_positions=False)
    rm = manifest.radiomap
    if rm.tx is None:
        raise StepError(EXIT_CONFIG, "no transmitter position given (radiomap.tx or --tx)")
    if not scene.contains(rm.tx):
        raise StepError(EXIT_CONFIG, f"transmitter {list(rm.tx)} outside scene bounds")
    try:
        grid = _radiomap_grid(manifest, scene)
    except ValueError as exc:
        raise StepError(EXIT_CONFIG, str(exc)) from None
    try:
        rmap = compute_radio_map(scene, rm.tx, grid, manifest.params, combine=rm.combine,
                                 carrier=manifest.carrier, workers=manifest.workers or 1)
    except ValueError as exc:
        raise StepError(EXIT_CONFIG, str(exc)) from None
    except Exception as exc:
        raise StepError(EXIT_SIMULATION, f"{type(exc).__name__}: {exc}") from None
    out = _make_out(manifest)
    hp = dict(_header(manifest, "radiomap"), radiomap={
        "tx": list(rm.tx), "resolution": rm.resolution, "rx_height": rm.rx_height,
        "combine": rm.combine, "extent": list(rm.extent) if rm.extent else None,
    })
    try:
        grid_path = export_map(rmap, out / "radiomap.asc", "grid", header_params=hp)
        pgm_path = export_map(rmap, out / "radiomap.pgm", "pgm", window=rm.window, header_params=hp)
        back = parse_grid_table(grid_path, rm.rx_height)
        if back.gains_db.shape != rmap.gains_db.shape:
            raise ValueError("grid table does not parse back")
        w, h, _ = read_pgm(pgm_path)
        if (w, h) != (grid.nx, grid.ny):
            raise ValueError("raster does not parse back")
    except (OSError, ValueError) as exc:
        raise StepError(EXIT_OUTPUT, str(exc)) from None
    if log is not None:
        finite = np.isfinite(rmap.gains_db)
        log(f"{grid.nx}x{grid.ny} cells, {int(finite.sum())} with data")
    return [grid_path, pgm_path]


def run_trace(manifest: RunManifest, log=None) -> list[Path]:
    scene, ts = _load_inputs(manifest, need_positions=True)
    rx = np.array([r.position for r in ts.receivers])
    results = []
    try:
        for t in ts.transmitters:
            res = trace(scene, t.position, rx, manifest.params, carrier=manifest.carrier,
                        workers=manifest.workers or 1)
            results.append((t, res))
    except Exception as exc:
        raise StepError(EXIT_SIMULATION, f"{type(exc).__name__}: {exc}") from None
    out = _make_out(manifest)
    path = out / "paths.jsonl"
    hp = _header(manifest, "trace")
    header = dict(header_dict(hp), params=hp)
    n = 0
    try:
        with open(path, "w") as fh:
            def records():
                nonlocal n
                for t, res in results:
                    for q, r in enumerate(ts.receivers):
                        for p in res[q]:
                            n += 1
                            yield path_record(p, t.id, r.id)
            write_path_dump(fh, header, records())
        with open(path) as fh:
            lines = [json.loads(line) for line in fh]
        if "header" not in lines[0] or len(lines) != n + 1:
            raise ValueError("path dump does not parse back")
    except (OSError, ValueError) as exc:
        raise StepError(EXIT_OUTPUT, str(exc)) from None
    if log is not None:
        log(f"{n} paths for {ts.n_tx} tx x {ts.n_rx} rx")
    return [path]


RUNNERS = {"benchmark": run_bench, "radiomap": run_radiomap, "trace-dump": run_trace}


def run(manifest: RunManifest, log=None) -> int:
    """Execute the workflow for ``manifest.mode``; returns the exit status."""
    err = log or (lambda m: print(m, file=sys.stderr))
    try:
        paths = RUNNERS[manifest.mode](manifest, log=log)
    except StepError as exc:
        err(f"error: {exc}")
        return exc.code
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _on_off(v: str) -> bool:
    try:
        return parse_bool(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected on or off, got {v!r}") from None


def _add_shared(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--config", help="INI manifest; flags override its values")
    g.add_argument("--scene", action="append", help="OBJ mesh (repeatable)")
    g.add_argument("--materials", help="material table (INI, one section per material)")
    g.add_argument("--positions", help="transceiver CSV with columns id,role,x,y,z")
    g.add_argument("--out", help="output directory")
    r = p.add_argument_group("engine")
    r.add_argument("--mode", choices=("sl", "ml"), help="single-link or multi-link configurations")
    r.add_argument("--method", choices=("sbr", "image"))
    r.add_argument("--depth", type=int, help="interaction depth")
    r.add_argument("--depth-mode", choices=("pertype", "joint"))
    r.add_argument("--as-deg", type=float, help="angular separation between launched rays, degrees")
    r.add_argument("--ns", type=float, help="number of launched rays")
    r.add_argument("--scatter", type=_on_off, metavar="on|off")
    r.add_argument("--scatter-mode", choices=("single", "reemit"))
    r.add_argument("--combine-diffraction", type=_on_off, metavar="on|off")
    r.add_argument("--diffraction", type=int, choices=(0, 1), help="diffraction depth")
    r.add_argument("--combine-max-reflections", type=int, help="reflections allowed next to a diffraction")
    r.add_argument("--roughness", type=float, help="effective roughness S")
    r.add_argument("--reemission-deg", type=float, help="re-emission angular step, degrees")
    r.add_argument("--reception-alpha", type=float, help="reception sphere scale")
    r.add_argument("--frequency", type=float, help="carrier frequency, Hz")
    r.add_argument("--margin-m", type=float, help="ground margin around the buildings, metres")
    r.add_argument("--workers", type=int)
    r.add_argument("--warmup-secs", type=float)


def _add_bench(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("benchmark")
    g.add_argument("--repeats", type=int, help="timed runs per configuration")
    g.add_argument("--round-trip", type=_on_off, metavar="on|off", help="time configuration loading too")


def _add_radiomap(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("radio map")
    g.add_argument("--tx", help="transmitter position x,y,z")
    g.add_argument("--resolution", type=float, help="cell size, metres")
    g.add_argument("--extent", help="grid extent x0,y0,x1,y1")
    g.add_argument("--combine", choices=("coherent", "incoherent"))
    g.add_argument("--window", help="render window lo,hi in dB")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raybench", description="Ray-tracing propagation engine and timing benchmark.")
    ap.add_argument("--version", action="version", version=f"raybench {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    b = sub.add_parser("bench", help="run the timing sweep and write results tables")
    _add_shared(b)
    _add_bench(b)
    m = sub.add_parser("radiomap", help="compute a channel-gain map for one transmitter")
    _add_shared(m)
    _add_radiomap(m)
    t = sub.add_parser("trace", help="dump every propagation path as line-delimited JSON")
    _add_shared(t)
    v = sub.add_parser("validate", help="check a manifest without tracing")
    _add_shared(v)
    _add_bench(v)
    _add_radiomap(v)
    v.add_argument("--for", dest="for_verb", choices=("bench", "radiomap", "trace"),
                   help="verb whose inputs are checked (default: run.mode of the manifest or bench)")
    return ap


def _overrides(args) -> dict:
    ov = {
        "scene": args.scene, "materials": args.materials, "positions": args.positions, "out": args.out,
        "mode": args.mode, "method": args.method, "depth": args.depth, "depth_mode": args.depth_mode,
        "as_deg": args.as_deg, "ns": args.ns, "scatter": args.scatter, "scatter_mode": args.scatter_mode,
        "combine_diffraction": args.combine_diffraction, "frequency": args.frequency,
        "workers": args.workers, "warmup_secs": args.warmup_secs, "diffraction": args.diffraction,
        "combine_max_reflections": args.combine_max_reflections, "roughness": args.roughness,
        "reemission_deg": args.reemission_deg, "reception_alpha": args.reception_alpha, "margin_m": args.margin_m,
    }
    for key in ("repeats", "round_trip", "resolution", "combine"):
        ov[key] = getattr(args, key, None)
    for key, conv in (("tx", 3), ("window", 2), ("extent", 4)):
        v = getattr(args, key, None)
        if v is not None:
            ov[key] = parse_point(v, conv)
    return ov


def _manifest_mode(args) -> str:
    if args.verb != "validate":
        return VERB_MODES[args.verb]
    if args.for_verb:
        return VERB_MODES[args.for_verb]
    if args.config:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read(args.config)
        except configparser.Error:
            return "benchmark"
        mode = cp.get("run", "mode", fallback="benchmark").strip().lower()
        return mode if mode in RUNNERS else "benchmark"
    return "benchmark"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda m: print(m, file=sys.stderr)  # noqa: E731
    try:
        manifest = load_manifest(args.config, _overrides(args), mode=_manifest_mode(args))
    except (ManifestError, ValueError) as exc:
        if args.verb == "validate":
            print(f"manifest: {exc}")
            return 1
        log(f"error: {STEP_NAMES[EXIT_MANIFEST]}: {exc}")
        return EXIT_MANIFEST
    if args.verb == "validate":
        diags = validate(manifest)
        for d in diags:
            print(d)
        if not diags:
            print("ok")
        return 1 if diags else EXIT_OK
    return run(manifest, log=log)


if __name__ == "__main__":
    sys.exit(main())
