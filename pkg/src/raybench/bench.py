"""Benchmark protocol: transceiver sets, the timing loop, sweeps and reports."""
from __future__ import annotations

import csv
import gc
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .em import CarrierConfig
from .repro import write_header
from .tracer import TraceParams, trace

WORKERS_ENV = "RAYBENCH_WORKERS"
KINDS = ("sl", "ml")

RESULT_COLUMNS = ["scenario", "kind", "method", "depth_mode", "depth", "sampling_kind", "sampling_value",
                  "scattering", "config_id", "t_seconds"]
SUMMARY_COLUMNS = RESULT_COLUMNS[:8] + ["mu", "sigma", "n"]
PLOT_COLUMNS = ["series", "depth", "mu", "sigma"]


class BenchmarkError(RuntimeError):
    def __init__(self, config_id: str, cause: BaseException):
        super().__init__(f"trace failed on config {config_id}: {cause}")
        self.config_id = config_id
        self.cause = cause


# ---------------------------------------------------------------------------
# transceivers and configuration sets


@dataclass(frozen=True)
class Transceiver:
    id: str
    position: tuple


@dataclass
class TransceiverSet:
    transmitters: list
    receivers: list

    def __post_init__(self):
        self.transmitters = [Transceiver(str(i), tuple(map(float, p))) for i, p in self._pairs(self.transmitters)]
        self.receivers = [Transceiver(str(i), tuple(map(float, p))) for i, p in self._pairs(self.receivers)]
        if not self.transmitters or not self.receivers:
            raise ValueError("a transceiver set needs at least one transmitter and one receiver")
        ids = [t.id for t in self.transmitters + self.receivers]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ValueError(f"duplicate transceiver ids: {', '.join(dup)}")
        for t in self.transmitters + self.receivers:
            if len(t.position) != 3 or not all(math.isfinite(v) for v in t.position):
                raise ValueError(f"transceiver {t.id}: position must be three finite numbers")

    @staticmethod
    def _pairs(items):
        for it in items:
            if isinstance(it, Transceiver):
                yield it.id, it.position
            else:
                yield it[0], it[1]

    @classmethod
    def from_arrays(cls, tx, rx) -> "TransceiverSet":
        return cls([(f"T{i}", p) for i, p in enumerate(np.asarray(tx, float))],
                   [(f"R{i}", p) for i, p in enumerate(np.asarray(rx, float))])

    @property
    def n_tx(self) -> int:
        return len(self.transmitters)

    @property
    def n_rx(self) -> int:
        return len(self.receivers)

    def outside(self, scene) -> list[str]:
        """Ids of transceivers outside the scene bounds."""
        return [t.id for t in self.transmitters + self.receivers if not scene.contains(t.position)]

    def validate(self, scene) -> "TransceiverSet":
        bad = self.outside(scene)
        if bad:
            raise ValueError(f"positions outside scene bounds: {', '.join(bad)}")
        return self

    def tx_by_id(self) -> dict:
        return {t.id: t for t in self.transmitters}

    def rx_by_id(self) -> dict:
        return {r.id: r for r in self.receivers}


def read_positions(path) -> TransceiverSet:
    """Read ``id,role,x,y,z`` rows (role ``tx`` or ``rx``)."""
    tx, rx = [], []
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        need = {"id", "role", "x", "y", "z"}
        if rows.fieldnames is None or not need <= set(rows.fieldnames):
            raise ValueError(f"{path}: positions file needs columns id,role,x,y,z")
        for n, row in enumerate(rows, start=2):
            try:
                pos = (float(row["x"]), float(row["y"]), float(row["z"]))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{n}: bad coordinate in row for id {row.get('id')!r}") from None
            role = (row["role"] or "").strip().lower()
            if role == "tx":
                tx.append((row["id"].strip(), pos))
            elif role == "rx":
                rx.append((row["id"].strip(), pos))
            else:
                raise ValueError(f"{path}:{n}: role must be tx or rx, got {row['role']!r}")
    return TransceiverSet(tx, rx)


def write_positions(path, ts: TransceiverSet) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("id,role,x,y,z\n")
        for role, items in (("tx", ts.transmitters), ("rx", ts.receivers)):
            for t in items:
                x, y, z = t.position
                fh.write(f"{t.id},{role},{x!r},{y!r},{z!r}\n")


@dataclass(frozen=True)
class LinkConfig:
    """One configuration ``g_k``: transmitters ``a_k`` with receivers ``b_k``."""

    config_id: str
    tx_ids: tuple
    rx_ids: tuple

    def __post_init__(self):
        if not self.tx_ids or not self.rx_ids:
            raise ValueError("a link configuration needs transmitters and receivers")


@dataclass
class LinkConfigSet:
    kind: str
    configs: list

    def __len__(self):
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)


def build_config_set(ts: TransceiverSet, kind: str) -> LinkConfigSet:
    """Single-link: every Tx/Rx pair (Tx-major). Multi-link: each Tx with all receivers."""
    kind = kind.lower()
    if ts.n_tx < 1 or ts.n_rx < 1:
        raise ValueError("empty transceiver set")
    rx_ids = tuple(r.id for r in ts.receivers)
    if kind == "sl":
        cfgs = [LinkConfig(f"{t.id}:{r}", (t.id,), (r,)) for t in ts.transmitters for r in rx_ids]
    elif kind == "ml":
        cfgs = [LinkConfig(f"{t.id}:*", (t.id,), rx_ids) for t in ts.transmitters]
    else:
        raise ValueError(f"configuration kind must be 'sl' or 'ml', got {kind!r}")
    return LinkConfigSet(kind, cfgs)


# ---------------------------------------------------------------------------
# statistics and reports


def sample_stats(t) -> tuple[float, float]:
    """Sample mean and unbiased sample variance (0 for a single sample)."""
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return math.nan, math.nan
    mu = float(math.fsum(t) / t.size)
    if t.size < 2:
        return mu, 0.0
    return mu, float(math.fsum((t - mu) ** 2) / (t.size - 1))


@dataclass
class TimingReport:
    t: np.ndarray
    meta: dict = field(default_factory=dict)
    config_ids: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    failed: Optional[str] = None

    @property
    def k_cfg(self) -> int:
        return int(np.asarray(self.t).size)

    @property
    def mu(self) -> float:
        return sample_stats(self.t)[0]

    @property
    def sigma2(self) -> float:
        return sample_stats(self.t)[1]

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2) if self.k_cfg else math.nan

    @property
    def run_means(self) -> list[float]:
        return [sample_stats(r)[0] for r in self.runs]


# ---------------------------------------------------------------------------
# the timing loop


def default_workers(kind: str, workers: Optional[int] = None) -> int:
    """Single-link always runs on one worker; multi-link honours the argument or environment."""
    if kind == "sl":
        return 1
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def load_config(ts: TransceiverSet, cfg: LinkConfig):
    """Resolve a configuration into transmitter and receiver coordinate arrays."""
    txs = ts.tx_by_id()
    rxs = ts.rx_by_id()
    tx = np.array([txs[i].position for i in cfg.tx_ids], dtype=float)
    rx = np.array([rxs[i].position for i in cfg.rx_ids], dtype=float)
    return tx, rx


def _compute_paths(tracer, scene, tx, rx, params, carrier, workers):
    out = []
    for p in tx:
        out.append(tracer(scene, p, rx, params, carrier=carrier, workers=workers))
    return out


def run_benchmark(scene, config_set: LinkConfigSet, params: TraceParams, ts: TransceiverSet,
                  warmup: float = 60.0, repeats: int = 1, carrier: Optional[CarrierConfig] = None,
                  workers: Optional[int] = None, round_trip: bool = False,
                  tracer: Callable = trace, loader: Callable = load_config,
                  clock: Callable[[], int] = time.perf_counter_ns, meta: Optional[dict] = None) -> TimingReport:
    """Time ``compute_paths`` for every configuration.

    For each configuration the transceivers are loaded, a timestamp is taken,
    the paths are computed and a second timestamp closes the measurement.
    With ``round_trip`` the loading moves inside the timed region. A warm-up
    phase of ``warmup`` seconds of untimed traces on the first configuration
    precedes the measurements. Garbage collection is paused inside each timed
    region.
    """
    params.validate()
    carrier = carrier or CarrierConfig()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if len(config_set) == 0:
        raise ValueError("empty configuration set")
    nw = default_workers(config_set.kind, workers)
    if warmup > 0:
        warm_up(scene, config_set, params, ts, warmup, carrier, nw, tracer, loader)
    runs = []
    for _ in range(repeats):
        t = np.empty(len(config_set))
        for k, cfg in enumerate(config_set):
            if not round_trip:
                tx, rx = loader(ts, cfg)
            gc.collect()
            gc.disable()
            try:
                t0 = clock()
                if round_trip:
                    tx, rx = loader(ts, cfg)
                _compute_paths(tracer, scene, tx, rx, params, carrier, nw)
                t1 = clock()
            except Exception as exc:
                raise BenchmarkError(cfg.config_id, exc) from exc
            finally:
                gc.enable()
            t[k] = (t1 - t0) * 1e-9
        runs.append(t)
    info = {"kind": config_set.kind, "workers": nw, "round_trip": round_trip, "repeats": repeats}
    info.update(meta or {})
    return TimingReport(runs[0], info, [c.config_id for c in config_set], runs)


def warm_up(scene, config_set, params, ts, seconds, carrier=None, workers=1, tracer=trace, loader=load_config):
    """Untimed traces on the first configuration for ``seconds`` (at least one trace)."""
    carrier = carrier or CarrierConfig()
    tx, rx = loader(ts, config_set.configs[0])
    end = time.monotonic() + seconds
    while True:
        _compute_paths(tracer, scene, tx, rx, params, carrier, workers)
        if time.monotonic() >= end:
            break


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    scenario: str = "scene"
    kinds: Sequence[str] = ("sl",)
    depths: Sequence[int] = tuple(range(1, 11))
    sampling_kind: str = "as"
    sampling_values: Sequence[float] = (0.25, 0.5, 1.0)
    scattering: Sequence[bool] = (False, True)
    depth_mode: str = "pertype"
    base: TraceParams = field(default_factory=lambda: TraceParams(num_samples=10_000))
    warmup: float = 60.0
    repeats: int = 1
    round_trip: bool = False
    workers: Optional[int] = None

    def __post_init__(self):
        if self.sampling_kind not in ("as", "ns"):
            raise ValueError(f"sampling_kind must be 'as' or 'ns', got {self.sampling_kind!r}")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown configuration kind {k!r}")

    def cells(self):
        """Sweep cells in execution order: kind, sampling value, scattering, depth."""
        for kind in self.kinds:
            for sv in self.sampling_values:
                for ds in self.scattering:
                    for depth in self.depths:
                        yield kind, sv, ds, depth

    def params_for(self, sampling_value, scattering, depth) -> TraceParams:
        p = replace(self.base, depth_mode=self.depth_mode, scattering=bool(scattering), method="sbr")
        if self.sampling_kind == "as":
            p = replace(p, angular_separation=float(sampling_value), num_samples=None)
        else:
            p = replace(p, num_samples=int(sampling_value), angular_separation=None)
        return p.with_depth(int(depth))

    def n_cells(self) -> int:
        return len(self.kinds) * len(self.sampling_values) * len(self.scattering) * len(self.depths)


def run_sweep(scene, ts: TransceiverSet, spec: SweepSpec, carrier: Optional[CarrierConfig] = None,
              tracer: Callable = trace, progress: Optional[Callable] = None) -> list[TimingReport]:
    """Run every sweep cell; failing cells yield a report with ``failed`` set."""
    carrier = carrier or CarrierConfig()
    sets = {k: build_config_set(ts, k) for k in spec.kinds}
    reports = []
    warmed = spec.warmup <= 0
    for i, (kind, sv, ds, depth) in enumerate(spec.cells()):
        params = spec.params_for(sv, ds, depth)
        meta = {
            "scenario": spec.scenario, "kind": kind, "method": params.method,
            "depth_mode": params.depth_mode, "depth": int(depth), "sampling_kind": spec.sampling_kind,
            "sampling_value": sv, "scattering": bool(ds),
        }
        try:
            rep = run_benchmark(scene, sets[kind], params, ts, warmup=0.0 if warmed else spec.warmup,
                                repeats=spec.repeats, carrier=carrier, workers=spec.workers,
                                round_trip=spec.round_trip, tracer=tracer, meta=meta)
            warmed = True
        except (BenchmarkError, ValueError) as exc:
            failed = exc.config_id if isinstance(exc, BenchmarkError) else "params"
            rep = TimingReport(np.zeros(0), dict(meta, error=str(exc)), [], [], failed=failed)
        reports.append(rep)
        if progress is not None:
            progress(i, rep)
    return reports


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _cell_fields(meta: dict) -> list[str]:
    return [_fmt(meta.get(c, "")) for c in RESULT_COLUMNS[:8]]


def emit_report(reports: Sequence[TimingReport], out_dir, header_params: Optional[dict] = None,
                prefix: str = "") -> dict[str, Path]:
    """Write the per-configuration results table, the summary and plot-data files."""
    if not reports:
        raise ValueError("no reports to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hp = header_params or {}
    paths = {"results": out / f"{prefix}results.csv", "summary": out / f"{prefix}summary.csv"}
    with open(paths["results"], "w", newline="") as fh:
        write_header(fh, hp)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for rep in reports:
            cell = _cell_fields(rep.meta)
            if rep.failed is not None:
                w.writerow(cell + [f"FAILED:{rep.failed}", "nan"])
                continue
            for cid, t in zip(rep.config_ids, rep.t):
                w.writerow(cell + [cid, repr(float(t))])
    with open(paths["summary"], "w", newline="") as fh:
        write_header(fh, hp)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            if rep.failed is not None:
                w.writerow(_cell_fields(rep.meta) + ["nan", "nan", "0"])
            else:
                w.writerow(_cell_fields(rep.meta) + [repr(float(rep.mu)), repr(float(rep.sigma)), str(rep.k_cfg)])
    groups: dict = {}
    for rep in reports:
        m = rep.meta
        groups.setdefault((m.get("kind", ""), m.get("sampling_kind", "")), []).append(rep)
    for (kind, sk), reps in groups.items():
        p = out / f"{prefix}plot_{kind}_{sk}.csv"
        with open(p, "w", newline="") as fh:
            write_header(fh, hp)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            for rep in reps:
                m = rep.meta
                series = f"{sk}={_fmt(m.get('sampling_value'))};ds={_fmt(bool(m.get('scattering')))}"
                mu = rep.mu if rep.failed is None else math.nan
                sg = rep.sigma if rep.failed is None else math.nan
                w.writerow([series, m.get("depth", ""), repr(float(mu)), repr(float(sg))])
        paths[f"plot_{kind}_{sk}"] = p
    return paths


def read_table(path) -> list[dict]:
    """Parse a CSV output, skipping ``#`` header lines."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
