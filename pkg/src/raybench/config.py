"""Run manifests: an INI file plus command-line overrides."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .bench import SweepSpec
from .em import CarrierConfig
from .geometry import DEFAULT_MARGIN
from .radiomap import DEFAULT_WINDOW
from .tracer import TraceParams

TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


class ManifestError(ValueError):
    pass


def parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in TRUE:
        return True
    if s in FALSE:
        return False
    raise ManifestError(f"expected on/off, got {v!r}")


def parse_list(v) -> list[str]:
    return [x.strip() for x in str(v).replace("\n", ",").split(",") if x.strip()]


def parse_int_range(v) -> list[int]:
    """``"1-10"`` or ``"1, 2, 5"``."""
    out = []
    for item in parse_list(v):
        if "-" in item[1:]:
            a, b = item.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(item))
    return out


def parse_point(v, n=3) -> tuple:
    vals = tuple(float(x) for x in parse_list(v))
    if len(vals) != n:
        raise ManifestError(f"expected {n} comma-separated numbers, got {v!r}")
    return vals


@dataclass
class RadioMapSettings:
    tx: Optional[tuple] = None
    resolution: float = 10.0
    rx_height: float = 1.5
    combine: str = "coherent"
    window: tuple = DEFAULT_WINDOW
    extent: Optional[tuple] = None


@dataclass
class RunManifest:
    scene: list
    materials: Path
    positions: Optional[Path]
    out: Path
    carrier: CarrierConfig = field(default_factory=CarrierConfig)
    params: TraceParams = field(default_factory=TraceParams)
    sweep: Optional[SweepSpec] = None
    mode: str = "benchmark"
    scenario: str = "scene"
    margin_m: float = DEFAULT_MARGIN
    workers: Optional[int] = None
    warmup: float = 60.0
    radiomap: RadioMapSettings = field(default_factory=RadioMapSettings)
    param_problems: list = field(default_factory=list)

    def input_digest(self) -> dict:
        """Content hashes of every input file (part of the reproducibility header)."""
        out = {}
        for p in list(self.scene) + [self.materials] + ([self.positions] if self.positions else []):
            p = Path(p)
            try:
                out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()[:16]
            except OSError:
                out[p.name] = "missing"
        return out

    def header_params(self) -> dict:
        d = {
            "inputs": self.input_digest(),
            "frequency": self.carrier.frequency,
            "params": self.params.as_dict(),
            "scenario": self.scenario,
            "margin_m": self.margin_m,
        }
        if self.sweep is not None:
            d["sweep"] = {
                "kinds": list(self.sweep.kinds), "depths": list(self.sweep.depths),
                "sampling_kind": self.sweep.sampling_kind, "sampling_values": list(self.sweep.sampling_values),
                "scattering": list(self.sweep.scattering), "repeats": self.sweep.repeats,
                "round_trip": self.sweep.round_trip,
            }
        return d


PARAM_KEYS = {
    "method", "depth", "depth_mode", "as_deg", "ns", "scatter", "scatter_mode", "roughness",
    "reemission_deg", "diffraction", "combine_diffraction", "combine_max_reflections", "reception_alpha",
}


def _build_params(values: dict) -> tuple[TraceParams, list[str]]:
    p = TraceParams()
    kw = {}
    if "method" in values:
        kw["method"] = str(values["method"]).lower()
    if "depth_mode" in values:
        kw["depth_mode"] = str(values["depth_mode"]).lower()
    if "depth" in values:
        d = int(values["depth"])
        kw["max_reflections"] = d
        kw["max_depth"] = d
    if "as_deg" in values and values["as_deg"] not in (None, ""):
        kw["angular_separation"] = float(values["as_deg"])
    if "ns" in values and values["ns"] not in (None, ""):
        kw["num_samples"] = int(float(values["ns"]))
    if "scatter" in values:
        kw["scattering"] = parse_bool(values["scatter"])
    if "scatter_mode" in values:
        kw["scatter_mode"] = str(values["scatter_mode"]).lower()
    for key, name, conv in (
        ("roughness", "roughness", float), ("reemission_deg", "reemission_deg", float),
        ("diffraction", "diffraction_depth", int), ("combine_max_reflections", "combine_max_reflections", int),
        ("reception_alpha", "reception_alpha", float),
    ):
        if key in values:
            kw[name] = conv(values[key])
    if "combine_diffraction" in values:
        kw["combine_diffraction"] = parse_bool(values["combine_diffraction"])
    p = replace(p, **kw)
    if kw.get("method") == "image":
        pass
    elif "angular_separation" not in kw and "num_samples" not in kw:
        p = replace(p, num_samples=10_000)
    return p, p.problems()


def load_manifest(config_path=None, overrides: Optional[dict] = None, mode: str = "benchmark") -> RunManifest:
    """Read a manifest; ``overrides`` (flag values, ``None`` = unset) win over the file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path.cwd()
    if config_path is not None:
        config_path = Path(config_path)
        try:
            with open(config_path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ManifestError(f"cannot read configuration {config_path}: {exc}") from None
        except configparser.Error as exc:
            raise ManifestError(f"{config_path}: {exc}") from None
        base = config_path.parent
        if cp.has_option("run", "sweep"):
            sweep_path = Path(cp.get("run", "sweep"))
            sweep_path = sweep_path if sweep_path.is_absolute() else base / sweep_path
            try:
                with open(sweep_path) as fh:
                    extra = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
                    extra.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ManifestError(f"cannot read sweep spec {sweep_path}: {exc}") from None
            if extra.has_section("sweep"):
                if not cp.has_section("sweep"):
                    cp.add_section("sweep")
                for k, v in extra.items("sweep"):
                    cp.set("sweep", k, v)
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}

    def get(section, key, default=None):
        if key in ov:
            return ov[key]
        if cp.has_option(section, key):
            return cp.get(section, key)
        return default

    def path_of(v):
        p = Path(v)
        return p if p.is_absolute() else (base / p)

    scene_v = get("run", "scene")
    if not scene_v:
        raise ManifestError("no scene given (run.scene or --scene)")
    scene = [path_of(s) for s in (scene_v if isinstance(scene_v, list) else parse_list(scene_v))]
    materials_v = get("run", "materials")
    if not materials_v:
        raise ManifestError("no material table given (run.materials or --materials)")
    positions_v = get("run", "positions")
    out = path_of(get("run", "out", "out"))

    try:
        carrier = CarrierConfig(float(get("carrier", "frequency", 28e9)))
    except ValueError as exc:
        raise ManifestError(f"carrier: {exc}") from None

    values = {}
    if cp.has_section("params"):
        values.update(cp.items("params"))
    values.update({k: v for k, v in ov.items() if k in PARAM_KEYS})
    if "as_deg" in ov and "ns" not in ov:
        values.pop("ns", None)
    if "ns" in ov and "as_deg" not in ov:
        values.pop("as_deg", None)
    params, problems = _build_params(values)

    sweep = None
    if cp.has_section("sweep") or mode == "benchmark":
        sweep = _build_sweep(cp, ov, params, get)

    rm = RadioMapSettings()
    if cp.has_section("radiomap") or any(k in ov for k in ("tx", "resolution", "combine", "window")):
        tx = get("radiomap", "tx")
        rm = RadioMapSettings(
            tx=parse_point(tx) if tx is not None and not isinstance(tx, tuple) else tx,
            resolution=float(get("radiomap", "resolution", 10.0)),
            rx_height=float(get("radiomap", "rx_height", 1.5)),
            combine=str(get("radiomap", "combine", "coherent")).lower(),
            window=_window(get("radiomap", "window", DEFAULT_WINDOW)),
            extent=_extent(get("radiomap", "extent")),
        )
    workers = get("run", "workers")
    return RunManifest(
        scene=scene,
        materials=path_of(materials_v),
        positions=path_of(positions_v) if positions_v else None,
        out=out,
        carrier=carrier,
        params=params,
        sweep=sweep,
        mode=mode,
        scenario=str(get("run", "scenario", scene[0].stem)),
        margin_m=float(get("run", "margin_m", DEFAULT_MARGIN)),
        workers=int(workers) if workers is not None else None,
        warmup=float(get("run", "warmup_secs", 60.0)),
        radiomap=rm,
        param_problems=problems,
    )


def _window(v):
    if isinstance(v, tuple):
        return v
    return parse_point(v, 2)


def _extent(v):
    if v is None or isinstance(v, tuple):
        return v
    return parse_point(v, 4)


def _build_sweep(cp, ov, params: TraceParams, get) -> SweepSpec:
    if "mode" in ov:
        kinds = [str(ov["mode"]).lower()]
    else:
        kinds = [k.lower() for k in parse_list(get("sweep", "kinds", "sl"))]
    if "depth" in ov:
        depths = [int(ov["depth"])]
    elif cp.has_option("sweep", "depths"):
        depths = parse_int_range(cp.get("sweep", "depths"))
    else:
        depths = [params.reflection_budget]
    if "as_deg" in ov:
        sk, values = "as", [float(ov["as_deg"])]
    elif "ns" in ov:
        sk, values = "ns", [int(float(ov["ns"]))]
    elif cp.has_option("sweep", "sampling_values"):
        sk = cp.get("sweep", "sampling_kind", fallback="as").strip().lower()
        conv = float if sk == "as" else (lambda x: int(float(x)))
        values = [conv(x) for x in parse_list(cp.get("sweep", "sampling_values"))]
    elif params.angular_separation is not None:
        sk, values = "as", [params.angular_separation]
    else:
        sk, values = "ns", [params.num_samples or 10_000]
    if "scatter" in ov:
        scattering = [parse_bool(ov["scatter"])]
    elif cp.has_option("sweep", "scattering"):
        scattering = [parse_bool(x) for x in parse_list(cp.get("sweep", "scattering"))]
    else:
        scattering = [params.scattering]
    try:
        return SweepSpec(
            scenario=str(get("run", "scenario", "scene")),
            kinds=kinds,
            depths=depths,
            sampling_kind=sk,
            sampling_values=values,
            scattering=scattering,
            depth_mode=params.depth_mode,
            base=params,
            warmup=float(get("run", "warmup_secs", 60.0)),
            repeats=int(get("sweep", "repeats", 1)),
            round_trip=parse_bool(get("sweep", "round_trip", "off")),
            workers=int(get("run", "workers")) if get("run", "workers") is not None else None,
        )
    except ValueError as exc:
        raise ManifestError(f"sweep: {exc}") from None
