"""Path records and trace parameters."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..em import PathAmplitude

KINDS = ("R", "D", "S")
METHODS = ("image", "sbr")
DEPTH_MODES = ("pertype", "joint")
SCATTER_MODES = ("single", "reemit")
MAX_DEPTH = 10
IMAGE_MAX_REFLECTIONS = 3


@dataclass(frozen=True, eq=False)
class Interaction:
    """One interaction point.

    ``kind`` is ``"R"`` (reflection, ``ref`` = surface id), ``"D"``
    (diffraction, ``ref`` = edge id) or ``"S"`` (diffuse scatter, ``ref`` =
    surface id). Scatter points also carry the roughness ``S`` and the solid
    angle of the ray tube that produced them.
    """

    kind: str
    point: np.ndarray
    ref: int
    roughness: float = 0.0
    solid_angle: float = 0.0


@dataclass(frozen=True, eq=False)
class PropagationPath:
    tx: np.ndarray
    rx: np.ndarray
    interactions: tuple = ()
    amplitude: Optional[PathAmplitude] = None
    signature: tuple = field(init=False, repr=False)
    key: tuple = field(init=False, repr=False)

    def __post_init__(self):
        sig = tuple((it.kind, it.ref) for it in self.interactions)
        # scatter points are fixed anchors, so they belong to the dedup key
        extra = tuple(
            tuple(round(float(v), 9) for v in it.point) for it in self.interactions if it.kind == "S"
        )
        object.__setattr__(self, "signature", sig)
        object.__setattr__(self, "key", (sig, extra))

    @property
    def points(self) -> np.ndarray:
        pts = [self.tx] + [it.point for it in self.interactions] + [self.rx]
        return np.array(pts, dtype=float)

    @property
    def total_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    @property
    def is_los(self) -> bool:
        return not self.interactions

    def count(self, kind: str) -> int:
        return sum(1 for it in self.interactions if it.kind == kind)

    def with_amplitude(self, amp: PathAmplitude) -> "PropagationPath":
        return replace(self, amplitude=amp)


def merge_paths(*groups) -> list[PropagationPath]:
    """Union of path lists, one path per dedup key, sorted by key."""
    seen = {}
    for g in groups:
        for p in g:
            seen.setdefault(p.key, p)
    return [seen[k] for k in sorted(seen)]


class PathList(Sequence):
    """Paths for one receiver.

    Holds explicit :class:`PropagationPath` objects plus optional bulk
    bundles (arrays of scatter contributions). Bundles turn into path
    objects on first element access; :meth:`amplitudes` reads them directly.
    """

    def __init__(self, paths=(), bundles=()):
        self._paths = list(paths)
        self._bundles = [b for b in bundles if len(b)]
        self._items = None if self._bundles else self._paths

    def _materialize(self):
        if self._items is None:
            self._items = merge_paths(self._paths, *(b.materialize() for b in self._bundles))
        return self._items

    def __getitem__(self, i):
        return self._materialize()[i]

    def __len__(self):
        return len(self._materialize())

    def __iter__(self):
        return iter(self._materialize())

    def __repr__(self):
        return f"PathList({len(self)} paths)"

    def amplitudes(self) -> np.ndarray:
        """Complex amplitudes of all paths (explicit ones first, then bundles)."""
        parts = [np.array([p.amplitude.amplitude for p in self._paths], dtype=complex)]
        parts += [np.asarray(b.amplitudes, dtype=complex) for b in self._bundles]
        return np.concatenate(parts)


@dataclass
class TraceParams:
    """Ray model parameters.

    ``max_reflections`` bounds reflections in ``pertype`` mode;
    ``max_depth`` bounds the total number of interactions in ``joint`` mode.
    SBR needs exactly one of ``angular_separation`` (degrees) and
    ``num_samples``; the image method takes neither.
    """

    method: str = "sbr"
    max_reflections: int = 3
    max_depth: Optional[int] = None
    depth_mode: str = "pertype"
    diffraction_depth: int = 1
    scattering: bool = False
    roughness: float = 0.3
    scatter_mode: str = "single"
    reemission_deg: float = 10.0
    angular_separation: Optional[float] = None
    num_samples: Optional[int] = None
    reception_alpha: float = 1.0
    combine_diffraction: bool = False
    combine_max_reflections: int = 1

    def problems(self) -> list[str]:
        """Every violated invariant, as messages; empty when valid."""
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.depth_mode not in DEPTH_MODES:
            out.append(f"depth_mode must be one of {DEPTH_MODES}, got {self.depth_mode!r}")
        if self.depth_mode == "joint":
            if self.max_depth is None or not 0 <= self.max_depth <= MAX_DEPTH:
                out.append(f"joint mode needs max_depth in [0, {MAX_DEPTH}], got {self.max_depth}")
        if not 0 <= self.max_reflections <= MAX_DEPTH:
            out.append(f"max_reflections must lie in [0, {MAX_DEPTH}], got {self.max_reflections}")
        if self.diffraction_depth not in (0, 1):
            out.append(f"diffraction_depth must be 0 or 1, got {self.diffraction_depth}")
        if not 0.0 <= self.roughness <= 1.0:
            out.append(f"roughness S must lie in [0, 1], got {self.roughness}")
        if self.scatter_mode not in SCATTER_MODES:
            out.append(f"scatter_mode must be one of {SCATTER_MODES}, got {self.scatter_mode!r}")
        if not 0.0 < self.reemission_deg <= 90.0:
            out.append(f"reemission_deg must lie in (0, 90], got {self.reemission_deg}")
        if self.reception_alpha <= 0:
            out.append("reception_alpha must be positive")
        if self.combine_max_reflections < 0:
            out.append("combine_max_reflections must be >= 0")
        both = self.angular_separation is not None and self.num_samples is not None
        if self.method == "sbr":
            if both:
                out.append("set exactly one of angular_separation and num_samples, not both")
            elif self.angular_separation is None and self.num_samples is None:
                out.append("SBR needs one of angular_separation or num_samples")
        elif self.method == "image":
            if both or self.angular_separation is not None or self.num_samples is not None:
                out.append("the image method takes no angular sampling parameter")
            if self.reflection_budget > IMAGE_MAX_REFLECTIONS:
                out.append(
                    f"the image method supports at most {IMAGE_MAX_REFLECTIONS} reflections; use SBR for deeper traces"
                )
            if self.scattering:
                out.append("diffuse scattering requires the SBR method")
        if self.angular_separation is not None and not 0 < self.angular_separation <= 90:
            out.append(f"angular_separation must lie in (0, 90] degrees, got {self.angular_separation}")
        if self.num_samples is not None and self.num_samples < 1:
            out.append(f"num_samples must be >= 1, got {self.num_samples}")
        return out

    def validate(self) -> "TraceParams":
        probs = self.problems()
        if probs:
            raise ValueError("; ".join(probs))
        return self

    @property
    def reflection_budget(self) -> int:
        """Largest number of reflections any path may carry."""
        if self.depth_mode == "joint":
            return int(self.max_depth or 0)
        return int(self.max_reflections)

    @property
    def depth(self) -> int:
        return self.reflection_budget

    def allows(self, n_refl: int, n_diff: int = 0, n_scat: int = 0) -> bool:
        if self.depth_mode == "joint":
            return n_refl + n_diff + n_scat <= (self.max_depth or 0)
        return n_refl <= self.max_reflections and n_diff <= self.diffraction_depth

    def with_depth(self, depth: int) -> "TraceParams":
        if self.depth_mode == "joint":
            return replace(self, max_depth=depth)
        return replace(self, max_reflections=depth)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TraceStats:
    """Work counters filled in by the tracers."""

    candidates: int = 0
    rays: int = 0
    segments: int = 0
    captures: int = 0
    corrected: int = 0
    hits: int = 0
    secondary_rays: int = 0
    extra: dict = field(default_factory=dict)
