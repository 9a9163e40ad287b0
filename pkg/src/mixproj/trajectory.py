"""Timestamped record of a filter run: coordinates, moments, diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = ["Event", "FilterTrajectory", "TrajectoryRecorder"]


@dataclass(frozen=True)
class Event:
    time: float
    step: int
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class FilterTrajectory:
    """Per-sample filter state: theta, family generation, moments, residuals."""

    times: np.ndarray
    thetas: np.ndarray            # (T, m)
    generations: np.ndarray       # (T,)
    means: np.ndarray
    variances: np.ndarray
    residual_drift: np.ndarray
    residual_diff: np.ndarray | None = None   # (T, d) for continuous runs
    events: tuple[Event, ...] = ()
    families: tuple = ()          # family snapshots (references), aligned or sparse

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or (t.size > 1 and np.any(np.diff(t) <= 0)):
            raise ValidationError("trajectory timestamps must be strictly increasing")
        th = np.asarray(self.thetas, dtype=float)
        if th.shape[0] != t.size:
            raise ValidationError("one theta row per timestamp required")
        if np.any(th < -1e-12) or np.any(th.sum(axis=1) > 1.0 + 1e-12):
            raise ValidationError("trajectory coordinates left the simplex")

    def __len__(self) -> int:
        return self.times.size

    def event_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.events:
            out[e.kind] = out.get(e.kind, 0) + 1
        return out


@dataclass
class TrajectoryRecorder:
    """Accumulates per-step rows and builds the immutable trajectory."""

    times: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    generations: list = field(default_factory=list)
    means: list = field(default_factory=list)
    variances: list = field(default_factory=list)
    residual_drift: list = field(default_factory=list)
    residual_diff: list = field(default_factory=list)
    events: list = field(default_factory=list)
    families: list = field(default_factory=list)

    def append(
        self,
        time: float,
        theta: np.ndarray,
        generation: int,
        mean: float,
        variance: float,
        residual_drift: float = np.nan,
        residual_diff: np.ndarray | None = None,
        family=None,
    ) -> None:
        self.times.append(float(time))
        self.thetas.append(np.asarray(theta, dtype=float).copy())
        self.generations.append(int(generation))
        self.means.append(float(mean))
        self.variances.append(float(variance))
        self.residual_drift.append(float(residual_drift))
        if residual_diff is not None:
            self.residual_diff.append(np.asarray(residual_diff, dtype=float).copy())
        if family is not None:
            self.families.append(family)

    def log(self, time: float, step: int, kind: str, detail: str = "") -> None:
        self.events.append(Event(time=float(time), step=int(step), kind=kind, detail=detail))

    def build(self) -> FilterTrajectory:
        rd = np.stack(self.residual_diff) if self.residual_diff else None
        return FilterTrajectory(
            times=np.asarray(self.times, dtype=float),
            thetas=np.stack(self.thetas) if self.thetas else np.zeros((0, 0)),
            generations=np.asarray(self.generations, dtype=int),
            means=np.asarray(self.means, dtype=float),
            variances=np.asarray(self.variances, dtype=float),
            residual_drift=np.asarray(self.residual_drift, dtype=float),
            residual_diff=rd,
            events=tuple(self.events),
            families=tuple(self.families),
        )
