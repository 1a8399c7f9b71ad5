"""Piecewise-constant control schedules and their JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROFILE_FORMAT = "nlreadout.profile/1"


@dataclass(frozen=True)
class ControlProfile:
    """Ordered (control value, duration) segments.

    For spin-1 runs the control is q in units of |c2| and durations are in
    1/|c2|; for spin-1/2 runs the control is Omega/chi and durations are in
    1/chi.  ``interaction_sign`` = -1 marks a segment list that must run with
    the interaction flipped (time-reversal readout).
    """

    segments: tuple[tuple[float, float], ...] = ()
    tau1: float | None = None
    tau2: float | None = None
    tau3: float | None = None
    interaction_sign: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        segs = tuple((float(v), float(d)) for v, d in self.segments)
        for v, d in segs:
            if not (np.isfinite(v) and np.isfinite(d)) or d < 0:
                raise ValueError(f"invalid segment ({v}, {d})")
        if self.interaction_sign not in (1, -1):
            raise ValueError("interaction_sign must be +1 or -1")
        object.__setattr__(self, "segments", segs)

    @property
    def duration(self) -> float:
        return float(sum(d for _, d in self.segments))

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.segments])

    def value_at(self, t: float) -> float:
        acc = 0.0
        for v, d in self.segments:
            acc += d
            if t < acc:
                return v
        if not self.segments:
            raise ValueError("empty profile")
        return self.segments[-1][0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [list(s) for s in self.segments]
        d["format"] = PROFILE_FORMAT
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControlProfile":
        d = dict(d)
        fmt = d.pop("format", PROFILE_FORMAT)
        if fmt != PROFILE_FORMAT:
            raise ValueError(f"unsupported profile format {fmt!r}")
        d["segments"] = tuple(tuple(s) for s in d.get("segments", ()))
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ControlProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))
