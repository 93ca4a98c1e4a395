"""Shared domain vocabulary: gaze zones, labeled frames, boxes, distributions.

Everything in here is an immutable value object; instances can be shared
freely across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

ZONE_COUNT = 7


class GazeZone(IntEnum):
    """The 7 in-cabin gaze zones, in fixed report order.

    The ordinal order is frozen so confusion matrices and per-zone reports
    are directly comparable across runs.
    """

    FORWARD = 0
    RIGHT = 1
    LEFT = 2
    CENTER_STACK = 3
    REARVIEW_MIRROR = 4
    SPEEDOMETER = 5
    EYES_CLOSED = 6

    @property
    def label(self) -> str:
        """Canonical name used verbatim in CSV/JSON reports."""
        return _ZONE_LABELS[self]

    @classmethod
    def from_label(cls, text: str) -> "GazeZone":
        """Parse a zone name. Tolerates spaces, underscores and case."""
        key = text.replace(" ", "").replace("_", "").replace("-", "").lower()
        try:
            return _ZONE_LOOKUP[key]
        except KeyError:
            valid = ", ".join(z.label for z in cls)
            raise ValueError(f"unknown gaze zone {text!r}; expected one of: {valid}") from None


_ZONE_LABELS = {
    GazeZone.FORWARD: "Forward",
    GazeZone.RIGHT: "Right",
    GazeZone.LEFT: "Left",
    GazeZone.CENTER_STACK: "CenterStack",
    GazeZone.REARVIEW_MIRROR: "RearviewMirror",
    GazeZone.SPEEDOMETER: "Speedometer",
    GazeZone.EYES_CLOSED: "EyesClosed",
}

_ZONE_LOOKUP = {label.lower(): zone for zone, label in _ZONE_LABELS.items()}

ZONE_LABELS = tuple(_ZONE_LABELS[z] for z in GazeZone)


@dataclass(frozen=True)
class LabeledSample:
    """One annotated frame: where it lives and what the driver was looking at."""

    frame_ref: str
    subject_id: str
    drive_id: str
    timestamp: float
    zone: GazeZone

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if not self.drive_id:
            raise ValueError("drive_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel rectangle, top-left origin."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, other: "BBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and self.x + self.w >= other.x + other.w
            and self.y + self.h >= other.y + other.h
        )

    def within(self, frame_w: int, frame_h: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= frame_w and self.y + self.h <= frame_h


@dataclass(frozen=True)
class Event:
    """A maximal run of consecutive frames fixating a single zone."""

    drive_id: str
    zone: GazeZone
    samples: tuple[LabeledSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("event must contain at least one sample")
        for s in self.samples:
            if s.zone != self.zone:
                raise ValueError(f"sample zone {s.zone.label} differs from event zone {self.zone.label}")
            if s.drive_id != self.drive_id:
                raise ValueError("all event samples must come from one drive")
        ts = [s.timestamp for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("event timestamps must be strictly increasing")

    @property
    def start(self) -> float:
        return self.samples[0].timestamp

    @property
    def end(self) -> float:
        return self.samples[-1].timestamp

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class ZoneDistribution:
    """Probabilities over the 7 zones; holds softmax outputs and subject-fraction histograms."""

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (ZONE_COUNT,):
            raise ValueError(f"expected {ZONE_COUNT} probabilities, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        total = p.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities must sum to 1 within 1e-6, got {total!r}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def __getitem__(self, zone: GazeZone) -> float:
        return float(self.probs[int(zone)])

    def as_dict(self) -> dict[str, float]:
        return {z.label: float(self.probs[int(z)]) for z in GazeZone}


def argmax_zone(dist: ZoneDistribution) -> GazeZone:
    """Zone of maximal probability; exact ties go to the lowest ordinal."""
    return GazeZone(int(np.argmax(dist.probs)))


def uniform_distribution() -> ZoneDistribution:
    return ZoneDistribution(np.full(ZONE_COUNT, 1.0 / ZONE_COUNT))


def point_mass(zone: GazeZone) -> ZoneDistribution:
    p = np.zeros(ZONE_COUNT)
    p[int(zone)] = 1.0
    return ZoneDistribution(p)


def zone_histogram(zones: Sequence[GazeZone]) -> ZoneDistribution:
    """Fraction of entries predicting each zone."""
    if not zones:
        raise ValueError("cannot build a histogram from zero predictions")
    counts = np.bincount([int(z) for z in zones], minlength=ZONE_COUNT).astype(np.float64)
    return ZoneDistribution(counts / counts.sum())
