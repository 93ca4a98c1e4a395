"""Dataset ingestion, event segmentation, class balancing and split construction.

A *drive manifest* is a line-oriented text file: a short ``key=value`` header
(drive_id, subject_id, camera_profile_id) followed by a column-header line and
one ``frame_path,timestamp_s,zone_name`` row per annotated frame. Timestamps
must strictly increase within a drive.

Splits come in two kinds. ``cross_subject`` holds out whole subjects so test
drivers are never seen during training; ``temporal`` cuts each drive
chronologically (first 70% / next 15% / last 15% by default), which is the
protocol known to leak driver-specific appearance into the test set. Both
carve validation data as contiguous event tails, separated in time from
retained training frames, never as random frames.
"""
from __future__ import annotations

import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import Event, GazeZone, LabeledSample, ZONE_COUNT

log = logging.getLogger(__name__)

DEFAULT_GAP_THRESHOLD = 0.5  # seconds; a quick mirror check lasts under a second
DEFAULT_VALIDATION_FRACTION = 0.05
DEFAULT_VALIDATION_TIME_GAP = 30.0  # seconds between validation and retained train frames

_HEADER_KEYS = ("drive_id", "subject_id", "camera_profile_id")
_COLUMN_LINE = "frame_path,timestamp_s,zone_name"


class ManifestError(ValueError):
    """Raised for malformed manifests or rejected rows in strict mode."""


class SplitError(ValueError):
    """Raised when split preconditions are violated."""


class CarveError(ValueError):
    """Raised when validation carving cannot satisfy the time-gap constraint."""

    def __init__(self, drive_id: str, message: str):
        super().__init__(message)
        self.drive_id = drive_id


@dataclass
class DriveManifest:
    """Header plus per-frame rows for a single recorded drive."""

    drive_id: str
    subject_id: str
    camera_profile_id: str
    rows: list[tuple[str, float, str]] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "DriveManifest":
        path = Path(path)
        header: dict[str, str] = {}
        rows: list[tuple[str, float, str]] = []
        with path.open() as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        i = 0
        while i < len(lines) and "=" in lines[i]:
            key, _, value = lines[i].partition("=")
            header[key.strip()] = value.strip()
            i += 1
        for key in _HEADER_KEYS:
            if not header.get(key):
                raise ManifestError(f"{path}: missing header key {key!r}")
        if i >= len(lines) or lines[i].strip() != _COLUMN_LINE:
            raise ManifestError(f"{path}: expected column line {_COLUMN_LINE!r} after header")
        for lineno, line in enumerate(lines[i + 1 :], start=i + 2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 comma-separated fields, got {len(parts)}")
            frame_path, ts_text, zone_name = (p.strip() for p in parts)
            try:
                ts = float(ts_text)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad timestamp {ts_text!r}") from None
            rows.append((frame_path, ts, zone_name))
        return cls(
            drive_id=header["drive_id"],
            subject_id=header["subject_id"],
            camera_profile_id=header["camera_profile_id"],
            rows=rows,
        )

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for key in _HEADER_KEYS:
                fh.write(f"{key}={getattr(self, key)}\n")
            fh.write(_COLUMN_LINE + "\n")
            for frame_path, ts, zone_name in self.rows:
                fh.write(f"{frame_path},{ts:.3f},{zone_name}\n")


@dataclass
class RejectedRow:
    row_index: int  # 0-based position in manifest.rows
    frame_path: str
    reason: str


@dataclass
class IngestResult:
    samples: list[LabeledSample]
    rejected: list[RejectedRow]


def ingest(
    manifest: DriveManifest,
    *,
    strict: bool = True,
    frame_checker=None,
) -> IngestResult:
    """Turn manifest rows into labeled samples, order preserved.

    Rows with unknown zone labels (or frames ``frame_checker`` rejects) are
    reported with their row index: raised as :class:`ManifestError` in strict
    mode, collected into ``rejected`` otherwise. Non-increasing timestamps are
    a drive-level corruption and always raise.
    """
    samples: list[LabeledSample] = []
    rejected: list[RejectedRow] = []
    prev_ts: float | None = None
    for idx, (frame_path, ts, zone_name) in enumerate(manifest.rows):
        if prev_ts is not None and ts <= prev_ts:
            raise ManifestError(
                f"drive {manifest.drive_id}: timestamp {ts} at row {idx} does not increase "
                f"(previous {prev_ts})"
            )
        prev_ts = ts
        try:
            zone = GazeZone.from_label(zone_name)
        except ValueError as exc:
            if strict:
                raise ManifestError(f"drive {manifest.drive_id}: row {idx}: {exc}") from None
            rejected.append(RejectedRow(idx, frame_path, str(exc)))
            continue
        if frame_checker is not None and not frame_checker(frame_path):
            if strict:
                raise ManifestError(f"drive {manifest.drive_id}: row {idx}: unreadable frame {frame_path!r}")
            rejected.append(RejectedRow(idx, frame_path, "unreadable frame"))
            continue
        samples.append(
            LabeledSample(
                frame_ref=frame_path,
                subject_id=manifest.subject_id,
                drive_id=manifest.drive_id,
                timestamp=ts,
                zone=zone,
            )
        )
    if rejected:
        log.warning("drive %s: rejected %d of %d rows", manifest.drive_id, len(rejected), len(manifest.rows))
    return IngestResult(samples=samples, rejected=rejected)


def segment_events(samples: Sequence[LabeledSample], gap_threshold: float = DEFAULT_GAP_THRESHOLD) -> list[Event]:
    """Split one drive's samples into maximal single-zone runs.

    A new event starts when the zone changes or the gap to the previous frame
    exceeds ``gap_threshold``. Concatenating the events' samples in order
    reproduces the input exactly.
    """
    if not samples:
        return []
    drives = {s.drive_id for s in samples}
    if len(drives) > 1:
        raise ValueError(f"segment_events expects samples from one drive, got {sorted(drives)}")
    events: list[Event] = []
    run: list[LabeledSample] = [samples[0]]
    for s in samples[1:]:
        prev = run[-1]
        if s.timestamp <= prev.timestamp:
            raise ValueError(f"samples must be sorted with strictly increasing timestamps (at {s.frame_ref})")
        if s.zone == prev.zone and (s.timestamp - prev.timestamp) <= gap_threshold:
            run.append(s)
        else:
            events.append(Event(prev.drive_id, run[0].zone, tuple(run)))
            run = [s]
    events.append(Event(run[0].drive_id, run[0].zone, tuple(run)))
    return events


def segment_all_drives(
    samples: Sequence[LabeledSample], gap_threshold: float = DEFAULT_GAP_THRESHOLD
) -> list[Event]:
    """Segment a multi-drive sample collection drive by drive."""
    by_drive: dict[str, list[LabeledSample]] = defaultdict(list)
    for s in samples:
        by_drive[s.drive_id].append(s)
    events: list[Event] = []
    for drive_id in sorted(by_drive):
        drive_samples = sorted(by_drive[drive_id], key=lambda s: s.timestamp)
        events.extend(segment_events(drive_samples, gap_threshold))
    return events


def balance(
    samples: Sequence[LabeledSample],
    cap_per_zone: int,
    per_event_cap: int = 1,
    *,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    seed: int = 0,
) -> list[LabeledSample]:
    """Sub-sample over-represented zones down to ``cap_per_zone`` frames.

    Frames are drawn round-robin over that zone's events, at most
    ``per_event_cap`` per event per pass, so the retained frames spread over
    as many distinct events as possible. Selection within an event uses a
    seeded RNG; zones already at or below the cap pass through untouched,
    which makes the operation idempotent for a fixed seed.
    """
    if cap_per_zone < 1:
        raise ValueError("cap_per_zone must be >= 1")
    if per_event_cap < 1:
        raise ValueError("per_event_cap must be >= 1")
    events = segment_all_drives(samples, gap_threshold)
    events_by_zone: dict[GazeZone, list[Event]] = defaultdict(list)
    for ev in events:
        events_by_zone[ev.zone].append(ev)

    keep: set[str] = set()
    for zone in GazeZone:
        zone_events = events_by_zone.get(zone, [])
        total = sum(len(ev) for ev in zone_events)
        if total <= cap_per_zone:
            for ev in zone_events:
                keep.update(s.frame_ref for s in ev.samples)
            continue
        rng = np.random.default_rng([seed, int(zone)])
        # Pre-shuffle each event once; passes then consume its frames in order.
        queues = [list(rng.permutation(len(ev))) for ev in zone_events]
        picked = 0
        while picked < cap_per_zone:
            progress = False
            for ev, queue in zip(zone_events, queues):
                take = min(per_event_cap, len(queue), cap_per_zone - picked)
                for _ in range(take):
                    keep.add(ev.samples[queue.pop(0)].frame_ref)
                    picked += 1
                    progress = True
                if picked >= cap_per_zone:
                    break
            if not progress:
                break
    return [s for s in samples if s.frame_ref in keep]


@dataclass
class DatasetSplit:
    """Train/validation/test partitions plus the recipe that produced them."""

    train: list[LabeledSample]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    split_kind: str  # "cross_subject" | "temporal"
    parameters: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Check the partition invariants; raises SplitError on violation."""
        refs = [s.frame_ref for part in (self.train, self.validation, self.test) for s in part]
        if len(refs) != len(set(refs)):
            raise SplitError("partitions are not pairwise disjoint by frame_ref")
        if self.split_kind == "cross_subject":
            seen = {s.subject_id for s in self.train} | {s.subject_id for s in self.validation}
            held_out = {s.subject_id for s in self.test}
            overlap = seen & held_out
            if overlap:
                raise SplitError(f"test subjects leak into training: {sorted(overlap)}")
        elif self.split_kind == "temporal":
            for drive_id in {s.drive_id for s in self.train + self.validation + self.test}:
                tr = [s.timestamp for s in self.train if s.drive_id == drive_id]
                va = [s.timestamp for s in self.validation if s.drive_id == drive_id]
                te = [s.timestamp for s in self.test if s.drive_id == drive_id]
                if tr and va and max(tr) >= min(va):
                    raise SplitError(f"drive {drive_id}: train overlaps validation in time")
                if va and te and max(va) >= min(te):
                    raise SplitError(f"drive {drive_id}: validation overlaps test in time")
                if tr and te and max(tr) >= min(te):
                    raise SplitError(f"drive {drive_id}: train overlaps test in time")
        else:
            raise SplitError(f"unknown split_kind {self.split_kind!r}")

    def zone_counts(self) -> dict[str, list[int]]:
        """Per-partition frame counts in zone ordinal order."""
        out = {}
        for name, part in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            counts = [0] * ZONE_COUNT
            for s in part:
                counts[int(s.zone)] += 1
            out[name] = counts
        return out


def split_cross_subject(
    samples: Sequence[LabeledSample],
    train_subjects: Iterable[str],
    test_subjects: Iterable[str],
    *,
    validation_fraction: float = DEFAULT_VALIDATION_FRACTION,
    validation_time_gap: float = DEFAULT_VALIDATION_TIME_GAP,
) -> DatasetSplit:
    """Hold out whole subjects for testing; carve validation from the train pool."""
    train_subjects = set(train_subjects)
    test_subjects = set(test_subjects)
    overlap = train_subjects & test_subjects
    if overlap:
        raise SplitError(f"train and test subject sets overlap: {sorted(overlap)}")
    all_subjects = {s.subject_id for s in samples}
    unassigned = all_subjects - train_subjects - test_subjects
    if unassigned:
        raise SplitError(f"subjects not assigned to either side: {sorted(unassigned)}")

    train_pool = [s for s in samples if s.subject_id in train_subjects]
    test = [s for s in samples if s.subject_id in test_subjects]
    if not train_pool:
        warnings.warn("cross-subject split produced an empty training set", stacklevel=2)
    train, validation = carve_validation(train_pool, validation_fraction, validation_time_gap)
    split = DatasetSplit(
        train=train,
        validation=validation,
        test=test,
        split_kind="cross_subject",
        parameters={
            "train_subjects": sorted(train_subjects),
            "test_subjects": sorted(test_subjects),
            "validation_fraction": validation_fraction,
            "validation_time_gap": validation_time_gap,
        },
    )
    split.validate()
    return split


def split_temporal(
    samples: Sequence[LabeledSample],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> DatasetSplit:
    """Cut each drive chronologically into train/validation/test by frame count."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SplitError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)}")
    by_drive: dict[str, list[LabeledSample]] = defaultdict(list)
    for s in samples:
        by_drive[s.drive_id].append(s)
    train: list[LabeledSample] = []
    validation: list[LabeledSample] = []
    test: list[LabeledSample] = []
    for drive_id in sorted(by_drive):
        drive = sorted(by_drive[drive_id], key=lambda s: s.timestamp)
        n = len(drive)
        c1 = int(round(fractions[0] * n))
        c2 = int(round((fractions[0] + fractions[1]) * n))
        train.extend(drive[:c1])
        validation.extend(drive[c1:c2])
        test.extend(drive[c2:])
    split = DatasetSplit(
        train=train,
        validation=validation,
        test=test,
        split_kind="temporal",
        parameters={"fractions": list(fractions)},
    )
    split.validate()
    return split


def carve_validation(
    train_samples: Sequence[LabeledSample],
    fraction: float = DEFAULT_VALIDATION_FRACTION,
    time_gap: float = DEFAULT_VALIDATION_TIME_GAP,
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Carve a validation set from the chronological tail of each drive.

    The validation partition is the last ~``fraction`` of each drive's frames
    (whole trailing events plus the tail of the event the cut lands in), never
    random frames. Training frames of the same drive closer than ``time_gap``
    seconds to the validation boundary are dropped so the two sets stay well
    separated in time. Raises :class:`CarveError` when a drive is too small to
    retain any training frames under that constraint.
    """
    if fraction < 0 or fraction >= 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if fraction == 0:
        return list(train_samples), []
    by_drive: dict[str, list[LabeledSample]] = defaultdict(list)
    for s in train_samples:
        by_drive[s.drive_id].append(s)
    train: list[LabeledSample] = []
    validation: list[LabeledSample] = []
    for drive_id in sorted(by_drive):
        drive = sorted(by_drive[drive_id], key=lambda s: s.timestamp)
        n = len(drive)
        target = int(round(fraction * n))
        if target == 0:
            train.extend(drive)
            continue
        val_part = drive[n - target :]
        boundary = val_part[0].timestamp
        retained = [s for s in drive[: n - target] if s.timestamp <= boundary - time_gap]
        if not retained:
            raise CarveError(
                drive_id,
                f"drive {drive_id}: no training frames remain at least {time_gap}s before the "
                f"validation boundary (drive has {n} frames); reduce time_gap or fraction",
            )
        dropped = (n - target) - len(retained)
        if dropped:
            log.info("drive %s: dropped %d buffer frames between train and validation", drive_id, dropped)
        train.extend(retained)
        validation.extend(val_part)
    return train, validation


def save_split(split: DatasetSplit, path: str | Path) -> None:
    """Persist the split with enough detail to retrain from it verbatim."""

    def encode(part: list[LabeledSample]) -> list[dict]:
        return [
            {
                "frame_ref": s.frame_ref,
                "subject_id": s.subject_id,
                "drive_id": s.drive_id,
                "timestamp": s.timestamp,
                "zone": s.zone.label,
            }
            for s in part
        ]

    payload = {
        "format_version": 1,
        "split_kind": split.split_kind,
        "parameters": split.parameters,
        "partitions": {
            "train": encode(split.train),
            "validation": encode(split.validation),
            "test": encode(split.test),
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_split(path: str | Path) -> DatasetSplit:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != 1:
        raise SplitError(f"{path}: unsupported split format {payload.get('format_version')!r}")

    def decode(part: list[dict]) -> list[LabeledSample]:
        return [
            LabeledSample(
                frame_ref=r["frame_ref"],
                subject_id=r["subject_id"],
                drive_id=r["drive_id"],
                timestamp=float(r["timestamp"]),
                zone=GazeZone.from_label(r["zone"]),
            )
            for r in part
        ]

    parts = payload["partitions"]
    return DatasetSplit(
        train=decode(parts["train"]),
        validation=decode(parts["validation"]),
        test=decode(parts["test"]),
        split_kind=payload["split_kind"],
        parameters=payload.get("parameters", {}),
    )
