"""Metrics and evaluation protocols.

Covers the whole measurement surface: macro/micro accuracy over 7-zone
confusion matrices, the backbone x crop-strategy ablation grid, the
variable-resolution study, forward-pass timing, and the cross-dataset
generalization protocol (per pose-gaze configuration histograms with
normalized entropy).

Published reference numbers (see :mod:`drivergaze.reference`) are attached to
reports as annotations only; nothing here asserts local results against them.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import reference
from .models import GazeModel, ResolutionError
from .preprocess import FramePipeline, NoFaceError
from .types import GazeZone, LabeledSample, ZoneDistribution, ZONE_COUNT, ZONE_LABELS, zone_histogram

log = logging.getLogger(__name__)

MAJORITY_THRESHOLD = 0.70  # flag configurations where one zone dominates


class MetricError(ValueError):
    """Raised when a metric's preconditions are not met (empty rows etc.)."""


def round2(value: float) -> float:
    """Round half-up to 2 decimals, the convention used in all reports."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


class ConfusionMatrix:
    """7x7 counts; rows are true zones, columns are predicted zones."""

    def __init__(self, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((ZONE_COUNT, ZONE_COUNT), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (ZONE_COUNT, ZONE_COUNT):
            raise MetricError(f"confusion matrix must be {ZONE_COUNT}x{ZONE_COUNT}, got {counts.shape}")
        if np.any(counts < 0):
            raise MetricError("confusion counts must be nonnegative")
        self.counts = counts

    def add(self, true: GazeZone, predicted: GazeZone, n: int = 1) -> None:
        self.counts[int(true), int(predicted)] += n

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Order-independent count merge, for fan-out evaluation."""
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def percent(self) -> np.ndarray:
        """Row percentages rounded half-up to 2 decimals; empty rows stay 0."""
        out = np.zeros_like(self.counts, dtype=np.float64)
        totals = self.row_totals()
        for i in range(ZONE_COUNT):
            if totals[i] == 0:
                continue
            for j in range(ZONE_COUNT):
                out[i, j] = round2(100.0 * self.counts[i, j] / totals[i])
        return out

    def per_zone_recall(self) -> dict[str, float]:
        totals = self.row_totals()
        out = {}
        for z in GazeZone:
            i = int(z)
            out[z.label] = 100.0 * self.counts[i, i] / totals[i] if totals[i] else float("nan")
        return out

    def macro_accuracy(self) -> float:
        """Unweighted mean of per-zone recall, in percent."""
        totals = self.row_totals()
        for z in GazeZone:
            if totals[int(z)] == 0:
                raise MetricError(f"zone {z.label} has no samples; macro-average accuracy is undefined")
        recalls = np.diag(self.counts) / totals
        return float(recalls.mean() * 100.0)

    def micro_accuracy(self) -> float:
        """Total correct over total population, in percent."""
        if self.total == 0:
            raise MetricError("empty confusion matrix; micro-average accuracy is undefined")
        return float(np.trace(self.counts) / self.total * 100.0)

    def summary(self) -> dict:
        return {
            "macro_accuracy": round2(self.macro_accuracy()),
            "micro_accuracy": round2(self.micro_accuracy()),
            "per_zone_recall": {k: round2(v) for k, v in self.per_zone_recall().items()},
            "total": self.total,
        }

    def write_reports(self, directory: str | Path, stem: str = "confusion") -> list[Path]:
        """CSV (counts), CSV (percentages) and a JSON summary."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        counts_path = directory / f"{stem}_counts.csv"
        with counts_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true_zone"] + list(ZONE_LABELS))
            for z in GazeZone:
                writer.writerow([z.label] + [int(c) for c in self.counts[int(z)]])
        paths.append(counts_path)
        pct = self.percent()
        pct_path = directory / f"{stem}_percent.csv"
        with pct_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true_zone"] + list(ZONE_LABELS))
            for z in GazeZone:
                writer.writerow([z.label] + [f"{v:.2f}" for v in pct[int(z)]])
        paths.append(pct_path)
        summary_path = directory / f"{stem}_summary.json"
        summary_path.write_text(json.dumps(self.summary(), indent=2))
        paths.append(summary_path)
        return paths


def build_confusion(predictions: Sequence[tuple[GazeZone, GazeZone]]) -> ConfusionMatrix:
    """Tally (true, predicted) pairs into a confusion matrix."""
    if not predictions:
        raise MetricError("cannot build a confusion matrix from zero predictions")
    cm = ConfusionMatrix()
    for true, pred in predictions:
        cm.add(true, pred)
    return cm


def macro_accuracy(cm: ConfusionMatrix) -> float:
    return cm.macro_accuracy()


def micro_accuracy(cm: ConfusionMatrix) -> float:
    return cm.micro_accuracy()


def normalized_entropy(dist: "ZoneDistribution | np.ndarray | Sequence[float]", n: int = ZONE_COUNT) -> float:
    """Shannon entropy scaled by log(n) into [0, 1]; 0*log(0) counts as 0.

    Internally evaluated in extended precision so the boundary cases (uniform
    -> 1, point mass -> 0) come out exact after the final rounding to double.
    """
    if n < 2:
        raise MetricError(f"normalized entropy needs at least 2 classes, got n={n}")
    probs = dist.probs if isinstance(dist, ZoneDistribution) else np.asarray(dist, dtype=np.float64)
    if np.any(probs < 0):
        raise MetricError("probabilities must be nonnegative")
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise MetricError(f"probabilities must sum to 1, got {total!r}")
    p = probs.astype(np.longdouble)
    mask = p > 0
    h = -(p[mask] * np.log(p[mask])).sum()
    value = float(h / np.log(np.longdouble(n)))
    return float(min(1.0, max(0.0, value)))


# --- published-table reconstruction and consistency -----------------------


def reconstruct_counts(percent_rows: Sequence[Sequence[float]], row_totals: Sequence[int]) -> ConfusionMatrix:
    """Rebuild integer counts from row percentages and per-row totals."""
    counts = np.zeros((ZONE_COUNT, ZONE_COUNT), dtype=np.int64)
    for i, (row, total) in enumerate(zip(percent_rows, row_totals)):
        for j, pct in enumerate(row):
            counts[i, j] = int(np.floor(pct * total / 100.0 + 0.5))
    return ConfusionMatrix(counts)


def consistency_report(tolerance: float = 0.01) -> list[dict]:
    """Cross-check each published confusion matrix against its captions.

    Recomputes the diagonal mean (the macro-average of the percentage rows)
    and both accuracies from reconstructed counts. Tables whose diagonal mean
    disagrees with the captioned macro value get flagged; in the published
    results several of those diagonal means match the captioned *micro* value
    instead, i.e. the macro/micro labels appear swapped or re-rounded.
    """
    rows = []
    for rc in reference.REPORTED_CONFUSIONS:
        diag_mean = float(np.mean([rc.percent[i][i] for i in range(ZONE_COUNT)]))
        cm = reconstruct_counts(rc.percent, reference.REPORTED_TEST_COUNTS)
        macro = cm.macro_accuracy()
        micro = cm.micro_accuracy()
        macro_caption_consistent = abs(diag_mean - rc.macro) <= tolerance
        matches_micro_caption = abs(diag_mean - rc.micro) <= tolerance
        note = ""
        if not macro_caption_consistent:
            if matches_micro_caption:
                note = (
                    "diagonal mean matches the captioned micro value; macro/micro captions "
                    "appear swapped or re-rounded for this table"
                )
            else:
                note = "diagonal mean does not match the captioned macro value"
        rows.append(
            {
                "name": rc.name,
                "reported_macro": rc.macro,
                "reported_micro": rc.micro,
                "recomputed_diagonal_mean": round2(diag_mean),
                "recomputed_macro": round2(macro),
                "recomputed_micro": round2(micro),
                "macro_caption_consistent": macro_caption_consistent,
                "note": note,
            }
        )
    return rows


# --- running a frozen model over labeled samples ---------------------------


@dataclass
class EvalOutcome:
    confusion: ConfusionMatrix
    dropped_no_face: int
    n_evaluated: int


def predict_zones(
    model: GazeModel,
    inputs: Sequence,
    batch_size: int = 32,
) -> list[GazeZone]:
    """Argmax predictions for a list of NetworkInputs, batched."""
    preds: list[GazeZone] = []
    model.net.eval()
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk = list(inputs[start : start + batch_size])
            x = model.to_batch(chunk)
            logits = model.forward_batch(x)
            preds.extend(GazeZone(int(i)) for i in logits.argmax(dim=1))
    return preds


def evaluate_samples(
    model: GazeModel,
    samples: Sequence[LabeledSample],
    pipeline: FramePipeline,
    batch_size: int = 32,
) -> EvalOutcome:
    """Run the frozen model over labeled frames and tally a confusion matrix.

    Frames where the detector finds no face are skipped and counted;
    evaluation is deterministic, so two runs over the same split produce
    identical matrices.
    """
    inputs, kept, dropped = pipeline.prepare_samples(samples, on_no_face="skip")
    if not kept:
        raise MetricError("no evaluable frames (all dropped by face detection?)")
    preds = predict_zones(model, inputs, batch_size)
    cm = build_confusion([(s.zone, p) for s, p in zip(kept, preds)])
    return EvalOutcome(confusion=cm, dropped_no_face=dropped, n_evaluated=len(kept))


# --- ablation grid ----------------------------------------------------------


@dataclass
class AblationCell:
    family: str
    strategy: str
    macro: float | None = None
    run_dir: str | None = None
    error: str | None = None


@dataclass
class AblationGrid:
    families: list[str]
    strategies: list[str]
    cells: dict[tuple[str, str], AblationCell] = field(default_factory=dict)

    def cell(self, family: str, strategy: str) -> AblationCell:
        return self.cells[(family, strategy)]

    def format_table(self, annotate_reference: bool = True) -> str:
        """Human-readable grid, 2-decimal accuracies, failed cells marked."""
        width = 18
        lines = ["".join(["architecture".ljust(width)] + [s.ljust(width) for s in self.strategies])]
        for fam in self.families:
            row = [fam.ljust(width)]
            for strat in self.strategies:
                c = self.cells[(fam, strat)]
                row.append(("failed" if c.macro is None else f"{round2(c.macro):.2f}").ljust(width))
            lines.append("".join(row))
        if annotate_reference:
            lines.append("")
            lines.append(f"# {reference.REFERENCE_DISCLAIMER}")
            for fam in self.families:
                ref = reference.REPORTED_ABLATION_MACRO.get(fam)
                if ref:
                    vals = "  ".join(f"{s}={ref[s]:.2f}" for s in self.strategies if s in ref)
                    lines.append(f"# reference {fam}: {vals}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "families": self.families,
            "strategies": self.strategies,
            "cells": [
                {
                    "family": c.family,
                    "strategy": c.strategy,
                    "macro_accuracy": None if c.macro is None else round2(c.macro),
                    "run_dir": c.run_dir,
                    "error": c.error,
                }
                for c in self.cells.values()
            ],
            "reference": reference.REPORTED_ABLATION_MACRO,
            "reference_note": reference.REFERENCE_DISCLAIMER,
        }


def ablation_grid(
    run_cell: Callable[[str, str], tuple[float, str | None]],
    families: Sequence[str],
    strategies: Sequence[str],
) -> AblationGrid:
    """Train+evaluate every (backbone, crop strategy) combination.

    ``run_cell(family, strategy)`` must return (macro accuracy %, run dir).
    A failing cell is recorded and the rest of the grid still runs.
    """
    grid = AblationGrid(families=list(families), strategies=list(strategies))
    for fam in families:
        for strat in strategies:
            try:
                macro, run_dir = run_cell(fam, strat)
                grid.cells[(fam, strat)] = AblationCell(fam, strat, macro=macro, run_dir=run_dir)
            except Exception as exc:
                log.warning("ablation cell (%s, %s) failed: %s", fam, strat, exc)
                grid.cells[(fam, strat)] = AblationCell(fam, strat, error=str(exc))
    return grid


# --- resolution study -------------------------------------------------------


@dataclass
class ResolutionRow:
    resolution: int
    macro: float
    n_evaluated: int
    reported_reference: float | None


def resolution_study(
    model: GazeModel,
    resolutions: Sequence[int],
    samples: Sequence[LabeledSample],
    make_pipeline: Callable[[int], FramePipeline],
    batch_size: int = 16,
) -> list[ResolutionRow]:
    """Evaluate one variable-resolution model at several input sizes.

    ``make_pipeline(resolution)`` supplies the preprocessing for each size.
    Published reference accuracies for the detector-free setting are attached
    where available, annotation only.
    """
    if not model.accepts_variable_resolution:
        raise ResolutionError(
            "resolution study needs a variable-resolution model; convert a conv_gap model "
            "with make_variable_resolution() first"
        )
    rows = []
    for res in resolutions:
        outcome = evaluate_samples(model, samples, make_pipeline(res), batch_size)
        rows.append(
            ResolutionRow(
                resolution=res,
                macro=outcome.confusion.macro_accuracy(),
                n_evaluated=outcome.n_evaluated,
                reported_reference=reference.REPORTED_RESOLUTION_MACRO.get(res),
            )
        )
    return rows


# --- inference timing -------------------------------------------------------


@dataclass
class BenchmarkResult:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    iterations: int
    resolution: int
    end_to_end: bool = False
    reference_ms: list[tuple[str, int, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "iterations": self.iterations,
            "resolution": self.resolution,
            "end_to_end": self.end_to_end,
            "reference_forward_ms": [
                {"family": f, "resolution": r, "ms": ms} for f, r, ms in self.reference_ms
            ],
            "reference_note": reference.REFERENCE_DISCLAIMER,
        }


def _timing_stats(samples_ms: list[float], resolution: int, end_to_end: bool = False) -> BenchmarkResult:
    arr = np.asarray(samples_ms)
    return BenchmarkResult(
        mean_ms=float(arr.mean()),
        p50_ms=float(np.percentile(arr, 50)),
        p95_ms=float(np.percentile(arr, 95)),
        iterations=len(samples_ms),
        resolution=resolution,
        end_to_end=end_to_end,
        reference_ms=list(reference.REPORTED_FORWARD_MS),
    )


def benchmark_inference(
    model: GazeModel,
    resolution: int | None = None,
    iterations: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> BenchmarkResult:
    """Wall-clock stats for single-image forward passes.

    Times only the forward pass (no detection, no preprocessing). Published
    timings ride along as hardware-specific annotations, never as targets.
    """
    if iterations < 30:
        raise ValueError(f"need at least 30 timed iterations for stable percentiles, got {iterations}")
    res = resolution or model.spec.native_input
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((1, 3, res, res)).astype(np.float32))
    model._check_resolution(x)
    model.net.eval()
    samples_ms = []
    with torch.no_grad():
        for _ in range(warmup):
            model.forward_batch(x)
        for _ in range(iterations):
            t0 = time.perf_counter()
            model.forward_batch(x)
            samples_ms.append((time.perf_counter() - t0) * 1000.0)
    return _timing_stats(samples_ms, res)


def benchmark_end_to_end(
    model: GazeModel,
    frame: np.ndarray,
    pipeline: FramePipeline,
    iterations: int = 100,
    warmup: int = 10,
) -> BenchmarkResult:
    """Time detector + crop + normalize + forward on one frame."""
    if iterations < 30:
        raise ValueError(f"need at least 30 timed iterations for stable percentiles, got {iterations}")

    def run_once() -> None:
        inp = pipeline.prepare_frame(frame)
        with torch.no_grad():
            model.forward_batch(model.to_batch(inp))

    samples_ms = []
    for _ in range(warmup):
        run_once()
    for _ in range(iterations):
        t0 = time.perf_counter()
        run_once()
        samples_ms.append((time.perf_counter() - t0) * 1000.0)
    return _timing_stats(samples_ms, pipeline.target, end_to_end=True)


# --- cross-dataset protocol -------------------------------------------------

HEAD_POSES = (-30, -5, 0, 5, 30)
HORIZONTAL_GAZES = (-15, -10, -5, 0, 5, 10, 15)
VERTICAL_GAZES = (-10, 0, 10)


@dataclass(frozen=True, order=True)
class PoseGazeConfiguration:
    """One of the 105 (head pose, horizontal gaze, vertical gaze) settings."""

    head_pose: int
    h_gaze: int
    v_gaze: int

    def __post_init__(self):
        if self.head_pose not in HEAD_POSES:
            raise ValueError(f"head pose {self.head_pose} not in {HEAD_POSES}")
        if self.h_gaze not in HORIZONTAL_GAZES:
            raise ValueError(f"horizontal gaze {self.h_gaze} not in {HORIZONTAL_GAZES}")
        if self.v_gaze not in VERTICAL_GAZES:
            raise ValueError(f"vertical gaze {self.v_gaze} not in {VERTICAL_GAZES}")

    @property
    def label(self) -> str:
        return f"P{self.head_pose:+03d}_H{self.h_gaze:+03d}_V{self.v_gaze:+03d}"


def all_configurations() -> list[PoseGazeConfiguration]:
    return [
        PoseGazeConfiguration(p, h, v)
        for p in HEAD_POSES
        for h in HORIZONTAL_GAZES
        for v in VERTICAL_GAZES
    ]


@dataclass(frozen=True)
class SubjectImage:
    subject_id: str
    configuration: PoseGazeConfiguration
    image_path: str


def load_subject_grid_manifest(path: str | Path) -> list[SubjectImage]:
    """Read a `subject_id,head_pose_deg,h_gaze_deg,v_gaze_deg,image_path` CSV."""
    path = Path(path)
    rows: list[SubjectImage] = []
    seen: set[tuple[str, PoseGazeConfiguration]] = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "head_pose_deg", "h_gaze_deg", "v_gaze_deg", "image_path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: manifest must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                config = PoseGazeConfiguration(
                    int(row["head_pose_deg"]), int(row["h_gaze_deg"]), int(row["v_gaze_deg"])
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key = (row["subject_id"], config)
            if key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate image for subject {row['subject_id']} at {config.label}")
            seen.add(key)
            rows.append(SubjectImage(row["subject_id"], config, row["image_path"]))
    return rows


@dataclass
class ConfigurationHistogram:
    """Predicted-zone distribution over subjects for one configuration."""

    configuration: PoseGazeConfiguration
    fractions: ZoneDistribution
    entropy: float
    majority_zone: GazeZone | None
    evaluated: int
    expected: int

    def to_json(self) -> dict:
        return {
            "configuration": {
                "head_pose_deg": self.configuration.head_pose,
                "h_gaze_deg": self.configuration.h_gaze,
                "v_gaze_deg": self.configuration.v_gaze,
                "label": self.configuration.label,
            },
            "fractions": self.fractions.as_dict(),
            "normalized_entropy": self.entropy,
            "majority_zone": self.majority_zone.label if self.majority_zone else None,
            "coverage": {"evaluated": self.evaluated, "expected": self.expected},
        }


def cross_dataset_eval(
    model: GazeModel,
    rows: Sequence[SubjectImage],
    pipeline: FramePipeline,
    majority_threshold: float = MAJORITY_THRESHOLD,
) -> list[ConfigurationHistogram]:
    """Predict zones for every subject image, per pose-gaze configuration.

    For each configuration: the fraction of subjects landing on each zone,
    its normalized entropy (n = 7), and a majority flag when one zone clears
    ``majority_threshold``. Missing or undetectable images shrink that
    configuration's coverage rather than failing the run.
    """
    by_config: dict[PoseGazeConfiguration, list[SubjectImage]] = defaultdict(list)
    for row in rows:
        by_config[row.configuration].append(row)
    expected_subjects = len({row.subject_id for row in rows})

    histograms: list[ConfigurationHistogram] = []
    for config in sorted(by_config):
        predictions: list[GazeZone] = []
        for row in by_config[config]:
            try:
                inp = pipeline.prepare_frame_ref(row.image_path)
            except (NoFaceError, FileNotFoundError, OSError) as exc:
                log.info("skipping %s at %s: %s", row.subject_id, config.label, exc)
                continue
            predictions.append(model.forward(inp).predicted)
        if not predictions:
            log.warning("configuration %s has no evaluable images", config.label)
            continue
        fractions = zone_histogram(predictions)
        majority = None
        top = int(np.argmax(fractions.probs))
        if float(fractions.probs[top]) > majority_threshold:
            majority = GazeZone(top)
        histograms.append(
            ConfigurationHistogram(
                configuration=config,
                fractions=fractions,
                entropy=normalized_entropy(fractions, ZONE_COUNT),
                majority_zone=majority,
                evaluated=len(predictions),
                expected=expected_subjects,
            )
        )
    return histograms


def write_histogram_report(histograms: Sequence[ConfigurationHistogram], path: str | Path) -> None:
    Path(path).write_text(json.dumps([h.to_json() for h in histograms], indent=2))


def save_histogram_charts(histograms: Sequence[ConfigurationHistogram], directory: str | Path) -> list[Path]:
    """One bar chart per configuration (static PNG artifacts)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in histograms:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(range(ZONE_COUNT), h.fractions.probs * 100.0, color="#3465a4")
        ax.set_xticks(range(ZONE_COUNT))
        ax.set_xticklabels(ZONE_LABELS, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("% of subjects")
        ax.set_ylim(0, 100)
        ax.set_title(f"{h.configuration.label}  entropy={h.entropy:.3f}", fontsize=9)
        fig.tight_layout()
        out = directory / f"{h.configuration.label}.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        paths.append(out)
    return paths
