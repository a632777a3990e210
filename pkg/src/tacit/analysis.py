"""Metrics for how a solution path appears along an Euler trajectory."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from tacit.imageio import to_float
from tacit.maze import SolutionPath, generate_maze, path_pixel_mask, solve_maze
from tacit.sampler import euler_sample

RED_THRESHOLD = 0.5
ONSET_RECALL = 0.05
COMPLETION_RECALL = 0.95
SEGMENT_RECALL = 0.5
PSNR_CAP = 99.0
DEFAULT_SWEEP = (5, 10, 20, 50, 100)

# grid values like 0.7 are not exact in binary; compare times with this slack
_T_EPS = 1e-9


class UndefinedRecallError(ValueError):
    pass


class PathTooShortError(ValueError):
    pass


def red_mask(image: np.ndarray, threshold: float = RED_THRESHOLD) -> np.ndarray:
    """Pixels of a ``(3, H, W)`` float image with R above and G, B below ``threshold``."""
    x = np.clip(np.asarray(image), 0.0, 1.0)
    return (x[0] > threshold) & (x[1] < threshold) & (x[2] < threshold)


def path_recall(pred: np.ndarray, gt: np.ndarray) -> float:
    n = int(gt.sum())
    if n == 0:
        raise UndefinedRecallError("ground-truth mask is empty")
    return int((pred & gt).sum()) / n


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def l2_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` for identical images."""
    mse = l2_distance(pred, gt)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped(db: float) -> float:
    return min(db, PSNR_CAP)


# --- emergence -----------------------------------------------------------------------


def emergence_curve(traj, gt: np.ndarray) -> list[tuple[float, float]]:
    """Recall of the red mask at each recorded time (states are clamped before masking)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return [(t, path_recall(red_mask(s), gt)) for t, s in traj]


@dataclass
class SampleTransition:
    onset: float | None
    completion: float | None
    recall_at_onset: float | None
    final_recall: float
    final_iou: float | None = None

    @property
    def width(self) -> float | None:
        if self.onset is None or self.completion is None:
            return None
        return self.completion - self.onset

    @property
    def emerged(self) -> bool:
        return self.onset is not None


def detect_transition(
    curve: Sequence[tuple[float, float]], onset: float = ONSET_RECALL, completion: float = COMPLETION_RECALL
) -> SampleTransition:
    """Onset is the first time recall exceeds ``onset``; completion the first above ``completion``."""
    t_on = r_on = t_done = None
    for t, r in curve:
        if t_on is None and r > onset:
            t_on, r_on = t, r
        if t_done is None and r > completion:
            t_done = t
    return SampleTransition(t_on, t_done, r_on, curve[-1][1])


@dataclass
class TransitionReport:
    samples: list[SampleTransition]

    @staticmethod
    def _stats(values) -> tuple[float, float] | None:
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        return float(np.mean(vals)), float(np.std(vals))

    def summary(self) -> dict[str, tuple[float, float] | None]:
        s = self.samples
        return {
            "onset": self._stats(x.onset for x in s),
            "completion": self._stats(x.completion for x in s),
            "width": self._stats(x.width for x in s),
            "recall_at_onset": self._stats(x.recall_at_onset for x in s),
            "final_recall": self._stats(x.final_recall for x in s),
            "final_iou": self._stats(x.final_iou for x in s),
        }

    @property
    def never_emerged(self) -> int:
        return sum(not x.emerged for x in self.samples)

    def write_csv(self, path: str | os.PathLike) -> None:
        def fmt(v):
            return "" if v is None else repr(v)

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "onset", "completion", "width", "recall_at_onset", "final_recall", "final_iou"])
            for i, x in enumerate(self.samples):
                w.writerow([i, *map(fmt, (x.onset, x.completion, x.width, x.recall_at_onset, x.final_recall, x.final_iou))])


# --- segments -------------------------------------------------------------------------


@dataclass
class SegmentOnsets:
    onsets: tuple[float | None, float | None, float | None]  # start, middle, end
    simultaneous: bool


@dataclass
class SegmentReport:
    entries: list[SegmentOnsets] = field(default_factory=list)

    @property
    def fraction_simultaneous(self) -> float:
        if not self.entries:
            return 0.0
        return sum(e.simultaneous for e in self.entries) / len(self.entries)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "onset_start", "onset_middle", "onset_end", "simultaneous"])
            for i, e in enumerate(self.entries):
                w.writerow([i, *("" if o is None else repr(o) for o in e.onsets), int(e.simultaneous)])


def split_thirds(cells: Sequence) -> list[list]:
    """Three contiguous runs; remainder cells go to the earlier runs."""
    base, rem = divmod(len(cells), 3)
    out, i = [], 0
    for k in range(3):
        n = base + (1 if k < rem else 0)
        out.append(list(cells[i : i + n]))
        i += n
    return out


def segment_onsets(
    traj, path: SolutionPath, size: int, resolution: int, threshold: float = SEGMENT_RECALL
) -> SegmentOnsets:
    """Onset of the start, middle and end thirds of the red (interior) solution cells.

    Simultaneous when all three onsets exist and span at most one Euler step.
    """
    cells = path.interior()
    if len(cells) < 3:
        raise PathTooShortError(f"need >= 3 interior path cells, got {len(cells)}")
    masks = [path_pixel_mask(seg, size, resolution) for seg in split_thirds(cells)]
    onsets: list[float | None] = [None, None, None]
    for t, state in traj:
        red = red_mask(state)
        for k, m in enumerate(masks):
            if onsets[k] is None and path_recall(red, m) > threshold:
                onsets[k] = t
    steps = len(traj) - 1
    ok = all(o is not None for o in onsets)
    simultaneous = ok and (max(onsets) - min(onsets)) <= 1.0 / steps + _T_EPS  # type: ignore[type-var]
    return SegmentOnsets(tuple(onsets), simultaneous)  # type: ignore[arg-type]


# --- step sweep -------------------------------------------------------------------------


@dataclass
class StepSweepRow:
    steps: int
    iou: float
    psnr: float


def steps_sweep(
    field_fn: Callable, x0: np.ndarray, x1: np.ndarray, step_counts: Sequence[int] = DEFAULT_SWEEP, chunk: int = 64
) -> list[StepSweepRow]:
    """Mean red-path IoU and mean PSNR (each capped at 99 dB) per Euler step count.

    ``x0``/``x1`` are float ``(B, 3, R, R)`` problem and solution batches.
    """
    rows = []
    gts = [red_mask(g) for g in x1]
    for n in step_counts:
        preds = [euler_sample(x0[i : i + chunk], field_fn, n)[0] for i in range(0, len(x0), chunk)]
        pred = np.concatenate(preds)
        ious = [iou(red_mask(p), g) for p, g in zip(pred, gts)]
        psnrs = [capped(psnr(p, g)) for p, g in zip(pred, x1)]
        rows.append(StepSweepRow(n, float(np.mean(ious)), float(np.mean(psnrs))))
    return rows


def write_sweep_csv(rows: Sequence[StepSweepRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["N", "iou", "psnr"])
        for r in rows:
            w.writerow([r.steps, repr(r.iou), repr(capped(r.psnr))])


def write_emergence_csv(curves: Sequence[Sequence[tuple[float, float]]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "t", "recall"])
        for i, curve in enumerate(curves):
            for t, r in curve:
                w.writerow([i, repr(t), repr(r)])


# --- sample-level pipelines ------------------------------------------------------------


def _trajectories(field_fn: Callable, samples, steps: int, chunk: int = 64):
    """Yield ``(sample, per-sample Trajectory)`` for a list of :class:`PairSample`."""
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        x0 = to_float(np.stack([s.input for s in part]))
        _, traj = euler_sample(x0, field_fn, steps, record=True)
        for b, s in enumerate(part):
            yield s, traj.sample(b)


def emergence_report(field_fn: Callable, samples, steps: int = 50) -> tuple[list, TransitionReport]:
    """Recall curves and per-sample transition statistics over ``samples``."""
    curves, rows = [], []
    for s, traj in _trajectories(field_fn, samples, steps):
        gt = red_mask(to_float(s.target))
        curve = emergence_curve(traj, gt)
        row = detect_transition(curve)
        row.final_iou = iou(red_mask(traj.states[-1]), gt)
        curves.append(curve)
        rows.append(row)
    return curves, TransitionReport(rows)


def segment_report(field_fn: Callable, samples, steps: int = 50) -> SegmentReport:
    report = SegmentReport()
    for s, traj in _trajectories(field_fn, samples, steps):
        path = solve_maze(generate_maze(s.size, s.seed))
        report.entries.append(segment_onsets(traj, path, s.size, s.resolution))
    return report
