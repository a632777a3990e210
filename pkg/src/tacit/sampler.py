"""Deterministic Euler integration of a velocity field from t=0 to t=1."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from tacit.imageio import to_u8, write_ppm

VelocityField = Callable[[np.ndarray, float], np.ndarray]

DEFAULT_STEPS = 10


@dataclass
class Trajectory:
    """States ``x(t)`` at ``t = i/N``; the last state is the clipped output."""

    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    unclipped_final: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(zip(self.times, self.states))

    def sample(self, b: int) -> "Trajectory":
        """Per-sample view of a batched trajectory."""
        return Trajectory(
            list(self.times),
            [s[b] for s in self.states],
            None if self.unclipped_final is None else self.unclipped_final[b],
        )


def time_grid(steps: int) -> list[float]:
    return [float(Fraction(i, steps)) for i in range(steps + 1)]


def euler_sample(
    x0: np.ndarray,
    field_fn: VelocityField,
    steps: int = DEFAULT_STEPS,
    record: bool = False,
    clip_each_step: bool = False,
    expected_shape: tuple[int, ...] | None = None,
) -> tuple[np.ndarray, Trajectory | None]:
    """Integrate ``dx/dt = field_fn(x, t)`` with ``steps`` forward Euler steps.

    The model sees the left endpoint ``t = i/N`` of each step. Only the
    returned output is clipped to [0, 1] unless ``clip_each_step`` is set.
    ``x0`` keeps its dtype, so float64 stubs integrate in float64.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if expected_shape is not None and tuple(x0.shape[-len(expected_shape) :]) != tuple(expected_shape):
        raise ValueError(f"input shape {x0.shape} does not match model shape {expected_shape}")
    times = time_grid(steps)
    dt = 1.0 / steps
    x = np.array(x0, copy=True)
    traj = Trajectory([times[0]], [x.copy()]) if record else None
    for i in range(steps):
        v = field_fn(x, times[i])
        x = x + v * dt
        if clip_each_step:
            x = np.clip(x, 0.0, 1.0)
        if traj is not None and i < steps - 1:
            traj.times.append(times[i + 1])
            traj.states.append(x.copy())
    out = np.clip(x, 0.0, 1.0)
    if traj is not None:
        traj.times.append(times[steps])
        traj.states.append(out.copy())
        traj.unclipped_final = x
    return out, traj


def export_trajectory(traj: Trajectory, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``step_%03d.ppm`` per state plus ``trajectory.csv`` (step, t)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, state in enumerate(traj.states):
        p = out / f"step_{i:03d}.ppm"
        write_ppm(p, to_u8(state))
        paths.append(p)
    with open(out / "trajectory.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t"])
        for i, t in enumerate(traj.times):
            w.writerow([i, repr(t)])
    return paths
