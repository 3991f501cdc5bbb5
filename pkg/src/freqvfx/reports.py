"""CSV report emitters for descriptor trajectories and training traces."""

from __future__ import annotations

import io
import os

import numpy as np

from .errors import ParameterError, ShapeError

SPECTRAL_HEADER = "t,e_app_0,e_app_1,e_app_2,e_vfx_0,e_vfx_1,e_vfx_2"


def _fmt(v: float) -> str:
    return f"{float(v):.6g}"


def emit_spectral_report(trajectory, timesteps=None) -> str:
    """CSV of joint descriptors over sampling steps, 6 significant digits.

    `trajectory` is (steps, 6) or (steps, B, 6); batched input is averaged
    over the batch axis. `timesteps` labels the rows (defaults to 0..steps-1).
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.size == 0:
        raise ParameterError("descriptor trajectory is empty")
    if traj.ndim == 3:
        traj = traj.mean(axis=1)
    if traj.ndim != 2 or traj.shape[1] != 6:
        raise ShapeError(f"trajectory must be (steps, 6) or (steps, B, 6), got {np.asarray(trajectory).shape}")
    if timesteps is None:
        ts = list(range(traj.shape[0]))
    else:
        ts = [int(t) for t in np.asarray(timesteps).ravel()]
        if len(ts) != traj.shape[0]:
            raise ShapeError(f"{len(ts)} timesteps for {traj.shape[0]} trajectory rows")
    buf = io.StringIO()
    buf.write(SPECTRAL_HEADER + "\n")
    for t, row in zip(ts, traj):
        buf.write(",".join([str(t)] + [_fmt(v) for v in row]) + "\n")
    return buf.getvalue()


def parse_spectral_report(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of emit_spectral_report: (timesteps, (steps, 6) values)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != SPECTRAL_HEADER:
        raise ParameterError("not a spectral report: header mismatch")
    ts, rows = [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != 7:
            raise ParameterError(f"malformed report row: {ln!r}")
        ts.append(int(cells[0]))
        rows.append([float(c) for c in cells[1:]])
    return np.array(ts), np.array(rows, dtype=np.float64)


def train_metrics_csv(metrics) -> str:
    """Stage-1 trace: step,loss,pi_mean_0..pi_mean_{M-1},class_id."""
    if not metrics:
        raise ParameterError("no training metrics to report")
    m = len(metrics[0].pi_mean)
    buf = io.StringIO()
    cols = ["step", "loss"] + [f"pi_mean_{i}" for i in range(m)] + ["class_id"]
    buf.write(",".join(cols) + "\n")
    for row in metrics:
        if len(row.pi_mean) != m:
            raise ShapeError("inconsistent routing width across metric rows")
        cells = [str(row.step), _fmt(row.loss)]
        cells += [_fmt(v) for v in row.pi_mean]
        cells.append(str(row.class_id))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def adapt_trace_csv(trace) -> str:
    """Stage-2 trace: step,t,loss."""
    if not trace:
        raise ParameterError("no adaptation steps to report")
    buf = io.StringIO()
    buf.write("step,t,loss\n")
    for row in trace:
        buf.write(f"{row.step},{row.t},{_fmt(row.loss)}\n")
    return buf.getvalue()


def write_text(path, text: str) -> None:
    tmp = f"{os.fspath(path)}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, os.fspath(path))
