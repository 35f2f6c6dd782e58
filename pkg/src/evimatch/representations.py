"""Dense tensor representations of event windows.

Each builder turns an event stream (usually a fixed-duration window) into a
(C, H, W) float32 grid suitable for a convolutional extractor: a voxel grid
with bilinear splatting along time, a per-polarity exponential time surface,
or a stack of signed count images.  ``normalize`` standardizes a tensor over
its nonzero support only, so sparse grids are not drowned by the zero
background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream


@dataclass
class EventTensor:
    """A (C, H, W) float32 grid built from one event window."""

    data: np.ndarray
    kind: str
    t_start: float
    t_end: float

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("event tensor must be (C, H, W)")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def window(self):
        return (self.t_start, self.t_end)


def voxel_grid(stream: EventStream, bins: int = 16) -> EventTensor:
    """Signed polarity mass splatted bilinearly over `bins` temporal slices.

    Each event lands at the continuous bin coordinate
    t* = (t - t_start) / (t_end - t_start) * (bins - 1) and splits its
    polarity between floor(t*) and floor(t*)+1 with linear weights.  A
    zero-duration window puts everything in bin 0.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    t0, t1 = stream.extent()
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    n = len(stream)
    if n:
        dur = t1 - t0
        if dur > 0 and bins > 1:
            tstar = (stream.ts - t0) / dur * (bins - 1)
        else:
            tstar = np.zeros(n)
        i0 = np.floor(tstar).astype(np.int64)
        np.clip(i0, 0, bins - 1, out=i0)
        frac = tstar - i0
        pix = stream.ys.astype(np.int64) * stream.width + stream.xs
        flat = grid.reshape(bins, -1)
        pol = stream.ps.astype(np.float64)
        np.add.at(flat, (i0, pix), pol * (1.0 - frac))
        right = i0 + 1 < bins
        np.add.at(flat, (i0[right] + 1, pix[right]), pol[right] * frac[right])
    return EventTensor(grid, "voxel", t0, t1)


def time_surface(stream: EventStream, tau: float | None = None) -> EventTensor:
    """Exponential decay image of the most recent event per pixel.

    Two channels, negative polarity first: channel (p + 1) / 2 holds
    exp(-(t_end - t_last) / tau) where t_last is the newest event of that
    polarity at the pixel.  tau defaults to half the window duration; a
    zero-duration window writes 1.0 at every event pixel.
    """
    if tau is not None and tau <= 0:
        raise ValueError("tau must be positive")
    t0, t1 = stream.extent()
    dur = t1 - t0
    if tau is None:
        tau = dur / 2.0
    surf = np.zeros((2, stream.height, stream.width), dtype=np.float64)
    if len(stream):
        # events are time-sorted, so later writes win: each pixel ends up
        # holding the timestamp of its most recent event of each polarity
        last = np.full((2, stream.height, stream.width), -np.inf)
        ch = ((stream.ps.astype(np.int64) + 1) // 2)
        last[ch, stream.ys, stream.xs] = stream.ts
        seen = np.isfinite(last)
        if tau > 0:
            surf[seen] = np.exp(-(t1 - last[seen]) / tau)
        else:
            surf[seen] = 1.0
    return EventTensor(surf, "time_surface", t0, t1)


def event_stack(stream: EventStream, slices: int = 16) -> EventTensor:
    """Signed event counts over equal-duration slices of the window.

    Slice k covers [t_start + k * dur / bins, t_start + (k+1) * dur / bins);
    the final slice is closed on the right so t == t_end is kept.
    """
    if slices < 1:
        raise ValueError("slices must be >= 1")
    t0, t1 = stream.extent()
    grid = np.zeros((slices, stream.height, stream.width), dtype=np.float64)
    if len(stream):
        dur = t1 - t0
        if dur > 0:
            idx = np.floor((stream.ts - t0) / dur * slices).astype(np.int64)
            np.clip(idx, 0, slices - 1, out=idx)
        else:
            idx = np.zeros(len(stream), dtype=np.int64)
        pix = stream.ys.astype(np.int64) * stream.width + stream.xs
        np.add.at(grid.reshape(slices, -1), (idx, pix), stream.ps.astype(np.float64))
    return EventTensor(grid, "stack", t0, t1)


def normalize_tensor(tensor: EventTensor) -> EventTensor:
    """Standardize to zero mean / unit std over the nonzero entries only.

    Zero entries stay exactly zero.  A std below 1e-6 is clamped to 1 so
    near-constant support does not blow up.  An all-zero tensor is returned
    unchanged.
    """
    data = tensor.data.astype(np.float64)
    support = data != 0
    if not support.any():
        return EventTensor(tensor.data.copy(), tensor.kind, tensor.t_start, tensor.t_end)
    vals = data[support]
    mean = vals.mean()
    std = vals.std()
    if std < 1e-6:
        std = 1.0
    out = np.zeros_like(data)
    out[support] = (vals - mean) / std
    return EventTensor(out, tensor.kind, tensor.t_start, tensor.t_end)


def build_representation(stream: EventStream, kind: str, bins: int = 16,
                         tau: float | None = None, standardize: bool = True) -> EventTensor:
    """Dispatch on representation name: 'voxel', 'time_surface' or 'stack'."""
    if kind == "voxel":
        t = voxel_grid(stream, bins=bins)
    elif kind == "time_surface":
        t = time_surface(stream, tau=tau)
    elif kind == "stack":
        t = event_stack(stream, slices=bins)
    else:
        raise ValueError(f"unknown representation kind {kind!r}")
    return normalize_tensor(t) if standardize else t
