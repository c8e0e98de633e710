"""Temporal helpers: stride subsampling, interleaving and median smoothing.

Frame indices are 0-based internally; subsequence ``m`` (0-based) holds the
frames ``m, m+M, m+2M, ...`` so that the ``M`` subsequences partition the
video.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

RADIUS_CANDIDATES = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class PredictionSequence:
    values: np.ndarray
    video_id: str = ""
    probabilities: bool = True
    phase: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) == 0:
            raise ValueError("empty prediction sequence")
        if self.probabilities and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("probabilities outside [0, 1]")


@dataclass
class RadiusTable:
    radii: list[int]
    candidates: tuple[int, ...] = RADIUS_CANDIDATES
    selected_from_data: list[bool] = field(default_factory=list)

    def __post_init__(self):
        for r in self.radii:
            if r not in self.candidates:
                raise ValueError(f"radius {r} not among candidates {self.candidates}")

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "candidates": list(self.candidates),
                "selected_from_data": list(self.selected_from_data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RadiusTable":
        return cls(list(d["radii"]), tuple(d["candidates"]), list(d.get("selected_from_data", [])))


def subsample_indices(length: int, M: int) -> list[np.ndarray]:
    if M < 1 or M > length:
        raise ValueError(f"subsampling factor {M} outside [1, {length}]")
    return [np.arange(m, length, M) for m in range(M)]


def subsample(V, M: int) -> list:
    """Split ``V`` (indexable along axis 0) into ``M`` stride-``M`` subsequences."""
    return [V[idx] for idx in subsample_indices(len(V), M)]


def interleave(parts: Sequence[np.ndarray], length: int) -> np.ndarray:
    """Inverse of :func:`subsample`: frame ``u`` comes from part ``u mod M``."""
    M = len(parts)
    expected = [len(i) for i in subsample_indices(length, M)]
    if [len(p) for p in parts] != expected:
        raise ValueError(f"part lengths {[len(p) for p in parts]} inconsistent with length {length}")
    first = np.asarray(parts[0])
    out = np.empty((length,) + first.shape[1:], dtype=first.dtype)
    for m, p in enumerate(parts):
        out[m::M] = p
    return out


def median_filter(seq: np.ndarray, radii) -> np.ndarray:
    """Per-channel running median over ``[t-R, t+R]`` with reflect padding.

    ``seq`` is ``(T,)`` or ``(T, tools)``; ``radii`` is a scalar or one radius
    per tool.
    """
    seq = np.asarray(seq, dtype=np.float64)
    flat = seq.ndim == 1
    x = seq[:, None] if flat else seq
    radii = np.broadcast_to(np.asarray(radii, dtype=int), (x.shape[1],))
    if np.any(radii < 0):
        raise ValueError("radius must be nonnegative")
    out = np.empty_like(x)
    for j, r in enumerate(radii):
        if r == 0:
            out[:, j] = x[:, j]
            continue
        # reflection about the edge sample: d c b | a b c d | c b a
        padded = np.pad(x[:, j], int(r), mode="reflect")
        out[:, j] = np.median(sliding_window_view(padded, 2 * int(r) + 1), axis=1)
    return out[:, 0] if flat else out


def select_radii(predictions: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                 candidates: Sequence[int] = RADIUS_CANDIDATES) -> RadiusTable:
    """Per-tool radius maximizing validation Az of the smoothed predictions.

    ``predictions`` and ``labels`` are lists of ``(T, tools)`` arrays, one per
    video.  Ties go to the smaller radius; tools without both classes in
    validation take the most frequently selected radius.
    """
    from .metrics import roc_auc

    candidates = tuple(sorted(candidates))
    if not candidates:
        raise ValueError("empty candidate set")
    if len(predictions) == 0:
        raise ValueError("empty validation set")
    n_tools = predictions[0].shape[1]
    lab = np.concatenate([np.asarray(l) for l in labels])
    smoothed = {r: np.concatenate([median_filter(p, r) for p in predictions]) for r in candidates}
    chosen: list[int | None] = []
    for j in range(n_tools):
        y = lab[:, j] > 0
        if y.all() or not y.any():
            chosen.append(None)
            continue
        best_r, best_az = None, -np.inf
        for r in candidates:
            az = roc_auc(smoothed[r][:, j], y)
            if az > best_az:
                best_r, best_az = r, az
        chosen.append(best_r)
    picked = [r for r in chosen if r is not None]
    if picked:
        counts = Counter(picked)
        top = max(counts.values())
        fallback = min(r for r, c in counts.items() if c == top)
    else:
        fallback = candidates[0]
    return RadiusTable([fallback if r is None else r for r in chosen], candidates,
                       [r is not None for r in chosen])
