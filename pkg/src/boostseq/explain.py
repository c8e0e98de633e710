"""Sensitivity heatmaps for CNN weak learners and input-output gradients of RNN blocks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .weak_learners import WeakLearner, pad_batch


@dataclass
class Heatmap:
    values: np.ndarray
    source: str = ""
    frame: str = ""

    def normalized(self) -> np.ndarray:
        """Min-max scaled to 0..255 as uint8; a flat map becomes all zeros."""
        v = self.values
        span = v.max() - v.min()
        if span == 0:
            return np.zeros(v.shape, dtype=np.uint8)
        return np.round(255.0 * (v - v.min()) / span).astype(np.uint8)


@dataclass
class GradientMatrix:
    values: np.ndarray
    frames: int = 0

    def off_diagonal_max(self) -> float:
        off = self.values - np.diag(np.diag(self.values))
        return float(np.abs(off).max()) if off.size else 0.0


def _as_block(model) -> list[tuple[WeakLearner, float]]:
    if isinstance(model, WeakLearner):
        return [(model, 1.0)]
    return list(model)


def hue_sensitivity(model, frame: np.ndarray, frame_id: str = "") -> Heatmap:
    """``|d sum_theta H(m * I) / d m|`` at ``m = 1`` for a per-pixel mask ``m``.

    ``model`` is a CNN weak learner or an alpha-weighted list of them; the
    list form gives the ensemble heatmap of the summed logits.
    """
    block = _as_block(model)
    if not block:
        raise ValueError("empty CNN block")
    frame = np.asarray(frame, dtype=np.float64)
    spec = block[0][0].spec
    if frame.shape != (spec.height, spec.width, spec.channels):
        raise ValueError(f"frame of shape {frame.shape} does not match {spec.id}")
    H, W, _ = frame.shape
    total = np.zeros((H, W))
    for learner, alpha in block:
        if learner.family != "cnn":
            raise ValueError("hue sensitivity needs CNN learners")
        g = dc.Graph()
        mask = g.input(np.ones((1, H, W, 1)), requires_grad=True)
        image = g.input(frame[None])
        out = learner.forward(g, dc.mul(mask, image))
        grads = dc.backward(g, out, np.full(out.shape, float(alpha)))
        g.release()
        if mask in grads:
            total += grads[mask][0, :, :, 0]
    name = model.spec.id if isinstance(model, WeakLearner) else "ensemble"
    return Heatmap(np.abs(total), name, frame_id)


def rnn_gradient_matrix(model, sequences: Sequence[np.ndarray], batch_size: int = 64) -> GradientMatrix:
    """``G[phi, theta] = sum_V sum_t sum_u dH'(u, phi) / dp(t, theta)``.

    One backward pass per output channel per batch of sequences, with a seed
    of ones on that channel at every valid step.
    """
    block = _as_block(model)
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not block:
        raise ValueError("empty RNN block")
    if not seqs:
        raise ValueError("empty dataset")
    n_out = block[0][0].spec.n_outputs
    n_in = block[0][0].spec.n_inputs
    G = np.zeros((n_out, n_in))
    for s in range(0, len(seqs), batch_size):
        x, lengths = pad_batch(seqs[s:s + batch_size])
        valid = (np.arange(x.shape[1])[None, :] < lengths[:, None])[..., None]
        for learner, alpha in block:
            for phi in range(n_out):
                g = dc.Graph()
                xin = g.input(x, requires_grad=True)
                out = learner.forward(g, xin, lengths)
                seed = np.zeros(out.shape)
                seed[..., phi] = alpha
                seed *= valid
                gx = dc.backward(g, out, seed).get(xin)
                g.release()
                if gx is not None:
                    G[phi] += (gx * valid).sum(axis=(0, 1))
    return GradientMatrix(G, int(sum(len(q) for q in seqs)))


def box_contrast(heatmap: Heatmap, boxes: Sequence[tuple[int, int, int, int]]) -> float:
    """Mean heatmap value inside the union of ``(y0, y1, x0, x1)`` boxes over the mean outside."""
    inside = np.zeros(heatmap.values.shape, dtype=bool)
    for y0, y1, x0, x1 in boxes:
        inside[max(y0, 0):y1, max(x0, 0):x1] = True
    if inside.all() or not inside.any():
        raise ValueError("boxes must cover some but not all pixels")
    out_mean = heatmap.values[~inside].mean()
    in_mean = heatmap.values[inside].mean()
    return float(np.inf if out_mean == 0 else in_mean / out_mean)


# --------------------------------------------------------------------------
# files

def write_pgm(path, heatmap: Heatmap) -> None:
    img = heatmap.normalized()
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, w, h, _maxval = blob.split(maxsplit=4)[:4]
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    W, H = int(w), int(h)
    # the header ends with one whitespace byte, so the raster is the tail
    return np.frombuffer(blob[len(blob) - H * W:], dtype=np.uint8).reshape(H, W)


def write_heatmap(stem, heatmap: Heatmap) -> None:
    from .synthdata import write_frames

    stem = Path(stem)
    write_pgm(stem.with_suffix(".pgm"), heatmap)
    write_frames(stem.with_suffix(".bin"), heatmap.values)


def write_gradient_matrix(path, matrix: GradientMatrix, tools: Sequence[str] | None = None) -> None:
    n_out, n_in = matrix.values.shape
    cols = list(tools) if tools is not None else [f"tool_{j}" for j in range(n_in)]
    with open(path, "w") as fh:
        fh.write("phi," + ",".join(cols) + "\n")
        for i in range(n_out):
            fh.write(f"{cols[i] if i < len(cols) else i}," + ",".join(repr(float(v)) for v in matrix.values[i]) + "\n")
