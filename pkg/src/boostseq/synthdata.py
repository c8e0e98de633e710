"""Synthetic surgical-workflow videos with multilabel tool usage.

A phase automaton walks through a fixed phase order with random dwell times.
Tools are used in contiguous intervals inside their home phases and are drawn
as small coloured glyphs on a per-video textured background.  Confusable
pairs share glyph, hue and position but live in different phases, so only
temporal context tells them apart.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import make_rng

FRAMES_MAGIC = b"BSEQFR1\n"
SPLITS = ("learn", "validation", "test")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    glyph: str
    hue: tuple[float, float, float]
    slot: tuple[float, float]
    phases: tuple[tuple[int, float], ...]
    span: tuple[float, float] = (0.3, 0.7)
    min_dwell: int = 3
    rare_prevalence: float | None = None


GLYPHS = ("bar_h", "bar_v", "cross", "ring", "disk", "diag", "square", "triangle")


@dataclass(frozen=True)
class WorkflowConfig:
    tools: tuple[ToolSpec, ...]
    dwell: tuple[tuple[int, int], ...]
    confusable: tuple[tuple[int, int], ...] = ()
    height: int = 24
    width: int = 24
    noise: float = 0.03
    position_jitter: float = 1.0
    occlusion: float = 0.05
    annotator_jitter: int = 2
    n_sequences: int = 30
    splits: tuple[int, int, int] = (20, 2, 8)
    max_active: int = 3

    @property
    def n_tools(self) -> int:
        return len(self.tools)

    @property
    def n_phases(self) -> int:
        return len(self.dwell)

    def validate(self) -> None:
        if sum(self.splits) != self.n_sequences:
            raise ConfigError("split sizes must add up to n_sequences")
        for lo, hi in self.dwell:
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad dwell range ({lo}, {hi})")
        for t in self.tools:
            if t.glyph not in GLYPHS:
                raise ConfigError(f"unknown glyph {t.glyph!r}")
            if t.min_dwell < 1:
                raise ConfigError("min_dwell must be >= 1")
            if not 0 <= t.span[0] <= t.span[1] <= 1:
                raise ConfigError(f"bad span for {t.name}")
            for ph, prob in t.phases:
                if not 0 <= ph < self.n_phases:
                    raise ConfigError(f"{t.name}: phase {ph} out of range")
                if not 0 <= prob <= 1:
                    raise ConfigError(f"{t.name}: probability {prob} outside [0, 1]")
            if t.rare_prevalence is not None:
                if not 0 < t.rare_prevalence < 1 or not any(prob > 0 for _, prob in t.phases):
                    raise ConfigError(f"{t.name}: target prevalence {t.rare_prevalence} is unreachable")
        for a, b in self.confusable:
            if a == b or not (0 <= a < self.n_tools and 0 <= b < self.n_tools):
                raise ConfigError(f"confusable pair ({a}, {b}) must name two distinct tools")
            pa = {ph for ph, pr in self.tools[a].phases if pr > 0}
            pb = {ph for ph, pr in self.tools[b].phases if pr > 0}
            if pa & pb:
                raise ConfigError(f"confusable tools {a} and {b} share a phase")
        for ph in range(self.n_phases):
            users = [t for t in self.tools if any(p == ph and pr > 0 for p, pr in t.phases)]
            if len(users) > self.max_active:
                raise ConfigError(f"phase {ph} can activate {len(users)} tools (max {self.max_active})")

    def expected_prevalence(self) -> np.ndarray:
        """Expected fraction of frames using each tool (ratio of means)."""
        mean_dwell = np.array([(lo + hi) / 2 for lo, hi in self.dwell])
        total = mean_dwell.sum()
        out = np.zeros(self.n_tools)
        for j, t in enumerate(self.tools):
            if t.rare_prevalence is not None:
                out[j] = t.rare_prevalence
                continue
            for ph, prob in t.phases:
                out[j] += prob * max(np.mean(t.span) * mean_dwell[ph], t.min_dwell)
            out[j] /= total
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowConfig":
        d = dict(d)
        d["tools"] = tuple(ToolSpec(**{**t, "hue": tuple(t["hue"]), "slot": tuple(t["slot"]),
                                        "phases": tuple(tuple(p) for p in t["phases"]),
                                        "span": tuple(t["span"])}) for t in d["tools"])
        for k in ("dwell", "confusable"):
            d[k] = tuple(tuple(x) for x in d[k])
        d["splits"] = tuple(d["splits"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def default_config(**overrides) -> WorkflowConfig:
    """Eight tools over six phases, two confusable pairs and two rare tools."""
    T = ToolSpec
    tools = (
        T("forceps", "cross", (0.9, 0.2, 0.2), (5.5, 5.5), ((0, 0.9), (1, 0.9), (3, 0.9), (4, 0.9)), (0.25, 0.55)),
        T("cannula", "bar_h", (0.2, 0.8, 0.3), (5.5, 18.5), ((0, 0.9), (2, 0.9), (3, 0.9), (5, 0.9)), (0.25, 0.55)),
        T("hook_early", "ring", (0.25, 0.35, 0.95), (12.0, 12.0), ((1, 1.0),), (0.4, 0.8)),
        T("hook_late", "ring", (0.25, 0.35, 0.95), (12.0, 12.0), ((4, 1.0),), (0.4, 0.8)),
        T("marker", "disk", (0.95, 0.9, 0.2), (18.5, 5.5), ((2, 1.0),), (0.0, 0.0), 2, 0.005),
        T("spatula_early", "bar_v", (0.9, 0.5, 0.9), (18.5, 18.5), ((2, 1.0),), (0.4, 0.8)),
        T("spatula_late", "bar_v", (0.9, 0.5, 0.9), (18.5, 18.5), ((5, 1.0),), (0.4, 0.8)),
        T("sponge", "square", (0.3, 0.9, 0.9), (18.5, 12.0), ((3, 1.0),), (0.0, 0.0), 2, 0.005),
    )
    base = dict(tools=tools, dwell=((67, 133),) * 6, confusable=((2, 3), (5, 6)))
    base.update(overrides)
    cfg = WorkflowConfig(**base)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# rendering

def _glyph_alpha(kind: str, cy: float, cx: float, H: int, W: int, size: float = 3.5) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "bar_h":
        d = np.maximum(np.abs(dx) - size, np.abs(dy) - 1.0)
    elif kind == "bar_v":
        d = np.maximum(np.abs(dy) - size, np.abs(dx) - 1.0)
    elif kind == "cross":
        d = np.minimum(np.maximum(np.abs(dx) - size, np.abs(dy) - 0.8),
                       np.maximum(np.abs(dy) - size, np.abs(dx) - 0.8))
    elif kind == "ring":
        d = np.abs(np.hypot(dx, dy) - (size - 0.8)) - 0.9
    elif kind == "disk":
        d = np.hypot(dx, dy) - (size - 0.5)
    elif kind == "diag":
        d = np.maximum(np.abs(dx - dy) / np.sqrt(2) - 1.0, np.abs(dx + dy) / np.sqrt(2) - size)
    elif kind == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - (size - 1.0)
    elif kind == "triangle":
        d = np.maximum(dy - (size - 1.0), np.abs(dx) * 1.2 - (size - 1.0 + dy) * 0.6)
    else:
        raise ValueError(kind)
    return np.clip(0.5 - d, 0.0, 1.0)


def make_background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    base = rng.uniform(0.25, 0.45, size=3)
    img = np.broadcast_to(base, (H, W, 3)).copy()
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06, size=3)
        img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)[..., None]
    return np.clip(img, 0.0, 1.0)


def render_frame(active: Sequence[int], config: WorkflowConfig, rng: np.random.Generator,
                 background: np.ndarray) -> np.ndarray:
    """One frame with a glyph per active tool; values in [0, 1]."""
    if len(active) > config.max_active:
        raise ValueError(f"{len(active)} active tools exceeds {config.max_active}")
    H, W = config.height, config.width
    img = background.copy()
    look = _appearance(config)
    for j in active:
        glyph, hue, (cy, cx) = look[j]
        jit = config.position_jitter
        if jit > 0:
            cy += rng.uniform(-jit, jit)
            cx += rng.uniform(-jit, jit)
        a = _glyph_alpha(glyph, cy, cx, H, W)
        if config.occlusion > 0 and rng.random() < config.occlusion:
            # blank patch over most of the glyph
            cover = rng.uniform(0.7, 1.0)
            if rng.random() < 0.5:
                cut = (np.arange(W)[None, :] - (cx - 4.5)) / 9.0 < cover
            else:
                cut = (np.arange(H)[:, None] - (cy - 4.5)) / 9.0 < cover
            a = a * ~np.broadcast_to(cut, a.shape)
        img = img * (1.0 - a[..., None]) + np.asarray(hue) * a[..., None]
    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _appearance(config: WorkflowConfig):
    look = [(t.glyph, t.hue, t.slot) for t in config.tools]
    for a, b in config.confusable:
        look[b] = look[a]
    return look


def glyph_bounding_box(config: WorkflowConfig, tool: int) -> tuple[int, int, int, int]:
    """``(y0, y1, x0, x1)`` covering every pixel the tool's glyph can touch.

    The drawn glyph at its slot, widened on each side by the position jitter.
    Upper bounds are exclusive and the box is clipped to the frame.
    """
    glyph, _, (cy, cx) = _appearance(config)[tool]
    ys, xs = np.nonzero(_glyph_alpha(glyph, cy, cx, config.height, config.width) > 0)
    jit = int(np.ceil(config.position_jitter))
    return (max(int(ys.min()) - jit, 0), min(int(ys.max()) + 1 + jit, config.height),
            max(int(xs.min()) - jit, 0), min(int(xs.max()) + 1 + jit, config.width))


# --------------------------------------------------------------------------
# generation

@dataclass
class Video:
    id: str
    frames: np.ndarray
    labels: np.ndarray
    phases: np.ndarray
    annotator_a: np.ndarray | None = None
    annotator_b: np.ndarray | None = None
    split: str = "learn"

    @property
    def training_labels(self) -> np.ndarray:
        """Union of both annotators when available, else the generator's labels."""
        if self.annotator_a is None:
            return self.labels
        return np.where((self.annotator_a > 0) | (self.annotator_b > 0), 1.0, -1.0)


@dataclass
class SyntheticDataset:
    videos: list[Video]
    config: WorkflowConfig
    seed: int
    tool_names: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def prevalence(self, split: str | None = None) -> np.ndarray:
        vids = self.videos if split is None else self.split(split)
        lab = np.concatenate([v.labels for v in vids])
        return (lab > 0).mean(axis=0)


def _timeline(config: WorkflowConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    durations = np.array([rng.integers(lo, hi + 1) for lo, hi in config.dwell])
    starts = np.r_[0, np.cumsum(durations)]
    T = int(starts[-1])
    phases = np.repeat(np.arange(config.n_phases), durations)
    labels = -np.ones((T, config.n_tools))
    for j, tool in enumerate(config.tools):
        if tool.rare_prevalence is not None:
            live = [ph for ph, prob in tool.phases if prob > 0]
            ph = live[int(rng.integers(len(live)))]
            d = int(durations[ph])
            n = min(d, max(tool.min_dwell, int(round(tool.rare_prevalence * T))))
            s = int(starts[ph] + rng.integers(0, d - n + 1))
            labels[s:s + n, j] = 1.0
            continue
        for ph, prob in tool.phases:
            if rng.random() >= prob:
                continue
            d = int(durations[ph])
            n = min(d, max(tool.min_dwell, int(round(rng.uniform(*tool.span) * d))))
            s = int(starts[ph] + rng.integers(0, d - n + 1))
            labels[s:s + n, j] = 1.0
    return labels, phases


def annotate_with_jitter(labels: np.ndarray, jitter: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two annotators, each moving every interval boundary by up to ``jitter`` frames."""
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    labels = np.asarray(labels, dtype=np.float64)
    flat = labels.ndim == 1
    lab = labels[:, None] if flat else labels
    T = len(lab)
    out = []
    for who in ("A", "B"):
        rng = make_rng(seed, "annotator", who)
        ann = -np.ones_like(lab)
        for j in range(lab.shape[1]):
            on = np.r_[False, lab[:, j] > 0, False]
            edges = np.flatnonzero(np.diff(on.astype(int)))
            for s, e in zip(edges[::2], edges[1::2]):
                ds, de = rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
                s2 = int(np.clip(s + ds, 0, T - 1))
                e2 = int(np.clip(e + de, s2 + 1, T))
                ann[s2:e2, j] = 1.0
        out.append(ann[:, 0] if flat else ann)
    return out[0], out[1]


def generate(config: WorkflowConfig, seed: int) -> SyntheticDataset:
    config.validate()
    H, W = config.height, config.width
    split_names = [s for s, n in zip(SPLITS, config.splits) for _ in range(n)]
    videos = []
    for i in range(config.n_sequences):
        rng = make_rng(seed, "video", i)
        labels, phases = _timeline(config, rng)
        background = make_background(rng, H, W)
        frames = np.empty((len(labels), H, W, 3))
        for t in range(len(labels)):
            frames[t] = render_frame(np.flatnonzero(labels[t] > 0), config, rng, background)
        a = b = None
        if config.annotator_jitter > 0:
            a, b = annotate_with_jitter(labels, config.annotator_jitter,
                                        int(make_rng(seed, "jitter", i).integers(2**31)))
        videos.append(Video(f"seq_{i:03d}", frames, labels, phases, a, b, split_names[i]))
    ds = SyntheticDataset(videos, config, seed, [t.name for t in config.tools])
    learn = [v for v in videos if v.split == "learn"]
    if learn and not np.all(np.concatenate([v.labels for v in learn]).max(axis=0) > 0):
        raise ConfigError("some tool never appears in the learning split")
    return ds


# --------------------------------------------------------------------------
# files

def write_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<I", frames.ndim))
        fh.write(struct.pack(f"<{frames.ndim}I", *frames.shape))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(FRAMES_MAGIC):
        raise ValueError(f"{path}: not a frames file")
    off = len(FRAMES_MAGIC)
    (ndim,) = struct.unpack_from("<I", blob, off)
    shape = struct.unpack_from(f"<{ndim}I", blob, off + 4)
    off += 4 + 4 * ndim
    count = int(np.prod(shape))
    if len(blob) - off != 8 * count:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(blob, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"tool_{j}" for j in range(labels.shape[1])])
        for t, row in enumerate(labels):
            w.writerow([t] + [int(v > 0) for v in row])


def read_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if body.size and not np.all(np.isin(body, (0, 1))):
        raise ValueError(f"{path}: labels must be 0 or 1")
    return np.where(body > 0, 1.0, -1.0)


def save_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in ds.videos:
        d = out / v.id
        d.mkdir(exist_ok=True)
        write_frames(d / "frames.bin", v.frames)
        write_labels(d / "labels.csv", v.labels)
        if v.annotator_a is not None:
            write_labels(d / "annotatorA.csv", v.annotator_a)
            write_labels(d / "annotatorB.csv", v.annotator_b)
        np.savetxt(d / "phases.txt", v.phases, fmt="%d")
        entries.append({"id": v.id, "split": v.split, "frames": len(v.labels)})
    manifest = {
        "format": "boostseq-dataset-1",
        "seed": ds.seed,
        "config_hash": ds.config_hash,
        "config": ds.config.to_dict(),
        "tools": ds.tool_names,
        "sequences": entries,
        "prevalence": {s: [float(x) for x in ds.prevalence(s)] for s in SPLITS if ds.split(s)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    man = json.loads((root / "manifest.json").read_text())
    videos = []
    for e in man["sequences"]:
        d = root / e["id"]
        a = b = None
        if (d / "annotatorA.csv").exists():
            a, b = read_labels(d / "annotatorA.csv"), read_labels(d / "annotatorB.csv")
        phases = np.loadtxt(d / "phases.txt", dtype=int, ndmin=1) if (d / "phases.txt").exists() else np.zeros(0, int)
        videos.append(Video(e["id"], read_frames(d / "frames.bin"), read_labels(d / "labels.csv"), phases, a, b,
                            e["split"]))
    return SyntheticDataset(videos, WorkflowConfig.from_dict(man["config"]), man["seed"], man["tools"])
