"""End-to-end runs: config parsing, training, evaluation, explanation and their files.

Everything here is deterministic given the config and seeds; manifests are
sorted-key JSON without timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import boosting as bs
from . import diffcore as dc
from . import explain as ex
from . import metrics as mt
from . import sequences as sq
from . import synthdata as sd
from .synthdata import ConfigError
from .weak_learners import CnnSpec, RnnSpec, TrainConfig, dumps_learner, loads_learner

MANIFEST = "manifest.json"


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

_RNN_RE = re.compile(r"^(lstm|gru)(\d+)$")


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "run"
    strategy: str = "joint"
    families: tuple[str, ...] = ("cnn", "rnn")
    cnn_menu: tuple[str, ...] = ("A", "B", "C")
    rnn_menu: tuple[str, ...] = ("lstm8", "lstm16", "lstm32", "gru8", "gru16", "gru32")
    rnn_layers: int = 2
    bidirectional: bool = False
    M: int = 4
    radius_candidates: tuple[int, ...] = sq.RADIUS_CANDIDATES
    alpha_max: float = 10.0
    line_search_tol: float = 1e-4
    stop_tol: float = 1e-4
    patience: int = 1
    max_iterations: int = 8
    seed: int = 0
    cnn_epochs: int = 8
    cnn_steps: int = 60
    cnn_batch: int = 32
    cnn_patience: int = 5
    rnn_epochs: int = 150
    rnn_batch: int = 4
    rnn_patience: int = 10
    extra_q_factor: bool = False
    train_labels: str = "union"

    def validate(self) -> None:
        if self.strategy not in ("joint", "sequential"):
            raise ConfigError(f"strategy must be joint or sequential, got {self.strategy!r}")
        if not set(self.families) <= {"cnn", "rnn"} or "cnn" not in self.families:
            raise ConfigError("families must include cnn and may include rnn")
        if not self.cnn_menu:
            raise ConfigError("empty CNN menu")
        for a in self.cnn_menu:
            if a not in ("A", "B", "C", "linear"):
                raise ConfigError(f"unknown CNN architecture {a!r}")
        for r in self.rnn_menu:
            if not (_RNN_RE.match(r) or r in ("identity", "lazy")):
                raise ConfigError(f"bad RNN menu entry {r!r} (expected e.g. gru16)")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if not self.radius_candidates or min(self.radius_candidates) < 0:
            raise ConfigError("radius candidates must be nonnegative and nonempty")
        for k in ("alpha_max", "line_search_tol"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("patience", "max_iterations", "cnn_epochs", "cnn_batch", "cnn_patience",
                  "rnn_epochs", "rnn_batch", "rnn_patience", "rnn_layers"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.train_labels not in ("union", "truth"):
            raise ConfigError("train_labels must be union or truth")

    def cnn_specs(self, n_tools: int, height: int, width: int) -> list[CnnSpec]:
        return [CnnSpec(a, height, width, 3, n_tools) for a in self.cnn_menu]

    def rnn_specs(self, n_tools: int) -> list[RnnSpec]:
        if "rnn" not in self.families:
            return []
        out = []
        for r in self.rnn_menu:
            m = _RNN_RE.match(r)
            if m:
                out.append(RnnSpec(m.group(1), int(m.group(2)), self.rnn_layers, self.bidirectional, n_tools, n_tools))
            else:
                out.append(RnnSpec(r, 1, 1, False, n_tools, n_tools))
        return out

    def boost_config(self) -> bs.BoostConfig:
        return bs.BoostConfig(
            strategy=self.strategy, alpha_max=self.alpha_max, line_search_tol=self.line_search_tol,
            stop_tol=self.stop_tol, patience=self.patience, max_iterations=self.max_iterations,
            cnn_train=TrainConfig.for_cnn(max_epochs=self.cnn_epochs, steps_per_epoch=self.cnn_steps,
                                          batch_size=self.cnn_batch, patience=self.cnn_patience),
            rnn_train=TrainConfig.for_rnn(max_epochs=self.rnn_epochs, batch_size=self.rnn_batch,
                                          patience=self.rnn_patience),
            seed=self.seed, extra_q_factor=self.extra_q_factor)

    def to_dict(self) -> dict:
        """Everything that shapes the model; the output location is left out."""
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items() if k != "out"}


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if default and isinstance(default[0], int) else tuple(items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _read_ini(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}".replace("\n", " ")) from None
    return cp


_SECTION_KEYS = {
    "data": ("data", "M", "train_labels"),
    "boost": ("strategy", "families", "cnn_menu", "rnn_menu", "rnn_layers", "bidirectional", "alpha_max",
              "line_search_tol", "stop_tol", "patience", "max_iterations", "seed", "extra_q_factor"),
    "train": ("cnn_epochs", "cnn_steps", "cnn_batch", "cnn_patience", "rnn_epochs", "rnn_batch", "rnn_patience"),
    "smooth": ("radius_candidates",),
    "output": ("out",),
}


def load_run_config(path=None, **overrides) -> RunConfig:
    """Read ``[data] [boost] [train] [smooth] [output]`` sections; unknown keys are errors."""
    defaults = RunConfig()
    values = {}
    if path is not None:
        cp = _read_ini(path)
        for section in cp.sections():
            if section == "synth":
                continue
            if section not in _SECTION_KEYS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in cp.items(section):
                match = [k for k in _SECTION_KEYS[section] if k.lower() == key]
                if not match:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                name = match[0]
                values[name] = _coerce(name, raw, getattr(defaults, name))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


_SYNTH_KEYS = {"n_sequences": int, "height": int, "width": int, "noise": float, "position_jitter": float,
               "occlusion": float, "annotator_jitter": int, "seed": int}


def load_synth_config(path=None) -> tuple[sd.WorkflowConfig, int | None]:
    """``[synth]`` overrides of the default workflow; returns (config, seed or None)."""
    over: dict = {}
    seed = None
    if path is not None:
        cp = _read_ini(path)
        if cp.has_section("synth"):
            for key, raw in cp.items("synth"):
                if key == "splits":
                    try:
                        over["splits"] = tuple(int(s) for s in raw.split(","))
                    except ValueError:
                        raise ConfigError(f"bad splits {raw!r}") from None
                elif key == "dwell":
                    try:
                        lo, hi = (int(s) for s in raw.split(","))
                    except ValueError:
                        raise ConfigError(f"bad dwell {raw!r}") from None
                    over["dwell"] = ((lo, hi),) * 6
                elif key in _SYNTH_KEYS:
                    try:
                        val = _SYNTH_KEYS[key](raw)
                    except ValueError:
                        raise ConfigError(f"bad value for {key}: {raw!r}") from None
                    if key == "seed":
                        seed = val
                    else:
                        over[key] = val
                else:
                    raise ConfigError(f"unknown key {key!r} in [synth]")
    if "n_sequences" in over and "splits" not in over:
        n = over["n_sequences"]
        n_val = max(1, n // 15)
        n_test = max(1, (4 * n) // 15)
        over["splits"] = (n - n_val - n_test, n_val, n_test)
    try:
        return sd.default_config(**over), seed
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# data

def split_data(ds: sd.SyntheticDataset, split: str, M: int, labels: str = "union") -> bs.BoostData:
    vids = ds.split(split)
    if not vids:
        raise DataError(f"split {split!r} is empty")
    lab = [v.training_labels if labels == "union" else v.labels for v in vids]
    return bs.BoostData.from_videos([v.frames for v in vids], lab, M)


def load_data(path) -> sd.SyntheticDataset:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise DataError(f"no dataset manifest in {p}")
    try:
        return sd.load_dataset(p)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {p}: {exc}") from None


# --------------------------------------------------------------------------
# models

@dataclass
class Model:
    strong: bs.StrongLearner
    radii: sq.RadiusTable
    M: int
    tools: list[str]
    run: dict = field(default_factory=dict)

    @property
    def bidirectional(self) -> bool:
        return any(getattr(l.spec, "bidirectional", False) for l, _ in self.strong.rnn_block)


def final_probabilities(strong: bs.StrongLearner, data: bs.BoostData) -> np.ndarray:
    p, q = bs.predict(strong, data)
    return p if q is None else q


def smooth_per_video(probs: np.ndarray, data: bs.BoostData, radii) -> np.ndarray:
    out = np.empty_like(probs)
    for idx in data.videos:
        out[idx] = sq.median_filter(probs[idx], radii)
    return out


def train_model(ds: sd.SyntheticDataset, cfg: RunConfig,
                on_iteration: Callable[[bs.BoostState], None] | None = None) -> tuple[Model, bs.BoostState]:
    learn = split_data(ds, "learn", cfg.M, cfg.train_labels)
    val = split_data(ds, "validation", cfg.M, cfg.train_labels)
    n_tools = learn.n_tools
    H, W = learn.frames.shape[1:3]
    state = bs.run_boosting(cfg.boost_config(), cfg.cnn_specs(n_tools, H, W), cfg.rnn_specs(n_tools),
                            learn, val, on_iteration)
    probs = final_probabilities(state.strong, val)
    vids = [probs[idx] for idx in val.videos]
    labs = [val.labels[idx] for idx in val.videos]
    radii = sq.select_radii(vids, labs, cfg.radius_candidates)
    return Model(state.strong, radii, cfg.M, list(ds.tool_names), cfg.to_dict()), state


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_model(model: Model, state: bs.BoostState | None, out_dir, dataset: sd.SyntheticDataset | None = None) -> Path:
    out = Path(out_dir)
    (out / "learners").mkdir(parents=True, exist_ok=True)

    def store(learner) -> str:
        blob = dumps_learner(learner)
        h = _sha(blob)
        (out / "learners" / f"{h}.bswl").write_bytes(blob)
        return h

    blocks = {name: [{"id": l.spec.id, "alpha": float(a), "checkpoint": store(l), "spec": l.spec.to_dict()}
                     for l, a in block]
              for name, block in (("cnn_block", model.strong.cnn_block), ("rnn_block", model.strong.rnn_block))}
    manifest = {
        "format": "boostseq-run-1",
        "run": model.run,
        "tools": model.tools,
        "M": model.M,
        "radii": model.radii.to_dict(),
        **blocks,
    }
    if dataset is not None:
        manifest["dataset"] = {"seed": dataset.seed, "config_hash": dataset.config_hash}
    if state is not None:
        # accepted iterations append to their family's block in order
        pending = {"cnn": iter(blocks["cnn_block"]), "rnn": iter(blocks["rnn_block"])}
        history = []
        for rec in state.history:
            d = rec.to_dict()
            d["checkpoint"] = next(pending[rec.family])["checkpoint"] if rec.accepted else None
            history.append(d)
        manifest["history"] = history
        _write_iterations_csv(out / "iterations.csv", state)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_iterations_csv(path, state: bs.BoostState) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,objective,candidate,family,n_params,weak_loss,alpha,loss,selected,accepted,"
                 "train_loss,val_loss,error\n")
        for rec in state.history:
            for c in rec.candidates:
                sel = c.id == rec.selected and c.family == rec.family
                err = (c.error or "").replace(",", ";").replace("\n", " ")
                fh.write(f"{rec.iteration},{rec.objective},{c.id},{c.family},{c.n_params},{_fmt(c.weak_loss)},"
                         f"{_fmt(c.alpha)},{_fmt(c.loss)},{int(sel)},{int(rec.accepted and sel)},"
                         f"{_fmt(rec.train_loss) if sel else ''},{_fmt(rec.val_loss) if sel else ''},{err}\n")


def load_model(run_dir) -> Model:
    d = Path(run_dir)
    path = d / MANIFEST
    if not path.is_file():
        raise DataError(f"no run manifest in {d}")
    try:
        man = json.loads(path.read_text())
        blocks = {}
        for name in ("cnn_block", "rnn_block"):
            block = []
            for e in man[name]:
                blob = (d / "learners" / f"{e['checkpoint']}.bswl").read_bytes()
                if _sha(blob) != e["checkpoint"]:
                    raise DataError(f"checkpoint {e['checkpoint']} fails its content hash")
                block.append((loads_learner(blob), float(e["alpha"])))
            blocks[name] = block
        return Model(bs.StrongLearner(blocks["cnn_block"], blocks["rnn_block"]),
                     sq.RadiusTable.from_dict(man["radii"]), int(man["M"]), list(man["tools"]), man.get("run", {}))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model {d}: {exc}") from None


# --------------------------------------------------------------------------
# evaluation

def evaluate_model(model: Model, ds: sd.SyntheticDataset, split: str = "test", mode: str = "offline",
                   consensus: bool = False, smooth: bool = True) -> tuple[mt.EvalReport, np.ndarray, np.ndarray,
                                                                          np.ndarray | None]:
    """Report plus the (scores, labels, mask) it was computed from."""
    if mode not in ("offline", "online"):
        raise ConfigError(f"mode must be online or offline, got {mode!r}")
    if mode == "online" and model.bidirectional:
        raise ConfigError("online mode needs a causal model but the RNN block is bidirectional")
    vids = ds.split(split)
    if not vids:
        raise DataError(f"split {split!r} is empty")
    mask = None
    if consensus:
        if any(v.annotator_a is None for v in vids):
            raise DataError("consensus evaluation needs annotatorA/annotatorB labels")
        pairs = [mt.consensus_mask(v.annotator_a, v.annotator_b) for v in vids]
        mask = np.concatenate([a for a, _ in pairs])
        labels = [u for _, u in pairs]
    else:
        labels = [v.labels for v in vids]
    data = bs.BoostData.from_videos([v.frames for v in vids], labels, model.M)
    scores = final_probabilities(model.strong, data)
    # online output cannot wait R frames for the median window
    smoothed = smooth and mode == "offline"
    if smoothed:
        scores = smooth_per_video(scores, data, model.radii.radii)
    header = {
        "split": split, "mode": mode, "consensus": str(consensus).lower(),
        "smoothing": "median, radii " + " ".join(map(str, model.radii.radii)) if smoothed else "none",
        "output": "q" if model.strong.rnn_block else "p",
    }
    prevalence = list(ds.prevalence("learn")) if ds.split("learn") else None
    report = mt.evaluate(scores, data.labels, mask, model.tools, prevalence, header)
    return report, scores, data.labels, mask


# --------------------------------------------------------------------------
# explanation

def glyph_boxes(config: sd.WorkflowConfig, active: Sequence[int]) -> list[tuple[int, int, int, int]]:
    """Bounding boxes ``(y0, y1, x0, x1)`` of the active tools' glyphs."""
    return [sd.glyph_bounding_box(config, j) for j in active]


def explain_model(model: Model, ds: sd.SyntheticDataset, split: str, out_dir, n_frames: int = 4) -> dict:
    """Per-learner and ensemble heatmaps for a few frames plus the RNN gradient matrix."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vids = ds.split(split)
    if not vids:
        raise DataError(f"split {split!r} is empty")
    picks = []
    for v in vids:
        for t in np.flatnonzero((v.labels > 0).any(axis=1))[:: max(1, len(v.labels) // 8)]:
            picks.append((v, int(t)))
    rng = dc.make_rng(0, "explain", split)
    chosen = sorted(rng.choice(len(picks), size=min(n_frames, len(picks)), replace=False)) if picks else []
    summary = {"heatmaps": [], "gradient_matrix": None}
    for k in chosen:
        v, t = picks[k]
        fid = f"{v.id}_t{t:05d}"
        maps = [ex.hue_sensitivity(l, v.frames[t], fid) for l, _ in model.strong.cnn_block]
        maps.append(ex.hue_sensitivity(model.strong.cnn_block, v.frames[t], fid))
        for i, hm in enumerate(maps):
            stem = out / f"heat_{fid}_{i:02d}_{hm.source}"
            ex.write_heatmap(stem, hm)
            summary["heatmaps"].append({"frame": fid, "source": hm.source, "file": stem.name})
    if model.strong.rnn_block:
        data = bs.BoostData.from_videos([v.frames for v in vids], [v.labels for v in vids], model.M)
        p = bs.predict(model.strong, data)[0]
        G = ex.rnn_gradient_matrix(model.strong.rnn_block, data.gather(p))
        ex.write_gradient_matrix(out / "gradient_matrix.csv", G, model.tools)
        summary["gradient_matrix"] = "gradient_matrix.csv"
    (out / "explain.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --------------------------------------------------------------------------
# aggregation

def compare_reports(group_a: Sequence[mt.EvalReport], group_b: Sequence[mt.EvalReport]) -> dict:
    """Paired t-tests on per-tool Az and AP differences pooled over paired runs."""
    if len(group_a) != len(group_b) or not group_a:
        raise ConfigError("report groups must be nonempty and of equal size")
    out = {"runs": len(group_a), "mean_m_az_a": float(np.mean([r.m_az for r in group_a])),
           "mean_m_az_b": float(np.mean([r.m_az for r in group_b])),
           "mean_m_ap_a": float(np.mean([r.m_ap for r in group_a])),
           "mean_m_ap_b": float(np.mean([r.m_ap for r in group_b])),
           "wins_a_m_az": int(sum(a.m_az > b.m_az for a, b in zip(group_a, group_b)))}
    for metric in ("az", "ap"):
        xa, xb = [], []
        for ra, rb in zip(group_a, group_b):
            if ra.tools != rb.tools:
                raise DataError("paired reports cover different tools")
            for va, vb in zip(getattr(ra, metric), getattr(rb, metric)):
                if va is not None and vb is not None:
                    xa.append(va)
                    xb.append(vb)
        try:
            t, p = mt.paired_t_test(xa, xb)
        except ValueError:
            t, p = float("nan"), float("nan")
        out[f"t_{metric}"], out[f"p_{metric}"], out[f"pairs_{metric}"] = t, p, len(xa)
    return out


def write_comparison(path, result: dict) -> None:
    with open(path, "w") as fh:
        fh.write("key,value\n")
        for k in sorted(result):
            fh.write(f"{k},{result[k]!r}\n")
