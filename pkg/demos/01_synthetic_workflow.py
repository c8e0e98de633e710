# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # A synthetic surgical workflow
#
# Each video walks through six phases. Every tool is a coloured glyph drawn
# into a fixed slot while it is in use. Two pairs of tools share a glyph and
# a colour and differ only in the phase they appear in, so a per-frame model
# cannot tell them apart. Two more tools are rare.

# %%
import numpy as np

from boostseq import sequences as sq
from boostseq import synthdata as sd

cfg = sd.default_config(n_sequences=6, splits=(3, 1, 2))
ds = sd.generate(cfg, seed=0)
print(ds.tool_names)
print([(v.id, v.split, len(v.frames)) for v in ds.videos])

# %% [markdown]
# Prevalence over the whole set, next to what the generator was configured for.

# %%
for name, got, want in zip(ds.tool_names, ds.prevalence(), cfg.expected_prevalence()):
    print(f"{name:14s} {got:.3f}  expected {want:.3f}")

# %% [markdown]
# A frame is a 24x24 RGB image over a textured background. The ASCII view
# marks the most saturated pixels, which is where the glyphs are.

# %%
video = ds.videos[0]
t = int(np.flatnonzero((video.labels > 0).sum(axis=1) >= 2)[0])
print("active:", [ds.tool_names[j] for j in np.flatnonzero(video.labels[t] > 0)])
sat = np.ptp(video.frames[t], axis=2)
cut = np.quantile(sat, [0.8, 0.92])
for row in sat:
    print("".join("#" if v > cut[1] else "+" if v > cut[0] else "." for v in row))

# %% [markdown]
# The confusable tools. `hook_early` only shows up in phase 1 and `hook_late`
# only in phase 4. Their frames look the same.

# %%
hooks = [ds.tool_names.index("hook_early"), ds.tool_names.index("hook_late")]
for j in hooks:
    phases = np.unique(video.phases[video.labels[:, j] > 0])
    print(ds.tool_names[j], "phases", phases)

# %% [markdown]
# Two simulated annotators shift the tool boundaries by a few frames. Where
# they disagree is exactly where the consensus mask drops frames.

# %%
a, b = video.annotator_a, video.annotator_b
print("frames where the annotators disagree:", int((a != b).any(axis=1).sum()), "of", len(a))

# %% [markdown]
# Subsampling splits a video into `M` interleaved subsequences.
# Interleaving puts them back together.

# %%
parts = sq.subsample(video.labels, 4)
print([len(p) for p in parts])
assert np.array_equal(sq.interleave(parts, len(video.labels)), video.labels)
