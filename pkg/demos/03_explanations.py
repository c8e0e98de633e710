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
# # What the learners look at
#
# Two views. For a CNN, the heatmap is the gradient of its summed logits with
# respect to a per-pixel intensity mask. For the RNN block, the matrix
# entry `[phi, theta]` sums how much output `phi` moves when the CNN
# probability for tool `theta` moves.

# %%
import numpy as np

from boostseq import boosting as bs
from boostseq import explain as ex
from boostseq import runs
from boostseq import synthdata as sd

ds = sd.generate(sd.default_config(n_sequences=12, splits=(8, 2, 2)), seed=1)
# sequential boosting always moves on to an RNN block once the CNNs stop helping
cfg = runs.RunConfig(strategy="sequential", cnn_menu=("B",), rnn_menu=("gru8",), max_iterations=2)
model, _ = runs.train_model(ds, cfg)
cnn = model.strong.cnn_block[0][0]

# %% [markdown]
# A heatmap for one test frame. `#` marks the top 5% of the map and `o`
# marks the bounding boxes of the glyphs in use.

# %%
video = ds.split("test")[0]
t = int(np.flatnonzero((video.labels > 0).any(axis=1))[0])
active = np.flatnonzero(video.labels[t] > 0)
hm = ex.hue_sensitivity(cnn, video.frames[t])
boxes = runs.glyph_boxes(ds.config, active)
hot = hm.values >= np.quantile(hm.values, 0.95)
for y in range(hm.values.shape[0]):
    row = ""
    for x in range(hm.values.shape[1]):
        inside = any(y0 <= y < y1 and x0 <= x < x1 for y0, y1, x0, x1 in boxes)
        row += "#" if hot[y, x] else "o" if inside else "."
    print(row)
print("active:", [ds.tool_names[j] for j in active])
print("inside/outside contrast:", round(ex.box_contrast(hm, boxes), 2))

# %% [markdown]
# The ensemble heatmap uses the alpha-weighted CNN block.

# %%
whole = ex.hue_sensitivity(model.strong.cnn_block, video.frames[t])
print("ensemble contrast:", round(ex.box_contrast(whole, boxes), 2))

# %% [markdown]
# The RNN gradient matrix. Large off-diagonal entries between the two hook
# tools mean the RNN uses one tool's CNN score to adjust the other. That is
# how phase context separates look-alike tools.

# %%
data = runs.split_data(ds, "test", model.M)
p = bs.predict(bs.StrongLearner(model.strong.cnn_block, []), data)[0]
gm = ex.rnn_gradient_matrix(model.strong.rnn_block, data.gather(p))
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(model.tools)
print(gm.values)
