"""
How local is attention?
=======================

Mean attention distance summarises an attention map by the average
distance, in token units, between a query and the tokens it reads from.
We first check the statistic on hand-made maps, then measure a small
attention denoiser trained for a few hundred steps.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from litecodec.attention import (
    collect_attention, distance_profile, mean_attention_distance, mixed_attention, topk_attention_distance,
)
from litecodec.backbone import AttentionRecord, BackboneConfig
from litecodec.codec import CodecConfig
from litecodec.data import make_synthetic
from litecodec.flow import pretrain_stage1
from litecodec.training import Schedule

# Uniform attention on a 2x2 grid, seen from a corner: (0 + 1 + 1 + sqrt 2) / 4
uniform = AttentionRecord([np.full((1, 4, 4), 0.25)], (2, 2))
print(mean_attention_distance(uniform, 0))

###############################################################################
# Blending identity into a uniform map pulls the mass home.

alphas = np.linspace(0, 1, 11)
dist = [np.mean([mean_attention_distance(AttentionRecord([mixed_attention(64, a)[None]], (8, 8)), q)
                 for q in range(64)]) for a in alphas]
for a, d in zip(alphas, dist):
    print(f"alpha={a:.1f}  mean distance {d:.3f}")

###############################################################################
# A tiny attention model on 64x64 blobs (a 4x4 token grid). Training takes
# about a minute on one core.

ds = make_synthetic("gaussian_blobs", 32, 64, seed=0)
bb = BackboneConfig(block_type="global_attention", width=64, depth=4, heads=4, timestep_conditioning=True)
state = pretrain_stage1(ds, "compression", CodecConfig(16, 4), bb, Schedule(steps=200, lr=1e-3, revive_window=50))

fig, ax = plt.subplots(figsize=(5, 3.5))
for t in (0.1, 0.5, 0.9):
    records = collect_attention(state.model, ds.images[:8], t)
    top = topk_attention_distance(records, 20, "all_blocks")
    print(f"t={t}: top-20% distance {top:.3f}")
    prof = distance_profile(records)
    ax.plot(prof.bins, prof.mass, marker=".", label=f"t={t}")
ax.set_xlabel("distance (tokens)")
ax.set_ylabel("attention mass")
ax.legend()
fig.tight_layout()
fig.savefig("attention_profile.png", dpi=120)
