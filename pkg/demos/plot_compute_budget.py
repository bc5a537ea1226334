"""
Where the decoder spends its multiply-adds
==========================================

Global attention mixes every token with every other token, so its cost
grows with the square of the token count. A depthwise convolution touches
a fixed neighbourhood. The analytic counter makes the gap visible at a
full-HD input, then we sweep the resolution and plot the trend.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from litecodec.backbone import BackboneConfig, count_macs
from litecodec.codec import CodecConfig

codec = CodecConfig(16, 4)
blocks = ("global_attention", "window_attention", "depthwise_conv")

for block in blocks:
    res = count_macs(BackboneConfig(block_type=block, width=128, depth=6), codec, 1024, 1920)
    parts = ", ".join(f"{k} {v:.2f}" for k, v in res["kmacs_per_pixel"].items())
    print(f"{block:17s} kMACs/pixel: {parts}")

###############################################################################
# Backbone cost per pixel as the image grows.

sides = [256, 512, 768, 1024, 1536, 2048]
fig, ax = plt.subplots(figsize=(5, 3.5))
for block in blocks:
    cfg = BackboneConfig(block_type=block, width=128, depth=6)
    ax.plot(sides, [count_macs(cfg, codec, s, s)["kmacs_per_pixel"]["backbone"] for s in sides],
            marker="o", label=block)
ax.set_xlabel("image side (pixels)")
ax.set_ylabel("backbone kMACs / pixel")
ax.legend()
fig.tight_layout()
fig.savefig("compute_budget.png", dpi=120)
