"""
A one-step codec in a few minutes
=================================

Stage I teaches a denoiser to turn noise into images given the decoded
VQ condition. Stage II fixes the timestep and the noise, then tunes the
network to reconstruct in a single forward pass. Everything here runs on a
laptop CPU at 32x32.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from litecodec.backbone import BackboneConfig
from litecodec.codec import CodecConfig
from litecodec.data import make_synthetic
from litecodec.flow import pretrain_stage1
from litecodec.one_step import LossWeights, finetune_stage2
from litecodec.pipeline import bench, compress, decompress
from litecodec.training import Schedule

ds = make_synthetic("gaussian_blobs", 64, 32, seed=0)
codec = CodecConfig(16, 4)
print(f"{codec.bpp} bpp, {codec.codebook_size}-entry codebook")

stage1 = pretrain_stage1(ds, "compression", codec, BackboneConfig(timestep_conditioning=True),
                         Schedule(steps=300, lr=1e-3, revive_window=50))
print("stage I loss", stage1.history[0]["loss"], "->", stage1.history[-1]["loss"])

###############################################################################
# Stage II, reconstruction losses only. Adding ``lambda_dmd`` and
# ``lambda_gan`` through ``LossWeights`` switches on distillation and the
# adversarial term for the steps after ``phase1_steps``.

stage2 = finetune_stage2(stage1, ds, LossWeights(), Schedule(steps=600, lr=1e-3, warmup=100, phase1_steps=600))
l1 = [h["l1"] for h in stage2.history]
print(f"stage II L1 {np.mean(l1[:10]):.3f} -> {np.mean(l1[-10:]):.3f}")

###############################################################################
# Bytes in, pixels out.

data = compress(stage2.model, ds.images[0])
print(len(data), "bytes for a 32x32 image")
recon = decompress(stage2.model, data)

report, outputs = bench(ds, stage2.model, patch_size=32, stride=16)
print(f"bpp {report.mean('bpp')}  PSNR {report.mean('psnr'):.2f} dB  patch FID {report.fid:.4f}")

fig, axes = plt.subplots(2, 6, figsize=(9, 3.2))
for i in range(6):
    axes[0, i].imshow((ds.images[i] + 1) / 2)
    axes[1, i].imshow(np.clip((outputs[i] + 1) / 2, 0, 1))
    axes[0, i].axis("off")
    axes[1, i].axis("off")
fig.tight_layout()
fig.savefig("tiny_codec.png", dpi=120)
