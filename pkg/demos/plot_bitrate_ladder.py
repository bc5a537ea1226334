"""
Bit budgets and the bitstream
=============================

Each latent cell of the codec costs exactly ``b`` bits, one cell per
``f x f`` pixel block, so the rate is ``b / f**2`` bits per pixel no matter
what the image looks like. This script walks the ladder of supported
operating points and then packs a small index grid by hand.
"""

import numpy as np

from litecodec import bitstream
from litecodec.codec import BITRATE_LADDER, CodecConfig

# The ladder maps a target bpp to (downsample factor, codebook bits)
for bpp, (f, b) in sorted(BITRATE_LADDER.items()):
    cfg = CodecConfig(f, b)
    print(f"f={f:2d} b={b} -> {cfg.bpp} bpp, codebook of {cfg.codebook_size} entries")

###############################################################################
# A 32x32 image at f=16 becomes a 2x2 grid of indices. With 2-bit codes the
# four indices fit in a single byte: 00 01 10 11 -> 0x1b.

grid = np.array([[0, 1], [2, 3]])
data = bitstream.pack(grid, 32, 32, 16, 2)
print(data.hex(" "))
print("header bytes:", bitstream.HEADER_BYTES, "payload bytes:", len(data) - bitstream.HEADER_BYTES)

indices, info = bitstream.unpack(data)
print(indices, info)

###############################################################################
# Header overhead matters for thumbnails and vanishes for large images.

for side in (32, 256, 1024):
    plain = bitstream.bpp(16, 4, side, side)
    full = bitstream.bpp(16, 4, side, side, include_header=True)
    print(f"{side:5d}px  payload {plain:.6f} bpp  with header {full:.6f} bpp")
