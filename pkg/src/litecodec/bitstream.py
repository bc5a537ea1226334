"""Fixed-length coding of index grids into a byte container.

Layout (big-endian header, 11 bytes)::

    magic      4 bytes  b"CODL"
    version    1 byte
    height     uint16   image height in pixels
    width      uint16   image width in pixels
    log2_f     1 byte   log2 of the downsample factor
    bits       1 byte   codebook bits per index
    payload    ceil(h*w*bits/8) bytes, row-major indices, MSB first,
               zero padding bits at the tail
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CODL"
VERSION = 1
HEADER = struct.Struct(">4sBHHBB")
HEADER_BYTES = HEADER.size  # 11


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamInfo:
    height: int
    width: int
    downsample_factor: int
    codebook_bits: int

    @property
    def grid_shape(self):
        f = self.downsample_factor
        return self.height // f, self.width // f


def payload_bytes(h, w, bits):
    return (h * w * bits + 7) // 8


def pack_bits(indices, bits):
    """MSB-first fixed-length packing of a flat sequence of indices."""
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.size and (indices.min() < 0 or indices.max() >= (1 << bits)):
        raise BitstreamError(f"index out of range for {bits}-bit coding")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bit_array = ((indices[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bit_array).tobytes()


def unpack_bits(data, count, bits):
    bit_array = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:count * bits]
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return bit_array.reshape(count, bits).astype(np.int64) @ weights


def pack(indices, height, width, downsample_factor, codebook_bits):
    """Serialize an ``(h, w)`` index grid for an ``height x width`` image."""
    indices = np.asarray(indices)
    if not (0 <= height <= 0xFFFF and 0 <= width <= 0xFFFF):
        raise BitstreamError(f"image size {height}x{width} exceeds the 16-bit header fields")
    if downsample_factor < 1 or downsample_factor & (downsample_factor - 1):
        raise BitstreamError(f"downsample factor {downsample_factor} is not a power of two")
    if not 1 <= codebook_bits <= 16:
        raise BitstreamError(f"codebook_bits {codebook_bits} outside [1, 16]")
    f = downsample_factor
    if height % f or width % f:
        raise BitstreamError(f"image size {height}x{width} is not divisible by {f}")
    if indices.shape != (height // f, width // f):
        raise BitstreamError(f"grid shape {indices.shape} does not match {(height // f, width // f)}")
    header = HEADER.pack(MAGIC, VERSION, height, width, int(math.log2(f)), codebook_bits)
    return header + pack_bits(indices, codebook_bits)


def unpack(data):
    """Inverse of :func:`pack`; returns ``(indices, StreamInfo)``."""
    if len(data) < HEADER_BYTES:
        raise BitstreamError("truncated header")
    magic, version, height, width, log2_f, bits = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unknown version {version}")
    if not 1 <= bits <= 16:
        raise BitstreamError(f"invalid codebook_bits {bits}")
    info = StreamInfo(height, width, 1 << log2_f, bits)
    if height % info.downsample_factor or width % info.downsample_factor:
        raise BitstreamError("header dimensions not divisible by the downsample factor")
    h, w = info.grid_shape
    need = payload_bytes(h, w, bits)
    payload = data[HEADER_BYTES:]
    if len(payload) < need:
        raise BitstreamError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise BitstreamError(f"{len(payload) - need} trailing bytes after payload")
    return unpack_bits(payload, h * w, bits).reshape(h, w), info


def bpp(downsample_factor, codebook_bits, height, width, include_header=False):
    """Bits per pixel for fixed-length coding of an image.

    Payload-only this is exactly ``bits / f**2``; with the header it adds the
    11 header bytes and the tail padding.
    """
    f = downsample_factor
    if height % f or width % f:
        raise BitstreamError(f"image size {height}x{width} is not divisible by {f}")
    h, w = height // f, width // f
    if not include_header:
        return (h * w * codebook_bits) / (height * width)
    return 8 * (HEADER_BYTES + payload_bytes(h, w, codebook_bits)) / (height * width)
