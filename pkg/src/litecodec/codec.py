"""Analysis encoder, condition decoder and vector-quantized bottleneck.

Images travel through the networks as ``(B, 3, H, W)`` tensors in [-1, 1].
The encoder downsamples by ``f`` with one strided residual stage per octave;
the condition decoder works at the diffusion token resolution ``H/16``, so
for ``f < 16`` it adds the missing strided stages instead of upsampling.
"""

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TOKEN_STRIDE = 16
DEFAULT_BETA = 0.25
DEFAULT_REVIVE_WINDOW = 2000

# (downsample_factor, codebook_bits) operating points; bpp = bits / f**2
BITRATE_LADDER = {
    0.00390625: (16, 1),
    0.015625: (16, 4),
    0.03125: (16, 8),
    0.0625: (8, 4),
    0.5: (4, 8),
}


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 16
    codebook_bits: int = 4
    latent_channels: int = 8
    encoder_width: int = 32
    encoder_blocks: int = 1
    decoder_width: int = 64
    decoder_blocks: int = 2

    def __post_init__(self):
        if self.downsample_factor not in (4, 8, 16):
            raise ValueError(f"downsample_factor must be 4, 8 or 16, got {self.downsample_factor}")
        if not 1 <= self.codebook_bits <= 16:
            raise ValueError(f"codebook_bits must be in [1, 16], got {self.codebook_bits}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be positive")

    @property
    def codebook_size(self):
        return 2 ** self.codebook_bits

    @property
    def bpp(self):
        return self.codebook_bits / self.downsample_factor ** 2

    @classmethod
    def for_bpp(cls, bpp, **kwargs):
        """Pick the ladder operating point for an exact bpp value."""
        for value, (f, b) in BITRATE_LADDER.items():
            if math.isclose(value, bpp, rel_tol=0, abs_tol=1e-12):
                return cls(downsample_factor=f, codebook_bits=b, **kwargs)
        raise ValueError(f"no ladder preset for {bpp} bpp; choose one of {sorted(BITRATE_LADDER)}")


def check_divisible(height, width, factor):
    if height % factor or width % factor:
        raise DimensionError(f"image size {height}x{width} is not divisible by {factor}")


def pixels_from_uint8(values):
    """Map 8-bit samples to the symmetric [-1, 1] range."""
    return values / 127.5 - 1.0


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class DownStage(nn.Module):
    """2x strided conv followed by residual blocks."""

    def __init__(self, in_channels, out_channels, blocks):
        super().__init__()
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(out_channels) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.down(x))


class Encoder(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        width = config.encoder_width
        n_stages = int(math.log2(config.downsample_factor))
        self.stem = nn.Conv2d(3, width, 3, padding=1)
        self.stages = nn.ModuleList(
            DownStage(width, width, config.encoder_blocks) for _ in range(n_stages)
        )
        self.out = nn.Conv2d(width, config.latent_channels, 1)

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        z = self.out(F.silu(x))
        # per-cell channel normalisation to unit norm, the codebook's init scale
        z = F.layer_norm(z.permute(0, 2, 3, 1), z.shape[1:2]).permute(0, 3, 1, 2)
        return z / math.sqrt(z.shape[1])


class ConditionDecoder(nn.Module):
    """Maps quantized latents to condition features on the token grid."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        width = config.decoder_width
        self.inp = nn.Conv2d(config.latent_channels, width, 3, padding=1)
        n_down = int(math.log2(TOKEN_STRIDE // config.downsample_factor))
        self.down = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride=2, padding=1) for _ in range(n_down)
        )
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(config.decoder_blocks)])

    @property
    def out_channels(self):
        return self.config.decoder_width

    def forward(self, z):
        x = self.inp(z)
        for conv in self.down:
            x = conv(F.silu(x))
        return self.blocks(x)


def init_codebook(num_codes, dim, generator=None):
    """Gaussian rows with std 1/sqrt(dim); redraws until rows are distinct."""
    while True:
        rows = torch.randn(num_codes, dim, generator=generator) / math.sqrt(dim)
        if torch.unique(rows, dim=0).shape[0] == num_codes:
            return rows


def nearest_code(flat, codebook, chunk=65536):
    """Index of the nearest codebook row for each row of ``flat``.

    Distances are computed from explicit differences; ``argmin`` returns the
    first minimum, so ties go to the lowest index.
    """
    out = torch.empty(flat.shape[0], dtype=torch.long, device=flat.device)
    step = max(1, chunk // max(1, codebook.shape[0]))
    for start in range(0, flat.shape[0], step):
        block = flat[start:start + step]
        dist = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        out[start:start + step] = dist.argmin(dim=1)
    return out


def quantize(latent, codebook):
    """Nearest-neighbour quantization of a ``(B, C, h, w)`` latent.

    Returns ``(indices, quantized)`` where ``indices`` is ``(B, h, w)`` and
    ``quantized`` carries a straight-through gradient to ``latent``.
    """
    if latent.shape[1] != codebook.shape[1]:
        raise DimensionError(
            f"latent has {latent.shape[1]} channels but codebook rows have {codebook.shape[1]}"
        )
    b, c, h, w = latent.shape
    flat = latent.detach().permute(0, 2, 3, 1).reshape(-1, c)
    indices = nearest_code(flat, codebook.detach()).reshape(b, h, w)
    selected = lookup(indices, codebook)
    return indices, latent + (selected - latent).detach()


def lookup(indices, codebook):
    """Gather codebook rows for an index grid, giving ``(B, C, h, w)``."""
    k = codebook.shape[0]
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= k):
        raise IndexError(f"codebook index out of range [0, {k})")
    return F.embedding(indices, codebook).permute(0, 3, 1, 2)


def commitment_loss(latent, quantized, beta=DEFAULT_BETA):
    """Codebook term plus beta-weighted commitment term, mean over cells.

    ``quantized`` must be the raw selected rows (not the straight-through
    tensor) for the codebook term to reach the codebook.
    """
    if latent.shape != quantized.shape:
        raise DimensionError(f"shape mismatch {tuple(latent.shape)} vs {tuple(quantized.shape)}")
    codebook_term = ((latent.detach() - quantized) ** 2).sum(1).mean()
    commit_term = ((latent - quantized.detach()) ** 2).sum(1).mean()
    return codebook_term + beta * commit_term


def revive_dead_codes(codebook, usage_counts, encoder_samples, generator=None):
    """Replace unused rows by randomly drawn encoder outputs.

    ``encoder_samples`` is an ``(n, C)`` pool. Returns a new tensor; rows with
    a nonzero count are copied unchanged.
    """
    usage_counts = torch.as_tensor(usage_counts)
    if usage_counts.shape[0] != codebook.shape[0]:
        raise ValueError("usage_counts must have one entry per codebook row")
    dead = torch.nonzero(usage_counts == 0).flatten()
    new = codebook.detach().clone()
    if dead.numel() == 0:
        return new
    if encoder_samples is None or encoder_samples.shape[0] == 0:
        warnings.warn(f"{dead.numel()} dead codes but no encoder samples to revive them")
        return new
    pick = torch.randint(encoder_samples.shape[0], (dead.numel(),), generator=generator)
    new[dead] = encoder_samples.detach()[pick].to(new.dtype)
    return new


class VectorQuantizer(nn.Module):
    """Learned codebook with usage tracking for dead-code revival."""

    def __init__(self, config: CodecConfig, beta=DEFAULT_BETA, revive_window=DEFAULT_REVIVE_WINDOW,
                 generator=None):
        super().__init__()
        self.beta = beta
        self.revive_window = revive_window
        self.codebook = nn.Parameter(init_codebook(config.codebook_size, config.latent_channels, generator))
        self.register_buffer("usage", torch.zeros(config.codebook_size, dtype=torch.long))
        self.register_buffer("steps_since_revival", torch.zeros((), dtype=torch.long))
        self._pool = None

    def forward(self, latent):
        indices, quantized_st = quantize(latent, self.codebook)
        selected = lookup(indices, self.codebook)
        loss = commitment_loss(latent, selected, self.beta)
        if self.training:
            self.usage += torch.bincount(indices.flatten(), minlength=self.usage.shape[0])
            self._pool = latent.detach().permute(0, 2, 3, 1).reshape(-1, latent.shape[1])
        return indices, quantized_st, loss

    @torch.no_grad()
    def maybe_revive(self, generator=None):
        """Call once per optimizer step; revives at the end of each window."""
        self.steps_since_revival += 1
        if int(self.steps_since_revival) < self.revive_window:
            return 0
        dead = int((self.usage == 0).sum())
        self.codebook.copy_(revive_dead_codes(self.codebook, self.usage, self._pool, generator))
        self.usage.zero_()
        self.steps_since_revival.zero_()
        return dead


class Codec(nn.Module):
    """Encoder + codebook + condition decoder."""

    def __init__(self, config: CodecConfig, generator=None):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.quantizer = VectorQuantizer(config, generator=generator)
        self.cond_decoder = ConditionDecoder(config)

    @property
    def cond_channels(self):
        return self.cond_decoder.out_channels

    def encode_latent(self, images):
        check_divisible(images.shape[-2], images.shape[-1], self.config.downsample_factor)
        return self.encoder(images)

    def forward(self, images):
        """Returns ``(indices, condition_features, commitment_loss)``."""
        latent = self.encode_latent(images)
        indices, quantized, loss = self.quantizer(latent)
        return indices, self.cond_decoder(quantized), loss

    def encode(self, images):
        latent = self.encode_latent(images)
        indices, _ = quantize(latent, self.quantizer.codebook)
        return indices

    def decode_condition(self, indices):
        return self.cond_decoder(lookup(indices, self.quantizer.codebook))
