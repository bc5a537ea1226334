"""Patch-token denoising backbone with interchangeable token mixers.

Three mixer types share one block layout (pre-norm mixer + pre-norm MLP):

* ``global_attention``: multi-head self-attention over all tokens.
* ``window_attention``: the same attention restricted to a ``window x window``
  neighbourhood; out-of-grid neighbours are excluded from the softmax.
* ``depthwise_conv``: depth-wise ``kernel x kernel`` conv followed by
  squeeze-excitation channel attention.

Condition features are projected to the model width and added to the patch
embeddings and again before the last block. A per-pixel MLP head turns token
features into pixels.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import DimensionError

BLOCK_TYPES = ("global_attention", "window_attention", "depthwise_conv")
FOURIER_FREQS = 8


class UnsupportedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    block_type: str = "depthwise_conv"
    width: int = 128
    depth: int = 6
    heads: int = 4
    window: int = 3
    kernel: int = 3
    patch_size: int = 16
    timestep_conditioning: bool = False
    pixel_head_depth: int = 2
    pixel_head_width: int = 64
    mlp_ratio: int = 4
    se_reduction: int = 4

    def __post_init__(self):
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"unknown block_type {self.block_type!r}; expected one of {BLOCK_TYPES}")
        if self.block_type != "depthwise_conv" and self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 0 or self.width < 1:
            raise ValueError("depth must be >= 0 and width >= 1")

    @property
    def is_attention(self):
        return self.block_type != "depthwise_conv"


TEACHER_DEFAULT = BackboneConfig(block_type="global_attention", width=256, depth=10, heads=8)


@dataclass
class AttentionRecord:
    """Per-layer ``(heads, N, N)`` attention maps over an ``h x w`` token grid."""

    maps: list
    grid: tuple
    t: float = None
    meta: dict = field(default_factory=dict)

    @property
    def num_tokens(self):
        return self.grid[0] * self.grid[1]


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def window_mask(h, w, window, device=None):
    """Boolean ``(N, N)`` mask: True where the key is inside the query's window."""
    ys, xs = torch.meshgrid(torch.arange(h, device=device), torch.arange(w, device=device), indexing="ij")
    ys, xs = ys.flatten(), xs.flatten()
    r = window // 2
    return ((ys[:, None] - ys[None]).abs() <= r) & ((xs[:, None] - xs[None]).abs() <= r)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gating from mean-pooled features."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


def channel_attention(features, module):
    """Functional form: apply ``module``'s gates to ``(B, C, H, W)`` features."""
    return module(features)


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, allowed=None, capture=False, identity=False):
        # x: (B, N, D); allowed: (N, N) bool or None
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if identity:
            attn = torch.eye(n, dtype=x.dtype, device=x.device).expand(b, self.heads, n, n)
        else:
            logits = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
            if allowed is not None:
                logits = logits.masked_fill(~allowed, float("-inf"))
            attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), (attn.detach() if capture else None)


class Block(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.width
        affine = not config.timestep_conditioning
        self.norm1 = nn.LayerNorm(d, elementwise_affine=affine, eps=1e-6)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=affine, eps=1e-6)
        if config.is_attention:
            self.attn = SelfAttention(d, config.heads)
        else:
            self.dwconv = nn.Conv2d(d, d, config.kernel, padding=config.kernel // 2, groups=d)
            self.se = ChannelAttention(d, config.se_reduction)
        self.mlp = nn.Sequential(nn.Linear(d, config.mlp_ratio * d), nn.GELU(), nn.Linear(config.mlp_ratio * d, d))
        if config.timestep_conditioning:
            self.ada = nn.Linear(d, 6 * d)
            nn.init.zeros_(self.ada.weight)
            nn.init.zeros_(self.ada.bias)
        else:
            # per-channel residual scales; hold the folded AdaLN gates
            self.gamma1 = nn.Parameter(torch.ones(d))
            self.gamma2 = nn.Parameter(torch.ones(d))

    def mix(self, x, grid, ctx):
        h, w = grid
        if self.config.is_attention:
            return self.attn(x, allowed=ctx.get("allowed"), capture=ctx.get("capture", False),
                             identity=ctx.get("identity", False))
        b, n, d = x.shape
        y = x.transpose(1, 2).reshape(b, d, h, w)
        y = self.se(self.dwconv(y))
        return y.reshape(b, d, n).transpose(1, 2), None

    def forward(self, x, grid, temb, ctx):
        if temb is None:
            y, attn = self.mix(self.norm1(x), grid, ctx)
            x = x + self.gamma1 * y
            return x + self.gamma2 * self.mlp(self.norm2(x)), attn
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(temb))[:, None].chunk(6, dim=-1)
        y, attn = self.mix(self.norm1(x) * (1 + scale1) + shift1, grid, ctx)
        x = x + gate1 * y
        return x + gate2 * self.mlp(self.norm2(x) * (1 + scale2) + shift2), attn


def fourier_coords(patch_size, freqs=FOURIER_FREQS):
    """``(4*freqs, P, P)`` sin/cos features of intra-patch (y, x) offsets in [0, 1)."""
    c = (torch.arange(patch_size, dtype=torch.float64) + 0.5) / patch_size
    yy, xx = torch.meshgrid(c, c, indexing="ij")
    bands = (2.0 ** torch.arange(freqs, dtype=torch.float64)) * math.pi
    feats = []
    for coord in (yy, xx):
        arg = bands[:, None, None] * coord[None]
        feats += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(feats, dim=0).float()


class PixelHead(nn.Module):
    """Per-pixel MLP on [patch token feature, noisy RGB, intra-patch Fourier coords].

    The first layer is split: the token part is applied once per token and
    broadcast over the patch, which equals a dense layer on the concatenation.
    Every later layer is a 1x1 conv, so pixels never mix.
    """

    def __init__(self, width, patch_size, hidden=64, depth=2):
        super().__init__()
        self.patch_size = patch_size
        self.register_buffer("coords", fourier_coords(patch_size), persistent=False)
        n_coord = self.coords.shape[0]
        self.token_in = nn.Linear(width, hidden)
        self.pixel_in = nn.Conv2d(3 + n_coord, hidden, 1, bias=False)
        self.hidden = nn.ModuleList(nn.Conv2d(hidden, hidden, 1) for _ in range(max(0, depth - 1)))
        self.out = nn.Conv2d(hidden, 3, 1)

    def forward(self, tokens, noisy):
        # tokens: (B, D, h, w); noisy: (B, 3, H, W)
        p = self.patch_size
        b, _, h, w = tokens.shape
        if noisy.shape[-2:] != (h * p, w * p):
            raise DimensionError(f"token grid {h}x{w} inconsistent with image {tuple(noisy.shape[-2:])}")
        t = self.token_in(tokens.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        t = t.repeat_interleave(p, dim=2).repeat_interleave(p, dim=3)
        coords = self.coords.to(noisy.dtype).repeat(1, h, w)[None].expand(b, -1, -1, -1)
        x = t + self.pixel_in(torch.cat([noisy, coords], dim=1))
        for layer in self.hidden:
            x = layer(F.silu(x))
        return self.out(F.silu(x))


def pixel_head(token_features, noisy, head):
    return head(token_features, noisy)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, cond_channels):
        super().__init__()
        self.config = config
        d, p = config.width, config.patch_size
        self.patch_embed = nn.Conv2d(3, d, p, stride=p)
        self.cond_in = nn.Conv2d(cond_channels, d, 1)
        self.cond_final = nn.Conv2d(cond_channels, d, 1)
        if config.timestep_conditioning:
            self.t_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.depth))
        self.norm_out = nn.LayerNorm(d, eps=1e-6)
        self.pixel_head = PixelHead(d, p, config.pixel_head_width, config.pixel_head_depth)

    def forward(self, noisy, t, cond, capture_attention=False, masked_positions=None, identity_attention=False):
        """Predict from a noisy ``(B, 3, H, W)`` image.

        Returns the prediction, plus a list of :class:`AttentionRecord` (one
        per batch item) when ``capture_attention`` is set.
        """
        cfg = self.config
        p = cfg.patch_size
        if noisy.shape[-2] % p or noisy.shape[-1] % p:
            raise DimensionError(f"image size {tuple(noisy.shape[-2:])} not divisible by patch size {p}")
        grid = (noisy.shape[-2] // p, noisy.shape[-1] // p)
        if tuple(cond.shape[-2:]) != grid:
            raise DimensionError(f"condition grid {tuple(cond.shape[-2:])} does not match token grid {grid}")
        if (capture_attention or masked_positions is not None or identity_attention) and not cfg.is_attention:
            raise UnsupportedError("attention capture/masking needs an attention backbone, not depthwise_conv")

        b = noisy.shape[0]
        x = self.patch_embed(noisy) + self.cond_in(cond)
        x = x.flatten(2).transpose(1, 2)
        final_cond = self.cond_final(cond).flatten(2).transpose(1, 2)

        temb = None
        if cfg.timestep_conditioning:
            t = torch.as_tensor(t, dtype=noisy.dtype, device=noisy.device).reshape(-1).expand(b)
            temb = self.t_embed(timestep_embedding(t, cfg.width))

        ctx = {"capture": capture_attention, "identity": identity_attention}
        ctx["allowed"] = self._allowed(grid, masked_positions, noisy.device)
        maps = []
        for i, block in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                x = x + final_cond
            x, attn = block(x, grid, temb, ctx)
            if capture_attention:
                maps.append(attn.cpu().double().numpy())
        x = self.norm_out(x).transpose(1, 2).reshape(b, cfg.width, *grid)
        out = self.pixel_head(x, noisy)
        if not capture_attention:
            return out
        t_val = float(torch.as_tensor(t).reshape(-1)[0]) if t is not None else None
        records = [AttentionRecord([m[i] for m in maps], grid, t_val) for i in range(b)]
        return out, records

    @torch.no_grad()
    def without_timestep(self, t=0.0):
        """Copy with AdaLN removed, folding the modulation at ``t`` into the
        plain norms and residual scales. Matches this model at that ``t``."""
        cfg = self.config
        if not cfg.timestep_conditioning:
            raise ValueError("backbone has no timestep conditioning to remove")
        new_cfg = replace(cfg, timestep_conditioning=False)
        new = Backbone(new_cfg, self.cond_in.in_channels).to(self.patch_embed.weight.dtype)
        own = {k: v for k, v in self.state_dict().items() if ".ada." not in k and not k.startswith("t_embed.")}
        new.load_state_dict(own, strict=False)
        tt = torch.full((1,), float(t), dtype=self.patch_embed.weight.dtype)
        temb = self.t_embed(timestep_embedding(tt, cfg.width))
        for old, blk in zip(self.blocks, new.blocks):
            shift1, scale1, gate1, shift2, scale2, gate2 = old.ada(F.silu(temb))[0].chunk(6)
            blk.norm1.weight.copy_(1 + scale1)
            blk.norm1.bias.copy_(shift1)
            blk.norm2.weight.copy_(1 + scale2)
            blk.norm2.bias.copy_(shift2)
            blk.gamma1.copy_(gate1)
            blk.gamma2.copy_(gate2)
        return new

    def _allowed(self, grid, masked_positions, device):
        cfg = self.config
        allowed = None
        if cfg.block_type == "window_attention":
            allowed = window_mask(*grid, cfg.window, device)
        if masked_positions is not None and len(masked_positions):
            n = grid[0] * grid[1]
            keep = torch.ones(n, n, dtype=torch.bool, device=device)
            pos = torch.as_tensor(list(masked_positions), dtype=torch.long, device=device)
            if pos.min() < 0 or pos.max() >= n:
                raise IndexError(f"masked position out of range [0, {n})")
            keep[:, pos] = False
            keep |= torch.eye(n, dtype=torch.bool, device=device)  # a query always keeps itself
            allowed = keep if allowed is None else allowed & keep
        return allowed


# ---------------------------------------------------------------------------
# analytic MAC accounting


def conv_macs(h, w, cin, cout, k, groups=1):
    return h * w * cin * cout * k * k // groups


def dense_macs(n, cin, cout):
    return n * cin * cout


def block_macs(config: BackboneConfig, n_tokens):
    d, n = config.width, n_tokens
    mlp = 2 * dense_macs(n, d, config.mlp_ratio * d)
    if config.block_type == "global_attention":
        mixer = dense_macs(n, d, 3 * d) + dense_macs(n, d, d) + 2 * n * n * d
    elif config.block_type == "window_attention":
        mixer = dense_macs(n, d, 3 * d) + dense_macs(n, d, d) + 2 * n * config.window ** 2 * d
    else:
        hidden = max(1, d // config.se_reduction)
        mixer = n * d * config.kernel ** 2 + 2 * d * hidden
    ada = 6 * d * d if config.timestep_conditioning else 0
    return mixer + mlp + ada


def count_macs(backbone: BackboneConfig, codec, height, width):
    """Analytic multiply-accumulate counts per module for one image.

    ``codec`` is a :class:`~litecodec.codec.CodecConfig`. Returns a dict with
    total MACs per module and a parallel ``kmacs_per_pixel`` dict.
    """
    f = codec.downsample_factor
    p = backbone.patch_size
    ht, wt = height // p, width // p
    n = ht * wt

    enc = conv_macs(height, width, 3, codec.encoder_width, 3)
    h, w = height, width
    cw = codec.encoder_width
    for _ in range(int(math.log2(f))):
        h, w = h // 2, w // 2
        enc += conv_macs(h, w, cw, cw, 3) + codec.encoder_blocks * 2 * conv_macs(h, w, cw, cw, 3)
    enc += conv_macs(h, w, cw, codec.latent_channels, 1)

    dw = codec.decoder_width
    dec = conv_macs(h, w, codec.latent_channels, dw, 3)
    for _ in range(int(math.log2(16 // f))):
        h, w = h // 2, w // 2
        dec += conv_macs(h, w, dw, dw, 3)
    dec += codec.decoder_blocks * 2 * conv_macs(ht, wt, dw, dw, 3)

    d = backbone.width
    embed = conv_macs(ht, wt, 3, d, p) + 2 * conv_macs(ht, wt, dw, d, 1)
    if backbone.timestep_conditioning:
        embed += 2 * d * d
    blocks = backbone.depth * block_macs(backbone, n)

    hid = backbone.pixel_head_width
    n_coord = 4 * FOURIER_FREQS
    head = dense_macs(n, d, hid) + height * width * (
        (3 + n_coord) * hid + max(0, backbone.pixel_head_depth - 1) * hid * hid + hid * 3
    )
    totals = {"encoder": enc, "decoder": dec, "embedding": embed, "backbone": blocks, "pixel_head": head}
    pixels = height * width
    return {"macs": totals, "kmacs_per_pixel": {k: v / pixels / 1e3 for k, v in totals.items()}}


def count_module_macs(module, *inputs):
    """Measure MACs of conv/linear layers by running ``module`` with hooks.

    Attention score products are not layers, so they are not counted here.
    """
    total = [0]

    def conv_hook(m, inp, out):
        k = m.kernel_size[0] * m.kernel_size[1]
        total[0] += out.numel() // out.shape[0] * (m.in_channels // m.groups) * k

    def linear_hook(m, inp, out):
        total[0] += out.numel() // out.shape[0] * m.in_features

    handles = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return total[0]


def attention_rows_sum(records):
    return np.concatenate([np.stack(r.maps).sum(-1).ravel() for r in records])
