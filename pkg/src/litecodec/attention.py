"""Locality statistics of attention maps.

All distances are Euclidean on integer token coordinates (row, col), in
token units. Records come from ``Backbone(..., capture_attention=True)``.
"""

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import AttentionRecord, UnsupportedError
from .flow import noise
from .metrics import psnr
from .training import to_images, to_tensor

log = logging.getLogger(__name__)

TOPK_PERCENTS = (1, 20, 50, 100)
DEFAULT_TIMESTEPS = (0.1, 0.3, 0.5, 0.7, 0.9)
BIN_WIDTH = 0.5


@dataclass
class DistanceProfile:
    bins: np.ndarray
    mass: np.ndarray
    grid: tuple


def token_positions(grid):
    h, w = grid
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def pair_distances(grid):
    pos = token_positions(grid)
    return np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))


def _as_list(records):
    return [records] if isinstance(records, AttentionRecord) else list(records)


def mean_attention_distance(record: AttentionRecord, query, layer=None):
    """Head-averaged attention-weighted distance from ``query`` to all tokens.

    ``layer=None`` averages the head-averaged maps over every layer.
    """
    n = record.num_tokens
    if not 0 <= query < n:
        raise IndexError(f"query {query} outside [0, {n})")
    maps = record.maps if layer is None else [record.maps[layer]]
    attn = np.mean([np.asarray(m, dtype=np.float64).mean(axis=0) for m in maps], axis=0)
    return float(attn[query] @ pair_distances(record.grid)[query])


def _topk_block(scores, dists, k_percent):
    """Score-weighted mean distance over the top-``k_percent`` scores.

    Ties are broken by shorter distance so that the result does not depend
    on head or query order.
    """
    scores = scores.ravel()
    dists = dists.ravel()
    count = int(math.floor(k_percent * scores.size / 100.0 + 1e-9))
    if count == 0:
        warnings.warn(f"top-{k_percent}% of {scores.size} scores selects nothing; reporting 0")
        return 0.0
    order = np.lexsort((dists, -scores))[:count]
    s = scores[order]
    total = s.sum()
    if total <= 0:
        return 0.0
    return float((s * dists[order]).sum() / total)


def topk_attention_distance(records, k_percent, scope="per_block"):
    """Top-K% attention distance per block, or averaged over blocks.

    ``records`` may be one record or several sharing a grid; their scores
    are pooled within each block.
    """
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    records = _as_list(records)
    grid = _common_grid(records)
    dist = pair_distances(grid)
    n_layers = len(records[0].maps)
    per_block = []
    for layer in range(n_layers):
        scores = np.concatenate([np.asarray(r.maps[layer], dtype=np.float64).reshape(-1, *dist.shape)
                                 for r in records])
        per_block.append(_topk_block(scores, np.broadcast_to(dist, scores.shape), k_percent))
    if scope == "per_block":
        return per_block
    if scope == "all_blocks":
        return float(np.mean(per_block)) if per_block else 0.0
    raise ValueError(f"unknown scope {scope!r}")


def _common_grid(records):
    if not records:
        raise ValueError("no attention records")
    grids = {tuple(r.grid) for r in records}
    if len(grids) != 1:
        raise ValueError(f"records mix token grids {sorted(grids)}")
    return grids.pop()


def distance_profile(records, t=None):
    """Normalised attention mass per distance bin (bins of width 0.5).

    Aggregates every query/target pair, head and layer of the records whose
    timestep matches ``t`` (all records when ``t`` is None).
    """
    records = _as_list(records)
    if t is not None:
        records = [r for r in records if r.t is not None and math.isclose(r.t, t, abs_tol=1e-9)]
    grid = _common_grid(records)
    binned = np.round(pair_distances(grid) / BIN_WIDTH) * BIN_WIDTH
    bins = np.unique(binned)
    mass = np.zeros(len(bins))
    where = np.searchsorted(bins, binned)
    for r in records:
        for m in r.maps:
            per_pair = np.asarray(m, dtype=np.float64).sum(axis=0)
            mass += np.bincount(where.ravel(), weights=per_pair.ravel(), minlength=len(bins))
    total = mass.sum()
    if total > 0:
        mass = mass / total
    return DistanceProfile(bins, mass, grid)


def mixed_attention(n, alpha):
    """``alpha * I + (1 - alpha) * uniform`` on ``n`` tokens."""
    return alpha * np.eye(n) + (1 - alpha) * np.full((n, n), 1.0 / n)


@torch.no_grad()
def collect_attention(model, images, t, seed=0):
    """Attention records of ``model`` on ``images`` noised to timestep ``t``.

    ``images`` is an ``(N, H, W, 3)`` array.
    """
    if not model.backbone_config.is_attention:
        raise UnsupportedError("attention analysis needs an attention backbone")
    x0 = to_tensor(images)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.shape, generator=gen)
    tt = torch.full((x0.shape[0],), float(t))
    cond, _, _ = model.condition(x0)
    _, records = model(noise(x0, eps, tt), tt, cond, capture_attention=True)
    return records


@torch.no_grad()
def mask_sink_tokens(model, positions, images):
    """Quality change of one-step decoding when ``positions`` receive no attention.

    Logits towards the listed key tokens are set to -inf (a query always
    keeps itself) and rows renormalise. Returns mean L1/PSNR for both runs
    and their deltas (masked minus unmasked).
    """
    if not model.backbone_config.is_attention:
        raise UnsupportedError("sink-token masking needs an attention backbone")
    x0 = to_tensor(images)
    cond, _, _ = model.condition(x0)
    base = model.one_step(cond, x0.shape).clamp(-1, 1)
    masked = model.one_step(cond, x0.shape, masked_positions=list(positions)).clamp(-1, 1)
    ref = np.asarray(images, dtype=np.float64)
    out = {}
    for name, rec in (("unmasked", base), ("masked", masked)):
        rec = to_images(rec)
        out[f"l1_{name}"] = float(np.abs(rec - ref).mean())
        out[f"psnr_{name}"] = float(np.mean([psnr(a, b) for a, b in zip(rec, ref)]))
    out["delta_l1"] = out["l1_masked"] - out["l1_unmasked"]
    out["delta_psnr"] = out["psnr_masked"] - out["psnr_unmasked"]
    return out


def write_profile(path, profile: DistanceProfile):
    with open(path, "w") as fh:
        fh.write(f"# grid={profile.grid[0]}x{profile.grid[1]}\n")
        fh.write("distance\tmass\n")
        for b, m in zip(profile.bins, profile.mass):
            fh.write(f"{b!r}\t{m!r}\n")


def write_series(path, x_name, x_values, series):
    """Plot-data file: first column ``x``, one column per named series."""
    names = list(series)
    with open(path, "w") as fh:
        fh.write("\t".join([x_name] + names) + "\n")
        for i, x in enumerate(x_values):
            fh.write("\t".join([repr(x)] + [repr(float(series[n][i])) for n in names]) + "\n")


def read_series(path):
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines() if l and not l.startswith("#")]
    header = lines[0].split("\t")
    cols = list(zip(*[[float(v) for v in l.split("\t")] for l in lines[1:]]))
    return header[0], np.array(cols[0]), {name: np.array(c) for name, c in zip(header[1:], cols[1:])}
