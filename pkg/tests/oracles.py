"""Independent brute-force reference implementations used by the tests."""

import itertools
import math

import numpy as np


def nearest_index(cells, codebook):
    """Exhaustive search with an explicit lowest-index tie-break."""
    out = []
    for cell in np.asarray(cells, dtype=np.float64):
        best, best_d = 0, math.inf
        for k, row in enumerate(np.asarray(codebook, dtype=np.float64)):
            d = float(((cell - row) ** 2).sum())
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def pack_bits_reference(values, bits):
    """MSB-first bit string built character by character."""
    s = "".join(format(int(v), f"0{bits}b") for v in values)
    s += "0" * (-len(s) % 8)
    return bytes(int(s[i:i + 8], 2) for i in range(0, len(s), 8))


def token_distance(a, b, w):
    (ra, ca), (rb, cb) = divmod(a, w), divmod(b, w)
    return math.hypot(ra - rb, ca - cb)


def mean_distance_reference(attn, grid, query):
    h, w = grid
    return sum(attn[query, j] * token_distance(query, j, w) for j in range(h * w))


def topk_reference(maps, grid, k_percent):
    """Score-weighted distance over the top-K% entries of stacked ``(heads, N, N)`` maps."""
    h, w = grid
    entries = []
    for m in maps:
        for head in m:
            for i, j in itertools.product(range(h * w), repeat=2):
                entries.append((head[i, j], token_distance(i, j, w)))
    entries.sort(key=lambda e: (-e[0], e[1]))
    count = int(math.floor(k_percent * len(entries) / 100.0 + 1e-9))
    top = entries[:count]
    total = sum(s for s, _ in top)
    return sum(s * d for s, d in top) / total if total > 0 else 0.0


def profile_reference(maps, grid):
    h, w = grid
    mass = {}
    for m in maps:
        for head in m:
            for i, j in itertools.product(range(h * w), repeat=2):
                key = round(token_distance(i, j, w) * 2) / 2
                mass[key] = mass.get(key, 0.0) + head[i, j]
    total = sum(mass.values())
    keys = sorted(mass)
    return np.array(keys), np.array([mass[k] / total for k in keys])


def sqrtm_psd(mat):
    vals, vecs = np.linalg.eig(mat)
    return (vecs * np.sqrt(vals.astype(complex))) @ np.linalg.inv(vecs)


def frechet_reference(mu1, s1, mu2, s2):
    """Trace term from the eigenvalues of the non-symmetric product ``s1 @ s2``."""
    vals = np.linalg.eigvals(s1 @ s2)
    tr = np.sqrt(np.clip(vals.real, 0, None)).sum()
    d = mu1 - mu2
    return float(d @ d + np.trace(s1) + np.trace(s2) - 2 * tr)


def noised_gaussian_kl(mu_g, sd_g, mu_r, sd_r, ts, grid):
    """Sum over ``ts`` of KL(p_gen,t || p_real,t) by explicit discretized convolution.

    Each clean density is discretized on ``grid`` and pushed through
    ``x_t = t x + (1 - t) eps`` by summing Gaussian kernels.
    """
    dx = grid[1] - grid[0]
    total = 0.0
    for t in ts:
        s = 1.0 - t
        kern = np.exp(-0.5 * ((grid[:, None] - t * grid[None, :]) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        densities = []
        for mu, sd in ((mu_g, sd_g), (mu_r, sd_r)):
            p = np.exp(-0.5 * ((grid - mu) / sd) ** 2)
            p /= p.sum()
            densities.append(kern @ p)
        pg, pr = densities
        pg, pr = pg / (pg.sum() * dx), pr / (pr.sum() * dx)
        keep = pg > 1e-300
        total += float((pg[keep] * np.log(pg[keep] / np.maximum(pr[keep], 1e-300))).sum() * dx)
    return total


def linear_denoiser(mu, sd):
    """Posterior mean E[x0 | x_t] for Gaussian data N(mu, sd^2)."""
    def x0_hat(xt, t):
        var = t * t * sd * sd + (1 - t) ** 2
        return mu + (t * sd * sd / var) * (xt - t * mu)
    return x0_hat
