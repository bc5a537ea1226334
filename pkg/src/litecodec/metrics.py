"""PSNR, patch-based Frechet distance and benchmark reports."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SHRINKAGE = 1e-6
PSD_TOL = 1e-8
REPORT_COLUMNS = ("image", "height", "width", "bpp", "bpp_with_header", "psnr", "l1")


class NotPSDError(ValueError):
    pass


def psnr(a, b):
    """PSNR of two [-1, 1] images measured on the [0, 1] scale (MAX = 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean(((a - b) / 2.0) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def window_origins(length, size, stride):
    if size > length:
        raise ValueError(f"patch size {size} exceeds image extent {length}")
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] != length - size:
        origins.append(length - size)
    return origins


def extract_patches(image, size, stride):
    """All ``size x size`` windows of an ``(H, W, C)`` image at ``stride``.

    Right/bottom-aligned windows are added so the borders are covered.
    Returns ``(n, size, size, C)``.
    """
    image = np.asarray(image)
    ys = window_origins(image.shape[0], size, stride)
    xs = window_origins(image.shape[1], size, stride)
    return np.stack([image[y:y + size, x:x + size] for y in ys for x in xs])


@dataclass
class FeatureGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, features, shrinkage=SHRINKAGE):
        features = np.asarray(features, dtype=np.float64)
        n, d = features.shape
        if n < d:
            log.warning("only %d samples for %d-dim features; covariance is rank deficient", n, d)
        cov = np.cov(features, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
        return cls(features.mean(axis=0), cov + shrinkage * np.eye(d))


def _psd_sqrt(mat, name):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min() < -PSD_TOL:
        raise NotPSDError(f"{name} has eigenvalue {vals.min():.3e} below -{PSD_TOL}")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def trace_sqrt_product(cov1, cov2):
    """``Tr((cov1 cov2)^{1/2})`` via the symmetric form ``cov1^{1/2} cov2 cov1^{1/2}``."""
    root1 = _psd_sqrt(cov1, "first covariance")
    _psd_sqrt(cov2, "second covariance")
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -PSD_TOL:
        raise NotPSDError(f"product has eigenvalue {vals.min():.3e}")
    return float(np.sqrt(np.clip(vals, 0, None)).sum())


def frechet_distance(g1: FeatureGaussian, g2: FeatureGaussian):
    mu1, mu2 = np.asarray(g1.mean, dtype=np.float64), np.asarray(g2.mean, dtype=np.float64)
    s1, s2 = np.atleast_2d(g1.cov).astype(np.float64), np.atleast_2d(g2.cov).astype(np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ValueError("Gaussians have different dimensions")
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt_product(s1, s2)
    return max(float(value), 0.0)


def flatten_extractor(patches):
    """Raw-pixel embedding: ``(n, s, s, C)`` -> ``(n, s*s*C)``."""
    return np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)


class PyramidExtractor:
    """Pooled features of the frozen random pyramid shared with the perceptual loss."""

    def __init__(self, pyramid=None, batch=256):
        import torch
        from .one_step import FeaturePyramid

        self._torch = torch
        self.pyramid = pyramid or FeaturePyramid()
        self.batch = batch

    def __call__(self, patches):
        torch = self._torch
        out = []
        with torch.no_grad():
            for i in range(0, len(patches), self.batch):
                x = torch.as_tensor(np.ascontiguousarray(patches[i:i + self.batch]), dtype=torch.float32)
                out.append(self.pyramid.pooled(x.permute(0, 3, 1, 2)).double().numpy())
        return np.concatenate(out)


def corpus_patches(images, size, stride):
    return np.concatenate([extract_patches(im, size, stride) for im in images])


def patch_fid(real_images, recon_images, extractor=None, patch_size=64, stride=32):
    """Frechet distance between Gaussians fitted to embedded overlapping patches."""
    if len(real_images) == 0 or len(recon_images) == 0:
        raise ValueError("patch_fid needs non-empty corpora")
    extractor = extractor or PyramidExtractor()
    f1 = extractor(corpus_patches(real_images, patch_size, stride))
    f2 = extractor(corpus_patches(recon_images, patch_size, stride))
    return frechet_distance(FeatureGaussian.fit(f1), FeatureGaussian.fit(f2))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    fid: float = None
    config: dict = field(default_factory=dict)

    def add(self, name, height, width, bpp, bpp_with_header, psnr_value, l1):
        self.rows.append({"image": name, "height": height, "width": width, "bpp": bpp,
                          "bpp_with_header": bpp_with_header, "psnr": psnr_value, "l1": l1})

    def mean(self, key):
        return float(np.mean([r[key] for r in self.rows]))

    def write(self, path):
        """Tab-separated rows in ``REPORT_COLUMNS`` order; ``#`` lines carry config and FID."""
        with open(path, "w", newline="") as fh:
            for k, v in sorted(self.config.items()):
                fh.write(f"# {k}={v}\n")
            fh.write(f"# patch_fid={self.fid!r}\n")
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])

    @classmethod
    def read(cls, path):
        report = cls()
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                if key == "patch_fid":
                    report.fid = None if value == "None" else float(value)
                else:
                    report.config[key] = value
            else:
                body.append(line)
        reader = csv.DictReader(body, delimiter="\t")
        for row in reader:
            report.add(row["image"], int(row["height"]), int(row["width"]), float(row["bpp"]),
                       float(row["bpp_with_header"]), float(row["psnr"]), float(row["l1"]))
        return report


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)
