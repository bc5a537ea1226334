import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from litecodec.metrics import (
    PSNR_CAP, FeatureGaussian, MetricsReport, NotPSDError, extract_patches, flatten_extractor,
    frechet_distance, patch_fid, psnr, window_origins,
)
from oracles import frechet_reference


def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0
    # error 0.1 on [0, 1] is 0.2 on [-1, 1]
    assert psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.1) - psnr(a, a + 0.2) == pytest.approx(20 * math.log10(2), abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


@given(arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 1)), arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 1)))
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_patch_examples():
    img = np.zeros((128, 128, 3))
    assert len(extract_patches(img, 64, 32)) == 9
    tiles = extract_patches(np.arange(64 * 64).reshape(64, 64, 1), 16, 16)
    assert len(tiles) == 16 and len(np.unique(tiles)) == 64 * 64
    assert len(extract_patches(img, 128, 32)) == 1
    with pytest.raises(ValueError):
        extract_patches(img, 129, 32)


def _enumerate_windows(h, w, size, stride):
    origins = set()
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            on_y = y % stride == 0 or y == h - size
            on_x = x % stride == 0 or x == w - size
            if on_y and on_x:
                origins.add((y, x))
    return len(origins)


@given(st.integers(1, 256), st.integers(1, 256), st.integers(1, 64), st.integers(1, 64))
@settings(max_examples=200)
def test_patch_count_matches_enumeration(h, w, size, stride):
    if size > min(h, w):
        with pytest.raises(ValueError):
            window_origins(min(h, w), size, stride)
        return
    n = len(window_origins(h, size, stride)) * len(window_origins(w, size, stride))
    assert n == _enumerate_windows(h, w, size, stride)


def _random_psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + 0.1 * np.eye(d)


def test_frechet_examples():
    rng = np.random.default_rng(0)
    s = _random_psd(rng, 4)
    mu = rng.normal(size=4)
    g = FeatureGaussian(mu, s)
    assert frechet_distance(g, g) == pytest.approx(0.0, abs=1e-9)
    delta = np.array([1.0, -2.0, 0.5, 0.0])
    assert frechet_distance(g, FeatureGaussian(mu + delta, s)) == pytest.approx(delta @ delta, abs=1e-9)
    scalar = frechet_distance(FeatureGaussian(np.zeros(1), np.array([[4.0]])),
                              FeatureGaussian(np.zeros(1), np.array([[1.0]])))
    assert scalar == pytest.approx(1.0, abs=1e-12)


def test_frechet_matches_brute_force():
    rng = np.random.default_rng(1)
    for d in range(1, 17):
        for _ in range(3):
            s1, s2 = _random_psd(rng, d), _random_psd(rng, d)
            mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
            got = frechet_distance(FeatureGaussian(mu1, s1), FeatureGaussian(mu2, s2))
            assert got == pytest.approx(frechet_reference(mu1, s1, mu2, s2), abs=1e-6)
            back = frechet_distance(FeatureGaussian(mu2, s2), FeatureGaussian(mu1, s1))
            assert abs(got - back) < 1e-8


def test_frechet_rejects_non_psd():
    bad = FeatureGaussian(np.zeros(2), np.diag([1.0, -1e-3]))
    good = FeatureGaussian(np.zeros(2), np.eye(2))
    with pytest.raises(NotPSDError):
        frechet_distance(bad, good)
    with pytest.raises(NotPSDError):
        frechet_distance(good, bad)
    tiny = FeatureGaussian(np.zeros(2), np.diag([1.0, -1e-10]))
    assert np.isfinite(frechet_distance(tiny, good))
    with pytest.raises(ValueError):
        frechet_distance(good, FeatureGaussian(np.zeros(3), np.eye(3)))


def test_patch_fid_identical_corpora():
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, (3, 64, 64, 3))
    assert patch_fid(images, images.copy(), patch_size=32, stride=16) == pytest.approx(0.0, abs=1e-6)
    assert patch_fid(images, images.copy(), extractor=flatten_extractor, patch_size=4, stride=4) < 1e-6


def test_patch_fid_gaussian_corpora_closed_form():
    rng = np.random.default_rng(0)
    mu1, mu2 = np.array([0.0, 0.5, -0.5]), np.array([1.0, 0.0, 0.5])
    s1, s2 = _random_psd(rng, 3), _random_psd(rng, 3) * 2
    real = rng.multivariate_normal(mu1, s1, size=10_000).reshape(100, 10, 10, 3)
    fake = rng.multivariate_normal(mu2, s2, size=10_000).reshape(100, 10, 10, 3)
    got = patch_fid(real, fake, extractor=flatten_extractor, patch_size=1, stride=1)
    expected = frechet_reference(mu1, s1, mu2, s2)
    assert abs(got - expected) / expected < 0.05


def test_patch_fid_shuffle_invariant():
    rng = np.random.default_rng(0)
    real = rng.normal(size=(6, 16, 16, 3))
    fake = rng.normal(size=(6, 16, 16, 3)) * 0.5
    a = patch_fid(real, fake, extractor=flatten_extractor, patch_size=4, stride=2)
    b = patch_fid(real[::-1], fake[rng.permutation(6)], extractor=flatten_extractor, patch_size=4, stride=2)
    assert a == pytest.approx(b, rel=1e-9)
    with pytest.raises(ValueError):
        patch_fid(real[:0], fake)


def test_rank_deficient_fit_warns(caplog):
    g = FeatureGaussian.fit(np.random.default_rng(0).normal(size=(3, 8)))
    assert "rank deficient" in caplog.text
    assert np.linalg.eigvalsh(g.cov).min() > 0


def test_report_round_trip(tmp_path):
    report = MetricsReport(fid=1.25, config={"patch_size": 64, "stride": 32})
    report.add("a", 32, 32, 0.015625, 0.1015625, 23.5, 0.1)
    report.add("b", 32, 48, 0.015625, 0.0729166, 99.0, 0.0)
    path = tmp_path / "r.tsv"
    report.write(path)
    back = MetricsReport.read(path)
    assert back.rows == report.rows
    assert back.fid == 1.25 and back.config == {"patch_size": "64", "stride": "32"}
    assert back.mean("bpp") == 0.015625
    header = [l for l in path.read_text().splitlines() if not l.startswith("#")][0]
    assert header.split("\t") == ["image", "height", "width", "bpp", "bpp_with_header", "psnr", "l1"]
