import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from litecodec.attention import (
    collect_attention, distance_profile, mask_sink_tokens, mean_attention_distance, mixed_attention,
    pair_distances, read_series, topk_attention_distance, write_series,
)
from litecodec.backbone import AttentionRecord, BackboneConfig, UnsupportedError
from litecodec.codec import CodecConfig
from litecodec.models import DiffusionCodec
from oracles import mean_distance_reference, profile_reference, topk_reference


def random_maps(rng, grid, layers=2, heads=3):
    n = grid[0] * grid[1]
    maps = []
    for _ in range(layers):
        logits = rng.normal(size=(heads, n, n)) * 2
        a = np.exp(logits)
        maps.append(a / a.sum(-1, keepdims=True))
    return maps


def uniform(grid, heads=1):
    n = grid[0] * grid[1]
    return AttentionRecord([np.full((heads, n, n), 1.0 / n)], grid)


def test_uniform_two_by_two():
    assert mean_attention_distance(uniform((2, 2)), 0) == pytest.approx((2 + math.sqrt(2)) / 4, abs=1e-12)
    assert round(mean_attention_distance(uniform((2, 2)), 0), 6) == 0.853553


def test_identity_is_zero():
    rec = AttentionRecord([np.eye(9)[None]], (3, 3))
    assert all(mean_attention_distance(rec, q) == 0 for q in range(9))
    prof = distance_profile(rec)
    assert prof.bins[0] == 0 and prof.mass[0] == 1 and prof.mass[1:].sum() == 0


def test_one_hot_far_corner():
    a = np.zeros((1, 16, 16))
    a[0, 0, 15] = 1
    a[0, 1:, 0] = 1
    assert mean_attention_distance(AttentionRecord([a], (4, 4)), 0) == pytest.approx(3 * math.sqrt(2), abs=1e-12)


def test_query_out_of_range():
    with pytest.raises(IndexError):
        mean_attention_distance(uniform((2, 2)), 4)


def test_brute_force_agreement_on_small_grids():
    rng = np.random.default_rng(0)
    for grid in ((1, 1), (1, 5), (2, 3), (4, 4), (3, 7), (8, 8)):
        maps = random_maps(rng, grid)
        rec = AttentionRecord(maps, grid)
        for layer in range(2):
            avg = maps[layer].mean(0)
            for q in range(0, grid[0] * grid[1], 3):
                got = mean_attention_distance(rec, q, layer=layer)
                assert got == pytest.approx(mean_distance_reference(avg, grid, q), abs=1e-9)
        for k in (1, 20, 50, 100):
            with warnings.catch_warnings():
                # 1% of a tiny grid selects nothing; both sides report 0
                warnings.simplefilter("ignore")
                got = topk_attention_distance(rec, k)
            for layer in range(2):
                assert got[layer] == pytest.approx(topk_reference([maps[layer]], grid, k), abs=1e-9)
        bins, mass = profile_reference(maps, grid)
        prof = distance_profile(rec)
        assert np.array_equal(prof.bins, bins)
        assert np.allclose(prof.mass, mass, atol=1e-9, rtol=0)


def test_topk_self_heavy_example():
    grid = (1, 10)
    a = np.zeros((1, 10, 10))
    for q in range(10):
        a[0, q, q] = 0.99
        a[0, q, q + 5 if q < 5 else q - 5] = 0.01
    rec = AttentionRecord([a], grid)
    assert topk_attention_distance(rec, 1) == [0.0]
    assert topk_attention_distance(rec, 100)[0] == pytest.approx(0.05, abs=1e-12)


def test_topk_full_uniform_equals_mean_over_queries():
    rec = uniform((3, 4), heads=2)
    expected = np.mean([mean_attention_distance(rec, q) for q in range(12)])
    assert topk_attention_distance(rec, 100, scope="all_blocks") == pytest.approx(expected, abs=1e-12)


def test_topk_empty_selection_warns():
    with pytest.warns(UserWarning):
        assert topk_attention_distance(uniform((2, 2)), 1) == [0.0]
    with pytest.raises(ValueError):
        topk_attention_distance(uniform((2, 2)), 0)


@given(st.integers(0, 1000), st.permutations(range(4)))
@settings(max_examples=25)
def test_head_order_irrelevant(seed, perm):
    rng = np.random.default_rng(seed)
    maps = random_maps(rng, (3, 3), layers=1, heads=4)
    rec = AttentionRecord(maps, (3, 3))
    shuffled = AttentionRecord([maps[0][list(perm)]], (3, 3))
    for k in (1, 20, 50, 100):
        assert topk_attention_distance(rec, k) == topk_attention_distance(shuffled, k)
    assert np.allclose(distance_profile(rec).mass, distance_profile(shuffled).mass, atol=1e-15)
    assert mean_attention_distance(rec, 4) == pytest.approx(mean_attention_distance(shuffled, 4), abs=1e-15)


def test_uniform_profile_is_pair_histogram():
    grid = (3, 5)
    prof = distance_profile(uniform(grid))
    binned = np.round(pair_distances(grid) * 2) / 2
    vals, counts = np.unique(binned, return_counts=True)
    assert np.array_equal(prof.bins, vals)
    assert np.allclose(prof.mass, counts / counts.sum(), atol=1e-15)


@given(st.integers(0, 1000), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=25)
def test_profile_is_distribution(seed, h, w):
    rng = np.random.default_rng(seed)
    prof = distance_profile(AttentionRecord(random_maps(rng, (h, w)), (h, w)))
    assert np.all(prof.mass >= 0)
    assert abs(prof.mass.sum() - 1) < 1e-6


def test_profile_timestep_selection_and_grid_mismatch():
    a = AttentionRecord([np.eye(4)[None]], (2, 2), t=0.5)
    b = AttentionRecord([np.full((1, 4, 4), 0.25)], (2, 2), t=0.1)
    assert distance_profile([a, b], t=0.5).mass[0] == 1
    with pytest.raises(ValueError):
        distance_profile([a, uniform((3, 3))])


def test_alpha_mixing_monotone():
    grid = (4, 4)
    alphas = np.linspace(0, 1, 20)
    values = []
    for alpha in alphas:
        rec = AttentionRecord([mixed_attention(16, alpha)[None]], grid)
        values.append(np.mean([mean_attention_distance(rec, q) for q in range(16)]))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_series_round_trip(tmp_path):
    path = tmp_path / "s.tsv"
    write_series(path, "block", [0, 1, 2], {"k1": [0.1, 0.2, 0.3], "k100": [1.0, 2.0, 3.0]})
    name, x, series = read_series(path)
    assert name == "block" and x.tolist() == [0, 1, 2]
    assert series["k100"].tolist() == [1.0, 2.0, 3.0]


def test_collect_and_mask_on_trained_model(tiny_stage1, tiny_dataset):
    model = tiny_stage1.model
    images = tiny_dataset.images[:2]
    records = collect_attention(model, images, 0.5)
    assert len(records[0].maps) == model.backbone_config.depth
    assert records[0].grid == (2, 2)
    report = mask_sink_tokens(model, [], images)
    assert report["delta_l1"] == 0 and report["delta_psnr"] == 0
    report = mask_sink_tokens(model, [0], images)
    assert np.isfinite(report["delta_psnr"])


def test_conv_backbone_rejected(tiny_dataset):
    torch.manual_seed(0)
    model = DiffusionCodec(CodecConfig(16, 4, decoder_width=16),
                           BackboneConfig(block_type="depthwise_conv", width=16, depth=1, pixel_head_width=8))
    with pytest.raises(UnsupportedError):
        collect_attention(model, tiny_dataset.images[:1], 0.5)
    with pytest.raises(UnsupportedError):
        mask_sink_tokens(model, [0], tiny_dataset.images[:1])
