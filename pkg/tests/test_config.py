from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from litecodec.backbone import BackboneConfig
from litecodec.config import ConfigError, RunConfig, dump_config, load_config, parse_config, parse_value, snapshot
from litecodec.presets import PRESET_AXES, PRESET_ORDER, changed_keys, preset

EXAMPLE = """\
# tiny run
[codec]
downsample_factor = 16
codebook_bits = 4

[backbone]
block_type = depthwise_conv
width = 64
timestep_conditioning = false

[train]
steps = 200
lr = 1e-3
parameterization = x

[data]
kind = mixed
count = 32
"""


def test_parse_example():
    run = parse_config(EXAMPLE)
    assert run.codec.bpp == 0.015625
    assert run.backbone.block_type == "depthwise_conv" and run.backbone.width == 64
    assert run.backbone.timestep_conditioning is False
    assert run.train.steps == 200 and run.train.lr == 1e-3
    assert run.data.kind == "mixed" and run.data.count == 32
    assert run.student is None


@pytest.mark.parametrize("text, line", [
    ("[codec]\ncodebook_bits = four\n", 2),
    ("[codec]\n\nbogus = 1\n", 3),
    ("[nope]\n", 1),
    ("width = 3\n", 1),
    ("[backbone]\nwidth 3\n", 2),
    ("[backbone]\nwidth = 3\nwidth = 4\n", 3),
    ("[codec]\n[codec]\n", 2),
    ("[codec\n", 1),
    ("# c\n[codec]\ndownsample_factor = 3\n", 2),
    ("[train]\nlr = nan\n", 2),
    ("[backbone]\ntimestep_conditioning = maybe\n", 2),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text, source="run.cfg")
    assert err.value.line == line
    assert str(err.value).startswith(f"run.cfg:{line}: ")


def test_bpp_target_selects_ladder_point():
    run = parse_config("[train]\nbpp_target = 0.00390625\n")
    assert (run.codec.downsample_factor, run.codec.codebook_bits) == (16, 1)


def test_bpp_target_conflict_is_reported_at_its_line():
    with pytest.raises(ConfigError) as err:
        parse_config("[codec]\ncodebook_bits = 8\n[train]\nbpp_target = 0.015625\n")
    assert err.value.line == 4
    with pytest.raises(ConfigError):
        parse_config("[train]\nbpp_target = 0.02\n")


def test_values():
    assert parse_value("0x10", int) == 16
    assert parse_value("none", int) is None
    assert parse_value("'a b'", str) == "a b"
    assert parse_value("Yes", bool) is True


def test_dump_round_trip():
    run = RunConfig(student=replace(BackboneConfig(), block_type="depthwise_conv"))
    assert parse_config(dump_config(run)) == run
    for name in PRESET_ORDER:
        assert parse_config(dump_config(preset(name))) == preset(name)


@given(st.integers(1, 512), st.integers(0, 12), st.sampled_from(["global_attention", "window_attention",
                                                                  "depthwise_conv"]))
def test_dump_round_trip_backbones(width, depth, block):
    run = RunConfig(backbone=BackboneConfig(block_type=block, width=width * 4, depth=depth, heads=4))
    assert parse_config(dump_config(run)) == run


def test_load_from_file(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text(EXAMPLE)
    assert load_config(path) == parse_config(EXAMPLE)


def test_presets_touch_only_documented_axes():
    assert PRESET_ORDER[0] == "baseline_scratch_gan" and len(PRESET_ORDER) == 8
    for prev, cur in zip(PRESET_ORDER, PRESET_ORDER[1:]):
        changed = changed_keys(preset(prev), preset(cur))
        assert changed == set(PRESET_AXES[cur]), (prev, cur, changed)


def test_presets_are_fully_specified():
    for name in PRESET_ORDER:
        flat = snapshot(preset(name))
        assert "backbone.block_type" in flat and "finetune.lambda_dmd" in flat and "train.steps" in flat
    with pytest.raises(KeyError):
        preset("nonexistent")


def test_documented_example_parses():
    from pathlib import Path

    text = (Path(__file__).parents[1] / "docs" / "config.md").read_text()
    example = text.split("## Example")[1].split("```")[1]
    run = parse_config(example)
    assert run.backbone.block_type == "global_attention" and run.finetune.phase1_steps == 500
