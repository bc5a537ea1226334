"""Incremental roadmap presets, from a from-scratch GAN baseline to the scaled-up codec.

Each preset is the previous one with the settings listed in ``PRESET_AXES``
changed. Desk-scale sizes are used throughout.
"""

from dataclasses import replace

from .backbone import BackboneConfig
from .config import RunConfig, snapshot
from .codec import CodecConfig
from .data import DatasetSpec
from .training import Schedule

PRESET_ORDER = (
    "baseline_scratch_gan",
    "cod_pretrain_vpred",
    "improved_xpred_head",
    "lightweight_attn",
    "depthwise_conv",
    "plus_dmd",
    "plus_projected_gan",
    "scaled_up",
)

# snapshot keys each preset changes relative to its predecessor
PRESET_AXES = {
    "cod_pretrain_vpred": {"train.steps"},
    "improved_xpred_head": {"train.parameterization", "backbone.pixel_head_depth", "backbone.pixel_head_width"},
    "lightweight_attn": {"backbone.width", "backbone.depth"},
    "depthwise_conv": {"backbone.block_type"},
    "plus_dmd": {"finetune.lambda_dmd"},
    "plus_projected_gan": {"finetune.gan_type"},
    "scaled_up": {"backbone.width", "backbone.depth"},
}


def _baseline():
    return RunConfig(
        codec=CodecConfig.for_bpp(0.03125),
        backbone=BackboneConfig(block_type="global_attention", width=128, depth=6, heads=4,
                                timestep_conditioning=True, pixel_head_depth=1, pixel_head_width=32),
        # zero pre-training steps: Stage II starts from randomly initialised networks
        train=Schedule(steps=0, batch=16, lr=1e-3, parameterization="v", revive_window=50, warmup=20),
        finetune=Schedule(steps=300, batch=16, lr=3e-4, phase1_steps=150, lambda_dmd=0.0, lambda_gan=0.01,
                          gan_type="patchgan", revive_window=50, warmup=20),
        data=DatasetSpec("synthetic", "mixed", 64, 32, 0),
    )


def _step(name, run):
    bb, train, ft = run.backbone, run.train, run.finetune
    if name == "cod_pretrain_vpred":
        return replace(run, train=replace(train, steps=300))
    if name == "improved_xpred_head":
        return replace(run, train=replace(train, parameterization="x"),
                       backbone=replace(bb, pixel_head_depth=2, pixel_head_width=64))
    if name == "lightweight_attn":
        return replace(run, backbone=replace(bb, width=64, depth=4))
    if name == "depthwise_conv":
        return replace(run, backbone=replace(bb, block_type="depthwise_conv"))
    if name == "plus_dmd":
        return replace(run, finetune=replace(ft, lambda_dmd=2.0))
    if name == "plus_projected_gan":
        return replace(run, finetune=replace(ft, gan_type="projected"))
    if name == "scaled_up":
        return replace(run, backbone=replace(bb, width=192, depth=8))
    raise KeyError(name)


def preset(name):
    """Fully specified :class:`RunConfig` for a roadmap preset."""
    if name not in PRESET_ORDER:
        raise KeyError(f"unknown preset {name!r}; choose one of {', '.join(PRESET_ORDER)}")
    run = _baseline()
    for step in PRESET_ORDER[1:PRESET_ORDER.index(name) + 1]:
        run = _step(step, run)
    return run


def changed_keys(a: RunConfig, b: RunConfig):
    sa, sb = snapshot(a), snapshot(b)
    return {k for k in sa.keys() | sb.keys() if sa.get(k) != sb.get(k)}
