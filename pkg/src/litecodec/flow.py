"""Rectified-flow noising, prediction targets, Euler sampling and Stage-I training.

Time convention: ``t = 1`` is clean data and ``t = 0`` pure noise, so
``x_t = t * x0 + (1 - t) * eps`` and the velocity is ``x0 - eps``. With this
convention the one-step decoder input at ``t = 0, eps = 0`` is all zeros.
"""

import logging
import math
from dataclasses import asdict

import torch
import torch.nn.functional as F

from .data import batches
from .models import DiffusionCodec
from .training import (Schedule, TrainState, check_finite, cosine_lr, make_optimizer, optimizer_step,
                       seeded_generator, set_lr, to_tensor)

log = logging.getLogger(__name__)

PARAMETERIZATIONS = ("x", "v")


def _time(t, ref):
    t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.dim() == 0:
        return t
    return t.reshape(-1, *([1] * (ref.dim() - 1)))


def _param(parameterization):
    p = parameterization.lower()
    if p not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    return p


def noise(x0, eps, t):
    """Interpolate between noise (t=0) and data (t=1)."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    t = _time(t, x0)
    return t * x0 + (1 - t) * eps


def target(x0, eps, t, parameterization="x"):
    if _param(parameterization) == "x":
        return x0
    return x0 - eps


def to_x0(prediction, xt, t, parameterization="x"):
    if _param(parameterization) == "x":
        return prediction
    return xt + (1 - _time(t, xt)) * prediction


def to_velocity(prediction, xt, t, parameterization="x"):
    if _param(parameterization) == "v":
        return prediction
    return (prediction - xt) / (1 - _time(t, xt)).clamp_min(1e-4)


def fm_loss(prediction, x0, eps, t, parameterization="x"):
    return F.mse_loss(prediction, target(x0, eps, t, parameterization))


@torch.no_grad()
def euler_sample(model, cond, steps, seed, shape, parameterization="x", dtype=torch.float32):
    """Integrate dx/dt = v(x, t) from noise at t=0 to data at t=1.

    ``model(x, t, cond)`` returns a prediction in the given parameterization.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=dtype)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((shape[0],), k * dt, dtype=dtype)
        v = to_velocity(model(x, t, cond), x, t, parameterization)
        x = x + dt * v
    return x


def side_info_bits(mode, height, width, num_classes=0, codec_config=None):
    """Per-image condition capacity in bits for each conditioning mode."""
    if mode == "unconditional":
        return 0.0
    if mode == "class_conditional":
        return math.log2(num_classes)
    if mode == "compression":
        f = codec_config.downsample_factor
        return float(codec_config.codebook_bits * (height // f) * (width // f))
    raise ValueError(f"unknown conditioning mode {mode!r}")


def config_snapshot(codec_config, backbone_config, schedule, mode, num_classes, **extra):
    snap = {
        "codec": asdict(codec_config),
        "backbone": asdict(backbone_config),
        "train": asdict(schedule),
        "model": {"mode": mode, "num_classes": num_classes},
    }
    snap.update(extra)
    return snap


def build_stage1_state(codec_config, backbone_config, schedule: Schedule, mode, num_classes=0):
    torch.manual_seed(schedule.seed)
    model = DiffusionCodec(codec_config, backbone_config, mode, num_classes,
                           generator=seeded_generator(schedule.seed, 2))
    model.codec.quantizer.revive_window = schedule.revive_window
    opt = make_optimizer(model.parameters(), schedule.lr)
    snap = config_snapshot(codec_config, backbone_config, schedule, mode, num_classes)
    return TrainState("stage1", model, opt, snap)


def stage1_loss(model, x0, labels, generator, parameterization, lambda_c=1.0):
    cond, commit, _ = model.condition(x0, labels)
    b = x0.shape[0]
    t = torch.rand(b, generator=generator, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    pred = model(noise(x0, eps, t), t, cond)
    fm = fm_loss(pred, x0, eps, t, parameterization)
    total = fm if commit is None else fm + lambda_c * commit
    return total, fm, commit


def pretrain_stage1(dataset, mode, codec_config, backbone_config, schedule: Schedule,
                    num_classes=None, state=None, on_checkpoint=None):
    """Flow-matching pre-training in one of the three conditioning modes.

    Compression mode trains encoder, codebook and condition decoder jointly
    with the backbone (commitment loss weighted by ``schedule.lambda_c``).
    Returns the final :class:`TrainState`; ``on_checkpoint(state)`` is called
    every ``schedule.checkpoint_every`` steps.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if mode == "class_conditional":
        if dataset.labels is None:
            raise ValueError("class_conditional mode needs a labelled dataset")
        num_classes = num_classes or dataset.num_classes
    num_classes = num_classes or 0
    if state is None:
        state = build_stage1_state(codec_config, backbone_config, schedule, mode, num_classes)
    model, opt = state.model, state.optimizer
    gen = seeded_generator(schedule.seed, 3 + state.step)
    stream = batches(dataset, schedule.batch, seed=schedule.seed + state.step)
    params = list(model.parameters())
    model.train()
    while state.step < schedule.steps:
        set_lr(opt, cosine_lr(schedule.lr, state.step, schedule.steps, schedule.warmup))
        images, labels = next(stream)
        x0 = to_tensor(images)
        loss, fm, commit = stage1_loss(model, x0, labels, gen, schedule.parameterization, schedule.lambda_c)
        check_finite("stage-1 loss", loss.detach(), state.step, fm=fm.item(),
                     commit=None if commit is None else commit.item())
        optimizer_step(opt, loss, params, schedule.grad_clip)
        if mode == "compression":
            revived = model.codec.quantizer.maybe_revive(gen)
            if revived:
                log.info("step %d: revived %d dead codes", state.step, revived)
        state.step += 1
        state.history.append({"step": state.step, "loss": loss.item(), "fm": fm.item(),
                              "commit": None if commit is None else commit.item()})
        if schedule.checkpoint_every and on_checkpoint and state.step % schedule.checkpoint_every == 0:
            on_checkpoint(state)
    model.eval()
    return state
