"""Shared training plumbing: schedules, optimizer setup and train state."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when a loss or score becomes non-finite."""


@dataclass
class Schedule:
    steps: int = 500
    batch: int = 16
    lr: float = 1e-4
    mode: str = "compression"
    bpp_target: float = None
    checkpoint_every: int = 0
    parameterization: str = "x"
    grad_clip: float = 1.0
    warmup: int = 0
    seed: int = 0
    revive_window: int = 2000
    # stage II
    lambda_c: float = 1.0
    lambda_dmd: float = 2.0
    lambda_gan: float = 0.01
    teacher_checkpoint: str = None
    phase1_steps: int = None
    lr_aux: float = None
    gan_type: str = "projected"


@dataclass
class TrainState:
    """Everything a trainer mutates, plus the config needed to rebuild it."""

    stage: str
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    config: dict
    step: int = 0
    history: list = field(default_factory=list)
    aux_modules: dict = field(default_factory=dict)
    aux_optimizers: dict = field(default_factory=dict)

    def modules(self):
        return {"model": self.model, **self.aux_modules}

    def optimizers(self):
        return {"model": self.optimizer, **self.aux_optimizers}


def make_optimizer(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


def cosine_lr(base_lr, step, total, warmup=0):
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_finite(name, value, step, **diagnostics):
    if not torch.isfinite(torch.as_tensor(value)).all():
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        raise NumericalAbort(f"non-finite {name} at step {step}" + (f" ({detail})" if detail else ""))


def optimizer_step(optimizer, loss, params, clip):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip:
        torch.nn.utils.clip_grad_norm_(params, clip)
    optimizer.step()


def to_tensor(images, dtype=torch.float32):
    """``(N, H, W, 3)`` numpy batch to ``(N, 3, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def to_images(tensor):
    return tensor.detach().permute(0, 2, 3, 1).cpu().numpy()


def seeded_generator(seed, stream=0):
    """torch generator on a dedicated stream derived from ``seed``."""
    child = np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(child))
