"""Stage II: one-step decoding and its composite fine-tuning objective.

The pre-trained flow model becomes a deterministic decoder by fixing
``t = 0`` and ``eps = 0``. Fine-tuning minimises

    L1 + perceptual + lambda_c * commitment + lambda_dmd * DMD + lambda_gan * GAN

where the DMD term follows distribution-matching distillation against a
frozen teacher and the GAN term uses discriminator heads on a frozen
feature pyramid.
"""

import copy
import logging
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import commitment_loss
from .data import batches
from .flow import fm_loss, noise, to_x0
from .models import DiffusionCodec
from .training import (NumericalAbort, Schedule, TrainState, check_finite, cosine_lr, make_optimizer,
                       optimizer_step, seeded_generator, set_lr, to_tensor)

log = logging.getLogger(__name__)

DMD_T_RANGE = (0.02, 0.98)
DMD_EPS_NORM = 1e-3
EXTRACTOR_SEED = 1234


class CheckpointIncompatible(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_dmd: float = 2.0
    lambda_gan: float = 0.01

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_dmd, self.lambda_gan) < 0:
            raise ValueError("loss weights must be non-negative")


def one_step_decode(indices, model: DiffusionCodec):
    """Reconstruct images from a ``(B, h, w)`` or ``(h, w)`` index grid."""
    indices = torch.as_tensor(indices, dtype=torch.long)
    with torch.no_grad():
        return model.decode_indices(indices)


# ---------------------------------------------------------------------------
# frozen feature pyramid, perceptual distance and discriminators


class FeaturePyramid(nn.Module):
    """Fixed, seeded, randomly initialised conv pyramid (never trained)."""

    def __init__(self, channels=(16, 32, 64, 64), seed=EXTRACTOR_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.channels = tuple(channels)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    def pooled(self, x):
        """Global-average-pooled features of every scale, concatenated."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self(x)], dim=1)


def _unit(f):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8)


def perceptual_loss(a, b, extractor):
    """Channel-normalised feature distance summed over pyramid scales."""
    return sum(((_unit(fa) - _unit(fb)) ** 2).sum(1).mean() for fa, fb in zip(extractor(a), extractor(b)))


class DiscriminatorHeads(nn.Module):
    """One small trainable 1x1-conv head per pyramid scale."""

    def __init__(self, channels, hidden=32):
        super().__init__()
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, hidden, 1), nn.LeakyReLU(0.2), nn.Conv2d(hidden, 1, 1)) for c in channels
        )

    def forward(self, feats):
        if len(feats) != len(self.heads):
            raise ValueError(f"{len(feats)} feature scales but {len(self.heads)} heads")
        return [head(f) for head, f in zip(self.heads, feats)]


def hinge_d_loss(real_logits, fake_logits):
    return sum(F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_logits, fake_logits))


def hinge_g_loss(fake_logits):
    return -sum(f.mean() for f in fake_logits)


def projected_gan_losses(real, fake, extractor, heads):
    """Hinge losses of multi-scale heads on frozen features.

    ``d_loss`` sees a detached ``fake``; ``g_loss`` back-propagates through
    the frozen extractor into ``fake`` only.
    """
    if len(extractor.channels) < 2:
        raise ValueError("projected GAN needs at least two pyramid scales")
    with torch.no_grad():
        real_feats = extractor(real)
        fake_feats_d = extractor(fake.detach())
    d_loss = hinge_d_loss(heads(real_feats), heads(fake_feats_d))
    g_loss = hinge_g_loss(heads(extractor(fake)))
    return d_loss, g_loss


class PatchDiscriminator(nn.Module):
    """Pixel-space PatchGAN baseline, kept for the roadmap presets."""

    def __init__(self, width=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, 1, 1),
        )

    def forward(self, x):
        return [self.net(x)]


class Discriminator:
    """Bundles whatever a GAN term needs: frozen extractor and trainable heads."""

    def __init__(self, kind="projected", extractor=None):
        self.kind = kind
        if kind == "projected":
            self.extractor = extractor or FeaturePyramid()
            self.heads = DiscriminatorHeads(self.extractor.channels)
        elif kind == "patchgan":
            self.extractor = None
            self.heads = PatchDiscriminator()
        else:
            raise ValueError(f"unknown gan type {kind!r}")

    def losses(self, real, fake):
        if self.kind == "projected":
            return projected_gan_losses(real, fake, self.extractor, self.heads)
        d_loss = hinge_d_loss(self.heads(real), self.heads(fake.detach()))
        return d_loss, hinge_g_loss(self.heads(fake))


# ---------------------------------------------------------------------------
# distribution matching distillation


class TeacherBundle:
    """Frozen real-score model plus a trainable fake-score model.

    ``real`` and ``fake`` are called as ``model(x_t, t, cond)`` and return a
    prediction in ``parameterization``. ``conditioner(images)`` gives the
    condition features both score models see; it is frozen as well.
    """

    def __init__(self, real, fake, parameterization="x", conditioner=None, fake_lr=1e-4):
        self.real = real
        self.fake = fake
        self.parameterization = parameterization
        self.conditioner = conditioner
        if isinstance(real, nn.Module):
            real.requires_grad_(False)
            real.eval()
        self.fake_optimizer = None
        if isinstance(fake, nn.Module) and any(True for _ in fake.parameters()):
            self.fake_optimizer = make_optimizer(fake.parameters(), fake_lr)

    @classmethod
    def from_model(cls, teacher: DiffusionCodec, parameterization="x", fake_lr=1e-4):
        if teacher.mode != "compression":
            raise CheckpointIncompatible("the teacher must be a compression-mode model")
        real = copy.deepcopy(teacher)
        fake = copy.deepcopy(teacher.backbone)
        fake.requires_grad_(True)
        real.requires_grad_(False)

        def conditioner(images):
            with torch.no_grad():
                return real.codec.decode_condition(real.codec.encode(images))

        return cls(real.backbone, fake, parameterization, conditioner, fake_lr)

    def condition(self, images):
        return None if self.conditioner is None else self.conditioner(images)

    def real_x0(self, xt, t, cond):
        with torch.no_grad():
            return to_x0(self.real(xt, t, cond), xt, t, self.parameterization)

    def fake_x0(self, xt, t, cond):
        return to_x0(self.fake(xt, t, cond), xt, t, self.parameterization)


@dataclass
class DMDResult:
    grad: torch.Tensor
    normalizer: torch.Tensor
    fake_loss: float = None


def dmd_gradient(generated, real_x0, fake_x0, eps_norm=DMD_EPS_NORM):
    """``(fake_x0 - real_x0) / (mean |real_x0 - generated| + eps_norm)`` per image."""
    dims = tuple(range(1, generated.dim()))
    normalizer = (real_x0 - generated).abs().mean(dim=dims, keepdim=True) + eps_norm
    return (fake_x0 - real_x0) / normalizer, normalizer


def dmd_step(generated, teacher: TeacherBundle, t_sample, eps_sample, cond=None, update_fake=True,
             eps_norm=DMD_EPS_NORM, generator=None):
    """DMD gradient for ``generated`` and one denoising step for the fake model.

    The gradient is computed before the fake model is updated.
    """
    t = torch.as_tensor(t_sample, dtype=generated.dtype)
    if t.numel() and (t.min() <= 0 or t.max() >= 1):
        raise ValueError("t_sample must lie in (0, 1)")
    generated = generated.detach()
    xt = noise(generated, eps_sample, t)
    with torch.no_grad():
        real = teacher.real_x0(xt, t, cond)
        fake = teacher.fake_x0(xt, t, cond)
    if not (torch.isfinite(real).all() and torch.isfinite(fake).all()):
        raise NumericalAbort("non-finite score estimate in DMD step "
                             f"(real finite={bool(torch.isfinite(real).all())}, "
                             f"fake finite={bool(torch.isfinite(fake).all())})")
    grad, normalizer = dmd_gradient(generated, real, fake, eps_norm)
    result = DMDResult(grad, normalizer)
    if update_fake and teacher.fake_optimizer is not None:
        b = generated.shape[0]
        t2 = torch.rand(b, generator=generator, dtype=generated.dtype) * 0.96 + 0.02
        eps2 = torch.randn(generated.shape, generator=generator, dtype=generated.dtype)
        xt2 = noise(generated, eps2, t2)
        pred = teacher.fake(xt2, t2, cond)
        loss = fm_loss(pred, generated, eps2, t2, teacher.parameterization)
        check_finite("fake-score loss", loss.detach(), 0)
        optimizer_step(teacher.fake_optimizer, loss, list(teacher.fake.parameters()), 1.0)
        result.fake_loss = loss.item()
    return result


def dmd_loss(generated, grad):
    """Surrogate whose gradient w.r.t. ``generated`` is ``grad / numel``."""
    return 0.5 * F.mse_loss(generated, (generated - grad).detach())


# ---------------------------------------------------------------------------
# composite objective


TERMS = ("l1", "perceptual", "commit", "dmd", "gan")


def composite_loss(recon, x0, latent, quantized, weights: LossWeights, teacher=None, discriminator=None,
                   extractor=None, dmd_grad=None, commit=None):
    """Weighted objective and its raw per-term values.

    ``latent``/``quantized`` feed the commitment term unless a precomputed
    ``commit`` is given. The DMD term needs ``dmd_grad`` (see
    :func:`dmd_step`); the GAN term needs a :class:`Discriminator`. Terms with
    zero weight are not evaluated and report 0.
    """
    if recon.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(x0.shape)}")
    zero = recon.new_zeros(())
    terms = {"l1": (recon - x0).abs().mean()}
    terms["perceptual"] = perceptual_loss(recon, x0, extractor) if extractor is not None else zero
    if commit is None:
        commit = commitment_loss(latent, quantized) if latent is not None else zero
    terms["commit"] = commit
    terms["dmd"] = zero
    if weights.lambda_dmd > 0:
        if dmd_grad is None:
            if teacher is None:
                raise ValueError("DMD term needs a teacher or a precomputed gradient")
            b = recon.shape[0]
            t = torch.rand(b, dtype=recon.dtype) * (DMD_T_RANGE[1] - DMD_T_RANGE[0]) + DMD_T_RANGE[0]
            eps = torch.randn_like(recon)
            dmd_grad = dmd_step(recon, teacher, t, eps, teacher.condition(x0), update_fake=False).grad
        terms["dmd"] = dmd_loss(recon, dmd_grad)
    terms["gan"] = zero
    if weights.lambda_gan > 0:
        if discriminator is None:
            raise ValueError("GAN term needs a discriminator")
        _, terms["gan"] = discriminator.losses(x0, recon)
    total = (terms["l1"] + terms["perceptual"] + weights.lambda_c * terms["commit"]
             + weights.lambda_dmd * terms["dmd"] + weights.lambda_gan * terms["gan"])
    return total, terms


# ---------------------------------------------------------------------------
# Stage II trainer


def _codec_state(model):
    return {k: v for k, v in model.state_dict().items() if k.startswith("codec.")}


def build_student(stage1: TrainState, backbone_config=None, seed=0):
    """One-step student initialised from a Stage-I state.

    The codec always comes from Stage I. The backbone is copied when the
    architectures match, copied with AdaLN folded out at ``t = 0`` when they
    differ only in timestep conditioning, and freshly initialised otherwise
    (e.g. a depth-wise student under an attention teacher).
    """
    teacher = stage1.model
    if teacher.mode != "compression":
        raise CheckpointIncompatible("Stage II needs a compression-mode Stage-I checkpoint")
    source = teacher.backbone_config
    backbone_config = backbone_config or replace(source, timestep_conditioning=False)
    torch.manual_seed(seed)
    student = DiffusionCodec(teacher.codec_config, backbone_config, "compression")
    student.load_state_dict(_codec_state(teacher), strict=False)
    student.codec.quantizer.revive_window = teacher.codec.quantizer.revive_window
    if backbone_config == source:
        student.backbone.load_state_dict(teacher.backbone.state_dict())
    elif source.timestep_conditioning and backbone_config == replace(source, timestep_conditioning=False):
        student.backbone.load_state_dict(teacher.backbone.without_timestep(0.0).state_dict())
    return student


def finetune_stage2(stage1: TrainState, dataset, weights: LossWeights, schedule: Schedule,
                    backbone_config=None, teacher: TrainState = None, state=None, on_checkpoint=None):
    """Two-phase one-step fine-tuning.

    Phase 1 (``schedule.phase1_steps``) trains L1 + perceptual + commitment;
    phase 2 adds the DMD and GAN terms, updating the fake-score model and the
    discriminator heads once per generator step.
    """
    if stage1.stage != "stage1":
        raise CheckpointIncompatible(f"expected a stage1 checkpoint, got {stage1.stage}")
    teacher_state = teacher or stage1
    teacher_param = teacher_state.config["train"].get("parameterization", "x")
    phase1 = schedule.phase1_steps if schedule.phase1_steps is not None else schedule.steps
    aux_lr = schedule.lr_aux or schedule.lr
    if state is None:
        student = build_student(stage1, backbone_config, schedule.seed)
        opt = make_optimizer(student.parameters(), schedule.lr)
        snap = {
            "codec": asdict(student.codec_config),
            "backbone": asdict(student.backbone_config),
            "teacher_backbone": asdict(teacher_state.model.backbone_config),
            "teacher_codec": asdict(teacher_state.model.codec_config),
            "train": asdict(schedule),
            "weights": asdict(weights),
            "model": {"mode": "compression", "num_classes": 0},
        }
        state = TrainState("stage2", student, opt, snap)
    student, opt = state.model, state.optimizer

    bundle = TeacherBundle.from_model(teacher_state.model, teacher_param, aux_lr)
    if "fake_score" in state.aux_modules:
        bundle.fake.load_state_dict(state.aux_modules["fake_score"].state_dict())
    disc = Discriminator(schedule.gan_type)
    if "disc_heads" in state.aux_modules:
        disc.heads.load_state_dict(state.aux_modules["disc_heads"].state_dict())
    state.aux_modules = {"fake_score": bundle.fake, "disc_heads": disc.heads}
    disc_opt = make_optimizer(disc.heads.parameters(), aux_lr)
    for name, o in (("fake_score", bundle.fake_optimizer), ("disc_heads", disc_opt)):
        if name in state.aux_optimizers:
            o.load_state_dict(state.aux_optimizers[name].state_dict())
    state.aux_optimizers = {"fake_score": bundle.fake_optimizer, "disc_heads": disc_opt}
    extractor = disc.extractor if disc.extractor is not None else FeaturePyramid()

    gen = seeded_generator(schedule.seed, 5 + state.step)
    stream = batches(dataset, schedule.batch, seed=schedule.seed + 7919 + state.step)
    params = list(student.parameters())
    student.train()
    while state.step < schedule.steps:
        in_phase2 = state.step >= phase1
        set_lr(opt, cosine_lr(schedule.lr, state.step, schedule.steps, schedule.warmup))
        images, _ = next(stream)
        x0 = to_tensor(images)
        cond, commit, _ = student.condition(x0)
        recon = student.one_step(cond, x0.shape)
        w = weights if in_phase2 else LossWeights(weights.lambda_c, 0.0, 0.0)

        dmd_grad = None
        fake_loss = None
        if in_phase2 and w.lambda_dmd > 0:
            b = x0.shape[0]
            t = torch.rand(b, generator=gen) * (DMD_T_RANGE[1] - DMD_T_RANGE[0]) + DMD_T_RANGE[0]
            eps = torch.randn(x0.shape, generator=gen)
            res = dmd_step(recon, bundle, t, eps, bundle.condition(x0), generator=gen)
            dmd_grad, fake_loss = res.grad, res.fake_loss
        d_loss = None
        if in_phase2 and w.lambda_gan > 0:
            d_loss, _ = disc.losses(x0, recon.detach())
            optimizer_step(disc_opt, d_loss, list(disc.heads.parameters()), 1.0)

        total, terms = composite_loss(recon, x0, None, None, w, discriminator=disc, extractor=extractor,
                                      dmd_grad=dmd_grad, commit=commit)
        check_finite("stage-2 loss", total.detach(), state.step, **{k: v.item() for k, v in terms.items()})
        optimizer_step(opt, total, params, schedule.grad_clip)
        student.codec.quantizer.maybe_revive(gen)
        state.step += 1
        entry = {"step": state.step, "phase": 2 if in_phase2 else 1, "loss": total.item()}
        entry.update({k: v.item() for k, v in terms.items()})
        if fake_loss is not None:
            entry["fake_score"] = fake_loss
        if d_loss is not None:
            entry["d_loss"] = d_loss.item()
        state.history.append(entry)
        if schedule.checkpoint_every and on_checkpoint and state.step % schedule.checkpoint_every == 0:
            on_checkpoint(state)
    student.eval()
    return state
