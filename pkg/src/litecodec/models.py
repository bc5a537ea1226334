"""The conditional diffusion model shared by both training stages."""

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .codec import Codec, CodecConfig

MODES = ("unconditional", "class_conditional", "compression")


class DiffusionCodec(nn.Module):
    """Condition pathway + denoising backbone.

    ``mode`` picks the condition source: a learned constant
    (``unconditional``), a learned label embedding (``class_conditional``) or
    the VQ codec (``compression``). All three produce features of the same
    width on the token grid.
    """

    def __init__(self, codec_config: CodecConfig, backbone_config: BackboneConfig,
                 mode="compression", num_classes=0, generator=None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown conditioning mode {mode!r}")
        if mode == "class_conditional" and num_classes < 1:
            raise ValueError("class_conditional mode needs num_classes >= 1")
        self.mode = mode
        self.num_classes = num_classes
        self.codec_config = codec_config
        self.backbone_config = backbone_config
        self.codec = Codec(codec_config, generator=generator)
        cond_channels = self.codec.cond_channels
        if mode == "unconditional":
            self.cond_embed = nn.Parameter(torch.zeros(cond_channels))
        elif mode == "class_conditional":
            self.label_embed = nn.Embedding(num_classes, cond_channels)
        self.backbone = Backbone(backbone_config, cond_channels)

    @property
    def patch_size(self):
        return self.backbone_config.patch_size

    def condition(self, images, labels=None):
        """Returns ``(cond_features, commitment_loss, indices)``.

        The loss and indices are ``None`` outside compression mode.
        """
        b, _, h, w = images.shape
        grid = (h // self.patch_size, w // self.patch_size)
        if self.mode == "compression":
            indices, cond, loss = self.codec(images)
            return cond, loss, indices
        if self.mode == "unconditional":
            cond = self.cond_embed[None, :, None, None].expand(b, -1, *grid)
            return cond, None, None
        if labels is None:
            raise ValueError("class_conditional mode needs labels")
        labels = torch.as_tensor(labels, dtype=torch.long, device=images.device)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise IndexError(f"class label outside [0, {self.num_classes})")
        cond = self.label_embed(labels)[:, :, None, None].expand(-1, -1, *grid)
        return cond, None, None

    def forward(self, noisy, t, cond, **kwargs):
        return self.backbone(noisy, t, cond, **kwargs)

    def one_step(self, cond, image_shape, **kwargs):
        """Deterministic single forward pass with zero input and t = 0."""
        zeros = torch.zeros(image_shape, dtype=cond.dtype, device=cond.device)
        t = torch.zeros(image_shape[0], dtype=cond.dtype, device=cond.device)
        return self.backbone(zeros, t, cond, **kwargs)

    def decode_indices(self, indices):
        """One-step reconstruction from an index grid, clamped to [-1, 1]."""
        if indices.dim() == 2:
            indices = indices[None]
        cond = self.codec.decode_condition(indices)
        f = self.codec_config.downsample_factor
        shape = (indices.shape[0], 3, indices.shape[1] * f, indices.shape[2] * f)
        return self.one_step(cond, shape).clamp(-1.0, 1.0)
