"""Lightweight one-step diffusion image codec."""

from .backbone import Backbone, BackboneConfig, count_macs
from .bitstream import pack, unpack
from .codec import BITRATE_LADDER, Codec, CodecConfig, quantize
from .data import Dataset, make_synthetic
from .flow import euler_sample, pretrain_stage1
from .metrics import frechet_distance, patch_fid, psnr
from .models import DiffusionCodec
from .one_step import LossWeights, composite_loss, finetune_stage2, one_step_decode
from .training import Schedule

__version__ = "0.1.0"

__all__ = [
    "BITRATE_LADDER", "Backbone", "BackboneConfig", "Codec", "CodecConfig", "Dataset", "DiffusionCodec",
    "LossWeights", "Schedule", "composite_loss", "count_macs", "euler_sample", "finetune_stage2",
    "frechet_distance", "make_synthetic", "one_step_decode", "pack", "patch_fid", "pretrain_stage1", "psnr",
    "quantize", "unpack",
]
