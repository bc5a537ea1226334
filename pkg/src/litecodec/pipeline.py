"""Image <-> bitstream round trips and the rate/quality benchmark."""

import numpy as np
import torch

from . import bitstream
from .metrics import MetricsReport, PyramidExtractor, flatten_extractor, patch_fid, psnr
from .models import DiffusionCodec
from .one_step import one_step_decode
from .training import to_images, to_tensor


class NotOneStepCodec(ValueError):
    pass


def require_one_step(state):
    if state.stage != "stage2":
        raise NotOneStepCodec(f"checkpoint is a {state.stage} model, not a one-step codec; run finetune first")
    return state.model


@torch.no_grad()
def compress(model: DiffusionCodec, image):
    """Encode one ``(H, W, 3)`` image to a bitstream."""
    h, w = image.shape[:2]
    indices = model.codec.encode(to_tensor(image[None]))[0].numpy()
    cfg = model.codec_config
    return bitstream.pack(indices, h, w, cfg.downsample_factor, cfg.codebook_bits)


def decompress(model: DiffusionCodec, data):
    indices, info = bitstream.unpack(data)
    cfg = model.codec_config
    if (info.downsample_factor, info.codebook_bits) != (cfg.downsample_factor, cfg.codebook_bits):
        raise bitstream.BitstreamError(
            f"stream uses f={info.downsample_factor}, b={info.codebook_bits} but the model has "
            f"f={cfg.downsample_factor}, b={cfg.codebook_bits}")
    return to_images(one_step_decode(indices[None].astype(np.int64), model))[0]


def _extractor(name):
    if name == "flatten":
        return flatten_extractor
    return PyramidExtractor()


def bench(dataset, model=None, recon=None, patch_size=64, stride=32, extractor="pyramid", codec_config=None):
    """Round-trip every image (or compare against ``recon``) and fill a report.

    With ``recon`` given no model is needed; bpp columns then come from
    ``codec_config``.
    """
    report = MetricsReport()
    if model is not None:
        codec_config = model.codec_config
    outputs = []
    for i, image in enumerate(dataset.images):
        h, w = image.shape[:2]
        if recon is not None:
            out = np.asarray(recon[i], dtype=np.float32)
        else:
            data = compress(model, image)
            out = decompress(model, data)
        outputs.append(out)
        f, b = codec_config.downsample_factor, codec_config.codebook_bits
        name = dataset.names[i] if dataset.names else f"{i:05d}"
        report.add(name, h, w, bitstream.bpp(f, b, h, w), bitstream.bpp(f, b, h, w, include_header=True),
                   psnr(out, image), float(np.abs(out.astype(np.float64) - image).mean()))
    size = min(patch_size, *dataset.images.shape[1:3])
    report.fid = patch_fid(dataset.images, np.stack(outputs), _extractor(extractor), size, min(stride, size))
    report.config = {"patch_size": size, "stride": min(stride, size), "extractor": extractor}
    return report, np.stack(outputs)
