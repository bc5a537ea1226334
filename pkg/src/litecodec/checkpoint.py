"""Portable binary checkpoints.

Layout::

    magic    4 bytes  b"LCCK"
    version  uint32 LE
    sections, each:  uint64 LE name length, UTF-8 name,
                     uint64 LE payload length, payload
    sha256   32 bytes over everything before it

The ``meta`` section is UTF-8 JSON (stage, step, config snapshot, optimizer
hyper-parameters, loss history). Every other section is a tensor group: a
sequence of ``uint64 name length, name, uint8 dtype code, uint64 ndim,
ndim x uint64 shape, little-endian raw data`` records.
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .codec import CodecConfig
from .models import DiffusionCodec
from .one_step import DiscriminatorHeads, FeaturePyramid, PatchDiscriminator
from .training import Schedule, TrainState, make_optimizer

MAGIC = b"LCCK"
FORMAT_VERSION = 1
PARAM_GROUPS = ("encoder", "codebook", "cond_decoder", "cond_embed", "backbone", "pixel_head",
                "fake_score", "disc_heads")
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.int32, 4: np.uint8, 5: np.bool_, 6: np.float16}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    step: int
    config: dict
    groups: dict
    optimizers: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    version: int = FORMAT_VERSION


def group_of(key):
    """Parameter group for a :class:`DiffusionCodec` state-dict key."""
    if key.startswith("codec.encoder."):
        return "encoder"
    if key.startswith("codec.quantizer."):
        return "codebook"
    if key.startswith("codec.cond_decoder."):
        return "cond_decoder"
    if key.startswith(("cond_embed", "label_embed.")):
        return "cond_embed"
    if key.startswith("backbone.pixel_head."):
        return "pixel_head"
    if key.startswith("backbone."):
        return "backbone"
    raise CheckpointError(f"no parameter group for {key!r}")


# ---------------------------------------------------------------------------
# encoding


def _encode_tensors(tensors):
    buf = io.BytesIO()
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _CODES.get(arr.dtype.str)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(_U64.pack(len(raw)) + raw + bytes([code]) + _U64.pack(arr.ndim))
        for dim in arr.shape:
            buf.write(_U64.pack(dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _decode_tensors(payload):
    out = {}
    view = memoryview(payload)
    pos = 0
    try:
        while pos < len(payload):
            (n,) = _U64.unpack_from(view, pos)
            pos += 8
            name = bytes(view[pos:pos + n]).decode()
            pos += n
            dtype = np.dtype(_DTYPES[view[pos]]).newbyteorder("<")
            pos += 1
            (ndim,) = _U64.unpack_from(view, pos)
            pos += 8
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(payload):
                raise CheckpointError(f"tensor {name} runs past its section")
            arr = np.frombuffer(view[pos:pos + size], dtype=dtype).reshape(shape)
            pos += size
            out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    except (struct.error, KeyError, IndexError) as exc:
        raise CheckpointError(f"malformed tensor section: {exc}") from exc
    return out


def encode_checkpoint(ckpt: Checkpoint):
    meta = {"format_version": ckpt.version, "stage": ckpt.stage, "step": ckpt.step, "config": ckpt.config,
            "history": ckpt.history,
            "optimizers": {k: v["param_groups"] for k, v in sorted(ckpt.optimizers.items())}}
    sections = [("meta", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())]
    for name in PARAM_GROUPS:
        if name in ckpt.groups:
            sections.append((name, _encode_tensors(ckpt.groups[name])))
    for name in sorted(ckpt.optimizers):
        sections.append((f"optim/{name}", _encode_tensors(ckpt.optimizers[name]["state"])))
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", ckpt.version))
    for name, payload in sections:
        raw = name.encode()
        buf.write(_U64.pack(len(raw)) + raw + _U64.pack(len(payload)) + payload)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data):
    if len(data) < 8 + 32:
        raise CheckpointError("checksum mismatch: file too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is truncated or corrupted")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    pos = 8
    sections = {}
    while pos < len(body):
        (n,) = _U64.unpack_from(body, pos)
        name = body[pos + 8:pos + 8 + n].decode()
        pos += 8 + n
        (size,) = _U64.unpack_from(body, pos)
        sections[name] = body[pos + 8:pos + 8 + size]
        pos += 8 + size
    meta = json.loads(sections.pop("meta").decode())
    groups, optim_states = {}, {}
    for name, payload in sections.items():
        if name.startswith("optim/"):
            optim_states[name[6:]] = _decode_tensors(payload)
        else:
            groups[name] = _decode_tensors(payload)
    optimizers = {k: {"param_groups": meta["optimizers"][k], "state": optim_states.get(k, {})}
                  for k in meta["optimizers"]}
    return Checkpoint(meta["stage"], meta["step"], meta["config"], groups, optimizers, meta["history"], version)


def save_checkpoint(path, ckpt: Checkpoint):
    data = encode_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# TrainState <-> Checkpoint


def _flatten_optimizer(opt):
    sd = opt.state_dict()
    state = {}
    for idx, entries in sd["state"].items():
        for key, value in entries.items():
            state[f"{idx}/{key}"] = torch.as_tensor(value)
    return {"param_groups": json.loads(json.dumps(sd["param_groups"])), "state": state}


def _restore_optimizer(opt, flat):
    state = {}
    for name, value in flat["state"].items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    groups = []
    for g in flat["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def checkpoint_from_state(state: TrainState):
    groups = {}
    for key, value in state.model.state_dict().items():
        groups.setdefault(group_of(key), {})[key] = value
    for name, module in state.aux_modules.items():
        groups[name] = dict(module.state_dict())
    optimizers = {name: _flatten_optimizer(opt) for name, opt in state.optimizers().items() if opt is not None}
    return Checkpoint(state.stage, state.step, state.config, groups, optimizers, list(state.history))


def _schedule(cfg):
    return Schedule(**cfg)


def build_model(config):
    model_cfg = config["model"]
    return DiffusionCodec(CodecConfig(**config["codec"]), BackboneConfig(**config["backbone"]),
                          model_cfg["mode"], model_cfg.get("num_classes", 0))


def state_from_checkpoint(ckpt: Checkpoint):
    """Rebuild every network from the config snapshot and load its weights."""
    config = ckpt.config
    try:
        model = build_model(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"config snapshot cannot rebuild the model: {exc}") from exc
    merged = {}
    for name in ("encoder", "codebook", "cond_decoder", "cond_embed", "backbone", "pixel_head"):
        merged.update(ckpt.groups.get(name, {}))
    model.load_state_dict(merged, strict=True)
    schedule = _schedule(config["train"])
    model.codec.quantizer.revive_window = schedule.revive_window
    opt = make_optimizer(model.parameters(), schedule.lr)
    if "model" in ckpt.optimizers:
        _restore_optimizer(opt, ckpt.optimizers["model"])
    state = TrainState(ckpt.stage, model, opt, config, ckpt.step, list(ckpt.history))
    if "fake_score" in ckpt.groups:
        teacher_bb = BackboneConfig(**config["teacher_backbone"])
        fake = Backbone(teacher_bb, CodecConfig(**config["teacher_codec"]).decoder_width)
        fake.load_state_dict(ckpt.groups["fake_score"])
        state.aux_modules["fake_score"] = fake
    if "disc_heads" in ckpt.groups:
        if schedule.gan_type == "patchgan":
            heads = PatchDiscriminator()
        else:
            heads = DiscriminatorHeads(FeaturePyramid().channels)
        heads.load_state_dict(ckpt.groups["disc_heads"])
        state.aux_modules["disc_heads"] = heads
    for name, module in state.aux_modules.items():
        aux_opt = make_optimizer(module.parameters(), schedule.lr_aux or schedule.lr)
        if name in ckpt.optimizers:
            _restore_optimizer(aux_opt, ckpt.optimizers[name])
        state.aux_optimizers[name] = aux_opt
    model.eval()
    return state


def save_state(path, state: TrainState):
    return save_checkpoint(path, checkpoint_from_state(state))


def load_state(path):
    return state_from_checkpoint(load_checkpoint(path))
