"""Run configuration files.

A config is plain text made of ``[section]`` headers and ``key = value``
lines. ``#`` starts a comment line. Values are parsed according to the
type of the matching dataclass field: integers, floats, booleans
(``true``/``false``), ``none``, or bare strings. See ``docs/config.md``.
"""

import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields, replace

from .backbone import BackboneConfig
from .codec import BITRATE_LADDER, CodecConfig
from .data import DatasetSpec
from .one_step import LossWeights
from .training import Schedule

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class BenchConfig:
    patch_size: int = 64
    stride: int = 32
    extractor: str = "pyramid"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = None


SECTIONS = {
    "codec": CodecConfig,
    "backbone": BackboneConfig,
    "student": BackboneConfig,
    "train": Schedule,
    "finetune": Schedule,
    "data": DatasetSpec,
    "bench": BenchConfig,
    "model": ModelConfig,
}


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    student: BackboneConfig = None
    train: Schedule = field(default_factory=Schedule)
    finetune: Schedule = field(default_factory=lambda: Schedule(lr=1e-4))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def weights(self):
        s = self.finetune
        return LossWeights(s.lambda_c, s.lambda_dmd, s.lambda_gan)


def _field_type(cls, name):
    hints = typing.get_type_hints(cls)
    return hints[name]


def parse_value(text, kind):
    low = text.lower()
    if low == "none":
        return None
    if kind is bool:
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text, 0)
    if kind is float:
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(f"non-finite number {text!r}")
        return value
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_lines(text, source="<config>"):
    """``{section: {key: (raw value, line number)}}`` plus header line numbers."""
    sections, headers = {}, {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno, source)
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise ConfigError(f"unknown section [{current}]; expected one of {sorted(SECTIONS)}",
                                  lineno, source)
            if current in sections:
                raise ConfigError(f"section [{current}] appears twice", lineno, source)
            sections[current] = {}
            headers[current] = lineno
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, source)
        if current is None:
            raise ConfigError(f"key {key!r} outside any section", lineno, source)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno, source)
        sections[current][key] = (value, lineno)
    return sections, headers


def _build(cls, base, entries, header_line, section, source):
    names = {f.name for f in fields(cls)}
    values = {}
    for key, (raw, lineno) in entries.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(names)}",
                              lineno, source)
        try:
            values[key] = parse_value(raw, _field_type(cls, key))
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}", lineno, source) from None
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}", header_line, source) from None


def parse_config(text, source="<config>"):
    sections, headers = parse_lines(text, source)
    run = RunConfig()
    for name, entries in sections.items():
        base = getattr(run, name)
        if base is None:
            base = BackboneConfig()
        setattr(run, name, _build(SECTIONS[name], base, entries, headers[name], name, source))
    target = sections.get("train", {}).get("bpp_target")
    if target is not None and run.train.bpp_target is not None:
        run.codec = _apply_bpp(run.codec, run.train.bpp_target, sections.get("codec", {}), target[1], source)
    return run


def _apply_bpp(codec, bpp, codec_entries, lineno, source):
    match = [fb for value, fb in BITRATE_LADDER.items() if math.isclose(value, bpp, rel_tol=0, abs_tol=1e-12)]
    if not match:
        raise ConfigError(f"bpp_target {bpp} is not a ladder preset {sorted(BITRATE_LADDER)}", lineno, source)
    f, b = match[0]
    for key, want in (("downsample_factor", f), ("codebook_bits", b)):
        if key in codec_entries and getattr(codec, key) != want:
            raise ConfigError(f"bpp_target {bpp} needs {key}={want} but [codec] sets {getattr(codec, key)} "
                              f"(line {codec_entries[key][1]})", lineno, source)
    return replace(codec, downsample_factor=f, codebook_bits=b)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(run: RunConfig):
    """Serialize every section; ``parse_config(dump_config(r)) == r``."""
    lines = []
    for name in SECTIONS:
        obj = getattr(run, name)
        if obj is None:
            continue
        lines.append(f"[{name}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def snapshot(run: RunConfig):
    """Flat ``{section.key: value}`` view used to diff presets."""
    out = {}
    for name in SECTIONS:
        obj = getattr(run, name)
        if obj is not None:
            for k, v in dataclasses.asdict(obj).items():
                out[f"{name}.{k}"] = v
    return out
