"""Run configuration: ``section.key = value`` text documents.

Every key has a default; unknown keys are rejected.  ``dump`` writes every
key in a fixed order with canonical value formatting, so
``dump(parse(dump(cfg))) == dump(cfg)`` byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields


class ConfigParseError(ValueError):
    pass


@dataclass
class DataSection:
    dir: str = ""
    seed: int = 0
    count: int = 200
    test_count: int = 50
    size: str = "64x64"
    people: str = "5..40"


@dataclass
class ModelSection:
    arch: str = "toy"
    cpr: str = "1/4"
    teacher: str = ""


@dataclass
class TrainSection:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 1
    lr: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    eval_every: int = 1


@dataclass
class SktSection:
    alpha_intra: float = 1.0
    alpha_inter: float = 1.0
    alpha_map: float = 1.0
    intra_metric: str = "cos"
    fsp: str = "dense"
    gt: str = "both"
    self_pairs: bool = False


@dataclass
class EvalSection:
    data: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    skt: SktSection = field(default_factory=SktSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def set(self, key: str, value) -> None:
        set_key(self, key, value)

    def dump(self) -> str:
        return dump(self)

    def hash(self) -> str:
        return config_hash(self)


SECTIONS = [f.name for f in fields(RunConfig)]


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(typ, text: str, key: str):
    text = text.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigParseError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None
    return text


def section_lines(name: str, section) -> list[str]:
    return [f"{name}.{f.name} = {format_value(getattr(section, f.name))}".rstrip() for f in fields(section)]


def dump(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines += section_lines(name, getattr(cfg, name))
    return "\n".join(lines) + "\n"


def _field(section, key: str):
    for f in fields(section):
        if f.name == key:
            return f
    return None


def set_key(cfg: RunConfig, dotted: str, value) -> None:
    sec_name, _, key = dotted.partition(".")
    if sec_name not in SECTIONS or not key:
        raise ConfigParseError(f"unknown config key {dotted!r}")
    section = getattr(cfg, sec_name)
    f = _field(section, key)
    if f is None:
        raise ConfigParseError(f"unknown config key {dotted!r}")
    if isinstance(value, str):
        value = parse_value(f.type, value, dotted)
    setattr(section, key, value)


def split_lines(text: str) -> list[tuple[int, str, str]]:
    """Split a document into ``(lineno, key, raw value)`` triples."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, val = s.partition("=")
        if not sep:
            raise ConfigParseError(f"line {lineno}: expected 'section.key = value', got {s!r}")
        out.append((lineno, key.strip(), val.strip()))
    return out


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig(*(dataclasses.replace(getattr(base, s)) for s in SECTIONS)) if base else RunConfig()
    for lineno, key, val in split_lines(text):
        try:
            set_key(cfg, key, val)
        except ConfigParseError as exc:
            raise ConfigParseError(f"line {lineno}: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump(cfg).encode("utf-8")).hexdigest()[:12]


def parse_size(text: str) -> tuple[int, int]:
    """``"576x864"`` -> ``(576, 864)`` (height x width)."""
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise ConfigParseError(f"malformed size {text!r}; expected HxW") from None
    if h < 1 or w < 1:
        raise ConfigParseError(f"size must be positive, got {text!r}")
    return h, w


def parse_range(text: str) -> tuple[int, int]:
    """``"5..15"`` -> ``(5, 15)``."""
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigParseError(f"malformed range {text!r}; expected MIN..MAX") from None
    if lo < 0 or hi < lo:
        raise ConfigParseError(f"invalid range {text!r}")
    return lo, hi
