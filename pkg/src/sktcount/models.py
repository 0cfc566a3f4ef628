"""CSRNet-family networks built from declarative layer lists.

A config is a flat sequence of 3x3 convolutions (ReLU after each), 2x2 max
pools and a final 1x1 convolution to one output channel.  Six named layers
are designated as taps; their post-ReLU activations form the feature group
used for knowledge transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, same_padding
from .density import OUTPUT_STRIDE, DensityMap

ALLOWED_CPR = (Fraction(1), Fraction(1, 2), Fraction(1, 3), Fraction(1, 4), Fraction(1, 5))
TAP_NAMES = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1", "conv5_4")
N_TAPS = len(TAP_NAMES)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "maxpool"
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 2
    dilation: int = 1
    relu: bool = True

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"


def conv(name, in_ch, out_ch, kernel=3, dilation=1, relu=True) -> LayerSpec:
    return LayerSpec("conv", name, in_ch, out_ch, kernel, dilation, relu)


def pool(name) -> LayerSpec:
    return LayerSpec("maxpool", name, kernel=2)


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...]
    tap_names: tuple[str, ...] = TAP_NAMES
    cpr: Fraction = Fraction(1)
    input_channels: int = 3
    arch: str = "custom"

    def __post_init__(self):
        validate_config(self)

    @property
    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.is_conv]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def tap_channels(self) -> list[int]:
        return [self.layer(n).out_ch for n in self.tap_names]

    def strides(self) -> dict[str, int]:
        """Cumulative downsampling factor at the output of every layer."""
        s, out = 1, {}
        for l in self.layers:
            if not l.is_conv:
                s *= 2
            out[l.name] = s
        return out

    def tap_strides(self) -> list[int]:
        st = self.strides()
        return [st[n] for n in self.tap_names]


def validate_config(cfg: NetworkConfig) -> None:
    names = [l.name for l in cfg.layers]
    if len(set(names)) != len(names):
        raise ConfigError("layer names must be unique")
    ch = cfg.input_channels
    for l in cfg.layers:
        if l.is_conv:
            if l.kernel % 2 == 0:
                raise ConfigError(f"{l.name}: kernel must be odd, got {l.kernel}")
            if l.in_ch != ch:
                raise ConfigError(f"{l.name}: in_ch {l.in_ch} does not match incoming {ch} channels")
            if l.in_ch < 1 or l.out_ch < 1:
                raise ConfigError(f"{l.name}: channel counts must be positive")
            ch = l.out_ch
        elif l.kind != "maxpool":
            raise ConfigError(f"{l.name}: unknown layer kind {l.kind!r}")
    last = cfg.layers[-1]
    if not (last.is_conv and last.kernel == 1 and last.out_ch == 1 and not last.relu):
        raise ConfigError("final layer must be a 1x1 conv to one channel without ReLU")
    if len(cfg.tap_names) != N_TAPS:
        raise ConfigError(f"expected {N_TAPS} taps, got {len(cfg.tap_names)}")
    for t in cfg.tap_names:
        if t not in names or not cfg.layer(t).is_conv:
            raise ConfigError(f"tap {t!r} does not name a conv layer")
    if cfg.strides()[last.name] != OUTPUT_STRIDE:
        raise ConfigError(f"output stride must be {OUTPUT_STRIDE}")


def _family(front: list, back: list, input_channels: int, arch: str) -> NetworkConfig:
    layers, ch = [], input_channels
    block, idx, n_pool = 1, 1, 0
    for v in front:
        if v == "M":
            n_pool += 1
            layers.append(pool(f"pool{n_pool}"))
            block, idx = block + 1, 1
            continue
        layers.append(conv(f"conv{block}_{idx}", ch, v))
        ch, idx = v, idx + 1
    for j, v in enumerate(back, 1):
        layers.append(conv(f"conv5_{j}", ch, v, dilation=2))
        ch = v
    layers.append(conv("output", ch, 1, kernel=1, relu=False))
    return NetworkConfig(tuple(layers), TAP_NAMES, Fraction(1), input_channels, arch)


def csrnet_config() -> NetworkConfig:
    """VGG-16 front-end (10 convs, 3 pools) with the 6-layer dilated back-end."""
    front = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512]
    back = [512, 512, 512, 256, 128, 64]
    return _family(front, back, 3, "csrnet")


def toy_config() -> NetworkConfig:
    """Same topology as CSRNet with channel counts small enough for CPU training."""
    front = [8, 8, "M", 16, 16, "M", 24, 24, 24, "M", 32, 32, 32]
    back = [32, 32, 32, 16, 8, 8]
    return _family(front, back, 3, "toy")


ARCHS = {"csrnet": csrnet_config, "toy": toy_config}


def parse_cpr(value) -> Fraction:
    try:
        cpr = Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError):
        raise ConfigError(f"invalid channel preservation rate {value!r}") from None
    if cpr not in ALLOWED_CPR:
        raise ConfigError(f"channel preservation rate must be one of 1, 1/2, 1/3, 1/4, 1/5; got {value}")
    return cpr


def _scaled(ch: int, cpr: Fraction) -> int:
    # round half up, exact in rational arithmetic
    return int(ch * cpr + Fraction(1, 2))


def scale_config(cfg: NetworkConfig, cpr) -> NetworkConfig:
    """Keep ``cpr`` of every conv's channels (nearest integer), except the 1-channel output."""
    cpr = parse_cpr(cpr)
    if cpr == 1:
        return cfg
    last = cfg.layers[-1].name
    layers, in_ch = [], cfg.input_channels
    for l in cfg.layers:
        if not l.is_conv:
            layers.append(l)
            continue
        out_ch = 1 if l.name == last else _scaled(l.out_ch, cpr)
        if out_ch < 1:
            raise ConfigError(f"{l.name}: rate {cpr} leaves no channels")
        layers.append(replace(l, in_ch=in_ch, out_ch=out_ch))
        in_ch = out_ch
    return replace(cfg, layers=tuple(layers), cpr=cfg.cpr * cpr)


# ---------------------------------------------------------------- counting


def layer_params(l: LayerSpec) -> int:
    return l.kernel * l.kernel * l.in_ch * l.out_ch + l.out_ch if l.is_conv else 0


def count_params(cfg: NetworkConfig) -> int:
    return sum(layer_params(l) for l in cfg.layers)


def layer_shapes(cfg: NetworkConfig, height: int, width: int) -> list[tuple[LayerSpec, tuple[int, int, int]]]:
    if height % OUTPUT_STRIDE or width % OUTPUT_STRIDE:
        raise ConfigError(f"input size {height}x{width} must be divisible by {OUTPUT_STRIDE}")
    h, w, rows = height, width, []
    ch = cfg.input_channels
    for l in cfg.layers:
        if l.is_conv:
            ch = l.out_ch
        else:
            h, w = h // 2, w // 2
        rows.append((l, (ch, h, w)))
    return rows


def count_flops(cfg: NetworkConfig, height: int, width: int) -> int:
    """Multiply-accumulates of all convolutions (1 MAC = 1 FLOP)."""
    total = 0
    for l, (_, h, w) in layer_shapes(cfg, height, width):
        if l.is_conv:
            total += h * w * l.kernel * l.kernel * l.in_ch * l.out_ch
    return total


# ---------------------------------------------------------------- network


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Network":
        return Network(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()})

    def astype(self, dtype) -> "Network":
        return Network(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()})

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag


def he_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    params = {}
    for l in cfg.convs:
        params[f"{l.name}.weight"] = Tensor(he_normal(rng, (l.out_ch, l.in_ch, l.kernel, l.kernel), dtype), True)
        params[f"{l.name}.bias"] = Tensor(np.zeros(l.out_ch, dtype=dtype), True)
    return Network(cfg, params)


@dataclass
class FeatureGroup:
    features: list[Tensor]
    role: str = "teacher-T"  # teacher-T | student-S | embedded-H

    def __post_init__(self):
        if len(self.features) != N_TAPS:
            raise ConfigError(f"a feature group holds {N_TAPS} tensors, got {len(self.features)}")

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def __iter__(self):
        return iter(self.features)


def forward_with_taps(net: Network, image: Tensor) -> tuple[DensityMap, FeatureGroup]:
    """Run the network; return the predicted density map and the six tap activations."""
    _, c, h, w = image.shape
    cfg = net.config
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ConfigError(f"input size {h}x{w} must be divisible by {OUTPUT_STRIDE}")
    if c != cfg.input_channels:
        raise ConfigError(f"network expects {cfg.input_channels} input channels, got {c}")
    taps = set(cfg.tap_names)
    found: dict[str, Tensor] = {}
    x = image
    for l in cfg.layers:
        if l.is_conv:
            wt, b = net.params[f"{l.name}.weight"], net.params[f"{l.name}.bias"]
            x = ad.conv2d(x, wt, b, 1, same_padding(l.kernel, l.dilation), l.dilation)
            if l.relu:
                x = ad.relu(x)
            if l.name in taps:
                found[l.name] = x
        else:
            x = ad.maxpool2d(x, 2, 2)
    role = "teacher-T" if cfg.cpr == 1 else "student-S"
    return DensityMap(x, "predicted"), FeatureGroup([found[n] for n in cfg.tap_names], role)


def predict(net: Network, image: Tensor) -> DensityMap:
    with ad.no_grad():
        return forward_with_taps(net, image)[0]


# ---------------------------------------------------------------- serialisation


def config_to_lines(cfg: NetworkConfig) -> list[str]:
    """Encode a config as ``network.*`` lines of the run-config format."""
    layer_txt = []
    for l in cfg.layers:
        if l.is_conv:
            layer_txt.append(f"conv:{l.name}:{l.in_ch}:{l.out_ch}:{l.kernel}:{l.dilation}:{int(l.relu)}")
        else:
            layer_txt.append(f"maxpool:{l.name}")
    return [
        f"network.arch = {cfg.arch}",
        f"network.cpr = {cfg.cpr}",
        f"network.input_channels = {cfg.input_channels}",
        f"network.taps = {','.join(cfg.tap_names)}",
        f"network.layers = {' '.join(layer_txt)}",
    ]


def config_from_mapping(kv: dict[str, str]) -> NetworkConfig:
    layers = []
    for tok in kv["network.layers"].split():
        parts = tok.split(":")
        if parts[0] == "conv":
            _, name, i, o, k, d, r = parts
            layers.append(conv(name, int(i), int(o), int(k), int(d), bool(int(r))))
        elif parts[0] == "maxpool":
            layers.append(pool(parts[1]))
        else:
            raise ConfigError(f"bad layer token {tok!r}")
    return NetworkConfig(
        tuple(layers),
        tuple(kv["network.taps"].split(",")),
        Fraction(kv["network.cpr"]),
        int(kv["network.input_channels"]),
        kv["network.arch"],
    )
