"""Counting metrics and model-efficiency reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .density import DensityMap, Sample, to_model_input
from .models import Network, NetworkConfig, count_flops, count_params, layer_params, layer_shapes, predict


@dataclass
class Metrics:
    mae: float
    rmse: float
    n_images: int
    pairs: list[tuple[float, float]] = field(default_factory=list)

    def record(self) -> str:
        return f"MAE={self.mae:.6f} RMSE={self.rmse:.6f} N={self.n_images}"

    def table(self) -> str:
        rows = [f"{'image':>6} {'predicted':>12} {'truth':>10} {'abs err':>10}"]
        for i, (p, g) in enumerate(self.pairs):
            rows.append(f"{i:6d} {p:12.4f} {g:10.1f} {abs(p - g):10.4f}")
        rows.append(self.record())
        return "\n".join(rows)


def count_from_map(dmap) -> float:
    """Integrated count with negative mass clamped to zero."""
    arr = dmap.values.data if isinstance(dmap, DensityMap) else (dmap.data if isinstance(dmap, Tensor) else np.asarray(dmap))
    return float(np.sum(np.maximum(arr, 0), dtype=np.float64))


def mae_rmse(pairs: Sequence[tuple[float, float]]) -> Metrics:
    if not pairs:
        raise ValueError("cannot compute MAE/RMSE over zero images")
    err = np.array([abs(p - g) for p, g in pairs], dtype=np.float64)
    # sort so the reduction does not depend on image order
    err = np.sort(err)
    mae = float(np.sum(err) / len(err))
    rmse = float(math.sqrt(np.sum(err * err) / len(err)))
    rmse = max(rmse, mae)  # guards float rounding; power-mean inequality holds exactly in reals
    return Metrics(mae, rmse, len(err), [(float(p), float(g)) for p, g in pairs])


def evaluate(model, dataset: Sequence[Sample]) -> Metrics:
    """Predicted counts against annotation counts over ``dataset``."""
    net = model.network() if hasattr(model, "network") else model
    pairs = []
    for s in dataset:
        x = to_model_input(s.image, net.config.input_channels)
        pairs.append((count_from_map(predict(net, x)), float(s.count)))
    m = mae_rmse(pairs)
    assert m.rmse >= m.mae
    return m


@dataclass
class EfficiencyRow:
    name: str
    out_shape: tuple[int, int, int]
    params: int
    flops: int


@dataclass
class EfficiencyReport:
    arch: str
    cpr: str
    height: int
    width: int
    params: int
    flops: int
    rows: list[EfficiencyRow]

    def render(self) -> str:
        lines = [
            f"architecture {self.arch}  cpr {self.cpr}  input {self.height}x{self.width}",
            f"{'layer':<10} {'output (CxHxW)':>18} {'params':>12} {'FLOPs':>16}",
        ]
        for r in self.rows:
            shape = "x".join(str(v) for v in r.out_shape)
            lines.append(f"{r.name:<10} {shape:>18} {r.params:>12,d} {r.flops:>16,d}")
        lines.append(f"{'total':<10} {'':>18} {self.params:>12,d} {self.flops:>16,d}")
        lines.append(f"#Param {self.params / 1e6:.2f}M  FLOPs {self.flops / 1e9:.2f}G")
        return "\n".join(lines)


def efficiency_report(config: NetworkConfig, height: int, width: int) -> EfficiencyReport:
    rows = []
    for l, shape in layer_shapes(config, height, width):
        flops = shape[1] * shape[2] * l.kernel * l.kernel * l.in_ch * l.out_ch if l.is_conv else 0
        rows.append(EfficiencyRow(l.name, shape, layer_params(l), flops))
    params, flops = count_params(config), count_flops(config, height, width)
    assert params == sum(r.params for r in rows) and flops == sum(r.flops for r in rows)
    return EfficiencyReport(config.arch, str(config.cpr), height, width, params, flops, rows)
