"""Deterministic training: teacher pre-training and SKT distillation."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import config as rc
from .autodiff import Tensor
from .density import DensityMap, Sample, to_model_input
from .models import (
    FeatureGroup,
    Network,
    NetworkConfig,
    build_network,
    config_from_mapping,
    config_to_lines,
    forward_with_taps,
)
from .transfer import ChannelEmbedder, LossWeights, build_embedder, map_loss, skt_objective


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 1
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0  # 0 disables clipping
    eval_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    @classmethod
    def from_run(cls, run: rc.RunConfig) -> "TrainConfig":
        t, s = run.train, run.skt
        weights = LossWeights.from_gt(
            s.gt,
            alpha_intra=s.alpha_intra,
            alpha_inter=s.alpha_inter,
            alpha_map=s.alpha_map,
            intra_metric=s.intra_metric,
            fsp_mode=s.fsp,
            self_pairs=s.self_pairs,
        )
        return cls(
            t.seed, t.epochs, t.batch_size, t.lr, t.optimizer, t.momentum,
            t.beta1, t.beta2, t.adam_eps, t.clip_norm, t.eval_every, weights,
        )  # fmt: skip

    def to_sections(self) -> tuple[rc.TrainSection, rc.SktSection]:
        w = self.weights
        gt = "both" if w.use_hard_gt and w.use_soft_gt else ("hard" if w.use_hard_gt else "soft")
        train = rc.TrainSection(
            self.seed, self.epochs, self.batch_size, self.learning_rate, self.optimizer, self.momentum,
            self.beta1, self.beta2, self.eps, self.clip_norm, self.eval_every,
        )  # fmt: skip
        skt = rc.SktSection(w.alpha_intra, w.alpha_inter, w.alpha_map, w.intra_metric, w.fsp_mode, gt, w.self_pairs)
        return train, skt

    def lines(self) -> list[str]:
        train, skt = self.to_sections()
        return rc.section_lines("train", train) + rc.section_lines("skt", skt)


def teacher_weights() -> LossWeights:
    """Hard-GT map loss only: the objective used to pre-train teachers."""
    return LossWeights(alpha_intra=0.0, alpha_inter=0.0, alpha_map=1.0, use_hard_gt=True, use_soft_gt=False)


# ---------------------------------------------------------------- optimizers


def init_state(params: Sequence[Tensor]) -> dict:
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, config: TrainConfig) -> dict:
    """SGD with momentum (``v = mu v + g; p -= lr v``) or bias-corrected Adam."""
    state["step"] += 1
    t = state["step"]
    lr = config.learning_rate
    for i, (p, g) in enumerate(zip(params, grads)):
        dt = p.data.dtype.type
        if config.optimizer == "sgd":
            v = state["m"][i] = dt(config.momentum) * state["m"][i] + g
            p.data = p.data - dt(lr) * v
        else:
            b1, b2 = config.beta1, config.beta2
            m = state["m"][i] = dt(b1) * state["m"][i] + dt(1 - b1) * g
            v = state["v"][i] = dt(b2) * state["v"][i] + dt(1 - b2) * (g * g)
            m_hat = m / dt(1 - b1**t)
            v_hat = v / dt(1 - b2**t)
            p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(config.eps))
    return state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = [g * g.dtype.type(factor) for g in grads]
    return grads, norm


# ---------------------------------------------------------------- logging


class TrainingLog:
    """Per-step component losses, rendered as fixed-width text lines."""

    def __init__(self, config_hash: str, path=None):
        self.config_hash = config_hash
        self.records: list[tuple[int, float, float, float, float]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text(self.header() + "\n", encoding="utf-8")

    def header(self) -> str:
        return f"# config {self.config_hash}  step intra inter map total"

    @staticmethod
    def format(rec) -> str:
        step, intra, inter, mapl, total = rec
        return f"{step:8d} {intra:22.12f} {inter:22.12f} {mapl:22.12f} {total:22.12f}"

    def record(self, step: int, intra: float, inter: float, mapl: float, total: float) -> None:
        rec = (step, intra, inter, mapl, total)
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(self.format(rec) + "\n")

    def text(self) -> str:
        return "\n".join([self.header()] + [self.format(r) for r in self.records]) + "\n"

    def epoch_means(self, steps_per_epoch: int) -> np.ndarray:
        arr = np.array([r[1:] for r in self.records], dtype=np.float64)
        n = len(arr) // steps_per_epoch
        return arr[: n * steps_per_epoch].reshape(n, steps_per_epoch, 4).mean(axis=1)


def parse_log(text: str) -> tuple[str, list[tuple[int, float, float, float, float]]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# config "):
        raise ValueError("training log lacks its header line")
    records = []
    for line in lines[1:]:
        f = line.split()
        records.append((int(f[0]), float(f[1]), float(f[2]), float(f[3]), float(f[4])))
    return lines[0].split()[2], records


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SKTC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    net_config: NetworkConfig
    train_config: TrainConfig
    step: int = 0

    def network(self) -> Network:
        return Network(self.net_config, {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()})

    def config_text(self) -> str:
        lines = config_to_lines(self.net_config) + self.train_config.lines() + [f"checkpoint.step = {self.step}"]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(ckpt.params))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<B", code) + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    text = ckpt.config_text().encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read(buf: bytes, pos: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return struct.unpack_from(fmt, buf, pos), pos + size


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    (version, count), pos = _read(buf, 4, "<II", "header")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,), pos = _read(buf, pos, "<H", f"tensor {i} name length")
        if pos + nlen > len(buf):
            raise CheckpointError(f"truncated checkpoint in tensor {i} name")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,), pos = _read(buf, pos, "<B", f"{name} rank")
        dims, pos = _read(buf, pos, f"<{ndim}I", f"{name} dims")
        (code,), pos = _read(buf, pos, "<B", f"{name} dtype")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated checkpoint in tensor {name!r} data")
        if name in params:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        params[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
    (tlen,), pos = _read(buf, pos, "<I", "config block length")
    if pos + tlen != len(buf):
        raise CheckpointError(f"{path}: config block length mismatch (truncated or trailing bytes)")
    text = buf[pos : pos + tlen].decode("utf-8")
    net_cfg, train_cfg, step = parse_checkpoint_config(text)
    return Checkpoint(params, net_cfg, train_cfg, step)


def parse_checkpoint_config(text: str) -> tuple[NetworkConfig, TrainConfig, int]:
    net_kv, run, step = {}, rc.RunConfig(), 0
    for _, key, val in rc.split_lines(text):
        if key.startswith("network."):
            net_kv[key] = val
        elif key == "checkpoint.step":
            step = int(val)
        else:
            run.set(key, val)
    return config_from_mapping(net_kv), TrainConfig.from_run(run), step


# ---------------------------------------------------------------- loops


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xDA7A])).permutation(n)


def _batch(samples: Sequence[Sample], idx, channels: int) -> tuple[Tensor, Tensor]:
    x = np.concatenate([to_model_input(samples[i].image, channels).data for i in idx], axis=0)
    m = np.concatenate([samples[i].hard_gt.values.data for i in idx], axis=0)
    return Tensor(x), Tensor(m)


StepFn = Callable[[Tensor, Tensor], tuple[float, float, float, Tensor]]


def _fit(params: list[Tensor], dataset: Sequence[Sample], channels: int, step_fn: StepFn,
         config: TrainConfig, log: TrainingLog | None) -> int:  # fmt: skip
    if not dataset:
        raise TrainingError("empty training set")
    state = init_state(params)
    step = 0
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, len(dataset))
        for start in range(0, len(order), bs):
            x, m = _batch(dataset, order[start : start + bs], channels)
            intra, inter, mapl, loss = step_fn(x, m)
            step += 1
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss became non-finite at step {step} (epoch {epoch + 1})")
            ad.zero_grad(params)
            ad.backward(loss)
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            grads, _ = clip_grad_norm(grads, config.clip_norm)
            optimizer_step(params, grads, state, config)
            ad.zero_grad(params)
            if log is not None:
                log.record(step, intra, inter, mapl, loss.item())
    return step


def train_teacher(
    config: TrainConfig,
    net_config: NetworkConfig,
    dataset: Sequence[Sample],
    log: TrainingLog | None = None,
    init: Network | None = None,
) -> Checkpoint:
    """Minimise the hard-GT map loss ``||Ms - M||^2`` over ``dataset``."""
    net = init.copy() if init is not None else build_network(net_config, config.seed)
    net.set_trainable(True)
    params = net.parameters()

    def step_fn(x, m):
        pred, _ = forward_with_taps(net, x)
        loss = map_loss(pred, m, None, use_hard=True, use_soft=False)
        return 0.0, 0.0, loss.item(), loss

    steps = _fit(params, dataset, net_config.input_channels, step_fn, config, log)
    return Checkpoint({k: v.data.copy() for k, v in net.params.items()}, net_config, config, steps)


def check_alignment(teacher: NetworkConfig, student: NetworkConfig) -> None:
    if teacher.tap_strides() != student.tap_strides():
        raise TrainingError(f"teacher and student taps are not spatially aligned: {teacher.tap_strides()} vs {student.tap_strides()}")
    if teacher.input_channels != student.input_channels:
        raise TrainingError("teacher and student disagree on input channels")


@dataclass
class DistillResult:
    checkpoint: Checkpoint
    embedder: ChannelEmbedder


def distill(
    teacher: Checkpoint | Network,
    student_cfg: NetworkConfig,
    config: TrainConfig,
    dataset: Sequence[Sample],
    log: TrainingLog | None = None,
    init: Network | None = None,
    return_embedder: bool = False,
):
    """Train a student under the weighted SKT objective with a frozen teacher."""
    tnet = teacher.network() if isinstance(teacher, Checkpoint) else teacher
    tnet = Network(tnet.config, {k: Tensor(v.data) for k, v in tnet.params.items()})  # frozen copy
    check_alignment(tnet.config, student_cfg)
    student = init.copy() if init is not None else build_network(student_cfg, config.seed)
    student.set_trainable(True)
    emb = build_embedder(student_cfg.tap_channels(), tnet.config.tap_channels(), config.seed)
    params = student.parameters() + emb.parameters()
    w = config.weights
    need_teacher = w.intra_enabled or w.inter_enabled or (w.map_enabled and w.use_soft_gt)

    def step_fn(x, m):
        T, mt = None, None
        if need_teacher:
            with ad.no_grad():
                mt_map, T = forward_with_taps(tnet, x)
            mt = mt_map.values
        pred, S = forward_with_taps(student, x)
        br = skt_objective(T, S, emb, pred, m, mt, w)
        return br.intra, br.inter, br.map, br.loss

    steps = _fit(params, dataset, student_cfg.input_channels, step_fn, config, log)
    ckpt = Checkpoint({k: v.data.copy() for k, v in student.params.items()}, student_cfg, config, steps)
    return DistillResult(ckpt, emb) if return_embedder else ckpt


def initial_losses(teacher: Network, student: Network, emb: ChannelEmbedder, sample: Sample, weights: LossWeights):
    """Loss breakdown and gradients for one sample without updating anything."""
    dtype = student.parameters()[0].dtype
    x = Tensor(to_model_input(sample.image, student.config.input_channels).data.astype(dtype))
    with ad.no_grad():
        mt, T = forward_with_taps(teacher, x)
    pred, S = forward_with_taps(student, x)
    br = skt_objective(T, S, emb, pred, sample.hard_gt, mt, weights)
    params = student.parameters() + emb.parameters()
    ad.zero_grad(params)
    ad.backward(br.loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    ad.zero_grad(params)
    return br, grads
