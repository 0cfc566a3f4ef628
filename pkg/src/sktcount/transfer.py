"""Structured knowledge transfer losses.

* intra-layer pattern transfer: 1x1 channel embedding of the student taps,
  then per-location cosine agreement with the teacher taps;
* inter-layer relation transfer: FSP (channel Gram) matrices between pairs of
  taps, all resized to the deepest tap's resolution by max pooling;
* density-map supervision from hard (annotation) and soft (teacher) maps.

All functions operate on batched ``N x C x H x W`` tensors and sum over the
batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .density import DensityMap
from .models import N_TAPS, FeatureGroup, he_normal

COS_EPS = 1e-8
INTRA_METRICS = ("cos", "l2")
FSP_MODES = ("dense", "sparse", "off")
GT_MODES = ("hard", "soft", "both")


@dataclass
class LossWeights:
    alpha_intra: float = 1.0
    alpha_inter: float = 1.0
    alpha_map: float = 1.0
    use_hard_gt: bool = True
    use_soft_gt: bool = True
    intra_metric: str = "cos"
    fsp_mode: str = "dense"
    self_pairs: bool = False

    def __post_init__(self):
        if min(self.alpha_intra, self.alpha_inter, self.alpha_map) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.intra_metric not in INTRA_METRICS:
            raise ValueError(f"intra metric must be one of {INTRA_METRICS}, got {self.intra_metric!r}")
        if self.fsp_mode not in FSP_MODES:
            raise ValueError(f"fsp mode must be one of {FSP_MODES}, got {self.fsp_mode!r}")
        if not (self.intra_enabled or self.inter_enabled or self.map_enabled):
            raise ValueError("at least one loss term must be enabled")

    @property
    def intra_enabled(self) -> bool:
        return self.alpha_intra > 0

    @property
    def inter_enabled(self) -> bool:
        return self.alpha_inter > 0 and self.fsp_mode != "off"

    @property
    def map_enabled(self) -> bool:
        return self.alpha_map > 0 and (self.use_hard_gt or self.use_soft_gt)

    @classmethod
    def from_gt(cls, gt: str, **kw) -> "LossWeights":
        if gt not in GT_MODES:
            raise ValueError(f"gt must be one of {GT_MODES}, got {gt!r}")
        return cls(use_hard_gt=gt in ("hard", "both"), use_soft_gt=gt in ("soft", "both"), **kw)


# ---------------------------------------------------------------- embedding


@dataclass
class ChannelEmbedder:
    """One 1x1 conv per tap mapping student channels to teacher channels."""

    weights: list[Tensor]
    biases: list[Tensor | None]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair if t is not None]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"embed{i}.weight", w))
            if b is not None:
                out.append((f"embed{i}.bias", b))
        return out

    def in_channels(self) -> list[int]:
        return [w.shape[1] for w in self.weights]

    def out_channels(self) -> list[int]:
        return [w.shape[0] for w in self.weights]


def build_embedder(student_channels, teacher_channels, seed: int = 0, dtype=np.float32, bias: bool = True) -> ChannelEmbedder:
    """He-initialised 1x1 convs; taps whose channel counts already agree start as identity.

    With ``bias=False`` a dead student tap embeds to the zero vector, which the
    cosine term scores as no agreement; a learnable bias can satisfy the
    teacher with a constant and let student features die.
    """
    if len(student_channels) != N_TAPS or len(teacher_channels) != N_TAPS:
        raise ShapeError(f"embedder needs {N_TAPS} tap channel counts")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3B]))
    weights, biases = [], []
    for cs, ct in zip(student_channels, teacher_channels):
        if cs == ct:
            w = np.eye(ct, dtype=dtype).reshape(ct, cs, 1, 1)
        else:
            w = he_normal(rng, (ct, cs, 1, 1), dtype)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(ct, dtype=dtype), requires_grad=True) if bias else None)
    return ChannelEmbedder(weights, biases)


def embed_channels(S: FeatureGroup, emb: ChannelEmbedder) -> FeatureGroup:
    out = []
    for i, (s, w, b) in enumerate(zip(S, emb.weights, emb.biases)):
        if s.shape[1] != w.shape[1]:
            raise ShapeError(f"tap {i}: student feature has {s.shape[1]} channels, embedder expects {w.shape[1]}")
        out.append(ad.conv2d(s, w, b))
    return FeatureGroup(out, "embedded-H")


# ---------------------------------------------------------------- intra-layer


def cosine_similarity_map(t: Tensor, h: Tensor, eps: float = COS_EPS) -> Tensor:
    """Per-location cosine between the channel vectors of ``t`` and ``h``.

    ``t.h / max(|t||h|, eps)``.  Where the teacher vector is (numerically)
    zero, ``|t| <= sqrt(eps)``, it carries no pattern: the similarity is held
    at 1 and no gradient flows.
    """
    if t.shape != h.shape:
        raise ShapeError(f"cosine map needs identical shapes, got {t.shape} and {h.shape}")
    dot = ad.sum(ad.mul(t, h), axis=1, keepdims=True)
    nt = ad.l2norm(t, 1)
    sim = ad.div(dot, ad.clamp_min(ad.mul(nt, ad.l2norm(h, 1)), eps))
    live = (nt.data > np.sqrt(eps)).astype(sim.dtype)
    if live.all():
        return sim
    return ad.add(ad.mul(sim, Tensor(live)), Tensor(1 - live))


def _check_groups(T: FeatureGroup, H: FeatureGroup) -> None:
    for i, (t, h) in enumerate(zip(T, H)):
        if t.shape != h.shape:
            raise ShapeError(f"tap {i}: teacher {t.shape} and embedded student {h.shape} differ")


def intra_loss(T: FeatureGroup, H: FeatureGroup, metric: str = "cos") -> Tensor:
    """Sum over taps and locations of (1 - cosine), or of the per-tap mean squared distance for ``l2``."""
    _check_groups(T, H)
    terms = []
    for t, h in zip(T, H):
        if metric == "cos":
            sim = cosine_similarity_map(t, h)
            terms.append(ad.sum(1.0 - sim))
        elif metric == "l2":
            area = t.shape[2] * t.shape[3]
            terms.append(ad.scale(ad.sum(ad.square(ad.sub(h, t))), 1.0 / area))
        else:
            raise ValueError(f"unknown intra metric {metric!r}")
    return _sum_all(terms)


# ---------------------------------------------------------------- inter-layer


def resize_to_reference(f: Tensor, ref_h: int, ref_w: int) -> Tensor:
    """Max-pool ``f`` down to ``ref_h x ref_w`` (integer factors only)."""
    h, w = f.shape[2], f.shape[3]
    if h % ref_h or w % ref_w:
        raise ShapeError(f"cannot max-pool {h}x{w} down to {ref_h}x{ref_w}: sizes are not divisible")
    if (h, w) == (ref_h, ref_w):
        return f
    kh, kw = h // ref_h, w // ref_w
    return ad.maxpool2d(f, (kh, kw), (kh, kw))


def fsp_matrix(f1: Tensor, f2: Tensor) -> Tensor:
    """Channel-by-channel spatial mean of products: ``N x m x n``."""
    n, m, h, w = f1.shape
    if f2.shape[0] != n or f2.shape[2:] != (h, w):
        raise ShapeError(f"FSP needs equal batch and spatial dims, got {f1.shape} and {f2.shape}")
    a = ad.reshape(f1, (n, m, h * w))
    b = ad.reshape(f2, (n, f2.shape[1], h * w))
    return ad.scale(ad.matmul(a, ad.transpose(b)), 1.0 / (h * w))


def fsp_pairs(mode: str = "dense", n: int = N_TAPS, self_pairs: bool = False) -> list[tuple[int, int]]:
    if mode == "dense":
        pairs = list(combinations(range(n), 2))
        if self_pairs:
            pairs = sorted(pairs + [(i, i) for i in range(n)])
        return pairs
    if mode == "sparse":
        return [(i, i + 1) for i in range(n - 1)]
    if mode == "off":
        return []
    raise ValueError(f"unknown FSP mode {mode!r}")


def inter_loss(T: FeatureGroup, H: FeatureGroup, mode: str = "dense", self_pairs: bool = False) -> Tensor:
    """Sum of squared Frobenius distances between teacher and student FSP matrices."""
    _check_groups(T, H)
    ref_h, ref_w = T[-1].shape[2], T[-1].shape[3]
    rt = [resize_to_reference(t, ref_h, ref_w) for t in T]
    rh = [resize_to_reference(h, ref_h, ref_w) for h in H]
    terms = []
    for a, b in fsp_pairs(mode, len(rt), self_pairs):
        diff = ad.sub(fsp_matrix(rh[a], rh[b]), fsp_matrix(rt[a], rt[b]))
        terms.append(ad.sum(ad.square(diff)))
    return _sum_all(terms, like=T[0])


# ---------------------------------------------------------------- maps


def _values(m) -> Tensor:
    return m.values if isinstance(m, DensityMap) else m


def map_loss(Ms, M, Mt, use_hard: bool = True, use_soft: bool = True) -> Tensor:
    """``||Ms - M||^2 + ||Ms - Mt||^2`` with either term switchable."""
    if not (use_hard or use_soft):
        raise ValueError("map loss needs the hard or the soft term")
    ms = _values(Ms)
    terms = []
    for flag, target in ((use_hard, M), (use_soft, Mt)):
        if not flag:
            continue
        tv = _values(target)
        if tv.shape != ms.shape:
            raise ShapeError(f"density maps differ in size: prediction {ms.shape}, target {tv.shape}")
        terms.append(ad.sum(ad.square(ad.sub(ms, tv))))
    return _sum_all(terms)


def total_loss(intra: Tensor | None, inter: Tensor | None, mapl: Tensor | None, weights: LossWeights) -> Tensor:
    """``a1 * intra + a2 * inter + a3 * map``; ``None`` components count as 0."""
    if min(weights.alpha_intra, weights.alpha_inter, weights.alpha_map) < 0:
        raise ValueError("loss weights must be nonnegative")
    terms = [
        ad.scale(x, a)
        for x, a in ((intra, weights.alpha_intra), (inter, weights.alpha_inter), (mapl, weights.alpha_map))
        if x is not None and a != 0
    ]
    if not terms:
        ref = next((x for x in (intra, inter, mapl) if x is not None), None)
        return Tensor(np.zeros((), dtype=np.float32 if ref is None else ref.dtype))
    return _sum_all(terms)


def _sum_all(terms: list[Tensor], like: Tensor | None = None) -> Tensor:
    if not terms:
        return Tensor(np.zeros((), dtype=np.float32 if like is None else like.dtype))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


@dataclass
class LossBreakdown:
    intra: float
    inter: float
    map: float
    total: float
    loss: Tensor


def skt_objective(
    T: FeatureGroup,
    S: FeatureGroup,
    emb: ChannelEmbedder,
    Ms: DensityMap,
    M: DensityMap,
    Mt: DensityMap | None,
    weights: LossWeights,
) -> LossBreakdown:
    """Evaluate every enabled term on one forward pass and combine them."""
    intra = inter = mapl = None
    if weights.intra_enabled or weights.inter_enabled:
        H = embed_channels(S, emb)
        if weights.intra_enabled:
            intra = intra_loss(T, H, weights.intra_metric)
        if weights.inter_enabled:
            inter = inter_loss(T, H, weights.fsp_mode, weights.self_pairs)
    if weights.map_enabled:
        mapl = map_loss(Ms, M, Mt, weights.use_hard_gt, weights.use_soft_gt)
    total = total_loss(intra, inter, mapl, weights)
    val = lambda x: 0.0 if x is None else x.item()  # noqa: E731
    return LossBreakdown(val(intra), val(inter), val(mapl), total.item(), total)
