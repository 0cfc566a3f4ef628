"""Ground-truth density maps, synthetic crowd scenes and on-disk formats.

Coordinates follow image convention: a point ``(x, y)`` has ``x`` along the
columns and ``y`` along the rows, both in pixels, and pixel ``(r, c)`` covers
``[c, c+1) x [r, r+1)`` with its centre at ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor

BETA = 0.3
K_NEIGHBOURS = 3
FALLBACK_SIGMA = 15.0
OUTPUT_STRIDE = 8

DENSITY_MAGIC = b"SKTD"
DENSITY_VERSION = 1


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class PointAnnotation:
    x: float
    y: float


@dataclass
class DensityMap:
    values: Tensor  # 1x1xHxW
    provenance: str = "hard"  # hard | soft | predicted

    @property
    def array(self) -> np.ndarray:
        return self.values.data[0, 0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def total(self) -> float:
        return float(np.sum(self.values.data, dtype=np.float64))


@dataclass
class Sample:
    image: Tensor  # 1xCxHxW in [0, 1]
    points: list[PointAnnotation]
    hard_gt: DensityMap
    name: str = ""

    @property
    def count(self) -> int:
        return len(self.points)


def _as_xy(points: Sequence[PointAnnotation] | np.ndarray) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(np.float64)
    return np.array([[p.x, p.y] for p in points], dtype=np.float64).reshape(-1, 2)


def adaptive_sigmas(points, beta: float = BETA, k: int = K_NEIGHBOURS, fallback: float = FALLBACK_SIGMA) -> np.ndarray:
    """Per-point sigma = beta * mean distance to the k nearest other points.

    With fewer than k other points all available neighbours are used; a lone
    point gets ``fallback``.
    """
    xy = _as_xy(points)
    n = len(xy)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.array([fallback])
    kk = min(k, n - 1)
    if n <= 2048:
        d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        nearest = np.sort(d, axis=1)[:, :kk]
    else:
        from scipy.spatial import cKDTree

        dist, _ = cKDTree(xy).query(xy, k=kk + 1)
        nearest = dist[:, 1:]
    return beta * nearest.mean(axis=1)


def _stamp(out: np.ndarray, x: float, y: float, sigma: float) -> None:
    h, w = out.shape
    col, row = int(math.floor(x)), int(math.floor(y))
    radius = max(1, int(math.ceil(4 * sigma))) if sigma > 0 else 0
    r0, r1 = max(0, row - radius), min(h, row + radius + 1)
    c0, c1 = max(0, col - radius), min(w, col + radius + 1)
    if sigma > 0:
        gy = np.exp(-(((np.arange(r0, r1) + 0.5) - y) ** 2) / (2 * sigma * sigma))
        gx = np.exp(-(((np.arange(c0, c1) + 0.5) - x) ** 2) / (2 * sigma * sigma))
        kernel = np.outer(gy, gx)
        mass = kernel.sum()
        if mass > 0:
            out[r0:r1, c0:c1] += kernel / mass
            return
    out[row, col] += 1.0  # degenerate sigma: all mass on the containing pixel


def generate_density_map(
    points,
    height: int,
    width: int,
    mode: str = "geometry-adaptive",
    sigma: float | None = None,
    beta: float = BETA,
    k: int = K_NEIGHBOURS,
) -> DensityMap:
    """Sum of unit-mass Gaussians, one per point.

    ``mode`` is ``"geometry-adaptive"`` or ``"fixed"`` (needs ``sigma``).  Each
    kernel is cut at radius ``ceil(4 sigma)`` and renormalised over the pixels
    that remain inside the image, so the map integrates to the point count.
    """
    xy = _as_xy(points)
    for i, (x, y) in enumerate(xy):
        if not (0 <= x < width and 0 <= y < height):
            raise AnnotationError(f"point {i} at ({x}, {y}) lies outside the {height}x{width} image")
    if mode == "geometry-adaptive":
        if len(xy) == 0:
            raise AnnotationError("geometry-adaptive kernels need at least one point")
        sigmas = adaptive_sigmas(xy, beta=beta, k=k)
    elif mode == "fixed":
        if sigma is None or sigma < 0:
            raise ValueError("fixed mode needs a nonnegative sigma")
        sigmas = np.full(len(xy), float(sigma))
    else:
        raise ValueError(f"unknown density mode {mode!r}")
    out = np.zeros((height, width), dtype=np.float64)
    for (x, y), s in zip(xy, sigmas):
        _stamp(out, x, y, float(s))
    return DensityMap(Tensor(out.astype(np.float32)[None, None]), "hard")


def sum_pool_downsample(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum each ``factor x factor`` block; total mass is preserved."""
    h, w = dmap.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"map of size {h}x{w} is not divisible by factor {factor}")
    if factor == 1:
        return DensityMap(Tensor(dmap.values.data.copy()), dmap.provenance)
    arr = dmap.array.astype(np.float64)
    pooled = arr.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(Tensor(pooled.astype(np.float32)[None, None]), dmap.provenance)


def make_sample(image: np.ndarray, points: Sequence[PointAnnotation], name: str = "", **density_kw) -> Sample:
    """Wrap an HxW grayscale image and its points, deriving the 1/8 hard GT."""
    h, w = image.shape
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ValueError(f"image size {h}x{w} must be divisible by {OUTPUT_STRIDE}")
    if points:
        full = generate_density_map(points, h, w, **density_kw)
    else:
        full = DensityMap(Tensor(np.zeros((1, 1, h, w), dtype=np.float32)))
    gt = sum_pool_downsample(full, OUTPUT_STRIDE)
    return Sample(Tensor(image.astype(np.float32)[None, None]), list(points), gt, name)


# ---------------------------------------------------------------- synthesis


def _scene_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0x5C7, int(seed)]))


def synth_scene(seed: int, count_range: tuple[int, int], height: int, width: int) -> Sample:
    """Deterministic toy crowd scene: clustered bright blobs on a textured background."""
    if height % OUTPUT_STRIDE or width % OUTPUT_STRIDE:
        raise ValueError(f"scene size {height}x{width} must be divisible by {OUTPUT_STRIDE}")
    lo, hi = count_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid count range {count_range}")
    rng = _scene_rng(seed)
    n = int(rng.integers(lo, hi + 1))

    # mixture of Gaussian clusters plus a uniform share
    n_clusters = int(rng.integers(1, 4))
    centres = rng.uniform([0.15 * width, 0.15 * height], [0.85 * width, 0.85 * height], size=(n_clusters, 2))
    spreads = rng.uniform(0.06, 0.2, size=n_clusters) * min(height, width)
    pts = []
    while len(pts) < n:
        if rng.random() < 0.2:
            p = rng.uniform([0, 0], [width, height])
        else:
            c = int(rng.integers(n_clusters))
            p = rng.normal(centres[c], spreads[c])
        if 0.5 <= p[0] < width - 0.5 and 0.5 <= p[1] < height - 0.5:
            pts.append(p)
    xy = np.array(pts, dtype=np.float64).reshape(-1, 2)

    # background: smooth random texture plus a gentle gradient
    bg = gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 10, mode="wrap")
    bg = 0.25 + 0.15 * bg / (np.abs(bg).max() + 1e-12)
    bg += rng.uniform(-0.08, 0.08) * np.linspace(0, 1, height)[:, None]
    img = bg + 0.03 * rng.standard_normal((height, width))

    # people: radius shrinks where the crowd is dense
    if n:
        local = adaptive_sigmas(xy, beta=1.0, k=K_NEIGHBOURS, fallback=8.0)
        radii = np.clip(0.35 * local, 0.8, 2.5)
        rows = np.arange(height)[:, None] + 0.5
        cols = np.arange(width)[None, :] + 0.5
        for (x, y), r in zip(xy, radii):
            amp = rng.uniform(0.45, 0.7)
            img += amp * np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * r * r))
    img = np.clip(img, 0.0, 1.0)
    points = [PointAnnotation(float(x), float(y)) for x, y in xy]
    return make_sample(img, points, name=f"synth{seed:06d}")


def synth_dataset(seed: int, count: int, height: int, width: int, count_range: tuple[int, int]) -> list[Sample]:
    base = int(_scene_rng(seed).integers(0, 2**31 - 1))
    scenes = [synth_scene(base + i, count_range, height, width) for i in range(count)]
    for i, s in enumerate(scenes):
        s.name = f"img{i:05d}"
    return scenes


def to_model_input(image: Tensor, channels: int = 3) -> Tensor:
    """Replicate a single-channel image to ``channels`` channels."""
    if image.shape[1] == channels:
        return image
    if image.shape[1] != 1:
        raise ValueError(f"cannot expand a {image.shape[1]}-channel image to {channels} channels")
    return Tensor(np.repeat(image.data, channels, axis=1))


# ---------------------------------------------------------------- file formats


def parse_annotation_line(line: str, lineno: int = 0) -> tuple[str, list[PointAnnotation]] | None:
    text = line.strip()
    if not text or text.startswith("#"):
        return None
    fields = text.split()
    try:
        n = int(fields[1])
        coords = [float(v) for v in fields[2:]]
    except (IndexError, ValueError) as exc:
        raise AnnotationError(f"line {lineno}: malformed record: {exc}") from None
    if n < 0 or len(coords) != 2 * n:
        raise AnnotationError(f"line {lineno}: expected {2 * max(n, 0)} coordinates, found {len(coords)}")
    pts = [PointAnnotation(coords[2 * i], coords[2 * i + 1]) for i in range(n)]
    return fields[0], pts


def load_annotations(path) -> list[tuple[str, list[PointAnnotation]]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            rec = parse_annotation_line(line, lineno)
            if rec is not None:
                records.append(rec)
    return records


def format_annotation(image_id: str, points: Iterable[PointAnnotation]) -> str:
    pts = list(points)
    coords = " ".join(f"{p.x!r} {p.y!r}" for p in pts)
    return f"{image_id} {len(pts)}" + (f" {coords}" if coords else "")


def save_annotations(path, records: Iterable[tuple[str, Sequence[PointAnnotation]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image-id N x1 y1 ... xN yN\n")
        for image_id, pts in records:
            fh.write(format_annotation(image_id, pts) + "\n")


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise AnnotationError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def load_image(path) -> Tensor:
    """Read an 8-bit binary PGM (P5) into a 1x1xHxW tensor in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise AnnotationError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise AnnotationError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raw = buf[offset : offset + w * h]
    if len(raw) != w * h:
        raise AnnotationError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float32) / maxval
    return Tensor(img[None, None])


def save_image(path, image) -> None:
    arr = image.data[0, 0] if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape
    pix = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def save_density(path, dmap: DensityMap) -> None:
    h, w = dmap.shape
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC + struct.pack("<III", DENSITY_VERSION, h, w))
        fh.write(dmap.array.astype("<f4").tobytes())


def load_density(path) -> DensityMap:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != DENSITY_MAGIC:
        raise AnnotationError(f"{path}: not a density dump (bad magic)")
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != DENSITY_VERSION:
        raise AnnotationError(f"{path}: unsupported density dump version {version}")
    if len(buf) != 16 + 4 * h * w:
        raise AnnotationError(f"{path}: truncated density dump")
    arr = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    return DensityMap(Tensor(arr[None, None]), "hard")


ANNOTATION_FILE = "annotations.txt"
MANIFEST_FILE = "manifest.txt"


def write_dataset(directory, samples: Sequence[Sample]) -> None:
    """Write PGM images, one annotation file, density dumps and a manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = ["# image-id image density count"]
    for s in samples:
        save_image(d / f"{s.name}.pgm", s.image)
        save_density(d / f"{s.name}.sktd", s.hard_gt)
        manifest.append(f"{s.name} {s.name}.pgm {s.name}.sktd {s.count}")
    save_annotations(d / ANNOTATION_FILE, [(s.name, s.points) for s in samples])
    (d / MANIFEST_FILE).write_text("\n".join(manifest) + "\n", encoding="utf-8")


def load_dataset(directory) -> list[Sample]:
    """Load a directory written by :func:`write_dataset` (or any PGM + annotation set)."""
    d = Path(directory)
    ann = d / ANNOTATION_FILE
    if not d.is_dir() or not ann.is_file():
        raise FileNotFoundError(f"no dataset at {d} (missing {ann.name})")
    samples = []
    for image_id, pts in load_annotations(ann):
        img = load_image(d / f"{image_id}.pgm")
        samples.append(make_sample(img.data[0, 0], pts, name=image_id))
    return samples


def dataset_exists(directory) -> bool:
    return os.path.isfile(os.path.join(directory, ANNOTATION_FILE))
