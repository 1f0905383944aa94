"""Datasets and the multi-view augmentation pipeline.

Randomness for augmentation comes from a counter-based generator: every
(seed, epoch, sample index, view index) tuple is hashed into a 64-bit key
and the n-th random word of that view is ``splitmix64(key + n * GOLDEN)``.
A view therefore never depends on batch composition, iteration order or
worker count, and the whole batch can be generated with vectorized uint64
arithmetic.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError, InvalidInputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    samples: np.ndarray  # N x D float64
    true_labels: np.ndarray | None = None  # evaluation only
    metadata: dict = field(default_factory=dict)
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise InvalidInputError("samples must be an N x D matrix")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if self.true_labels.shape != (len(self.samples),):
                raise InvalidInputError("one label per sample required")
            if self.true_labels.size and self.true_labels.min() < 0:
                raise InvalidInputError("labels must be non-negative")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.true_labels is not None


def gen_gaussian_mixture(k: int, dim: int, n: int, separation: float, seed: int,
                         max_retries: int = 1000) -> Dataset:
    """Balanced mixture of k unit-variance spherical Gaussians.

    Centers are drawn on a sphere and accepted only when every pair is at
    least ``separation`` apart; the radius grows by 5% after each rejected
    draw. Raises GenerationError when ``max_retries`` draws all fail.
    """
    if k < 2:
        raise InvalidInputError("need at least 2 components")
    if n < k:
        raise InvalidInputError("need at least one sample per component")
    if dim < 1:
        raise InvalidInputError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    radius = separation / np.sqrt(2.0)
    for _ in range(max_retries):
        directions = rng.standard_normal((k, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        centers = radius * directions
        diffs = centers[:, None, :] - centers[None, :, :]
        dists = np.sqrt((diffs**2).sum(-1))[np.triu_indices(k, 1)]
        if dists.min() >= separation:
            break
        radius *= 1.05
    else:
        raise GenerationError(
            f"could not place {k} centers {separation} apart in {dim} dimensions"
        )
    labels = rng.permutation(np.arange(n) % k)
    samples = centers[labels] + rng.standard_normal((n, dim))
    meta = dict(source="gaussian_mixture", k=k, dim=dim, n=n, separation=separation, seed=seed)
    ds = Dataset(samples, labels, meta)
    ds.metadata["centers"] = centers.tolist()
    return ds


def nearest_center_labels(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = ((samples[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def save_csv(ds: Dataset, path) -> None:
    """Write ``dim_0,...,dim_{D-1},label`` rows; label -1 when absent."""
    labels = ds.true_labels if ds.has_labels else np.full(len(ds), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{j}" for j in range(ds.dim)] + ["label"])
        for row, lab in zip(ds.samples, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV file")
    header = rows[0]
    dim = len(header) - 1
    expected = [f"dim_{j}" for j in range(dim)] + ["label"]
    if header != expected:
        raise FormatError(f"{path}: unexpected header {header[:3]}...")
    try:
        samples = np.array([[float(v) for v in r[:dim]] for r in rows[1:]], dtype=np.float64)
        labels = np.array([int(r[dim]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from None
    samples = samples.reshape(len(rows) - 1, dim)
    if labels.size and (labels < 0).all():
        labels = None
    elif labels.size and (labels < 0).any():
        raise FormatError(f"{path}: labels must be all present or all -1")
    return Dataset(samples, labels, {"source": "csv", "path": str(path)})


# --------------------------------------------------------------------- IDX


def _read_idx(data: bytes, expected_magic: int, what: str):
    if len(data) < 4:
        raise FormatError(f"{what}: file too short for magic number", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError(f"{what}: truncated dimension header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < header_end + count:
        raise FormatError(
            f"{what}: payload truncated, need {count} bytes after header", offset=len(data)
        )
    if len(data) > header_end + count:
        raise FormatError(f"{what}: trailing bytes after payload", offset=header_end + count)
    payload = np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end)
    return dims, payload


def load_idx(path, labels_path=None) -> Dataset:
    """Read an IDX ubyte image file (and optionally its label file).

    Pixels are scaled to [0, 1] and every image is flattened row-major.
    """
    path = Path(path)
    dims, payload = _read_idx(path.read_bytes(), IDX_IMAGES_MAGIC, str(path))
    n, rows, cols = dims
    samples = payload.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        (n_labels,), raw = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, str(labels_path))
        if n_labels != n:
            raise FormatError(
                f"{labels_path}: {n_labels} labels for {n} images", offset=4
            )
        labels = raw.astype(np.int64)
    meta = {"source": "idx", "path": str(path)}
    return Dataset(samples, labels, meta, image_shape=(rows, cols))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# ------------------------------------------------------- counter-based RNG

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def stream_keys(seed: int, epoch: int, indices, view: int) -> np.ndarray:
    """64-bit key per sample for one (seed, epoch, view)."""
    with np.errstate(over="ignore"):
        key = _splitmix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)
        key = _splitmix(key ^ (np.uint64(epoch & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
        idx = np.asarray(indices, dtype=np.uint64).reshape(-1)
        key = _splitmix(key ^ (idx + _GOLDEN))
        return _splitmix(key ^ (np.uint64(view) + _GOLDEN))


def counter_uniform(keys: np.ndarray, start: int, count: int) -> np.ndarray:
    """Uniforms in [0, 1) for draws ``start .. start+count-1`` of each key."""
    with np.errstate(over="ignore"):
        n = np.arange(start + 1, start + count + 1, dtype=np.uint64)
        words = _splitmix(keys[:, None] + n[None, :] * _GOLDEN)
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def counter_normal(keys: np.ndarray, start: int, count: int) -> np.ndarray:
    """Box-Muller normals consuming ``2 * count`` draws from ``start``."""
    u = counter_uniform(keys, start, 2 * count)
    u1 = 1.0 - u[:, :count]  # (0, 1]
    u2 = u[:, count:]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    n_global: int = 2
    n_local: int = 0
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    noise_sigma: float = 0.0
    flip: bool = True

    def __post_init__(self):
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0.0 < lo < hi <= 1.0:
                raise InvalidInputError(f"scale interval ({lo}, {hi}) must satisfy 0 < lo < hi <= 1")
        if self.n_global < 1 or self.n_local < 0:
            raise InvalidInputError("need at least one global view")
        if self.n_global + self.n_local < 2:
            raise InvalidInputError("need at least two views in total")
        if self.noise_sigma < 0.0:
            raise InvalidInputError("noise_sigma must be non-negative")

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local

    def scale_for(self, view: int) -> tuple[float, float]:
        return self.global_scale if view < self.n_global else self.local_scale


def self_label_preset(cfg: AugmentConfig) -> AugmentConfig:
    """Narrowed crop scales used during self-labeling."""
    return AugmentConfig(
        n_global=cfg.n_global,
        n_local=cfg.n_local,
        global_scale=(0.14, 0.4),
        local_scale=(0.05, 0.14),
        noise_sigma=cfg.noise_sigma,
        flip=cfg.flip,
    )


@dataclass
class ViewSet:
    global_views: list
    local_views: list
    source_index: int


def mask_views(samples: np.ndarray, keep_fraction: np.ndarray, mask_keys: np.ndarray,
               noise: np.ndarray | None) -> np.ndarray:
    """Zero all but the ``round(f * D)`` coordinates with the smallest keys, then add noise."""
    d = samples.shape[1]
    keep = np.clip(np.rint(keep_fraction * d), 1, d).astype(np.int64)
    ranks = np.argsort(np.argsort(mask_keys, axis=1, kind="stable"), axis=1, kind="stable")
    out = np.where(ranks < keep[:, None], samples, 0.0)
    if noise is not None:
        out = out + noise
    return out


def _vector_views(samples, keys, cfg: AugmentConfig, view: int):
    d = samples.shape[1]
    lo, hi = cfg.scale_for(view)
    frac = lo + (hi - lo) * counter_uniform(keys, 0, 1)[:, 0]
    mask_keys = counter_uniform(keys, 1, d)
    noise = cfg.noise_sigma * counter_normal(keys, 1 + d, d) if cfg.noise_sigma else None
    return mask_views(samples, frac, mask_keys, noise)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _image_view(sample, image_shape, u: np.ndarray, noise, cfg: AugmentConfig, view: int):
    """One random-resized square crop; ``u`` holds 4 uniforms (scale, y, x, flip)."""
    h, w = image_shape
    img = sample.reshape(h, w)
    lo, hi = cfg.scale_for(view)
    area = lo + (hi - lo) * u[0]
    side = max(1, int(round(np.sqrt(area * h * w))))
    side = min(side, h, w)
    top = int(u[1] * (h - side + 1))
    left = int(u[2] * (w - side + 1))
    crop = bilinear_resize(img[top:top + side, left:left + side], h, w)
    if cfg.flip and u[3] < 0.5:
        crop = crop[:, ::-1]
    out = crop.reshape(-1)
    if noise is not None:
        out = out + noise
    return out


def augment_batch(samples: np.ndarray, indices, cfg: AugmentConfig, seed: int, epoch: int,
                  image_shape=None) -> list[np.ndarray]:
    """All views of a batch, one ``B x D`` matrix per view (globals first)."""
    samples = np.asarray(samples, dtype=np.float64)
    indices = np.asarray(indices)
    views = []
    for v in range(cfg.n_views):
        keys = stream_keys(seed, epoch, indices, v)
        if image_shape is None:
            views.append(_vector_views(samples, keys, cfg, v))
            continue
        d = samples.shape[1]
        u = counter_uniform(keys, 0, 4)
        noise = cfg.noise_sigma * counter_normal(keys, 4, d) if cfg.noise_sigma else None
        views.append(np.stack([
            _image_view(samples[i], image_shape, u[i], None if noise is None else noise[i], cfg, v)
            for i in range(len(samples))
        ]))
    return views


def augment_views(sample, cfg: AugmentConfig, seed: int, epoch: int, index: int,
                  image_shape=None) -> ViewSet:
    """Views of a single sample; identical to its row in ``augment_batch``."""
    sample = np.asarray(sample, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(sample)):
        raise InvalidInputError("sample contains non-finite values")
    views = [v[0] for v in augment_batch(sample, [index], cfg, seed, epoch, image_shape)]
    return ViewSet(views[: cfg.n_global], views[cfg.n_global:], index)
