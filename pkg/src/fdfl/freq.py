"""Block-DCT frequency preprocessing.

RGB images are converted to full-range YCbCr, every 8x8 block of every plane
is transformed with an orthonormal 2D DCT-II, and coefficients of the same
(plane, u, v) band are gathered into one channel that keeps the block grid
as its spatial layout. The result is an (H/8, W/8, 192) tensor.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.fft import dctn, idctn

BLOCK = 8
BANDS = BLOCK * BLOCK
NUM_CHANNELS = 3 * BANDS
EPSILON_STD = 1e-6
LAYOUT = "plane_major_uv"
PLANES = ("Y", "Cb", "Cr")


class PreprocessError(ValueError):
    pass


@dataclass
class FrequencyTensor:
    coeffs: np.ndarray  # (H/8, W/8, 192)
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.coeffs.shape


def _check_blocks(h: int, w: int) -> None:
    if h % BLOCK or w % BLOCK:
        raise PreprocessError(f"spatial dims {h}x{w} are not multiples of {BLOCK}")


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """Full-range BT.601 (JPEG) conversion, chroma offset 128."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise PreprocessError(f"expected HxWx3 image, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def block_dct2d(plane: np.ndarray) -> np.ndarray:
    """Replace each non-overlapping 8x8 block by its orthonormal DCT-II.

    Coefficient (u, v) of a block lands at block-local row u, column v.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise PreprocessError(f"expected a 2D plane, got shape {plane.shape}")
    _check_blocks(*plane.shape)
    coeffs = dctn(_to_blocks(plane), type=2, axes=(2, 3), norm="ortho")
    return _from_blocks(coeffs)


def block_idct2d(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2:
        raise PreprocessError(f"expected a 2D plane, got shape {coeffs.shape}")
    _check_blocks(*coeffs.shape)
    return _from_blocks(idctn(_to_blocks(coeffs), type=2, axes=(2, 3), norm="ortho"))


def regroup(coeff_planes: np.ndarray | Iterable[np.ndarray]) -> FrequencyTensor:
    """Gather block coefficients into band channels.

    ``out[i, j, p*64 + u*8 + v]`` is coefficient (u, v) of block (i, j) of
    plane p (Y=0, Cb=1, Cr=2), so the three planes occupy contiguous groups of
    64 channels.
    """
    planes = [np.asarray(p) for p in coeff_planes]
    if len(planes) != 3:
        raise PreprocessError(f"expected 3 planes, got {len(planes)}")
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise PreprocessError(f"plane shapes differ: {sorted(shapes)}")
    h, w = planes[0].shape
    _check_blocks(h, w)
    stacked = np.stack(planes)  # (3, H, W)
    out = stacked.reshape(3, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    out = out.transpose(1, 3, 0, 2, 4).reshape(h // BLOCK, w // BLOCK, NUM_CHANNELS)
    return FrequencyTensor(out)


def ungroup(t: FrequencyTensor | np.ndarray) -> np.ndarray:
    """Inverse of :func:`regroup`; returns the (3, H, W) coefficient planes."""
    coeffs = t.coeffs if isinstance(t, FrequencyTensor) else np.asarray(t)
    bh, bw, c = coeffs.shape
    if c != NUM_CHANNELS:
        raise PreprocessError(f"expected {NUM_CHANNELS} channels, got {c}")
    out = coeffs.reshape(bh, bw, 3, BLOCK, BLOCK).transpose(2, 0, 3, 1, 4)
    return out.reshape(3, bh * BLOCK, bw * BLOCK)


def channel_index(plane: int, u: int, v: int) -> int:
    return plane * BANDS + u * BLOCK + v


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def to_json(self) -> dict:
        return {
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "count": int(self.count),
            "layout": LAYOUT,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ChannelStats":
        if d.get("layout", LAYOUT) != LAYOUT:
            raise PreprocessError(f"unsupported channel layout {d.get('layout')!r}")
        mean = np.asarray(d["mean"], dtype=np.float64)
        std = np.asarray(d["std"], dtype=np.float64)
        if mean.shape != (NUM_CHANNELS,) or std.shape != (NUM_CHANNELS,):
            raise PreprocessError("stats must hold 192 means and 192 stds")
        return cls(mean, std, int(d["count"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ChannelStats":
        return cls.from_json(json.loads(Path(path).read_text()))


class ChannelStatsAccumulator:
    """Single-pass per-channel mean/variance (Chan et al. pairwise update).

    Partial accumulators computed on disjoint shards can be combined with
    :meth:`merge`.
    """

    def __init__(self, num_channels: int = NUM_CHANNELS):
        self.num_channels = num_channels
        self.n_images = 0
        self.n = 0
        self.mean = np.zeros(num_channels)
        self.m2 = np.zeros(num_channels)

    def _combine(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        n_a = self.n
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta**2 * (n_a * n_b / n)
        self.n = n

    def update(self, t: FrequencyTensor | np.ndarray) -> "ChannelStatsAccumulator":
        coeffs = t.coeffs if isinstance(t, FrequencyTensor) else np.asarray(t)
        if coeffs.shape[-1] != self.num_channels:
            raise PreprocessError(
                f"channel count {coeffs.shape[-1]} != {self.num_channels}"
            )
        flat = coeffs.reshape(-1, self.num_channels).astype(np.float64)
        mean_b = flat.mean(axis=0)
        m2_b = ((flat - mean_b) ** 2).sum(axis=0)
        self._combine(flat.shape[0], mean_b, m2_b)
        self.n_images += 1
        return self

    def merge(self, other: "ChannelStatsAccumulator") -> "ChannelStatsAccumulator":
        if other.num_channels != self.num_channels:
            raise PreprocessError("cannot merge accumulators of different widths")
        if other.n:
            self._combine(other.n, other.mean, other.m2)
            self.n_images += other.n_images
        return self

    def finalize(self, epsilon_std: float = EPSILON_STD) -> ChannelStats:
        if self.n_images == 0:
            raise PreprocessError("no tensors accumulated")
        std = np.sqrt(self.m2 / self.n)
        return ChannelStats(self.mean.copy(), np.maximum(std, epsilon_std), self.n_images)


def compute_channel_stats(
    corpus: Iterable[FrequencyTensor | np.ndarray], epsilon_std: float = EPSILON_STD
) -> ChannelStats:
    acc = ChannelStatsAccumulator()
    shape = None
    for t in corpus:
        coeffs = t.coeffs if isinstance(t, FrequencyTensor) else np.asarray(t)
        if shape is None:
            shape = coeffs.shape
        elif coeffs.shape != shape:
            raise PreprocessError(f"tensor shape {coeffs.shape} differs from {shape}")
        acc.update(coeffs)
    if acc.n_images == 0:
        raise PreprocessError("empty corpus: cannot compute channel statistics")
    return acc.finalize(epsilon_std)


def normalize(t: FrequencyTensor, stats: ChannelStats) -> FrequencyTensor:
    if t.normalized:
        raise PreprocessError("tensor is already normalized")
    if stats.count < 1:
        raise PreprocessError("stats were computed from zero images")
    if t.coeffs.shape[-1] != stats.mean.shape[0]:
        raise PreprocessError(
            f"channel count {t.coeffs.shape[-1]} != stats width {stats.mean.shape[0]}"
        )
    return FrequencyTensor((t.coeffs - stats.mean) / stats.std, normalized=True)


def preprocess_image(img: np.ndarray, stats: ChannelStats | None = None) -> FrequencyTensor:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise PreprocessError(f"expected HxWx3 image, got shape {img.shape}")
    _check_blocks(img.shape[0], img.shape[1])
    ycc = rgb_to_ycbcr(img)
    t = regroup([block_dct2d(ycc[..., p]) for p in range(3)])
    return normalize(t, stats) if stats is not None else t


def band_energy(img: np.ndarray, plane: int = 0) -> np.ndarray:
    """Mean squared DCT coefficient per (u, v) band of one plane, shape (8, 8)."""
    t = preprocess_image(img)
    sl = t.coeffs[..., plane * BANDS : (plane + 1) * BANDS]
    return (sl**2).reshape(-1, BLOCK, BLOCK).mean(axis=0)


# -- on-disk tensor cache: raw little-endian float32 plus a JSON sidecar ------


def cache_key(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:32]


def save_cached_tensor(cache_dir: str | os.PathLike, key: str, coeffs: np.ndarray) -> Path:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    raw = cache_dir / f"{key}.f32"
    raw.write_bytes(np.ascontiguousarray(coeffs, dtype="<f4").tobytes())
    (cache_dir / f"{key}.json").write_text(
        json.dumps({"shape": list(coeffs.shape), "dtype": "<f4", "layout": LAYOUT})
    )
    return raw


def load_cached_tensor(cache_dir: str | os.PathLike, key: str) -> np.ndarray | None:
    cache_dir = Path(cache_dir)
    raw, side = cache_dir / f"{key}.f32", cache_dir / f"{key}.json"
    if not (raw.exists() and side.exists()):
        return None
    meta = json.loads(side.read_text())
    return np.frombuffer(raw.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()
