"""Corpus layout, manifests, synthetic frequency-forgery data, batch sampling.

On-disk layout of one split::

    <root>/<split>/real/<video_id>/<frame_id>.png
    <root>/<split>/fake/<video_id>/<frame_id>.png

Manifests are JSON lines, one :class:`SampleRecord` per line.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .freq import BLOCK, block_idct2d, cache_key, load_cached_tensor, preprocess_image, save_cached_tensor

log = logging.getLogger(__name__)

CLASS_DIRS = {"real": 0, "fake": 1}
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class SampleRecord:
    path: str
    video_id: str
    frame_id: str
    label: int
    manipulation_tag: str = ""
    split: str = "train"


@dataclass
class CorpusManifest:
    records: list[SampleRecord]
    split: str | None = None

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.split, r.video_id, r.frame_id)
            if key in seen:
                raise DataError(f"duplicate record {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def select(self, split: str) -> "CorpusManifest":
        return CorpusManifest([r for r in self.records if r.split == split], split)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        with open(path) as fh:
            recs = [SampleRecord(**json.loads(line)) for line in fh if line.strip()]
        return cls(recs)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(asdict(r), sort_keys=True).encode())
        return h.hexdigest()


def _evenly_spaced(n: int, k: int) -> list[int]:
    if k >= n:
        return list(range(n))
    return [(i * n) // k for i in range(k)]


def build_manifest(root: str | os.PathLike, frames_real: int = 80, frames_fake: int = 20,
                   split: str = "train") -> CorpusManifest:
    """Index ``root/{real,fake}/<video>/<frame>.png``, sampling frames per video.

    Frames are taken evenly spaced over the sorted frame names; short videos
    contribute every frame they have.
    """
    root = Path(root)
    per_class = {"real": frames_real, "fake": frames_fake}
    records: list[SampleRecord] = []
    for cls_dir, label in CLASS_DIRS.items():
        d = root / cls_dir
        if not d.is_dir():
            raise DataError(f"missing class directory {d}")
        for vdir in sorted(p for p in d.iterdir() if p.is_dir()):
            frames = sorted(vdir.glob("*.png"))
            tag = ""
            meta = vdir / "video.json"
            if meta.exists():
                tag = json.loads(meta.read_text()).get("manipulation_tag", "")
            for i in _evenly_spaced(len(frames), per_class[cls_dir]):
                f = frames[i]
                records.append(SampleRecord(str(f), vdir.name, f.stem, label, tag, split))
    if not records:
        raise DataError(f"no frames found under {root}")
    return CorpusManifest(records, split)


# -- synthetic corpus ---------------------------------------------------------


@dataclass
class SyntheticConfig:
    image_size: int = 256
    n_videos: dict[str, int] = field(default_factory=lambda: {"train": 32, "val": 16, "test": 16})
    frames_per_video: int = 8
    perturbed_bands: list[list[int]] = field(default_factory=lambda: [[2, 5], [4, 4], [5, 3], [6, 6]])
    band_mode: str = "per_video"  # per_video: one band per fake video; all: every band
    amplitude: float = 61.2  # 3% of the 8*255 DC range
    grain: float = 4.0  # class-independent white noise, pixel units
    jpeg_quality: int | None = None
    seed: int = 0

    def validate(self, allow_zero_amplitude: bool = True) -> None:
        if self.image_size % BLOCK or self.image_size <= 0:
            raise DataError("image_size must be a positive multiple of 8")
        for band in self.perturbed_bands:
            u, v = band
            if not (0 <= u < BLOCK and 0 <= v < BLOCK):
                raise DataError(f"band {band} outside 0..7")
            if u + v < 4:
                raise DataError(f"band {band} is not a mid/high band (u+v >= 4)")
        if not self.perturbed_bands:
            raise DataError("perturbed_bands is empty")
        if self.amplitude < 0 or (self.amplitude == 0 and not allow_zero_amplitude):
            raise DataError("amplitude must be > 0")
        if self.band_mode not in ("per_video", "all"):
            raise DataError(f"unknown band_mode {self.band_mode!r}")
        if self.frames_per_video < 1:
            raise DataError("frames_per_video must be >= 1")


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-pass noise plus a random linear ramp, roughly centered at 128."""
    sigma = size / rng.uniform(6.0, 12.0)
    lum = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    lum *= rng.uniform(20.0, 35.0) / (lum.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    angle = rng.uniform(0, 2 * np.pi)
    lum += rng.uniform(0, 30.0) * (np.cos(angle) * xx + np.sin(angle) * yy)
    chroma = gaussian_filter(rng.standard_normal((size, size, 3)), (sigma, sigma, 0), mode="wrap")
    chroma *= 8.0 / (chroma.std() + 1e-12)
    return 128.0 + rng.uniform(-15, 15) + lum[..., None] + chroma


def _band_perturbation(rng: np.random.Generator, size: int, bands: Sequence[Sequence[int]],
                       amplitude: float) -> np.ndarray:
    coeffs = np.zeros((size, size))
    nb = size // BLOCK
    for u, v in bands:
        signs = rng.choice([-1.0, 1.0], size=(nb, nb))
        coeffs[u::BLOCK, v::BLOCK] = amplitude * signs
    return block_idct2d(coeffs)


def _frames_for_video(cfg: SyntheticConfig, rng: np.random.Generator, fake: bool,
                      bands: Sequence[Sequence[int]]) -> list[np.ndarray]:
    size = cfg.image_size
    base = _smooth_field(rng, size)
    drift = rng.normal(0, 1.5, size=2)
    frames = []
    for k in range(cfg.frames_per_video):
        img = np.roll(base, shift=tuple(np.round(drift * k).astype(int)), axis=(0, 1))
        img = img + 0.25 * (_smooth_field(rng, size) - 128.0)
        img = img + rng.normal(0, cfg.grain, size=img.shape) if cfg.grain > 0 else img
        if fake and cfg.amplitude > 0:
            # equal addition to R, G, B moves luma only
            img = img + _band_perturbation(rng, size, bands, cfg.amplitude)[..., None]
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
        if cfg.jpeg_quality is not None:
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="JPEG", quality=int(cfg.jpeg_quality))
            img = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"))
        frames.append(img)
    return frames


def synth_generate(cfg: SyntheticConfig, out_dir: str | os.PathLike) -> CorpusManifest:
    """Write a seeded synthetic corpus and its manifest under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root_seq = np.random.SeedSequence(cfg.seed)
    records: list[SampleRecord] = []
    split_seqs = root_seq.spawn(len(SPLITS))
    for split, seq in zip(SPLITS, split_seqs):
        n = int(cfg.n_videos.get(split, 0))
        vid_seqs = seq.spawn(2 * n)
        for label, cls_dir in ((0, "real"), (1, "fake")):
            for i in range(n):
                rng = np.random.default_rng(vid_seqs[label * n + i])
                if label and cfg.band_mode == "per_video":
                    bands = [cfg.perturbed_bands[int(rng.integers(len(cfg.perturbed_bands)))]]
                else:
                    bands = cfg.perturbed_bands
                tag = "none" if not label else "+".join(f"band_{u}_{v}" for u, v in bands)
                vid = f"{split}_{cls_dir}_{i:04d}"
                vdir = out / split / cls_dir / vid
                vdir.mkdir(parents=True, exist_ok=True)
                (vdir / "video.json").write_text(json.dumps({"manipulation_tag": tag}))
                for k, img in enumerate(_frames_for_video(cfg, rng, bool(label), bands)):
                    p = vdir / f"{k:04d}.png"
                    Image.fromarray(img).save(p, optimize=False)
                    records.append(SampleRecord(str(p), vid, f"{k:04d}", label, tag, split))
    manifest = CorpusManifest(records)
    manifest.save(out / "manifest.jsonl")
    (out / "synthetic.json").write_text(json.dumps(asdict(cfg), indent=1))
    return manifest


def corpus_hash(root: str | os.PathLike) -> str:
    """SHA-256 over every PNG under ``root`` (relative path + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- in-memory split ----------------------------------------------------------


@dataclass
class SplitData:
    """Decoded images of one split plus their raw (unnormalized) frequency tensors."""

    images: np.ndarray  # (N, H, W, 3) uint8
    freq: np.ndarray  # (N, 192, H/8, W/8) float32, channels-first
    labels: np.ndarray
    video_ids: list[str]
    frame_ids: list[str]
    tags: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def load_split(manifest: CorpusManifest, split: str | None = None) -> SplitData:
    recs = manifest.select(split).records if split else manifest.records
    if not recs:
        raise DataError(f"split {split!r} is empty")
    cache_dir = os.environ.get("FDFL_CACHE_DIR")
    images, freqs = [], []
    for r in recs:
        p = Path(r.path)
        if not p.exists():
            raise DataError(f"missing file {p}")
        raw = p.read_bytes()
        img = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
        coeffs = None
        if cache_dir:
            key = cache_key(raw)
            coeffs = load_cached_tensor(cache_dir, key)
        if coeffs is None:
            coeffs = preprocess_image(img).coeffs.astype(np.float32)
            if cache_dir:
                save_cached_tensor(cache_dir, key, coeffs)
        images.append(img)
        freqs.append(np.ascontiguousarray(coeffs.transpose(2, 0, 1)))
    return SplitData(
        images=np.stack(images),
        freq=np.stack(freqs).astype(np.float32),
        labels=np.array([r.label for r in recs], dtype=np.int64),
        video_ids=[r.video_id for r in recs],
        frame_ids=[r.frame_id for r in recs],
        tags=[r.manipulation_tag for r in recs],
    )


# -- sampling -----------------------------------------------------------------


def mixed_batch_sampler(labels: Sequence[int], batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches that always hold both classes.

    Each epoch is a shuffled partition of all indices with both classes
    spread evenly over the batches. When the minority class is too small to
    place one sample in every batch, its indices are cycled so every batch
    still gets one (the majority class is then covered exactly once).
    """
    labels = np.asarray(labels)
    if batch_size < 2:
        raise DataError("batch_size must be >= 2 for mixed batches")
    real, fake = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    if real.size == 0 or fake.size == 0:
        raise DataError("mixed batches need both classes in the manifest")
    rng = np.random.default_rng(seed)
    n = labels.size
    while True:
        r, f = rng.permutation(real), rng.permutation(fake)
        nb = -(-n // batch_size)
        if min(r.size, f.size) >= nb:
            r_chunks = np.array_split(r, nb)
            f_chunks = np.array_split(f, nb)[::-1]
        else:
            major, minor = (r, f) if r.size >= f.size else (f, r)
            nb = -(-major.size // (batch_size - 1))
            reps = -(-nb // minor.size)
            cycled = np.concatenate([minor] + [rng.permutation(minor) for _ in range(reps - 1)])[:nb]
            r_chunks = np.array_split(major, nb)
            f_chunks = np.array_split(cycled, nb)
        for b in rng.permutation(nb):
            yield rng.permutation(np.concatenate([r_chunks[b], f_chunks[b]]))
