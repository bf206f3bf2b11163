"""Image I/O, [-1, 1] normalisation, unpaired dataset iteration, local patch
sampling and atmospheric-scattering haze synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


# ---------------------------------------------------------------------------
# normalisation and file I/O
# ---------------------------------------------------------------------------


def normalize(raw: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 raster -> (1, 3, H, W) float32 tensor in [-1, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 RGB raster, got shape {raw.shape}")
    x = torch.from_numpy(raw.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    return x / 127.5 - 1.0


def denormalize(img: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor in [-1, 1] -> H x W x 3 uint8 raster."""
    img = img.detach().cpu()
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("denormalize takes a single image; index the batch first")
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(img.shape)}")
    x = torch.round((img.double() + 1.0) * 127.5).clamp(0, 255)
    return x.to(torch.uint8).permute(1, 2, 0).numpy().copy()


def to_unit(img: torch.Tensor) -> torch.Tensor:
    return (img + 1.0) / 2.0


def from_unit(img: torch.Tensor) -> torch.Tensor:
    return img * 2.0 - 1.0


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, raster: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(raster, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


# ---------------------------------------------------------------------------
# unpaired dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnpairedSample:
    hazy: torch.Tensor
    clean: torch.Tensor
    hazy_name: str = ""
    clean_name: str = ""


def _cycled_indices(n: int, length: int, rng: np.random.Generator) -> list[int]:
    out: list[int] = []
    while len(out) < length:
        out.extend(int(i) for i in rng.permutation(n))
    return out[:length]


def random_crop(raw: np.ndarray, crop: int, rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    h, w = raw.shape[:2]
    if min(h, w) < crop:
        # upscale so the short side reaches the crop size
        scale = crop / min(h, w)
        size = (max(crop, round(w * scale)), max(crop, round(h * scale)))
        raw = np.asarray(Image.fromarray(raw).resize(size, Image.BICUBIC))
        h, w = raw.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = raw[top : top + crop, left : left + crop]
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


class UnpairedDataset:
    """Two independently shuffled image folders under ``root``.

    An epoch lasts ``max(|A|, |B|)`` samples; the smaller folder is cycled
    with a fresh permutation each pass. Files that fail to decode are skipped
    with a warning.
    """

    def __init__(self, root, split: str = "train", crop: int | None = 256, flip: bool = True):
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        root = Path(root)
        self.root = root
        self.split = split
        self.crop = crop if split == "train" else None
        self.flip = flip and split == "train"
        self.files_a = self._scan(root / f"{split}A")
        self.files_b = self._scan(root / f"{split}B")

    @staticmethod
    def _scan(folder: Path) -> list[Path]:
        if not folder.is_dir():
            raise ConfigError(f"dataset folder missing: {folder}")
        files = list_images(folder)
        if not files:
            raise DataError(f"dataset folder is empty: {folder}")
        return files

    def __len__(self) -> int:
        return max(len(self.files_a), len(self.files_b))

    def _load(self, path: Path, rng: np.random.Generator) -> torch.Tensor | None:
        try:
            raw = read_rgb(path)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", path, exc)
            return None
        if self.crop:
            raw = random_crop(raw, self.crop, rng, self.flip)
        return normalize(raw)

    def epoch(self, rng) -> Iterator[UnpairedSample]:
        rng = as_rng(rng)
        n = len(self)
        idx_a = _cycled_indices(len(self.files_a), n, rng)
        idx_b = _cycled_indices(len(self.files_b), n, rng)
        for ia, ib in zip(idx_a, idx_b):
            hazy = self._load(self.files_a[ia], rng)
            clean = self._load(self.files_b[ib], rng)
            if hazy is None or clean is None:
                continue
            yield UnpairedSample(hazy, clean, self.files_a[ia].name, self.files_b[ib].name)


def load_unpaired_dataset(root, split: str = "train", crop: int = 256, seed=0) -> Iterator[UnpairedSample]:
    """One epoch of unpaired samples from ``root/{split}A`` and ``root/{split}B``."""
    return UnpairedDataset(root, split, crop).epoch(seed)


# ---------------------------------------------------------------------------
# local patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchSet:
    patches: list[torch.Tensor]
    offsets: list[tuple[int, int]]
    size: int = 64

    def stacked(self) -> torch.Tensor:
        return torch.cat(self.patches, dim=0)


def random_offsets(height: int, width: int, n: int, size: int, rng) -> list[tuple[int, int]]:
    if height < size or width < size:
        raise ValueError(
            f"image {height}x{width} is smaller than the {size}x{size} patch size; "
            "pad the image or skip it"
        )
    rng = as_rng(rng)
    rows = rng.integers(0, height - size + 1, size=n)
    cols = rng.integers(0, width - size + 1, size=n)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def crop_at(img: torch.Tensor, offsets: Sequence[tuple[int, int]], size: int) -> PatchSet:
    """Cut ``size`` x ``size`` crops of ``img`` at the given (row, col) offsets."""
    h, w = img.shape[-2:]
    patches = []
    for r, c in offsets:
        if r < 0 or c < 0 or r + size > h or c + size > w:
            raise ValueError(f"patch at {(r, c)} of size {size} leaves the {h}x{w} image")
        patches.append(img[..., r : r + size, c : c + size])
    return PatchSet(patches, list(offsets), size)


def sample_local_patches(img: torch.Tensor, n: int = 5, size: int = 64, seed=0) -> PatchSet:
    h, w = img.shape[-2:]
    return crop_at(img, random_offsets(h, w, n, size, seed), size)


# ---------------------------------------------------------------------------
# haze synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HazeParams:
    """Transmission t (scalar or H x W field) and per-channel airlight A, both in [0, 1]."""

    transmission: float | np.ndarray | torch.Tensor = 1.0
    atmospheric_light: float | Sequence[float] = 1.0

    def __post_init__(self):
        t = torch.as_tensor(self.transmission, dtype=torch.float64)
        a = torch.as_tensor(self.atmospheric_light, dtype=torch.float64)
        if t.ndim not in (0, 2):
            raise ValueError("transmission must be a scalar or an H x W field")
        if a.ndim > 1 or (a.ndim == 1 and a.numel() not in (1, 3)):
            raise ValueError("atmospheric_light must be a scalar or one value per channel")
        if bool((t < 0).any() or (t > 1).any()):
            raise ValueError("transmission must lie in [0, 1]")
        if bool((a < 0).any() or (a > 1).any()):
            raise ValueError("atmospheric_light must lie in [0, 1]")


def transmission_from_depth(depth, beta: float = 1.0) -> np.ndarray:
    """Beer-Lambert transmission exp(-beta * depth)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def synthesize_haze_unit(clean: torch.Tensor, params: HazeParams) -> torch.Tensor:
    """I = J t + A (1 - t) on [0, 1]-scaled images, clipped to [0, 1]."""
    t = torch.as_tensor(params.transmission, dtype=clean.dtype)
    if t.ndim == 2 and tuple(t.shape) != tuple(clean.shape[-2:]):
        raise ValueError(
            f"transmission field {tuple(t.shape)} does not match image size {tuple(clean.shape[-2:])}"
        )
    a = torch.as_tensor(params.atmospheric_light, dtype=clean.dtype).reshape(-1, 1, 1)
    return (clean * t + a * (1 - t)).clamp(0.0, 1.0)


def synthesize_haze(clean: torch.Tensor, params: HazeParams) -> torch.Tensor:
    """Haze a [-1, 1] image; the scattering model is evaluated in [0, 1] space."""
    # float64 keeps the [-1,1] <-> [0,1] round trip exact for 8-bit derived values
    hazy = synthesize_haze_unit(to_unit(clean.double()), params)
    return from_unit(hazy).to(clean.dtype)


def synthetic_depth(height: int, width: int, rng) -> np.ndarray:
    """Smooth pseudo depth in [0, 1]: a random tilted ramp plus low-frequency ripple.

    No depth sensor is involved; this only gives transmission a spatial
    structure for generating desk-scale datasets.
    """
    rng = as_rng(rng)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    fx, fy, phase = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
    ripple = 0.15 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    d = ramp + ripple
    return (d - d.min()) / max(d.max() - d.min(), 1e-12)
