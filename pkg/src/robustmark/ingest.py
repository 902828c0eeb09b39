"""Image dataset loading, message sampling and minibatch streaming."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import ConfigError, IngestError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".ppm", ".gif"}


@dataclass(frozen=True)
class ImageDataset:
    paths: tuple[str, ...]
    images: torch.Tensor  # (n, 3, H, W), float32 in [0, 1]
    split: str
    size: tuple[int, int]

    def __len__(self) -> int:
        return self.images.shape[0]


def center_square_resize(img: Image.Image, size: tuple[int, int]) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    return img.resize((size[1], size[0]), Image.BILINEAR)


def image_to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def tensor_to_image(x: torch.Tensor) -> Image.Image:
    arr = (x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def read_image(path, size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Decode one file to (3, H, W) in [0, 1]; resize only when ``size`` is given."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None:
            img = center_square_resize(img, size)
        return image_to_tensor(img)


def list_sources(source) -> list[Path]:
    """Files of a flat image directory (sorted by name) or the lines of a manifest file."""
    source = Path(source)
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    elif source.is_file():
        base = source.parent
        files = []
        for line in source.read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                p = Path(line)
                files.append(p if p.is_absolute() else base / p)
    else:
        raise IngestError(f"image source not found: {source}")
    if not files:
        raise IngestError(f"no image files in {source}")
    return files


def _decode(path: Path, size):
    try:
        return read_image(path, size)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        log.warning("skipping unreadable image %s: %s", path, e)
        return None


def load_image_dataset(source, split: str = "train", size=(128, 128), limit: Optional[int] = None,
                       workers: int = 1) -> ImageDataset:
    if split not in ("train", "test"):
        raise ConfigError("split", f"must be 'train' or 'test', got {split!r}")
    size = (int(size[0]), int(size[1]))
    files = list_sources(source)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        decoded = list(pool.map(lambda p: _decode(p, size), files))
    items = [(str(p), t) for p, t in zip(files, decoded) if t is not None]
    if not items:
        raise IngestError(f"all {len(files)} image files in {source} failed to decode")
    if limit is not None:
        items = items[:limit]
    paths, tensors = zip(*items)
    return ImageDataset(tuple(paths), torch.stack(tensors), split, size)


def sample_messages(rng: torch.Generator, n: int, length: int = 30) -> torch.Tensor:
    """``n`` i.i.d. uniform binary messages of ``length`` bits, as float {0, 1}."""
    if n < 1 or length < 1:
        raise ConfigError("messages", f"need n >= 1 and L >= 1, got n={n}, L={length}")
    return torch.randint(0, 2, (n, length), generator=rng).to(torch.float32)


def epoch_batches(n: int, b: int, rng: torch.Generator) -> list[torch.Tensor]:
    """Index batches of one epoch: a random permutation cut into floor(n/b) full batches."""
    if b < 1 or b > n:
        raise ConfigError("training.batch_size", f"batch size {b} must be in [1, {n}]")
    perm = torch.randperm(n, generator=rng)
    return [perm[i * b:(i + 1) * b] for i in range(n // b)]


def minibatches(dataset: ImageDataset, b: int, rng: torch.Generator) -> Iterator[torch.Tensor]:
    """Stream one epoch of (b, 3, H, W) batches; the trailing remainder is dropped."""
    return (dataset.images[idx] for idx in epoch_batches(len(dataset), b, rng))
