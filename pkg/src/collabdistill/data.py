"""Image corpora, synthetic texture generators, and image file I/O."""

from __future__ import annotations

import logging
import queue
import threading
import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
TEXTURE_FAMILIES = ("checker", "stripes", "blobs", "rings")

# content and style corpora use disjoint families by default
CONTENT_GENERATOR = "checker+blobs+noise"
STYLE_GENERATOR = "stripes+rings+noise"


def load_image(path, size=None) -> torch.Tensor:
    """Read an RGB image as a 3 x H x W float tensor in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            if isinstance(size, int):
                size = (size, size)
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0, 1).numpy().transpose(1, 2, 0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def _smooth_noise(rng, size, cells):
    coarse = rng.random((cells, cells))
    t = torch.from_numpy(coarse)[None, None]
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bicubic", align_corners=True)
    field = up[0, 0].numpy()
    field -= field.min()
    return field / max(field.max(), 1e-12)


def _texture(family, rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0, c1 = rng.random(3), rng.random(3)
    if family == "checker":
        period = rng.integers(3, 12)
        ox, oy = rng.integers(0, period, size=2)
        mask = (((xx + ox) // period + (yy + oy) // period) % 2).astype(np.float64)
    elif family == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        mask = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    elif family == "blobs":
        mask = _smooth_noise(rng, size, int(rng.integers(3, 7)))
    elif family == "rings":
        cx, cy = rng.uniform(0, size, size=2)
        freq = rng.uniform(0.3, 1.0)
        mask = 0.5 + 0.5 * np.cos(freq * np.hypot(xx - cx, yy - cy))
    else:
        raise ValueError(f"unknown texture family {family!r}; known: {TEXTURE_FAMILIES}")
    return c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask


def synthetic_images(generator: str, count: int, size: int, seed: int = 0) -> list:
    """Textures from ``+``-joined families; a ``noise`` term adds Gaussian noise."""
    parts = [p.strip() for p in generator.split("+") if p.strip()]
    noise = "noise" in parts
    families = [p for p in parts if p != "noise"]
    if not families:
        raise ValueError(f"generator {generator!r} names no texture family")
    for f in families:
        if f not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {f!r}; known: {TEXTURE_FAMILIES}")
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        img = _texture(families[rng.integers(len(families))], rng, size)
        if noise:
            img = img + rng.normal(0.0, 0.04, img.shape)
        images.append(torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32)))
    return images


class Corpus:
    """A fixed set of resized images from which random square crops are drawn."""

    def __init__(self, images, crop: int, name: str = "corpus"):
        if not images:
            raise DataError(f"{name} is empty")
        h, w = images[0].shape[-2:]
        if crop > min(h, w):
            raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
        self.images = images
        self.crop = crop
        self.name = name

    def __len__(self):
        return len(self.images)

    def _crop(self, img, rng):
        h, w = img.shape[-2:]
        top = int(rng.integers(0, h - self.crop + 1))
        left = int(rng.integers(0, w - self.crop + 1))
        return img[:, top:top + self.crop, left:left + self.crop]

    def batches(self, batch_size: int, epochs: int = 1, seed: int = 0, max_steps=None,
                dtype=torch.float32):
        """Yield ``(epoch, batch)`` pairs; the sequence is a pure function of ``seed``.

        The final short batch of each epoch is kept.  Iteration stops after
        ``epochs`` epochs, or after ``max_steps`` batches when that is given.
        """
        rng = np.random.default_rng(seed)
        step = 0
        epoch = 0
        while max_steps is not None or epoch < epochs:
            order = rng.permutation(len(self.images))
            for start in range(0, len(order), batch_size):
                if max_steps is not None and step >= max_steps:
                    return
                idx = order[start:start + batch_size]
                yield epoch, torch.stack([self._crop(self.images[i], rng) for i in idx]).to(dtype)
                step += 1
            epoch += 1

    def fixed_crops(self, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
        """One deterministic crop per image, stacked; used for evaluation."""
        rng = np.random.default_rng(seed)
        return torch.stack([self._crop(img, rng) for img in self.images]).to(dtype)


def load_corpus(source, resize: int = 48, crop: int = 32, seed: int = 0, count: int = 64,
                name=None) -> Corpus:
    """Build a corpus from a directory of images or a synthetic generator spec.

    ``source`` is a directory path, or ``"synthetic:<families>"`` such as
    ``"synthetic:checker+noise"``, or a mapping ``{"generator": ..., "count": ...}``.
    """
    if crop > resize:
        raise ValueError(f"crop {crop} must not exceed resize {resize}")
    if isinstance(source, dict):
        gen = source.get("generator")
        if gen is None:
            if "path" not in source:
                raise DataError(f"corpus mapping needs 'generator' or 'path', got {sorted(source)}")
            return load_corpus(source["path"], resize, crop, seed, count, name)
        return Corpus(synthetic_images(gen, int(source.get("count", count)), resize, seed),
                      crop, name or f"synthetic:{gen}")
    source = str(source)
    if source.startswith("synthetic:"):
        gen = source.split(":", 1)[1]
        return Corpus(synthetic_images(gen, count, resize, seed), crop, name or source)
    root = Path(source)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    images = []
    for path in sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            images.append(load_image(path, resize))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}")
    if not images:
        raise DataError(f"no readable images in {root}")
    log.info("loaded %d images from %s", len(images), root)
    return Corpus(images, crop, name or str(root))


def prefetch(iterable, depth: int = 4):
    """Run ``iterable`` in a producer thread, yielding items in order."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    failure = []

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    thread.join()
    if failure:
        raise failure[0]
