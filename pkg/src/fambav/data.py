"""Dataset ingestion, augmentation, and deterministic batching.

The on-disk format is fixed-width binary records of 3074 bytes each:
one coarse-label byte, one fine-label byte, then 3072 pixel bytes laid out
as channel-major R, G, B planes of a row-major 32 x 32 image. A synthetic
generator provides a no-download alternative whose classes are separable
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError

RECORD_BYTES = 3074
IMAGE_SIDE = 32
N_FINE = 100
N_COARSE = 20


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) floats in [0, 1]
    fine_label: int
    coarse_label: int | None = None


@dataclass
class AugmentConfig:
    crop_pad: int = 4
    hflip_p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ConfigError(f"hflip_p must be in [0, 1], got {self.hflip_p}")
        if self.crop_pad < 0:
            raise ConfigError(f"crop_pad must be nonnegative, got {self.crop_pad}")


def load_cifar100_binary(path: str) -> list[LabeledImage]:
    """Parse fixed-width records; pixel bytes are scaled by 1/255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES} "
            f"(stray bytes start at offset {offset})")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    coarse = buf[:, 0]
    fine = buf[:, 1]
    if fine.size and fine.max() >= N_FINE:
        idx = int(np.argmax(fine >= N_FINE))
        raise FormatError(f"{path}: record {idx} fine label {fine[idx]} >= {N_FINE}")
    if coarse.size and coarse.max() >= N_COARSE:
        idx = int(np.argmax(coarse >= N_COARSE))
        raise FormatError(f"{path}: record {idx} coarse label {coarse[idx]} >= {N_COARSE}")
    pixels = buf[:, 2:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE).astype(np.float32) / 255.0
    return [
        LabeledImage(pixels=pixels[i], fine_label=int(fine[i]), coarse_label=int(coarse[i]))
        for i in range(buf.shape[0])
    ]


def write_cifar100_binary(images: list[LabeledImage], path: str) -> None:
    """Serialize to the record layout (pixels quantized to 8 bits)."""
    with open(path, "wb") as fh:
        for img in images:
            fh.write(bytes([img.coarse_label or 0, img.fine_label]))
            q = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
            fh.write(q.tobytes())


def augment(img: LabeledImage, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledImage:
    """Reflect-pad + random crop, then random horizontal mirror."""
    pixels = img.pixels
    if cfg.crop_pad > 0:
        pad = cfg.crop_pad
        _, h, w = pixels.shape
        padded = np.pad(pixels, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        pixels = padded[:, dy: dy + h, dx: dx + w]
    if cfg.hflip_p > 0 and rng.random() < cfg.hflip_p:
        pixels = pixels[:, :, ::-1]
    return LabeledImage(pixels=np.ascontiguousarray(pixels),
                        fine_label=img.fine_label, coarse_label=img.coarse_label)


def _class_template(c: int, h: int, w: int) -> np.ndarray:
    """Deterministic low-frequency pattern for class c (no seed involved).

    Class-dependent phase keeps templates distinct even when frequencies
    alias at high class counts.
    """
    ys = np.arange(h)[:, None] / h
    xs = np.arange(w)[None, :] / w
    freq = c + 1
    chans = []
    for ch in range(3):
        phase = ch * np.pi / 3.0 + 0.37 * c
        chans.append(0.5 + 0.35 * np.cos(2 * np.pi * freq * ys + phase)
                     * np.cos(2 * np.pi * freq * xs + phase))
    return np.stack(chans).astype(np.float32)


def synthetic_dataset(n: int, n_classes: int, seed: int, sigma: float = 0.1,
                      h: int = IMAGE_SIDE, w: int = IMAGE_SIDE) -> list[LabeledImage]:
    """Class templates plus Gaussian noise, clipped to [0, 1]."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    templates = [_class_template(c, h, w) for c in range(n_classes)]
    labels = rng.integers(0, n_classes, size=n)
    out = []
    for i in range(n):
        c = int(labels[i])
        img = templates[c]
        if sigma > 0:
            img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
        out.append(LabeledImage(pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                                fine_label=c))
    return out


def batches(dataset: list[LabeledImage], batch_size: int, seed: int, epoch: int,
            augment_cfg: AugmentConfig | None = None,
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Epoch-seeded shuffle; yields (images (B,C,H,W), labels (B,)).

    The final short batch is kept. Augmentation, when configured, draws
    from the same (seed, epoch) stream so the pipeline is bit-deterministic.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    if not dataset:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng([seed, epoch, 0x0BA7C4])
    order = rng.permutation(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        rows = order[lo: lo + batch_size]
        imgs = []
        for i in rows:
            sample = dataset[int(i)]
            if augment_cfg is not None:
                sample = augment(sample, augment_cfg, rng)
            imgs.append(sample.pixels)
        yield (np.stack(imgs),
               np.array([dataset[int(i)].fine_label for i in rows], dtype=np.int64))
