"""Datasets and the preprocessing chain pixels -> z2 (dequantized) -> z1 (scaled).

Image examples are kept as integer pixels so dequantization noise can be
redrawn on every visit; ``minibatch`` applies noise + 1/256 scaling on the
fly.  The 2-D synthetic track is continuous and skips both steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

LN_256 = float(np.log(256.0))
LN_2 = float(np.log(2.0))

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
MAX_IDX_DIM = 1 << 24

SYNTH_MAGIC = b"FC2D"


class IdxError(ValueError):
    """Base for IDX reader failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimError(IdxError):
    pass


@dataclass
class Dataset:
    split: str
    examples: np.ndarray                     # [n, D]; images: z1 view (pixels/256)
    origin: str                              # "idx_images" | "synth2d"
    oracle_logpdf: Optional[Callable] = None
    pixels: Optional[np.ndarray] = None      # [n, D] ints, image origin only
    image_hw: Optional[tuple] = None

    def __post_init__(self):
        if self.origin == "idx_images":
            if self.pixels is None:
                raise ValueError("image dataset needs integer pixels")
            lo, hi = self.examples.min(initial=0.0), self.examples.max(initial=0.0)
            if lo < 0.0 or hi > 1.0:
                raise ValueError("image examples must lie in [0, 1]")

    @property
    def n(self):
        return self.examples.shape[0]

    @property
    def dim(self):
        return self.examples.shape[1]

    def minibatch(self, rng, batch_size, deq_rng=None):
        """Uniformly drawn rows in z1 space; images get fresh dequantization noise."""
        idx = rng.integers(0, self.n, size=batch_size)
        if self.origin == "idx_images":
            z2 = dequantize(self.pixels[idx], deq_rng if deq_rng is not None else rng)
            z1, _ = scale_to_unit(z2)
            return z1
        return self.examples[idx]


def dequantize(pixels, rng):
    """pixels + Uniform[0,1) noise; the model NLL on the result lower-bounds log-mass."""
    pixels = np.asarray(pixels)
    if pixels.dtype.kind not in "iu":
        raise ValueError("dequantize expects integer pixels")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ValueError("pixel values must lie in 0..255")
    rng = np.random.default_rng(rng)
    return pixels + rng.random(pixels.shape)


def scale_to_unit(z2):
    """Divide intensities by 256; returns (z1, exact log-density correction -D*ln 256)."""
    z2 = np.asarray(z2, dtype=np.float64)
    d = z2.shape[-1]
    return z2 / 256.0, -d * LN_256


def bits_per_dim(logprob_z1_nats, d):
    """Upper bound on lossless-compression cost, in bits per dimension.

    Uniform density on [0,1)^D (logprob 0) costs exactly 8 bits/dim.
    """
    if d < 1:
        raise ValueError("need d >= 1")
    return 8.0 - np.asarray(logprob_z1_nats, dtype=np.float64) / (d * LN_2)


def load_idx(path):
    """Read an IDX file; images come back [n, H, W], labels [n].

    Big-endian magic and dims; bad magic, truncation and absurd dims raise
    distinct errors and never yield a partial array.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the magic field")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x} is neither images nor labels")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if any(d > MAX_IDX_DIM for d in dims):
        raise IdxDimError(f"{path}: dimension overflow {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: payload holds {len(raw) - header} of {count} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims).astype(np.int64)


def block_downsample(images, side):
    """Average factor x factor blocks down to side x side, then round to ints.

    Inputs whose height/width is not a multiple of ``side`` are center-cropped
    to the largest multiple first (28 -> 24 for the 8x8 track).
    """
    images = np.asarray(images)
    n, h, w = images.shape
    fh, fw = h // side, w // side
    if fh < 1 or fw < 1:
        raise ValueError(f"cannot downsample {h}x{w} to {side}x{side}")
    top, left = (h - fh * side) // 2, (w - fw * side) // 2
    crop = images[:, top:top + fh * side, left:left + fw * side]
    blocks = crop.reshape(n, side, fh, side, fw)
    return np.rint(blocks.mean(axis=(2, 4))).astype(np.int64)


def _ring_logpdf(centers, sigma, dims):
    log_modes = np.log(len(centers))
    log_norm = np.log(2.0 * np.pi * sigma * sigma)

    def logpdf(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = ((x[:, None, :2] - centers[None, :, :]) ** 2).sum(axis=2)
        comp = -d2 / (2.0 * sigma * sigma) - log_norm - log_modes
        m = comp.max(axis=1)
        lp = m + np.log(np.exp(comp - m[:, None]).sum(axis=1))
        if dims > 2:
            rest = x[:, 2:]
            lp = lp - 0.5 * (rest * rest).sum(axis=1) - 0.5 * (dims - 2) * np.log(2.0 * np.pi)
        return lp

    return logpdf


def synth_ring(n, modes=8, radius=2.0, sigma=0.4, seed=0, dims=2):
    """Equal-weight Gaussians on a circle, with an exact mixture log-density.

    With dims > 2 the ring lives in the first two coordinates and the rest
    are independent standard normals, so the oracle density stays exact.
    """
    if n < 1 or sigma <= 0 or modes < 1 or dims < 2:
        raise ValueError("need n >= 1, sigma > 0, modes >= 1, dims >= 2")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(modes) / modes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, modes, size=n)
    x = rng.standard_normal((n, dims))
    x[:, :2] = centers[which] + sigma * x[:, :2]
    return Dataset(split="full", examples=x, origin="synth2d",
                   oracle_logpdf=_ring_logpdf(centers, sigma, dims))


def split_and_augment(examples, ratios, flip_augment, seed, origin="synth2d",
                      oracle_logpdf=None, pixels=None, image_hw=None):
    """Seeded shuffle, contiguous split, optional flip-doubling of the train split.

    Horizontal flips apply to the train split of image data only; validation
    and test are never augmented.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    examples = np.asarray(examples)
    n = examples.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(ratios[0] * n)
    n_valid = int(ratios[1] * n)
    bounds = (0, n_train, n_train + n_valid, n)
    if any(bounds[i + 1] - bounds[i] < 1 for i in range(3)):
        raise ValueError(f"empty split from ratios {ratios} at n={n}")

    out = []
    for name, lo, hi in (("train", *bounds[:2]), ("valid", *bounds[1:3]), ("test", *bounds[2:])):
        rows = order[lo:hi]
        ex = examples[rows]
        px = pixels[rows] if pixels is not None else None
        if name == "train" and flip_augment and origin == "idx_images":
            ex = np.concatenate([ex, flip_images(ex, image_hw)])
            px = np.concatenate([px, flip_images(px, image_hw)])
        out.append(Dataset(split=name, examples=ex, origin=origin,
                           oracle_logpdf=oracle_logpdf, pixels=px, image_hw=image_hw))
    return tuple(out)


def flip_images(flat, image_hw):
    h, w = image_hw
    return flat.reshape(-1, h, w)[:, :, ::-1].reshape(flat.shape[0], h * w)


def image_dataset_from_idx(path, side=8):
    """IDX file -> flattened integer pixels and their z1 view at side x side."""
    images = load_idx(path)
    if images.ndim != 3:
        raise IdxError(f"{path}: expected an image file")
    small = block_downsample(images, side)
    pixels = small.reshape(small.shape[0], side * side)
    return pixels, (side, side)


def save_synth(path, examples):
    """Serialize a synthetic dataset: 16-byte header then little-endian f64 rows.

    Header: magic ``FC2D``, u32 n, u32 d, u32 reserved zero.
    """
    examples = np.asarray(examples, dtype="<f8")
    n, d = examples.shape
    with open(path, "wb") as f:
        f.write(SYNTH_MAGIC)
        f.write(struct.pack("<III", n, d, 0))
        f.write(examples.tobytes())


def load_synth(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != SYNTH_MAGIC:
        raise ValueError(f"{path}: not a synthetic dataset file")
    n, d, _ = struct.unpack("<III", raw[4:16])
    if len(raw) - 16 != n * d * 8:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, d).copy()
