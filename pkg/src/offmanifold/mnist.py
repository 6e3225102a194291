"""MNIST IDX parsing and the 56x28 digit-plus-distractor dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass(frozen=True)
class IdxTensor:
    magic: int
    dims: tuple[int, ...]
    data: np.ndarray  # uint8, shape == dims

    def scaled(self) -> np.ndarray:
        """Pixel values in [0, 1]."""
        return self.data.astype(np.float64) / 255.0


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> IdxTensor:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxError("truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxError(f"bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxError("truncated payload")
    if len(payload) > count:
        raise IdxError("trailing bytes after payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return IdxTensor(magic, tuple(dims), data)


def write_idx(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 data")
    magic = 0x00000800 | data.ndim
    body = struct.pack(">I", magic) + struct.pack(f">{data.ndim}I", *data.shape) + data.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(body)


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images in [0, 1] with shape (n, 28, 28) and integer labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.magic != IMAGES_MAGIC or labels.magic != LABELS_MAGIC:
        raise IdxError("expected an image file and a label file")
    if images.dims[0] != labels.dims[0]:
        raise IdxError("image and label counts differ")
    return images.scaled(), labels.data.astype(np.int64)


def load_glyph() -> np.ndarray:
    """The bundled 28x28 letter-A distractor, scaled to [0, 1]."""
    text = resources.files("offmanifold.assets").joinpath("glyph_A.pgm").read_text()
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("glyph asset must be an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.float64).reshape(h, w) / maxval


@dataclass
class DistractorSet:
    """Stacked 56x28 images; ``top`` marks samples whose distractor sits in the top half."""

    images: np.ndarray  # (n, 56, 28)
    labels: np.ndarray
    top: np.ndarray  # bool

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def signal_masks(self) -> np.ndarray:
        m = np.zeros(self.images.shape, dtype=bool)
        m[~self.top, :28] = True  # distractor below: digit on top
        m[self.top, 28:] = True
        return m

    @property
    def distractor_masks(self) -> np.ndarray:
        return ~self.signal_masks

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def digits(self) -> np.ndarray:
        """Recover the 28x28 digit half of every sample."""
        return np.where(self.top[:, None, None], self.images[:, 28:], self.images[:, :28])

    def subset(self, idx) -> "DistractorSet":
        return DistractorSet(self.images[idx], self.labels[idx], self.top[idx])


def compose_distractor(images: np.ndarray, labels: np.ndarray, glyph: np.ndarray | None = None,
                       seed: int = 0) -> DistractorSet:
    """Stack each digit with the glyph, placing the glyph on top or below at random."""
    images = np.asarray(images, dtype=np.float64)
    glyph = load_glyph() if glyph is None else np.asarray(glyph, dtype=np.float64)
    if glyph.shape != (28, 28):
        raise ValueError(f"glyph must be 28x28, got {glyph.shape}")
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise ValueError(f"digits must have shape (n, 28, 28), got {images.shape}")
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    rng = np.random.default_rng(seed)
    top = rng.random(len(images)) < 0.5
    out = np.empty((len(images), 56, 28))
    out[top, :28] = glyph
    out[top, 28:] = images[top]
    out[~top, :28] = images[~top]
    out[~top, 28:] = glyph
    return DistractorSet(out, np.asarray(labels).copy(), top)


def perturb_region(image: np.ndarray, signal_mask: np.ndarray, region: str, sigma: float,
                   seed: int = 0, clip: bool = False) -> np.ndarray:
    """Add N(0, sigma^2) noise only inside the signal or distractor region."""
    if region not in ("signal", "distractor"):
        raise ValueError("region must be 'signal' or 'distractor'")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(signal_mask, dtype=bool)
    if region == "distractor":
        mask = ~mask
    out = image.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        out[mask] += sigma * rng.standard_normal(int(mask.sum()))
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out
