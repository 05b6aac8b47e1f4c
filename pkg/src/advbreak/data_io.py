"""Dataset ingestion, model persistence and image-grid output.

IDX files follow the MNIST distribution format.  Model files are::

    b"ADVB" | u32 version (LE) | u32 header length (LE) | JSON header | payload

where the payload is the concatenation of every parameter as little-endian
float32, in the order listed by the header.  Identical models always produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Model, build_model

MODEL_MAGIC = b"ADVB"
MODEL_VERSION = 1

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
IDX_FLOAT32 = 0x00000D00  # type byte 0x0D, dims in the low byte

_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}


class IDXError(ValueError):
    pass


class BadMagic(IDXError):
    pass


class Truncated(IDXError):
    pass


class CountMismatch(IDXError):
    pass


class ModelFileError(ValueError):
    pass


class IncompatibleVersion(ModelFileError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, start: int, stop: int | None = None, split: str | None = None) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], split or self.split, self.source)


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file into an array of its declared shape (native byte order)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise Truncated(f"{path}: expected at least 4 header bytes, got {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_DTYPES:
        raise BadMagic(f"{path}: unsupported IDX magic 0x{magic:08x}")
    dtype = _IDX_DTYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise Truncated(f"{path}: expected {head} header bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise Truncated(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 or float32 data as IDX (big-endian)."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, dtype = 0x08, ">u1"
    elif array.dtype.kind == "f":
        code, dtype = 0x0D, ">f4"
    else:
        raise IDXError(f"unsupported dtype {array.dtype} for IDX")
    header = struct.pack(">I", (code << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an MNIST-style image/label pair, scaling bytes to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise CountMismatch(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[..., None]
    return Dataset(x, labels.astype(np.int64), split, f"{Path(images_path).name}+{Path(labels_path).name}")


def save_dataset_idx(ds: Dataset, images_path, labels_path) -> None:
    write_idx(images_path, np.round(ds.images[..., 0] * 255).astype(np.uint8))
    write_idx(labels_path, ds.labels.astype(np.uint8))


# --- models ---------------------------------------------------------------


def model_bytes(model: Model, extra: dict | None = None) -> bytes:
    state = model.state()
    header = {
        "architecture": model.architecture(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "seed": model.seed,
        "train_config": (extra or {}).get("train_config"),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in state.values())
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(blob)) + blob + payload


def save_model(model: Model, path, train_config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_bytes(model, {"train_config": train_config}))
    return path


def load_model(path) -> Model:
    model, _ = load_model_with_header(path)
    return model


def load_model_with_header(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise ModelFileError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != MODEL_VERSION:
        raise IncompatibleVersion(f"{path}: model format version {version}, this build reads {MODEL_VERSION}")
    header = json.loads(raw[12 : 12 + hlen])
    offset = 12 + hlen
    params = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"]))
        chunk = raw[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise ModelFileError(f"{path}: payload truncated at parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        offset += 4 * n
    if offset != len(raw):
        raise ModelFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return build_model(header["architecture"], params, header.get("seed")), header


# --- image grids ----------------------------------------------------------


def emit_image_grid(images, rows: int, cols: int, path, separator: int = 255) -> Path:
    """Tile images row-major into a binary PGM (1 channel) or PPM (3 channels).

    Cells are separated by 1-pixel lines; unused cells stay black.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    n, h, w, c = images.shape
    if rows * cols < n:
        raise ValueError(f"grid {rows}x{cols} cannot hold {n} images")
    if c not in (1, 3):
        raise ValueError(f"images must have 1 or 3 channels, got {c}")
    if n and (images.min() < 0 or images.max() > 1):
        raise ValueError(f"pixel values must lie in [0, 1], got [{images.min()}, {images.max()}]")
    height, width = rows * h + rows - 1, cols * w + cols - 1
    canvas = np.full((height, width, c), separator, dtype=np.uint8)
    for r in range(rows):
        for q in range(cols):
            canvas[r * (h + 1) : r * (h + 1) + h, q * (w + 1) : q * (w + 1) + w] = 0
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        canvas[r * (h + 1) : r * (h + 1) + h, q * (w + 1) : q * (w + 1) + w] = np.round(img * 255)
    tag = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tag + f"\n{width} {height}\n255\n".encode() + canvas.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`emit_image_grid`; values in [0, 1]."""
    raw = Path(path).read_bytes()
    tag, dims, maxval, rest = raw.split(b"\n", 3)
    width, height = map(int, dims.split())
    c = {b"P5": 1, b"P6": 3}[tag]
    arr = np.frombuffer(rest, dtype=np.uint8).reshape(height, width, c)
    return arr.astype(np.float64) / int(maxval)


def grid_cells(canvas: np.ndarray, rows: int, cols: int, h: int, w: int) -> np.ndarray:
    """Cut a grid canvas back into (rows*cols, h, w, c) cells."""
    cells = [canvas[r * (h + 1) : r * (h + 1) + h, q * (w + 1) : q * (w + 1) + w]
             for r in range(rows) for q in range(cols)]
    return np.stack(cells)
