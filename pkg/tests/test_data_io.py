import struct

import numpy as np
import pytest

from advbreak.data_io import (MODEL_MAGIC, BadMagic, CountMismatch, IncompatibleVersion, ModelFileError,
                              Truncated, emit_image_grid, grid_cells, load_idx, load_model, read_idx, read_pnm,
                              save_dataset_idx, save_model, write_idx)
from advbreak.digits import synthetic_digits
from advbreak.models import Autoencoder


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_parse_hand_built_idx(tmp_path):
    img = np.arange(2 * 28 * 28) % 256
    (tmp_path / "i").write_bytes(idx_bytes(0x803, (2, 28, 28), img.astype(np.uint8)))
    (tmp_path / "l").write_bytes(idx_bytes(0x801, (2,), [7, 3]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 28, 28, 1)
    assert list(ds.labels) == [7, 3]
    np.testing.assert_allclose(ds.images[..., 0].ravel(), img / 255.0, rtol=1e-6)
    assert (tmp_path / "i").read_bytes()[:4] == b"\x00\x00\x08\x03"


def test_idx_errors_are_distinct(tmp_path):
    (tmp_path / "bad").write_bytes(idx_bytes(0x801, (1, 2, 2), [0] * 4))
    with pytest.raises(BadMagic):
        read_idx(tmp_path / "bad", 0x803)
    (tmp_path / "short").write_bytes(idx_bytes(0x803, (2, 2, 2), [0] * 5))
    with pytest.raises(Truncated, match="expected 24 bytes, got 21"):
        read_idx(tmp_path / "short", 0x803)
    (tmp_path / "i").write_bytes(idx_bytes(0x803, (2, 2, 2), [0] * 8))
    (tmp_path / "l").write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(CountMismatch):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_float_idx_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_idx(tmp_path / "f", a)
    np.testing.assert_array_equal(read_idx(tmp_path / "f"), a)


def test_dataset_idx_round_trip(tmp_path):
    ds = synthetic_digits(50, seed=3)
    save_dataset_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(back.images, ds.images, atol=1e-6)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_synthetic_digits_are_valid_and_seeded():
    a, b = synthetic_digits(100, seed=9), synthetic_digits(100, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert set(np.unique(a.labels)) <= set(range(10))
    assert np.all(a.images.reshape(100, -1).max(axis=1) > 0.5)
    # ink concentrates in the central 20x20 box
    assert a.images[:, 4:24, 4:24].sum() > 0.95 * a.images.sum()


def test_model_file_errors(tmp_path):
    path = save_model(Autoencoder.init(0), tmp_path / "m.advb")
    raw = path.read_bytes()
    assert raw[:4] == MODEL_MAGIC
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(IncompatibleVersion, match="version 2"):
        load_model(tmp_path / "ver")
    (tmp_path / "cut").write_bytes(raw[:-4])
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "cut")


def test_model_files_are_byte_identical(tmp_path):
    a = save_model(Autoencoder.init(5), tmp_path / "a.advb", {"lr": 0.1})
    b = save_model(Autoencoder.init(5), tmp_path / "b.advb", {"lr": 0.1})
    assert a.read_bytes() == b.read_bytes()


def test_grid_geometry_and_round_trip(tmp_path, rng):
    imgs = rng.uniform(0, 1, (100, 28, 28, 1))
    path = emit_image_grid(imgs, 10, 10, tmp_path / "g.pgm")
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n289 289\n255\n")
    canvas = read_pnm(path)
    assert canvas.shape == (10 * 28 + 9, 10 * 28 + 9, 1)
    assert np.all(canvas[28, :] == 1.0)
    cells = grid_cells(canvas, 10, 10, 28, 28)
    assert np.max(np.abs(cells - imgs)) <= 0.5 / 255 + 1e-12


def test_black_image_has_zero_payload(tmp_path):
    path = emit_image_grid(np.zeros((1, 4, 4, 1)), 1, 1, tmp_path / "b.pgm")
    header = b"P5\n4 4\n255\n"
    assert path.read_bytes() == header + bytes(16)


def test_color_grid_and_errors(tmp_path):
    path = emit_image_grid(np.full((2, 3, 3, 3), 0.5), 1, 2, tmp_path / "c.ppm")
    assert path.read_bytes().startswith(b"P6\n7 3\n255\n")
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        emit_image_grid(np.full((1, 2, 2, 1), 1.5), 1, 1, tmp_path / "x.pgm")
    with pytest.raises(ValueError, match="cannot hold"):
        emit_image_grid(np.zeros((5, 2, 2, 1)), 2, 2, tmp_path / "y.pgm")
