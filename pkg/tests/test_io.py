import json

import numpy as np
import pytest

from flowrecon import forward_ops as fo
from flowrecon import io
from flowrecon.errors import ConfigError, DimensionError


@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, bits):
    maxval = 255 if bits == 8 else 65535
    img = np.random.default_rng(bits).integers(0, maxval + 1, size=(5, 7))
    io.write_pgm(tmp_path / "a.pgm", img, bits)
    assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(f"P5\n7 5\n{maxval}\n".encode())


def test_pgm_big_endian_and_comments(tmp_path):
    raw = b"P5\n# comment\n2 1\n65535\n" + bytes([1, 2, 0, 3])
    (tmp_path / "c.pgm").write_bytes(raw)
    assert io.read_pgm(tmp_path / "c.pgm").tolist() == [[258, 3]]


def test_pgm_errors(tmp_path):
    with pytest.raises(ConfigError):
        io.pgm_bytes(np.array([[256]]), 8)
    with pytest.raises(DimensionError):
        io.pgm_bytes(np.zeros(3))
    with pytest.raises(ConfigError):
        io.pgm_bytes(np.zeros((2, 2)), 12)


def test_scaled_pgm_recovers_image():
    img = np.random.default_rng(0).normal(size=(6, 6))
    pix, (offset, scale) = io.scaled_pgm(img)
    assert pix.min() == 0 and pix.max() == 65535
    assert np.max(np.abs(offset + pix * scale - img)) <= scale / 2 + 1e-12
    flat, _ = io.scaled_pgm(np.ones((2, 2)))
    assert np.all(flat == 0)


def test_load_image(tmp_path):
    img = np.array([[0, 128], [255, 64]])
    io.write_pgm(tmp_path / "i.pgm", img, 8)
    assert np.allclose(io.load_image(tmp_path / "i.pgm"), img / 255)
    with pytest.raises(FileNotFoundError):
        io.load_image(tmp_path / "missing.pgm")


def test_raw_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((4, 3))
    io.write_raw(tmp_path / "s.f32", arr, {"rows": 4})
    back = io.read_raw(tmp_path / "s.f32")
    assert np.array_equal(back, arr.astype(np.float32).astype(np.float64))
    meta = json.loads((tmp_path / "s.f32.json").read_text())
    assert meta["shape"] == [4, 3] and meta["rows"] == 4 and meta["endian"] == "little"
    assert (tmp_path / "s.f32").stat().st_size == 4 * 12
    assert np.array_equal(io.load_image(tmp_path / "s.f32"), back)


def test_mask_csv_round_trip(tmp_path):
    mask = fo.make_cartesian_mask(32, 16, 4, 0.08, seed=3)
    io.write_mask_csv(mask, tmp_path / "m.csv")
    assert io.read_mask_csv(tmp_path / "m.csv") == mask
    (tmp_path / "bad.csv").write_text("rows\n1\n")
    with pytest.raises(ConfigError):
        io.read_mask_csv(tmp_path / "bad.csv")


def test_uv_csv_round_trip(tmp_path):
    uv = fo.random_uv_table(12, 5, sigma=0.25, seed=1)
    io.write_uv_csv(uv, tmp_path / "uv.csv")
    back = io.read_uv_csv(tmp_path / "uv.csv")
    assert np.array_equal(back.points, uv.points) and np.array_equal(back.noise_sigma, uv.noise_sigma)


def test_atomic_write_leaves_no_temporaries(tmp_path):
    io.atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    io.atomic_write_text(tmp_path / "sub" / "f.txt", "again")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
    assert (tmp_path / "sub" / "f.txt").read_text() == "again"
