"""File formats: binary PGM, float32 raw with a JSON sidecar, mask and uv CSV.

Every writer goes through :func:`atomic_write`, which writes a temporary file
next to the target and renames it into place.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .forward_ops import SamplingMask, UvTable


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------- PGM


def pgm_bytes(image, bits: int = 16) -> bytes:
    """P5 encoding of integer pixel values (big-endian for 16-bit, as the format requires)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError("PGM images must be 2-D")
    if bits not in (8, 16):
        raise ConfigError("PGM depth must be 8 or 16 bits", field="bits")
    maxval = 255 if bits == 8 else 65535
    if np.any(img < 0) or np.any(img > maxval):
        raise ConfigError(f"pixel values must lie in [0, {maxval}]", field="image")
    dtype = np.uint8 if bits == 8 else ">u2"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(img, dtype=dtype).tobytes()


def write_pgm(path, image, bits: int = 16) -> None:
    atomic_write(path, pgm_bytes(image, bits))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != "P5":
        raise ConfigError(f"{path}: not a binary PGM", field="image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    return np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(h, w).astype(np.int64)


def scaled_pgm(image, bits: int = 16) -> tuple:
    """Min-max scale a real image to integers; returns ``(pixels, (offset, scale))``.

    The original is recovered as ``offset + pixels * scale``.
    """
    img = np.asarray(image, dtype=np.float64)
    maxval = 255 if bits == 8 else 65535
    lo, hi = float(img.min()), float(img.max())
    scale = (hi - lo) / maxval if hi > lo else 1.0
    pix = np.rint((img - lo) / scale).astype(np.int64) if hi > lo else np.zeros(img.shape, np.int64)
    return pix, (lo, scale)


def load_image(path) -> np.ndarray:
    """Grayscale image in [0, 1] from a PGM file or a float32 raw file with sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".f32":
        return read_raw(path)
    pix = read_pgm(path)
    data = path.read_bytes()
    maxval = 255 if pix.max(initial=0) < 256 and b"\n255\n" in data[:32] else 65535
    return pix / maxval


# ---------------------------------------------------------------- float32 raw


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raw(path, array, extra: dict | None = None) -> None:
    """Little-endian float32 data plus a one-line JSON sidecar ``<name>.json``."""
    arr = np.asarray(array, dtype="<f4")
    meta = {"dtype": "float32", "endian": "little", "shape": list(arr.shape)}
    if extra:
        meta.update(extra)
    atomic_write(path, np.ascontiguousarray(arr).tobytes())
    atomic_write_text(_sidecar(path), json.dumps(meta, sort_keys=True) + "\n")


def read_raw(path) -> np.ndarray:
    meta = json.loads(_sidecar(path).read_text())
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return arr.reshape(meta["shape"]).astype(np.float64)


def read_raw_meta(path) -> dict:
    return json.loads(_sidecar(path).read_text())


# ---------------------------------------------------------------- masks and uv tables


def mask_csv(mask: SamplingMask) -> str:
    lines = ["height,width,accel,center_fraction",
             f"{mask.height},{mask.width},{mask.accel!r},{mask.center_fraction!r}",
             "kept_row"]
    lines += [str(r) for r in mask.kept_rows]
    return "\n".join(lines) + "\n"


def write_mask_csv(mask: SamplingMask, path) -> None:
    atomic_write_text(path, mask_csv(mask))


def read_mask_csv(path) -> SamplingMask:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 3 or lines[0] != "height,width,accel,center_fraction" or lines[2] != "kept_row":
        raise ConfigError(f"{path}: malformed mask file", field="mask")
    h, w, accel, cf = lines[1].split(",")
    rows = tuple(int(r) for r in lines[3:])
    return SamplingMask(rows, int(h), int(w), float(accel), float(cf))


def write_uv_csv(uv: UvTable, path) -> None:
    lines = ["u,v,sigma"] + [f"{u!r},{v!r},{s!r}" for (u, v), s in
                             zip(uv.points.tolist(), uv.noise_sigma.tolist())]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_uv_csv(path) -> UvTable:
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    if data.shape[1] != 3:
        raise ConfigError(f"{path}: uv table needs columns u,v,sigma", field="uv")
    return UvTable(data[:, :2], data[:, 2])
