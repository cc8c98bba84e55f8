"""Measurement models and synthetic ground truths.

Operators act on flattened images. ``ForwardOperator.apply`` is traceable by
JAX and maps a batch (n, H*W) to measurements (n, m), complex where the
physics is complex.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np
from scipy import ndimage

from . import diffcore  # noqa: F401  (enables float64 in JAX)
from .errors import ConfigError, DimensionError

KINDS = ("identity", "linear_matrix", "image_energy", "masked_fft", "sparse_visibility")


# ---------------------------------------------------------------- image densities


@dataclass(frozen=True)
class ImageDensity:
    """Density on the unit square proportional to pixel intensity.

    Pixel (i, j) covers ``[j/W, (j+1)/W) x [1-(i+1)/H, 1-i/H)`` so the image
    appears upright with x to the right and y up. The density is the bilinear
    interpolation of intensities between pixel centers divided by the total
    intensity times the pixel area, so the grid cell masses
    ``I_ij / sum(I)`` sum to one.
    """

    image: np.ndarray
    masses: np.ndarray
    log_floor: float

    @property
    def shape(self):
        return self.image.shape

    def log_prob(self, pts):
        """Traceable log-density at points (n, 2); floored, and floored outside the square."""
        pts = jnp.asarray(pts)
        H, W = self.image.shape
        dens = jnp.asarray(self.image / (self.image.sum() / (H * W)))
        # continuous pixel coordinates with centers at integer positions
        col = pts[:, 0] * W - 0.5
        row = (1.0 - pts[:, 1]) * H - 0.5
        c = jnp.clip(col, 0.0, W - 1.0)
        r = jnp.clip(row, 0.0, H - 1.0)
        c0 = jnp.clip(jnp.floor(c), 0, max(W - 2, 0)).astype(jnp.int32)
        r0 = jnp.clip(jnp.floor(r), 0, max(H - 2, 0)).astype(jnp.int32)
        c1 = jnp.minimum(c0 + 1, W - 1)
        r1 = jnp.minimum(r0 + 1, H - 1)
        fc = c - c0
        fr = r - r0
        val = (dens[r0, c0] * (1 - fr) * (1 - fc) + dens[r0, c1] * (1 - fr) * fc
               + dens[r1, c0] * fr * (1 - fc) + dens[r1, c1] * fr * fc)
        inside = (pts[:, 0] >= 0) & (pts[:, 0] <= 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= 1)
        logv = jnp.log(jnp.maximum(val, jnp.exp(self.log_floor)))
        return jnp.where(inside, logv, self.log_floor)

    def sample(self, n: int, seed) -> np.ndarray:
        """Grid sampler: choose a pixel by mass, then a uniform point inside it."""
        rng = np.random.default_rng(seed)
        H, W = self.image.shape
        flat = rng.choice(H * W, size=n, p=self.masses.ravel())
        i, j = np.divmod(flat, W)
        u = rng.random((n, 2))
        x = (j + u[:, 0]) / W
        y = 1.0 - (i + u[:, 1]) / H
        return np.stack([x, y], axis=1)

    def cell_of(self, pts) -> tuple:
        pts = np.asarray(pts)
        H, W = self.image.shape
        j = np.clip(np.floor(pts[:, 0] * W), 0, W - 1).astype(int)
        i = np.clip(np.floor((1.0 - pts[:, 1]) * H), 0, H - 1).astype(int)
        return i, j


def image_energy_density(image) -> ImageDensity:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ConfigError("image must be a non-empty 2-D array", field="image")
    if np.any(image < 0) or not np.all(np.isfinite(image)):
        raise ConfigError("image intensities must be finite and non-negative", field="image")
    total = image.sum()
    if total <= 0:
        raise ConfigError("image is all zero; density undefined", field="image")
    masses = image / total
    log_floor = float(np.log(1e-6 / image.size))
    image = image.copy()
    image.setflags(write=False)
    return ImageDensity(image, masses, log_floor)


# ---------------------------------------------------------------- masks and uv tables


@dataclass(frozen=True)
class SamplingMask:
    kept_rows: tuple
    height: int
    width: int
    accel: float = 1.0
    center_fraction: float = 0.0

    def __post_init__(self):
        rows = tuple(sorted(int(r) for r in self.kept_rows))
        if any(r < 0 or r >= self.height for r in rows) or len(set(rows)) != len(rows):
            raise ConfigError("kept rows must be distinct and inside [0, height)", field="mask")
        object.__setattr__(self, "kept_rows", rows)

    def as_array(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[list(self.kept_rows), :] = True
        return m


def make_cartesian_mask(height: int, width: int, accel: float, center_fraction: float = 0.08,
                        seed: int = 0) -> SamplingMask:
    """Keep ``round(height/R)`` phase-encode rows including a contiguous center block.

    Rows index the centered (fftshifted) k-space, so the center block holds
    the lowest frequencies and row ``height // 2`` is the DC row.
    """
    if accel < 1:
        raise ConfigError("acceleration R must be >= 1", field="accel")
    if not 0 <= center_fraction <= 1.0 / accel + 1e-12:
        raise ConfigError("center_fraction must lie in [0, 1/R]", field="center_fraction")
    n_keep = int(round(height / accel))
    n_center = int(round(height * center_fraction))
    if n_center > n_keep or n_keep > height or n_keep < 1:
        raise ConfigError(
            f"infeasible mask: {n_center} center rows, {n_keep} kept of {height}", field="accel"
        )
    start = height // 2 - n_center // 2
    center = list(range(start, start + n_center))
    rest = np.setdiff1d(np.arange(height), center)
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=n_keep - n_center, replace=False)
    return SamplingMask(tuple(center) + tuple(int(r) for r in extra), height, width, float(accel),
                        float(center_fraction))


@dataclass(frozen=True)
class UvTable:
    """Spatial frequencies in cycles per image width/height with per-point noise std."""

    points: np.ndarray
    noise_sigma: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        sig = np.broadcast_to(np.asarray(self.noise_sigma, dtype=np.float64), (pts.shape[0],)).copy()
        if pts.shape[1] != 2:
            raise DimensionError("uv points must have shape (m, 2)")
        if len({tuple(p) for p in pts}) != pts.shape[0]:
            raise ConfigError("uv table has duplicate points", field="uv")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "noise_sigma", sig)

    def __len__(self):
        return self.points.shape[0]


def random_uv_table(m: int, max_freq: float, sigma: float = 0.0, seed: int = 0,
                    include_dc: bool = True) -> UvTable:
    """Random sparse coverage on a half plane (conjugate symmetry makes the other half redundant)."""
    rng = np.random.default_rng(seed)
    pts = set()
    if include_dc:
        pts.add((0.0, 0.0))
    while len(pts) < m:
        u, v = rng.integers(-max_freq, max_freq + 1, size=2)
        if v < 0 or (v == 0 and u <= 0):
            continue
        pts.add((float(u), float(v)))
    return UvTable(np.array(sorted(pts)), sigma)


# ---------------------------------------------------------------- operators


def _unitary_fft2(img):
    return np.fft.fftshift(np.fft.fft2(img, norm="ortho"), axes=(-2, -1))


def _add_complex_noise(meas, sigma, noise_seed):
    if noise_seed is None:
        return meas
    rng = np.random.default_rng(noise_seed)
    sigma = np.asarray(sigma, dtype=np.float64)
    noise = rng.standard_normal(meas.shape) + 1j * rng.standard_normal(meas.shape)
    return meas + sigma * noise


def masked_fft_forward(image, mask: SamplingMask, sigma: float = 0.0, noise_seed=None) -> np.ndarray:
    """Unitary centered 2-D DFT restricted to the kept rows, flattened row-major.

    With a noise seed, real and imaginary parts each get N(0, sigma^2) noise.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (mask.height, mask.width):
        raise DimensionError(f"image shape {image.shape} does not match mask {(mask.height, mask.width)}")
    k = _unitary_fft2(image)[list(mask.kept_rows), :].ravel()
    return _add_complex_noise(k, sigma, noise_seed)


def zero_filled_reconstruction(measurement, mask: SamplingMask) -> np.ndarray:
    """Real part of the inverse unitary DFT with unmeasured rows set to zero."""
    k = np.zeros((mask.height, mask.width), dtype=complex)
    k[list(mask.kept_rows), :] = np.asarray(measurement).reshape(len(mask.kept_rows), mask.width)
    return np.real(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"))


def visibility_matrix(uv: UvTable, shape) -> np.ndarray:
    """Rows ``exp(-2 pi i (u px / W + v py / H))`` over row-major pixels."""
    H, W = shape
    py, px = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    phase = np.outer(uv.points[:, 0], px.ravel() / W) + np.outer(uv.points[:, 1], py.ravel() / H)
    return np.exp(-2j * np.pi * phase)


def visibility_forward(image, uv: UvTable, noise_seed=None, amplitude_only: bool = False) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    vis = visibility_matrix(uv, image.shape) @ image.ravel()
    vis = _add_complex_noise(vis, uv.noise_sigma, noise_seed)
    return np.abs(vis) if amplitude_only else vis


@dataclass(frozen=True)
class ForwardOperator:
    """Immutable measurement model acting on flattened inputs.

    ``payload`` holds the kind-specific data: the matrix for
    ``linear_matrix``, the :class:`SamplingMask` for ``masked_fft``, the
    :class:`UvTable` for ``sparse_visibility``, the :class:`ImageDensity` for
    ``image_energy``.
    """

    kind: str
    input_shape: tuple
    output_length: int
    payload: object = None
    amplitude_only: bool = False
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown forward operator kind {self.kind!r}", field="kind")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def is_complex(self) -> bool:
        return self.kind in ("masked_fft", "sparse_visibility") and not self.amplitude_only

    def apply(self, x):
        """Traceable map of a batch (n, input_size) to (n, output_length)."""
        if self.kind == "identity":
            return x
        if self.kind == "linear_matrix":
            return x @ jnp.asarray(self.payload).T
        if self.kind == "masked_fft":
            H, W = self.input_shape
            img = x.reshape(x.shape[0], H, W)
            k = jnp.fft.fftshift(jnp.fft.fft2(img, norm="ortho"), axes=(-2, -1))
            return k[:, jnp.asarray(self.payload.kept_rows), :].reshape(x.shape[0], -1)
        if self.kind == "sparse_visibility":
            vis = x.astype(jnp.complex128) @ jnp.asarray(self._matrix).T
            return jnp.abs(vis) if self.amplitude_only else vis
        raise ConfigError("image_energy operators define a density, not a measurement map")

    def __call__(self, x):
        return np.asarray(self.apply(jnp.atleast_2d(jnp.asarray(x, dtype=jnp.float64))))


def identity_operator(n: int) -> ForwardOperator:
    return ForwardOperator("identity", (n,), n)


def linear_operator(matrix) -> ForwardOperator:
    matrix = np.array(matrix, dtype=np.float64)
    matrix.setflags(write=False)
    return ForwardOperator("linear_matrix", (matrix.shape[1],), matrix.shape[0], matrix)


def masked_fft_operator(mask: SamplingMask) -> ForwardOperator:
    return ForwardOperator("masked_fft", (mask.height, mask.width), len(mask.kept_rows) * mask.width, mask)


def visibility_operator(uv: UvTable, shape, amplitude_only: bool = False) -> ForwardOperator:
    matrix = visibility_matrix(uv, shape)
    matrix.setflags(write=False)
    return ForwardOperator("sparse_visibility", tuple(shape), len(uv), uv, amplitude_only, matrix)


def image_energy_operator(density: ImageDensity) -> ForwardOperator:
    return ForwardOperator("image_energy", (2,), 1, density)


# ---------------------------------------------------------------- phantoms


def _grid(size):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - c) / (size / 2.0), (c - yy) / (size / 2.0)


# 16 x 16 bitmaps, upsampled and lightly blurred by make_phantom
_GLYPHS = {
    "glyph_s": """
................
.....######.....
...##########...
..####....####..
..###......###..
..###...........
..#####.........
...#########....
.....#########..
..........#####.
...........####.
..###......####.
..####....####..
...##########...
.....######.....
................""",
    "glyph_x": """
................
.###........###.
.####......####.
..####....####..
...####..####...
....########....
.....######.....
......####......
......####......
.....######.....
....########....
...####..####...
..####....####..
.####......####.
.###........###.
................""",
}


def _glyph(name, size):
    rows = [r for r in _GLYPHS[name].strip().splitlines()]
    bitmap = np.array([[c == "#" for c in r] for r in rows], dtype=np.float64)
    img = ndimage.zoom(bitmap, size / bitmap.shape[0], order=1)
    return ndimage.gaussian_filter(img, 0.04 * size)


PHANTOMS = ("ring", "two_blob", "shepp_logan_like") + tuple(_GLYPHS)


def make_phantom(kind: str, size: int, asymmetry: float = 0.0) -> np.ndarray:
    """Analytic test images with intensities in [0, 1].

    ``ring``: flat annulus (radii 0.35 to 0.7 of the half width) whose brightness
    varies as ``1 + asymmetry * sin(angle)``
    (180-degree symmetric for zero asymmetry). ``two_blob``: two separated
    Gaussian blobs of different height. ``shepp_logan_like``: nested ellipses.
    ``glyph_s`` and ``glyph_x``: letter bitmaps for image-defined densities.
    """
    if size < 8:
        raise ConfigError("phantom size must be >= 8", field="size")
    x, y = _grid(size)
    if kind == "ring":
        r = np.hypot(x, y)
        theta = np.arctan2(y, x)
        img = ((r >= 0.35) & (r <= 0.7)) * (1.0 + asymmetry * np.sin(theta))
    elif kind == "two_blob":
        img = (np.exp(-0.5 * (((x + 0.4) ** 2 + (y - 0.3) ** 2) / 0.15 ** 2))
               + 0.7 * np.exp(-0.5 * (((x - 0.4) ** 2 + (y + 0.3) ** 2) / 0.15 ** 2)))
    elif kind == "shepp_logan_like":
        img = np.zeros_like(x)
        ellipses = [  # value, a, b, x0, y0, angle (degrees)
            (1.0, 0.69, 0.92, 0.0, 0.0, 0),
            (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
            (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
            (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
            (0.1, 0.21, 0.25, 0.0, 0.35, 0),
            (0.1, 0.046, 0.046, 0.0, 0.1, 0),
            (0.1, 0.046, 0.023, -0.08, -0.605, 0),
        ]
        for val, a, b, x0, y0, ang in ellipses:
            t = np.deg2rad(ang)
            xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
            yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
            img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    elif kind in _GLYPHS:
        img = _glyph(kind, size)
    else:
        raise ConfigError(f"unknown phantom kind {kind!r}", field="phantom")
    img = np.clip(img, 0.0, None)
    peak = img.max()
    return img / peak if peak > 0 else img


def count_components(image, level: float) -> int:
    _, n = ndimage.label(np.asarray(image) > level)
    return int(n)
