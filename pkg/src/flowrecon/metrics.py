"""Sample-quality metrics, pixel-wise posterior statistics and variance studies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import sampling
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class PosteriorSamples:
    samples: np.ndarray
    image_shape: tuple | None = None
    log_densities: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if s.shape[0] < 1 or not np.all(np.isfinite(s)):
            raise ConfigError("posterior samples must be finite with at least one row")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != s.shape[1]:
            raise DimensionError(f"image shape {self.image_shape} does not match width {s.shape[1]}")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def images(self) -> np.ndarray:
        shape = self.image_shape or (self.samples.shape[1],)
        return self.samples.reshape((self.n,) + tuple(shape))


@dataclass(frozen=True)
class PrdcReport:
    precision: float
    recall: float
    density: float
    coverage: float
    k: int


def _kth_neighbour_radii(points, k):
    d = cdist(points, points)
    # column 0 after partition is the point itself
    return np.partition(d, k, axis=1)[:, k]


def prdc(real, fake, k: int = 5) -> PrdcReport:
    """k-NN manifold precision, recall, density and coverage (closed balls)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    if real.shape[1] != fake.shape[1]:
        raise DimensionError("real and fake samples have different widths")
    if k < 1 or k >= real.shape[0] or k >= fake.shape[0]:
        raise ConfigError(f"k={k} must satisfy 1 <= k < sample counts", field="k")
    r_real = _kth_neighbour_radii(real, k)
    r_fake = _kth_neighbour_radii(fake, k)
    d = cdist(real, fake)
    in_real_ball = d <= r_real[:, None]
    precision = float(np.mean(in_real_ball.any(axis=0)))
    recall = float(np.mean((d <= r_fake[None, :]).any(axis=1)))
    density = float(in_real_ball.sum() / (k * fake.shape[0]))
    coverage = float(np.mean(in_real_ball.any(axis=1)))
    return PrdcReport(precision, recall, density, coverage, k)


@dataclass(frozen=True)
class StatsReport:
    mean_image: np.ndarray
    std_image: np.ndarray
    abs_error_image: np.ndarray | None
    mean_of_std: float
    mean_abs_error: float | None


def posterior_stats(ps: PosteriorSamples, ground_truth=None) -> StatsReport:
    """Pixel-wise mean, population std and |mean - truth|."""
    imgs = ps.images()
    mean = imgs.mean(axis=0)
    std = imgs.std(axis=0)
    abs_err = None
    mae = None
    if ground_truth is not None:
        truth = np.asarray(ground_truth, dtype=np.float64)
        if truth.size != mean.size:
            raise DimensionError(f"ground truth has {truth.size} pixels, samples have {mean.size}")
        abs_err = np.abs(mean - truth.reshape(mean.shape))
        mae = float(abs_err.mean())
    return StatsReport(mean, std, abs_err, float(std.mean()), mae)


def psnr(image, reference, data_range: float | None = None) -> float:
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if data_range is None:
        data_range = reference.max() - reference.min()
    mse = np.mean((image - reference) ** 2)
    return float(10.0 * np.log10(data_range ** 2 / mse))


# ---------------------------------------------------------------- mode clustering


def kmeans(points, k: int, seed, n_restarts: int = 10, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(labels, centers, inertia_history)`` for the best restart; the
    history holds the within-cluster sum of squares after every assignment.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = x.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}", field="k_modes")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers = [x[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min(cdist(x, np.array(centers), "sqeuclidean"), axis=1)
            p = d2 / d2.sum() if d2.sum() > 0 else None
            centers.append(x[rng.choice(n, p=p)])
        centers = np.array(centers)
        history = []
        labels = None
        for _ in range(max_iter):
            d2 = cdist(x, centers, "sqeuclidean")
            new_labels = d2.argmin(axis=1)
            history.append(float(d2[np.arange(n), new_labels].sum()))
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                members = x[labels == j]
                if len(members):
                    centers[j] = members.mean(axis=0)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers.copy(), history)
    return best


def mode_cluster(ps: PosteriorSamples, k_modes: int = 2, seed: int = 0, ground_truth=None):
    """k-means on flattened samples; returns ``(labels, [StatsReport per mode])``.

    With ground truth, modes are relabelled by ascending mean absolute error.
    """
    if ps.n < k_modes:
        raise ConfigError("fewer samples than modes", field="k_modes")
    labels, _, _ = kmeans(ps.samples, k_modes, seed)
    reports = []
    for j in range(k_modes):
        sub = PosteriorSamples(ps.samples[labels == j], ps.image_shape) if np.any(labels == j) else None
        reports.append(posterior_stats(sub, ground_truth) if sub is not None else None)
    if ground_truth is not None:
        order = sorted(range(k_modes), key=lambda j: np.inf if reports[j] is None else reports[j].mean_abs_error)
        remap = np.empty(k_modes, dtype=int)
        remap[order] = np.arange(k_modes)
        labels = remap[labels]
        reports = [reports[j] for j in order]
    return labels, reports


# ---------------------------------------------------------------- variance studies


def _g_additive(u):
    return u.sum(axis=1)


def _g_constant(u):
    return np.ones(u.shape[0])


def _g_interaction(u):
    return np.prod(np.sin(2 * np.pi * u), axis=1)


def _g_gaussian_norm(u):
    z = sampling.to_gaussian(sampling.UnitDesign(u, "raw")).points
    return np.sum(z ** 2, axis=1)


TEST_FUNCTIONS = {
    "additive": _g_additive,
    "constant": _g_constant,
    "interaction": _g_interaction,
    "gaussian_norm": _g_gaussian_norm,
}


@dataclass(frozen=True)
class VarianceStudy:
    variances: dict
    ratios: dict
    n: int
    d: int
    replicates: int
    g: str


def mc_variance_study(schemes, g: str, n: int, d: int, replicates: int, seed: int = 0,
                      grouping: sampling.PssGrouping | None = None) -> VarianceStudy:
    """Variance across replicate designs of the design mean of ``g``; ratios vs SRS.

    Sobol is deterministic, so its "variance" is 0 by construction.
    """
    if replicates < 30:
        raise ConfigError("replicates must be >= 30", field="replicates")
    if g not in TEST_FUNCTIONS:
        raise ConfigError(f"unknown test function {g!r}", field="g")
    fn = TEST_FUNCTIONS[g]
    schemes = list(schemes)
    names = list(dict.fromkeys(["SRS"] + schemes, None))
    variances = {}
    for scheme in names:
        means = np.empty(replicates)
        for r in range(replicates):
            design = sampling.make_design(scheme, n, d, seed=seed * 1_000_003 + r, grouping=grouping)
            means[r] = fn(design.points).mean()
        variances[scheme] = float(means.var(ddof=1))
    base = variances["SRS"]
    ratios = {s: (variances[s] / base if base > 0 else (0.0 if variances[s] == 0 else np.inf)) for s in names}
    return VarianceStudy({s: variances[s] for s in schemes}, {s: ratios[s] for s in schemes},
                         n, d, replicates, g)
