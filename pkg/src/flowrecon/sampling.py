"""Latent designs in the unit hypercube and their Gaussian images.

Schemes: simple random (SRS), Latin hypercube (LHS), maximin LHS, partially
stratified (PSS), Latinized PSS (LPSS, optionally maximin) and unscrambled
Sobol. All generators are pure functions of their arguments and seed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import ConfigError

SCHEMES = ("SRS", "LHS", "MaximinLHS", "PSS", "LPSS", "MaximinLPSS", "Sobol")
_SCHEME_KEYS = {s.lower() for s in SCHEMES} | {"maximin_lhs"}


def check_scheme(scheme: str) -> str:
    if not isinstance(scheme, str) or scheme.lower() not in _SCHEME_KEYS:
        raise ConfigError(f"unknown sampling scheme {scheme!r}", field="scheme")
    return scheme


# scipy ships the Joe-Kuo direction numbers up to this dimension.
SOBOL_MAX_DIM = 21201
CLAMP = 1e-12


@dataclass(frozen=True)
class UnitDesign:
    points: np.ndarray
    scheme: str
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class LatentBatch:
    points: np.ndarray
    source: UnitDesign | None = None


@dataclass(frozen=True)
class PssGrouping:
    """Partition of the dimensions ``0..d-1`` into stratification groups."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ConfigError("groups must be non-empty", field="grouping")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(len(flat))):
            raise ConfigError(
                f"groups must cover dimensions 0..d-1 exactly once, got {groups}", field="grouping"
            )
        object.__setattr__(self, "groups", groups)

    @property
    def d(self) -> int:
        return sum(len(g) for g in self.groups)

    @classmethod
    def consecutive(cls, d: int, size: int = 2) -> "PssGrouping":
        return cls(tuple(tuple(range(i, min(i + size, d))) for i in range(0, d, size)))

    @classmethod
    def singletons(cls, d: int) -> "PssGrouping":
        return cls.consecutive(d, 1)


def default_grouping(n: int, d: int) -> PssGrouping:
    """Consecutive pairs when ``n`` is a perfect square, otherwise singletons."""
    if d >= 2 and _int_root(n, 2) is not None:
        return PssGrouping.consecutive(d, 2)
    return PssGrouping.singletons(d)


def _check(n, d):
    if int(n) < 1 or int(d) < 1:
        raise ConfigError(f"design size must be at least 1x1, got n={n}, d={d}", field="n" if n < 1 else "d")


def _int_root(n: int, g: int):
    m = int(round(n ** (1.0 / g)))
    for cand in (m - 1, m, m + 1):
        if cand >= 1 and cand ** g == n:
            return cand
    return None


def _lhs_points(n, d, rng):
    perms = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    return (perms + rng.random((n, d))) / n


def srs(n: int, d: int, seed: int) -> UnitDesign:
    _check(n, d)
    rng = np.random.default_rng(seed)
    return UnitDesign(rng.random((n, d)), "SRS", seed)


def lhs(n: int, d: int, seed: int) -> UnitDesign:
    _check(n, d)
    rng = np.random.default_rng(seed)
    return UnitDesign(_lhs_points(n, d, rng), "LHS", seed)


def min_pairwise_distance(points) -> float:
    points = np.asarray(points)
    if points.shape[0] < 2:
        return np.inf
    return float(pdist(points).min())


def _candidate_rng(seed, index):
    # candidate 0 reproduces the plain design for the same seed
    return np.random.default_rng(seed if index == 0 else [seed, index])


def _select_maximin(make, n_candidates):
    best, best_score = None, -np.inf
    for i in range(n_candidates):
        pts = make(i)
        score = min_pairwise_distance(pts)
        if score > best_score:
            best, best_score = pts, score
    return best


def maximin_lhs(n: int, d: int, seed: int, n_candidates: int = 100) -> UnitDesign:
    """Best of ``n_candidates`` LHS designs under the maximin distance criterion."""
    _check(n, d)
    if n_candidates < 1:
        raise ConfigError("n_candidates must be >= 1", field="n_candidates")
    pts = _select_maximin(lambda i: _lhs_points(n, d, _candidate_rng(seed, i)), n_candidates)
    return UnitDesign(pts, "MaximinLHS", seed)


def _group_strata(n, grouping):
    strata = []
    for g in grouping.groups:
        m = _int_root(n, len(g))
        if m is None:
            raise ConfigError(
                f"n={n} is not a perfect power {len(g)} as required by group {g}", field="n"
            )
        strata.append(m)
    return strata


def _pss_cells(n, grouping, rng):
    """Integer cell coordinates (n, d): each group's grid cells used once, rows shuffled."""
    d = grouping.d
    cells = np.empty((n, d), dtype=np.int64)
    for g, m in zip(grouping.groups, _group_strata(n, grouping)):
        grid = np.stack(np.unravel_index(np.arange(n), (m,) * len(g)), axis=1)
        cells[:, list(g)] = grid[rng.permutation(n)]
    return cells


def pss(n: int, grouping: PssGrouping, seed: int) -> UnitDesign:
    _check(n, grouping.d)
    rng = np.random.default_rng(seed)
    cells = _pss_cells(n, grouping, rng)
    m = np.empty(grouping.d)
    for g, mg in zip(grouping.groups, _group_strata(n, grouping)):
        m[list(g)] = mg
    pts = (cells + rng.random(cells.shape)) / m
    return UnitDesign(pts, "PSS", seed)


def _lpss_points(n, grouping, rng):
    cells = _pss_cells(n, grouping, rng)
    coarse = np.empty(cells.shape)
    for g, m in zip(grouping.groups, _group_strata(n, grouping)):
        coarse[:, list(g)] = cells[:, list(g)] * (n // m)
    # coarse strata are spaced >= 1 apart, so a uniform tie-break sorts each
    # stratum's rows into its own n/m fine strata in random order
    order = np.argsort(coarse + rng.random(cells.shape), axis=0)
    fine = np.empty(cells.shape, dtype=np.int64)
    np.put_along_axis(fine, order, np.arange(n)[:, None], axis=0)
    return (fine + rng.random(cells.shape)) / n


def lpss(n: int, grouping: PssGrouping, seed: int, maximin: bool = False,
         n_candidates: int = 20) -> UnitDesign:
    """Design stratified on every group grid and Latin in every column."""
    _check(n, grouping.d)
    _group_strata(n, grouping)
    if not maximin:
        return UnitDesign(_lpss_points(n, grouping, np.random.default_rng(seed)), "LPSS", seed)
    if n_candidates < 1:
        raise ConfigError("n_candidates must be >= 1", field="n_candidates")
    pts = _select_maximin(lambda i: _lpss_points(n, grouping, _candidate_rng(seed, i)), n_candidates)
    return UnitDesign(pts, "LPSS", seed)


def sobol(n: int, d: int) -> UnitDesign:
    """First ``n`` points of the unscrambled Sobol sequence (starts at the origin)."""
    _check(n, d)
    if d > SOBOL_MAX_DIM:
        raise ConfigError(f"Sobol direction numbers available up to d={SOBOL_MAX_DIM}, got {d}", field="d")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pts = qmc.Sobol(d, scramble=False).random(n)
    return UnitDesign(pts, "Sobol", None)


def make_design(scheme: str, n: int, d: int, seed: int, grouping: PssGrouping | None = None,
                n_candidates: int = 20) -> UnitDesign:
    """Dispatch on a scheme name (case-insensitive)."""
    key = scheme.lower()
    if key == "srs":
        return srs(n, d, seed)
    if key == "lhs":
        return lhs(n, d, seed)
    if key in ("maximinlhs", "maximin_lhs"):
        return maximin_lhs(n, d, seed, n_candidates)
    if key in ("pss", "lpss", "maximinlpss"):
        grouping = grouping or default_grouping(n, d)
        if grouping.d != d:
            raise ConfigError(f"grouping covers {grouping.d} dims, design has {d}", field="grouping")
        if key == "pss":
            return pss(n, grouping, seed)
        return lpss(n, grouping, seed, maximin=key == "maximinlpss", n_candidates=n_candidates)
    if key == "sobol":
        return sobol(n, d)
    raise ConfigError(f"unknown sampling scheme {scheme!r}", field="scheme")


def to_gaussian(design: UnitDesign) -> LatentBatch:
    u = np.clip(design.points, CLAMP, 1.0 - CLAMP)
    return LatentBatch(ndtri(u), design)


def write_design_csv(design: UnitDesign, path) -> None:
    header = ",".join(f"dim{j}" for j in range(design.d))
    np.savetxt(path, design.points, delimiter=",", header=header, comments="", fmt="%.17g")


def read_design_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
