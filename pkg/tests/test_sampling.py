import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowrecon import sampling
from flowrecon.errors import ConfigError
from flowrecon.sampling import PssGrouping


def _latin(points):
    n = points.shape[0]
    strata = np.floor(points * n).astype(int)
    return all(sorted(col) == list(range(n)) for col in strata.T)


def _group_stratified(points, grouping):
    n = points.shape[0]
    for g in grouping.groups:
        m = round(n ** (1.0 / len(g)))
        cells = np.floor(points[:, list(g)] * m).astype(int)
        if len({tuple(c) for c in cells}) != n:
            return False
    return True


def _replicate_var(make, g, reps=500):
    return np.var([g(make(r).points).mean() for r in range(reps)])


def test_srs_range_and_determinism():
    a = sampling.srs(4, 2, 7)
    assert a.points.shape == (4, 2)
    assert np.all((a.points >= 0) & (a.points < 1))
    assert np.array_equal(a.points, sampling.srs(4, 2, 7).points)


def test_srs_mean_concentrates():
    assert abs(sampling.srs(10000, 1, 0).points.mean() - 0.5) < 0.02


@pytest.mark.parametrize("n,d", [(0, 2), (3, 0)])
def test_empty_design_is_config_error(n, d):
    with pytest.raises(ConfigError):
        sampling.srs(n, d, 0)
    with pytest.raises(ConfigError):
        sampling.lhs(n, d, 0)


def test_lhs_one_point_per_quarter():
    pts = sampling.lhs(4, 2, 3).points
    for col in pts.T:
        assert sorted(np.floor(col * 4).astype(int)) == [0, 1, 2, 3]
    assert sampling.lhs(1, 5, 0).points.shape == (1, 5)


def test_lhs_additive_variance_ratio():
    def g(u):
        return u.sum(axis=1)
    v_srs = _replicate_var(lambda r: sampling.srs(64, 2, r), g)
    v_lhs = _replicate_var(lambda r: sampling.lhs(64, 2, r), g)
    assert v_lhs / v_srs < 0.2


def test_maximin_is_argmax_of_pool():
    n, d, seed, pool = 8, 2, 4, 30
    best = sampling.maximin_lhs(n, d, seed, pool)
    scores = [sampling.min_pairwise_distance(
        sampling._lhs_points(n, d, sampling._candidate_rng(seed, i))) for i in range(pool)]
    assert sampling.min_pairwise_distance(best.points) == max(scores)
    assert _latin(best.points)


def test_maximin_two_points_pushed_apart():
    pts = sampling.maximin_lhs(2, 1, 0, 200).points
    assert abs(pts[0, 0] - pts[1, 0]) > 0.5


def test_maximin_single_candidate_is_plain_lhs():
    np.testing.assert_array_equal(sampling.maximin_lhs(6, 3, 9, 1).points, sampling.lhs(6, 3, 9).points)


def test_pss_quadrants():
    pts = sampling.pss(4, PssGrouping(((0, 1),)), 2).points
    quads = {tuple(q) for q in np.floor(pts * 2).astype(int)}
    assert quads == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_pss_singletons_are_latin():
    pts = sampling.pss(9, PssGrouping.singletons(3), 1).points
    assert _latin(pts)


def test_pss_rejects_incompatible_n():
    with pytest.raises(ConfigError):
        sampling.pss(5, PssGrouping(((0, 1),)), 0)
    with pytest.raises(ConfigError):
        sampling.lpss(8, PssGrouping(((0, 1), (2,))), 0)


def test_pss_interaction_variance_below_srs():
    def g(u):
        return np.sin(2 * np.pi * u[:, 0]) * np.sin(2 * np.pi * u[:, 1])
    grouping = PssGrouping(((0, 1),))
    v_srs = _replicate_var(lambda r: sampling.srs(16, 2, r), g)
    v_pss = _replicate_var(lambda r: sampling.pss(16, grouping, r), g)
    assert v_pss < v_srs


def test_lpss_two_groups_of_pairs():
    grouping = PssGrouping(((0, 1), (2, 3)))
    pts = sampling.lpss(4, grouping, 5).points
    assert _latin(pts)
    assert _group_stratified(pts, grouping)


def test_lpss_single_group_is_latin():
    pts = sampling.lpss(16, PssGrouping(((0, 1),)), 0).points
    assert _latin(pts)


def test_lpss_maximin_improves_spacing():
    grouping = PssGrouping(((0, 1),))
    plain = [sampling.min_pairwise_distance(sampling.lpss(16, grouping, s).points) for s in range(100)]
    best = [sampling.min_pairwise_distance(sampling.lpss(16, grouping, s, maximin=True).points)
            for s in range(100)]
    assert np.median(best) > np.median(plain)


def test_sobol_reference_points():
    np.testing.assert_array_equal(sampling.sobol(1, 2).points, [[0.0, 0.0]])
    np.testing.assert_array_equal(sampling.sobol(4, 2).points,
                                  [[0, 0], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75]])


def _gray_code_sobol(n, d):
    # Bratley-Fox construction with the first few primitive polynomials
    # (degree, coefficient bits, initial direction numbers m_i)
    table = [(1, 0, [1]), (2, 1, [1, 3]), (3, 1, [1, 3, 1]), (3, 2, [1, 1, 1])]
    bits = 30
    dirs = [np.array([1 << (bits - 1 - i) for i in range(bits)], dtype=np.int64)]
    for s, a, m in table[:d - 1]:
        v = np.zeros(bits, dtype=np.int64)
        for i in range(s):
            v[i] = m[i] << (bits - 1 - i)
        for i in range(s, bits):
            x = v[i - s] ^ (v[i - s] >> s)
            for k in range(1, s):
                if (a >> (s - 1 - k)) & 1:
                    x ^= v[i - k]
            v[i] = x
        dirs.append(v)
    out = np.zeros((n, d))
    state = np.zeros(d, dtype=np.int64)
    for i in range(1, n):
        c = (~(i - 1) & i).bit_length() - 1  # index of the lowest zero bit of i - 1
        for j in range(d):
            state[j] ^= dirs[j][c]
        out[i] = state / float(1 << bits)
    return out


def test_sobol_matches_independent_construction():
    np.testing.assert_allclose(sampling.sobol(64, 5).points, _gray_code_sobol(64, 5), atol=0)


def test_sobol_dyadic_and_dimension_limit():
    pts = sampling.sobol(37, 6).points
    assert np.all((pts >= 0) & (pts < 1))
    assert np.all(pts * 2 ** 30 == np.round(pts * 2 ** 30))
    with pytest.raises(ConfigError):
        sampling.sobol(4, sampling.SOBOL_MAX_DIM + 1)


def _bisect_ndtri(p):
    def cdf(x):
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cdf(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def test_to_gaussian_values():
    d = sampling.UnitDesign(np.array([[0.5, 0.8413447, 0.0, 1.0]]), "SRS")
    z = sampling.to_gaussian(d).points[0]
    assert z[0] == 0.0
    assert abs(z[1] - 1.0) < 1e-4
    assert abs(z[1] - _bisect_ndtri(0.8413447)) < 1e-9
    assert np.all(np.isfinite(z))


def test_to_gaussian_moments():
    z = sampling.to_gaussian(sampling.lhs(4096, 1, 0)).points
    assert abs(z.mean()) < 0.05
    assert abs(z.var() - 1) < 0.1


def test_make_design_dispatch_and_unknown():
    for s in sampling.SCHEMES:
        assert sampling.make_design(s, 16, 4, 0).points.shape == (16, 4)
    with pytest.raises(ConfigError):
        sampling.make_design("halton", 4, 2, 0)
    with pytest.raises(ConfigError):
        sampling.make_design("lpss", 4, 3, 0, grouping=PssGrouping(((0, 1),)))


def test_default_grouping():
    assert sampling.default_grouping(16, 5).groups == ((0, 1), (2, 3), (4,))
    assert sampling.default_grouping(10, 3).groups == ((0,), (1,), (2,))


def test_bad_grouping():
    with pytest.raises(ConfigError):
        PssGrouping(((0, 1), (1, 2)))
    with pytest.raises(ConfigError):
        PssGrouping(((0, 2),))


def test_design_csv_roundtrip(tmp_path):
    d = sampling.lhs(5, 3, 1)
    path = tmp_path / "d.csv"
    sampling.write_design_csv(d, path)
    assert path.read_text().splitlines()[0] == "dim0,dim1,dim2"
    np.testing.assert_array_equal(sampling.read_design_csv(path), d.points)


# ---------------------------------------------------------------- properties


@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 10**6))
def test_lhs_stratified_property(n, d, seed):
    pts = sampling.lhs(n, d, seed).points
    assert np.all((pts >= 0) & (pts < 1))
    assert _latin(pts)


@given(st.sampled_from([1, 4, 9, 16, 25, 64]), st.integers(1, 7), st.integers(0, 10**6))
def test_lpss_stratified_property(n, d, seed):
    grouping = PssGrouping.consecutive(d, 2)
    pts = sampling.lpss(n, grouping, seed).points
    assert _latin(pts)
    assert _group_stratified(pts, grouping)


@given(st.sampled_from([4, 9, 16, 36]), st.integers(2, 6), st.integers(0, 10**6))
def test_pss_group_cells_property(n, d, seed):
    grouping = PssGrouping.consecutive(d, 2)
    assert _group_stratified(sampling.pss(n, grouping, seed).points, grouping)


@given(st.integers(2, 20), st.integers(1, 4), st.integers(0, 10**6), st.integers(1, 15))
def test_maximin_dominates_plain_property(n, d, seed, pool):
    assert (sampling.min_pairwise_distance(sampling.maximin_lhs(n, d, seed, pool).points)
            >= sampling.min_pairwise_distance(sampling.lhs(n, d, seed).points))


@given(st.lists(st.floats(0, 1, exclude_max=True), min_size=2, max_size=20))
def test_to_gaussian_monotone_property(us):
    us = np.sort(np.array(us))
    z = sampling.to_gaussian(sampling.UnitDesign(us[:, None], "SRS")).points[:, 0]
    assert np.all(np.diff(z) >= 0)
    assert np.all(np.isfinite(z))


@given(st.integers(0, 10**6))
def test_additive_variance_d4_property(seed):
    def g(u):
        return u.sum(axis=1)
    v_srs = np.var([sampling.srs(64, 4, [seed, r]).points.sum(1).mean() for r in range(500)])
    v_lhs = np.var([g(sampling.lhs(64, 4, [seed, r]).points).mean() for r in range(500)])
    assert v_lhs / v_srs < 0.2
