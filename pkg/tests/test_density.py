import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ledgerfl.density import (
    assign_groups, gaussian_kde, kde_groups, local_minima, silverman_bandwidth,
)

TWO_CLUSTERS = [0.10, 0.11, 0.12, 0.90, 0.91]


def kde_oracle(xs, scores, h):
    z = (xs[:, None] - np.asarray(scores)[None, :]) / h
    return np.exp(-0.5 * z ** 2).sum(axis=1) / (len(scores) * h * np.sqrt(2 * np.pi))


def test_curve_matches_direct_formula():
    curve = gaussian_kde(TWO_CLUSTERS)
    assert len(curve.xs) == len(curve.ys) == 2000
    assert curve.xs[0] == 0.10 and curve.xs[-1] == 0.91
    assert np.allclose(curve.ys, kde_oracle(curve.xs, TWO_CLUSTERS, curve.bandwidth), rtol=1e-12)
    assert np.all(curve.ys >= 0)


def test_silverman_value():
    c = np.array(TWO_CLUSTERS)
    sigma = np.std(c, ddof=1)
    q75, q25 = np.percentile(c, [75, 25])
    want = 0.9 * min(sigma, (q75 - q25) / 1.34) * 5 ** -0.2
    assert silverman_bandwidth(c) == pytest.approx(want, rel=1e-12)


def test_silverman_falls_back_to_std_when_iqr_vanishes():
    c = np.array([1.0, 1.0, 1.0, 1.0, 5.0])
    assert silverman_bandwidth(c) == pytest.approx(0.9 * np.std(c, ddof=1) * 5 ** -0.2)
    assert silverman_bandwidth([3.0]) == 1e-6


def test_single_score_peaks_at_score():
    curve = gaussian_kde([0.5])
    assert np.all(curve.xs == 0.5)
    assert local_minima(curve.ys).size == 0


def test_symmetric_scores_give_symmetric_curve():
    curve = gaussian_kde([-0.3, 0.3])
    assert np.max(np.abs(curve.ys - curve.ys[::-1])) <= 1e-9


def test_mass_on_score_range_grid():
    # the grid only spans [min, max], so the tails beyond the extreme scores are cut
    curve = gaussian_kde(TWO_CLUSTERS)
    mass = np.trapezoid(curve.ys, curve.xs)
    assert mass == pytest.approx(0.50884, abs=1e-4)


@pytest.mark.xfail(strict=True, reason="tails beyond min/max are outside the grid; see notes")
def test_mass_near_one_on_score_range_grid():
    curve = gaussian_kde(TWO_CLUSTERS)
    assert 0.98 <= np.trapezoid(curve.ys, curve.xs) <= 1.02


def test_mass_near_one_on_wide_grid():
    h = silverman_bandwidth(TWO_CLUSTERS)
    xs = np.linspace(0.10 - 8 * h, 0.91 + 8 * h, 4000)
    assert 0.98 <= np.trapezoid(kde_oracle(xs, TWO_CLUSTERS, h), xs) <= 1.02


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        gaussian_kde([0.1, np.inf])
    with pytest.raises(ValueError):
        gaussian_kde([])


def test_local_minima_basics():
    assert local_minima(np.arange(10)).tolist() == []
    assert local_minima([3, 1, 3]).tolist() == [1]
    assert local_minima([1, 2]).tolist() == []
    assert local_minima([1, 1, 1]).tolist() == []
    assert local_minima([0, 3, 1, 3, 0]).tolist() == [2]


def test_flat_bottomed_valley_counts_once():
    assert local_minima([3, 1, 1, 3]).tolist() == [1]
    assert local_minima([3, 1, 1, 1, 3]).tolist() == [2]
    assert local_minima([3, 1, 1, 2, 2]).tolist() == [1]
    assert local_minima([3, 1, 1, 1, 1]).tolist() == []


def test_symmetric_clusters_still_split():
    # mirrored clusters put two equal grid values at the valley floor
    c = [0.1, 0.11, 0.12, 0.13, 0.14, 0.9, 0.91, 0.92, 0.93, 0.94]
    assert [g.tolist() for g in kde_groups(c)] == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]


def test_two_cluster_valley():
    curve = gaussian_kde(TWO_CLUSTERS)
    idx = local_minima(curve.ys)
    assert len(idx) == 1
    assert 0.12 < curve.xs[idx[0]] < 0.90
    groups = assign_groups(TWO_CLUSTERS, curve.xs[idx])
    assert [g.tolist() for g in groups] == [[0, 1, 2], [3, 4]]


def test_grouping_rules():
    assert [g.tolist() for g in assign_groups([0.3, 0.1, 0.2], [])] == [[0, 1, 2]]
    # a score on a boundary joins the lower group
    assert [g.tolist() for g in assign_groups([0.1, 0.5, 0.9], [0.5])] == [[0, 1], [2]]


def test_kde_groups_degenerate_inputs():
    assert [g.tolist() for g in kde_groups([0.4, 0.4, 0.4])] == [[0, 1, 2]]
    assert [g.tolist() for g in kde_groups([0.7])] == [[0]]


scores = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30)


@given(scores)
@settings(max_examples=60, deadline=None)
def test_groups_partition_scores(c):
    groups = kde_groups(c)
    flat = np.concatenate(groups)
    assert sorted(flat.tolist()) == list(range(len(c)))


@given(st.lists(st.floats(0.0, 2.0), min_size=2, max_size=20), st.floats(0.1, 100.0))
@settings(max_examples=60, deadline=None)
def test_grouping_is_scale_equivariant(c, k):
    c = np.round(np.asarray(c), 3)
    base = [g.tolist() for g in kde_groups(c)]
    scaled = [g.tolist() for g in kde_groups(c * k)]
    assert [g for g in base if g] == [g for g in scaled if g]


def two_clusters(rng, n_low, n_high, spread=0.01):
    low = rng.uniform(0.0, spread, size=n_low)
    high = rng.uniform(0.0, spread, size=n_high) + low.max() + 5 * spread
    return np.concatenate([low, high])


@given(st.integers(0, 10_000), st.integers(2, 7))
@settings(max_examples=40, deadline=None)
def test_equal_sized_separated_clusters_split_cleanly(seed, k):
    c = two_clusters(np.random.default_rng(seed), k, k)
    assert sorted(kde_groups(c)[0].tolist()) == list(range(k))


@pytest.mark.xfail(strict=True, reason="IQR inside the larger cluster shrinks the Silverman "
                                       "bandwidth below the cluster spread; see notes")
def test_unequal_separated_clusters_split_cleanly():
    rng = np.random.default_rng(627)
    c = two_clusters(rng, rng.integers(2, 8), rng.integers(2, 8))
    n_low = int(np.sum(c < c.max() - 0.04))
    groups = kde_groups(c)
    assert sorted(groups[0].tolist()) == list(range(n_low))
    assert all(g.size == 0 or g.min() >= n_low for g in groups[1:])
