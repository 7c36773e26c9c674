import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepstream.diffusion import (DiffusionConfig, Moments, assign_regions, compute_series,
                                 diffusion_coefficient, displacement, mean_square_displacement,
                                 moments_from, weighted_moments)
from sepstream.geometry import RegionSpec, SeparatrixModel
from sepstream.trajstore import TrajectoryDataset

# keep products such as w * delta**2 out of the subnormal range
finite = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda x: x == 0.0 or abs(x) > 1e-100)
weights = st.floats(1e-3, 1e3, allow_nan=False)
samples = st.lists(st.tuples(finite, weights), min_size=1, max_size=20)


def exact_moments(delta, w):
    """Direct rational evaluation of M, MSQ and msd."""
    pairs = [(Fraction(d), Fraction(x)) for d, x in zip(delta, w) if x != -1.0]
    sw = sum(x for _, x in pairs)
    M = sum(x * d for d, x in pairs) / sw
    MSQ = sum(x * d * d for d, x in pairs) / sw
    return M, MSQ, MSQ - M * M


def close(got, want, scale, rel=1e-12):
    return abs(Fraction(got) - want) <= rel * max(abs(float(scale)), 1e-300)


def test_zero_mean_example():
    m = moments_from([1.0, -1.0], [1.0, 1.0])
    assert (m.M, m.MSQ, m.msd) == (0.0, 1.0, 1.0)


def test_single_particle_example():
    m = moments_from([3.0], [2.5])
    assert (m.M, m.MSQ, m.msd) == (3.0, 9.0, 0.0)


def test_coefficient_examples():
    assert diffusion_coefficient(0.0, 4.0, "E", 8, 0.5) == 1.0
    assert diffusion_coefficient(0.0, 4.0, "psi", 8, 0.5, dpdrs=2.0) == 0.25
    with pytest.raises(ValueError):
        diffusion_coefficient(0.0, 1.0, "E", 0, 1.0)


def test_unwanted_weight_excluded():
    a = moments_from([1.0, 2.0, 50.0], [1.0, 1.0, -1.0])
    b = moments_from([1.0, 2.0], [1.0, 1.0])
    assert (a.M, a.MSQ, a.n_eff) == (b.M, b.MSQ, 2)


def test_empty_region_is_gap():
    m = moments_from([], [])
    assert math.isnan(m.M) and math.isnan(m.MSQ) and m.n_eff == 0


def test_msd_snap_only_for_rounding_residue():
    x = 0.1
    assert mean_square_displacement(x, x * x * (1 - 2 ** -52)) == 0.0
    assert mean_square_displacement(1.0, 0.5) == -0.5


@settings(max_examples=300)
@given(samples)
def test_moments_against_exact_oracle(data):
    delta, w = zip(*data)
    m = moments_from(delta, w)
    M, MSQ, msd = exact_moments(delta, w)
    scale = max(abs(float(MSQ)), 1.0)
    assert close(m.M, M, max(abs(float(M)), max(abs(d) for d in delta)))
    assert close(m.MSQ, MSQ, scale)
    assert abs(Fraction(m.msd) - msd) <= 1e-12 * scale


@settings(max_examples=300)
@given(samples, st.floats(1e-3, 1e3))
def test_weight_scale_invariance(data, c):
    delta, w = zip(*data)
    a = moments_from(delta, w)
    b = moments_from(delta, [c * x for x in w])
    assert b.M == pytest.approx(a.M, rel=1e-12, abs=1e-12 * max(map(abs, delta)))
    assert b.MSQ == pytest.approx(a.MSQ, rel=1e-12, abs=1e-300)


@given(samples)
def test_msd_non_negative(data):
    delta, w = zip(*data)
    assert moments_from(delta, w).msd >= 0.0


@given(samples, finite)
def test_translation_shifts_mean_only(data, c):
    delta, w = zip(*data)
    a = moments_from(delta, w)
    b = moments_from([d + c for d in delta], w)
    big = max(abs(c), max(map(abs, delta)))
    assert b.M == pytest.approx(a.M + c, abs=1e-10 * big)
    assert b.msd == pytest.approx(a.msd, abs=1e-9 * big * big)


@given(samples, samples)
def test_partition_additivity(left, right):
    dl, wl = zip(*left)
    dr, wr = zip(*right)
    a, b = moments_from(dl, wl), moments_from(dr, wr)
    both = moments_from(dl + dr, wl + wr)
    combined = Moments(math.fsum([a.sum_w, b.sum_w]), math.fsum([a.sum_wd, b.sum_wd]),
                       math.fsum([a.sum_wd2, b.sum_wd2]), a.n_eff + b.n_eff)
    # each part is already correctly rounded, so merging may cost about one ulp
    assert combined.n_eff == both.n_eff
    for name in ("sum_w", "sum_wd", "sum_wd2"):
        tol = 4 * np.finfo(float).eps * max(abs(getattr(a, name)), abs(getattr(b, name)))
        assert abs(getattr(combined, name) - getattr(both, name)) <= tol


@given(st.permutations(list(range(12))))
def test_order_independence(order):
    rng = np.random.default_rng(5)
    delta = rng.normal(size=12) * 1e3
    w = rng.random(12) + 0.1
    base = moments_from(delta, w)
    perm = moments_from(delta[list(order)], w[list(order)])
    assert (perm.M, perm.MSQ) == (base.M, base.MSQ)


def synthetic_dataset(rng, P, S, sigma=0.1, drift=0.0):
    steps = rng.normal(drift, sigma, size=(P, S))
    steps[:, 0] = 0.0
    E = 500.0 + np.cumsum(steps, axis=1)
    theta = np.repeat(rng.uniform(0.3 * math.pi, 0.8 * math.pi, size=(P, 1)), S, axis=1)
    props = {"E": E, "psi": np.ones((P, S)), "vPar": np.zeros((P, S)),
             "theta": theta, "w0": np.ones((P, S))}
    return TrajectoryDataset("electron", 1.0, np.arange(P, dtype=np.uint64),
                             np.arange(S, dtype=float), np.ones((P, S), bool), props)


def test_brownian_walk_recovers_variance():
    ds = synthetic_dataset(np.random.default_rng(0), 20000, 51)
    m = weighted_moments(np.arange(20000), "E", 50, ds)
    d = diffusion_coefficient(m.M, m.MSQ, "E", 50, 1.0)
    # sample variance of 2e4 normals: relative sd ~ 1%
    assert d == pytest.approx(0.01, rel=0.05)


def test_drift_shows_in_mean_not_msd():
    ds = synthetic_dataset(np.random.default_rng(1), 20000, 21, drift=0.5)
    m = weighted_moments(np.arange(20000), "E", 20, ds)
    assert m.M == pytest.approx(10.0, rel=0.01)
    assert m.msd / 20 == pytest.approx(0.01, rel=0.05)


def test_zero_dynamics_gives_zero():
    ds = synthetic_dataset(np.random.default_rng(2), 50, 5, sigma=0.0)
    m = weighted_moments(np.arange(50), "E", 4, ds)
    assert (m.M, m.MSQ, m.msd) == (0.0, 0.0, 0.0)


def test_absent_and_unwanted_samples_excluded():
    ds = synthetic_dataset(np.random.default_rng(3), 4, 3)
    ds.presence[0, 2] = False
    ds.properties["E"][0, 2] = np.nan
    ds.properties["w0"][1, 2] = -1.0
    m = weighted_moments(np.arange(4), "E", 2, ds)
    assert m.n_eff == 2 and not math.isnan(m.M)
    assert displacement(ds, 0, "E", 2) is None
    assert displacement(ds, 2, "E", 2) == ds.properties["E"][2, 2] - ds.properties["E"][2, 0]


def test_weight_taken_at_step_n():
    ds = synthetic_dataset(np.random.default_rng(4), 2, 2)
    ds.properties["E"][:, 1] = ds.properties["E"][:, 0] + np.array([1.0, 3.0])
    ds.properties["w0"][:, 1] = [3.0, 1.0]
    ds.properties["w0"][:, 0] = [1.0, 3.0]
    assert weighted_moments(np.arange(2), "E", 1, ds).M == 1.5


def test_assign_regions_uses_step_zero_theta():
    ds = synthetic_dataset(np.random.default_rng(5), 3, 3)
    ds.properties["theta"][:] = [[0.1, 3.0, 3.0], [3.0, 0.1, 0.1], [0.15, 0.15, 0.15]]
    rows = assign_regions(ds, SeparatrixModel(), [RegionSpec.seg(0, 0), RegionSpec.seg(1, 7)])
    assert rows[0].tolist() == [0, 2] and rows[1].tolist() == [1]


def test_series_matches_single_calls():
    ds = synthetic_dataset(np.random.default_rng(6), 300, 6)
    ds.properties["theta"][:, :] = np.linspace(0, 2 * math.pi, 300, endpoint=False)[:, None]
    regions = [RegionSpec.seg(1, s) for s in range(8)] + [RegionSpec.angles(5.5, 0.5)]
    cfg = DiffusionConfig(regions=regions, properties=("psi", "E"), dpdrs=2.0, workers=3)
    series = compute_series(ds, cfg, SeparatrixModel())
    rows = assign_regions(ds, SeparatrixModel(), regions)
    for i in (0, 5, 8):
        for step in (1, 5):
            m = weighted_moments(rows[i], "E", step, ds)
            got = series.at(i, "E", step)
            assert (got["M"], got["MSQ"], got["n_eff"]) == (m.M, m.MSQ, m.n_eff)
            assert got["d"] == diffusion_coefficient(m.M, m.MSQ, "E", step, 1.0)
    assert series.M.shape == (9, 2, 5)
    again = compute_series(ds, DiffusionConfig(regions=regions, properties=("psi", "E"),
                                               dpdrs=2.0, workers=1), SeparatrixModel())
    assert again.d.tobytes() == series.d.tobytes()


def test_config_problems():
    cfg = DiffusionConfig(regions=[], properties=("E", "spin"), dt=0.0, dpdrs=-1.0)
    fields = {p.split(":")[0] for p in cfg.problems()}
    assert fields == {"regions", "properties", "dt", "dpdrs"}


def test_missing_weight_property_rejected():
    ds = synthetic_dataset(np.random.default_rng(7), 3, 2)
    del ds.properties["w0"]
    with pytest.raises(ValueError):
        compute_series(ds, DiffusionConfig(regions=[RegionSpec.seg(0, 0)]), SeparatrixModel())


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False), st.floats(1e-3, 1e3))
def test_series_translation_and_weight_scale(shift, c):
    ds = synthetic_dataset(np.random.default_rng(8), 200, 4)
    ds.properties["w0"][:] = np.random.default_rng(9).uniform(0.5, 2.0, size=(200, 4))
    cfg = DiffusionConfig(regions=[RegionSpec.angles(0.2 * math.pi, 0.9 * math.pi)],
                          properties=("E",))
    base = compute_series(ds, cfg, SeparatrixModel())
    ds.properties["E"] = ds.properties["E"] + shift
    ds.properties["w0"] = ds.properties["w0"] * c
    moved = compute_series(ds, cfg, SeparatrixModel())
    # shifted samples lose low-order bits of E, which bounds the agreement
    tol = 64 * np.finfo(float).eps * (abs(shift) + 600.0)
    assert np.allclose(moved.M, base.M, rtol=1e-9, atol=tol)
    assert np.allclose(moved.d, base.d, rtol=1e-6, atol=tol * 4)
    assert np.array_equal(moved.n_eff, base.n_eff)
