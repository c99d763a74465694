import numpy as np
import pytest

from conftest import frontal_surfels
from surfelmap.core.config import DEFAULT_CONFIG
from surfelmap.core.density_control import (SPLIT_DIVISOR, DensityParams, apply_density_control, growth_score,
                                            mean_gradients, prune_score)
from surfelmap.core.mesh_filter import eval_mesh_metrics
from surfelmap.core.supervision import query_neighbors, weighted_distances


def test_growth_score_values():
    assert growth_score(0.0, 0.0) == pytest.approx(8e-5)
    assert growth_score(0.0, 0.01) == pytest.approx(4.852e-5, rel=1e-3)
    assert growth_score(0.001, np.inf) == pytest.approx(0.6 * 0.001)
    assert growth_score(0.001, 1e6) == pytest.approx(0.6 * 0.001)


def test_prune_score_values():
    assert prune_score(0.3, 0.0) == pytest.approx(0.3)
    assert prune_score(0.002, np.inf) == pytest.approx(-0.001)
    d = np.linspace(0.0, 0.05, 20)
    assert np.all(np.diff(prune_score(0.5, d)) < 0)


def test_scores_broadcast_over_arrays():
    out = growth_score(np.zeros(3), np.array([0.0, 0.01, np.inf]))
    assert out.shape == (3,)
    assert out[2] == 0.0


def test_params_from_config():
    params = DensityParams.from_config(DEFAULT_CONFIG)
    assert (params.omega_growth, params.omega_pruning) == (0.4, 0.003)
    plain = DensityParams.from_config({**DEFAULT_CONFIG, 'geometry_aware_density': False})
    assert (plain.omega_growth, plain.omega_pruning) == (0.0, 0.0)
    assert growth_score(0.001, 0.0, plain) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        DensityParams(omega_growth=1.5)


def test_schedule():
    params = DensityParams(interval=100, start_iter=500, stop_iter=15000)
    assert not params.scheduled(400)
    assert params.scheduled(500)
    assert not params.scheduled(550)
    assert params.scheduled(15000)
    assert not params.scheduled(15100)


def _surfels(radius, opacity, grad):
    s = frontal_surfels([[0.0, 0.0, 0.0]], radii=radius, opacity=opacity)
    s.grad_accum[:] = grad
    s.grad_count[:] = 1.0
    return s


def test_nothing_fires_below_thresholds():
    surfels = frontal_surfels(np.random.default_rng(0).uniform(size=(5, 3)), radii=0.02, opacity=0.5)
    out, report, origin = apply_density_control(surfels, np.zeros(5))
    assert report.as_dict() == {'grown': 0, 'split': 0, 'pruned': 0, 'before': 5, 'after': 5}
    np.testing.assert_array_equal(out.positions, surfels.positions)
    np.testing.assert_array_equal(origin, np.arange(5))


def test_large_growing_surfel_splits():
    surfels = _surfels(0.2, 0.5, grad=1.0)
    out, report, origin = apply_density_control(surfels, np.array([0.0]), rng=np.random.default_rng(1))
    assert (report.split, report.grown, report.pruned) == (1, 0, 0)
    assert len(out) == 2
    np.testing.assert_allclose(out.radii, 0.2 / SPLIT_DIVISOR)
    np.testing.assert_array_equal(origin, [-1, -1])
    np.testing.assert_allclose(out.positions[:, 2], 0.0)
    out.check_invariants()


def test_small_growing_surfel_clones():
    surfels = _surfels(0.01, 0.5, grad=1.0)
    out, report, origin = apply_density_control(surfels, np.array([0.0]))
    assert (report.grown, report.split) == (1, 0)
    np.testing.assert_array_equal(out.positions, np.zeros((2, 3)))
    np.testing.assert_array_equal(origin, [0, -1])
    assert np.all(out.grad_accum == 0.0) and np.all(out.grad_count == 0.0)


def test_off_surface_transparent_surfel_is_pruned_and_never_grows():
    surfels = _surfels(0.2, 0.004, grad=1.0)
    out, report, _ = apply_density_control(surfels, np.array([np.inf]))
    assert report.pruned == 1 and report.split == 0
    assert len(out) == 0


def test_on_surface_protection():
    # 0.006 survives on the surface; far from it the geometric term drops it under the threshold
    surfels = frontal_surfels(np.zeros((2, 3)), radii=0.01, opacity=0.006)
    out, report, origin = apply_density_control(surfels, np.array([0.0, np.inf]))
    assert report.pruned == 1
    np.testing.assert_array_equal(origin, [0])


def test_count_identity_and_determinism():
    rng = np.random.default_rng(2)
    n = 200
    surfels = frontal_surfels(rng.uniform(-1, 1, size=(n, 3)), radii=rng.uniform(0.01, 0.1, n),
                              opacity=rng.uniform(0.0, 0.02, n))
    surfels.grad_accum = rng.uniform(0.0, 5e-4, n)
    surfels.grad_count = np.ones(n)
    distances = rng.uniform(0.0, 0.05, n)
    a, ra, oa = apply_density_control(surfels, distances, rng=np.random.default_rng(7))
    b, rb, ob = apply_density_control(surfels, distances, rng=np.random.default_rng(7))
    assert ra.after == ra.before + ra.grown + ra.split - ra.pruned == len(a)
    assert ra.grown > 0 and ra.split > 0 and ra.pruned > 0
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(mean_gradients(a), 0.0)


def test_geometry_aware_control_keeps_fewer_surfels_at_no_worse_chamfer(floor_map):
    # surfels on the floor components plus floaters 5 cm above and below them
    anchors = floor_map.arrays().means
    floaters = np.concatenate([anchors + [0.0, 0.0, 0.05], anchors - [0.0, 0.0, 0.05]])
    centers = np.concatenate([anchors, floaters])
    opacity = np.concatenate([np.full(len(anchors), 0.5), np.full(len(floaters), 0.007)])
    surfels = frontal_surfels(centers, radii=0.02, opacity=opacity)
    surfels.grad_accum = np.full(len(surfels), 3e-4)
    surfels.grad_count = np.ones(len(surfels))
    query = query_neighbors(floor_map, centers, K=4, sigma=0.1)
    distances = weighted_distances(floor_map, query, centers)

    plain, _, _ = apply_density_control(surfels, distances, DensityParams(omega_growth=0.0, omega_pruning=0.0))
    aware, report, _ = apply_density_control(surfels, distances, DensityParams())
    assert report.pruned == len(floaters)
    assert len(aware) <= 0.7 * len(plain)

    plain_chamfer = eval_mesh_metrics(plain.positions, anchors).chamfer_l1
    aware_chamfer = eval_mesh_metrics(aware.positions, anchors).chamfer_l1
    assert aware_chamfer <= plain_chamfer
