import numpy as np
import pytest

from conftest import frontal_surfels, plane_component, plane_map
from surfelmap.core.gmm_model import GmmMap
from surfelmap.core.supervision import (LossParams, gmm_losses, gmm_losses_and_gradients, knn_components,
                                        project_tangent_gradients, query_neighbors, weighted_distance,
                                        weighted_distances)
from surfelmap.core.surfel import SurfelSet


def _random_map(n, seed, extent=2.0, voxel_size=0.5):
    rng = np.random.default_rng(seed)
    gmm_map = GmmMap(voxel_size)
    for _ in range(n):
        gmm_map.add(plane_component(rng.uniform(-extent, extent, 3), rng.normal(size=3)))
    return gmm_map.freeze()


def test_knn_returns_nearest():
    gmm_map = plane_map([(1.0, 0.0, 0.0), (2.0, 0.0, 0.0)], (0.0, 0.0, 1.0))
    entry = knn_components(gmm_map, (0.0, 0.0, 0.0), K=1)
    np.testing.assert_array_equal(entry.indices, [0])
    assert entry.distances[0] == pytest.approx(1.0)
    assert not entry.incomplete


def test_knn_matches_brute_force():
    gmm_map = _random_map(100, seed=0)
    means = gmm_map.arrays().means
    rng = np.random.default_rng(1)
    for p in rng.uniform(-2.0, 2.0, size=(25, 3)):
        entry = knn_components(gmm_map, p, K=4, max_rings=20)
        brute = np.argsort(np.linalg.norm(means - p, axis=1), kind='stable')[:4]
        np.testing.assert_array_equal(entry.indices, brute)


def test_knn_isolated_point_is_flagged():
    gmm_map = plane_map([(0.0, 0.0, 0.0)], (0.0, 0.0, 1.0))
    entry = knn_components(gmm_map, (100.0, 0.0, 0.0), K=4, max_rings=3)
    assert len(entry.indices) == 0
    assert entry.incomplete


def test_knn_cut_short_by_the_ring_limit_is_flagged():
    gmm_map = GmmMap(1.0)
    gmm_map.add(plane_component((-2.01, -2.5, 0.5), (0.0, 0.0, 1.0)))
    gmm_map.add(plane_component((4.49, 0.5, 0.5), (0.0, 0.0, 1.0)))
    gmm_map.freeze()
    p = (0.99, 0.5, 0.5)
    short = knn_components(gmm_map, p, K=1, max_rings=3)
    np.testing.assert_array_equal(short.indices, [0])
    assert short.incomplete
    full = knn_components(gmm_map, p, K=1, max_rings=4)
    np.testing.assert_array_equal(full.indices, [1])
    assert full.distances[0] == pytest.approx(3.5)
    assert not full.incomplete


def test_weighted_distance_single_component():
    gmm_map = plane_map([(0.0, 0.0, 0.0)], (0.0, 0.0, 1.0))
    query = query_neighbors(gmm_map, [(0.0, 0.0, 0.05)], K=4, sigma=0.1)
    assert query.weights[0, 0] == pytest.approx(np.exp(-0.125))
    d = weighted_distances(gmm_map, query, [(0.0, 0.0, 0.05)])
    assert d[0] == pytest.approx(0.04412, abs=1e-5)
    assert weighted_distance(gmm_map, query.indices[0, :1], query.weights[0, :1], (0, 0, 0.05)) == \
        pytest.approx(d[0])
    wider = query_neighbors(gmm_map, [(0.0, 0.0, 0.05)], K=4, sigma=0.2)
    assert wider.weights[0, 0] > query.weights[0, 0]


def test_weighted_distance_on_the_planes_is_zero(floor_map):
    probes = np.array([[0.1, 0.3, 0.0], [-0.7, 0.2, 0.0]])
    query = query_neighbors(floor_map, probes, K=4, sigma=0.5)
    np.testing.assert_allclose(weighted_distances(floor_map, query, probes), 0.0, atol=1e-12)


def test_normalized_distances(floor_map):
    probes = np.array([[0.0, 0.0, 0.1], [50.0, 50.0, 50.0]])
    query = query_neighbors(floor_map, probes, K=4, sigma=0.5)
    d = weighted_distances(floor_map, query, probes, normalize=True)
    assert d[0] == pytest.approx(0.1)
    assert d[1] == np.inf


def test_perfect_fit_has_zero_loss(floor_map):
    surfels = frontal_surfels([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0]], radii=0.02)
    query = query_neighbors(floor_map, surfels.positions)
    loss, grads = gmm_losses_and_gradients(surfels, query, floor_map)
    assert loss.L_dis == pytest.approx(0.0, abs=1e-12)
    assert loss.L_control == pytest.approx(0.0, abs=1e-12)
    assert loss.L_normal == pytest.approx(0.0, abs=1e-12)
    assert loss.count == 2
    np.testing.assert_allclose(grads.flat(), 0.0, atol=1e-12)


def test_shape_control_branches(floor_map):
    params = LossParams(phi=0.05, alpha=0.5)
    surfels = frontal_surfels([[0.0, 0.0, 0.2]], radii=[[0.1, 0.025]])
    tilt = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    surfels.tangent_u[0] = tilt
    surfels.tangent_v[0] = [0.0, 1.0, 0.0]
    query = query_neighbors(floor_map, surfels.positions, sigma=params.sigma)
    loss = gmm_losses(surfels, query, floor_map, params)
    c_u = surfels.positions + params.alpha * 0.1 * surfels.tangent_u
    expected = weighted_distances(floor_map, query, c_u)[0]
    assert loss.L_control == pytest.approx(expected)

    small = surfels.copy()
    small.radii[0] = [0.04, 0.01]
    assert gmm_losses(small, query, floor_map, params).L_control == 0.0


def test_invisible_surfels_are_not_supervised(floor_map):
    surfels = frontal_surfels([[0.0, 0.0, 0.2], [0.5, 0.0, 0.3]], radii=0.02)
    query = query_neighbors(floor_map, surfels.positions)
    loss, grads = gmm_losses_and_gradients(surfels, query, floor_map, visible=np.array([False, True]))
    assert loss.count == 1
    np.testing.assert_array_equal(grads.positions[0], 0.0)
    assert np.any(grads.positions[1] != 0.0)


def test_subgradient_on_the_plane_is_zero(floor_map):
    surfels = frontal_surfels([[0.1, 0.1, 0.0]], radii=0.02)
    query = query_neighbors(floor_map, surfels.positions)
    _, grads = gmm_losses_and_gradients(surfels, query, floor_map)
    np.testing.assert_array_equal(grads.positions, 0.0)


def _random_surfels(n, seed):
    rng = np.random.default_rng(seed)
    frames = np.linalg.qr(rng.normal(size=(n, 3, 3)))[0]
    radii = np.sort(rng.uniform(0.02, 0.2, size=(n, 2)), axis=1)[:, ::-1]
    return SurfelSet(rng.uniform(-1.5, 1.5, size=(n, 3)), frames[:, :, 0], frames[:, :, 1], radii,
                     rng.uniform(0.2, 0.9, n), np.zeros((n, 1, 3)))


def test_gradients_match_finite_differences():
    gmm_map = _random_map(50, seed=3, extent=1.5, voxel_size=0.75)
    surfels = _random_surfels(20, seed=4)
    params = LossParams(sigma=0.4, K=4, max_rings=3)
    query = query_neighbors(gmm_map, surfels.positions, params.K, params.sigma, params.max_rings)
    _, grads = gmm_losses_and_gradients(surfels, query, gmm_map, params, project=False)

    def loss(s):
        return gmm_losses(s, query, gmm_map, params).L_GMM

    h = 1e-5
    for name in ('positions', 'tangent_u', 'tangent_v', 'radii'):
        analytic = getattr(grads, name)
        numeric = np.zeros_like(analytic)
        base = getattr(surfels, name)
        for idx in np.ndindex(*base.shape):
            plus, minus = surfels.copy(), surfels.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            numeric[idx] = (loss(plus) - loss(minus)) / (2 * h)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert err < 1e-4, name


def test_projected_tangent_gradients_stay_on_the_frame_manifold():
    rng = np.random.default_rng(5)
    frames = np.linalg.qr(rng.normal(size=(10, 3, 3)))[0]
    tu, tv = frames[:, :, 0], frames[:, :, 1]
    g_tu, g_tv = project_tangent_gradients(tu, tv, rng.normal(size=(10, 3)), rng.normal(size=(10, 3)))
    np.testing.assert_allclose(np.einsum('ij,ij->i', tu, g_tu), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.einsum('ij,ij->i', tv, g_tv), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.einsum('ij,ij->i', tu, g_tv) + np.einsum('ij,ij->i', tv, g_tu), 0.0,
                               atol=1e-12)
