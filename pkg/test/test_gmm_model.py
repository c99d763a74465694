import numpy as np
import pytest

from conftest import plane_component
from surfelmap.core.errors import GmmFormatError, MapFrozenError
from surfelmap.core.gmm_model import (_HEADER, COMPONENT_DTYPE, GmmComponent4D, GmmMap, GmmParams, PlaneFrame, RansacConfig,
                                      deserialize, effective_points, extract_planes, fit_local_gmm, fit_mixture,
                                      integrate_frame, load_map, log_likelihood, save_map, serialize, to_world,
                                      voxel_key, voxelize)
from surfelmap.core.pointcloud_io import CameraModel, FrameCloud, PointCloud

LOG_2PI = np.log(2.0 * np.pi)


def test_voxel_key_floor_convention():
    assert voxel_key((0.1, 0.1, 0.1), 1.0) == (0, 0, 0)
    assert voxel_key((-0.1, 0.0, 0.0), 1.0) == (-1, 0, 0)
    assert voxel_key((2.5, -2.5, 0.99), 0.5) == (5, -5, 1)


def test_voxelize_counts():
    pts = np.random.default_rng(0).uniform(0.0, 2.0, size=(10000, 3))
    buckets = voxelize(pts, 1.0)
    assert len(buckets) == 8
    assert sum(len(idx) for idx in buckets.values()) == 10000


def test_ransac_single_plane_with_outliers():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0, 1, (500, 2)), np.zeros(500)])
    outliers = np.column_stack([rng.uniform(0, 1, (5, 2)), np.ones(5)])
    planes, residual = extract_planes(np.vstack([pts, outliers]), RansacConfig(), seed=0)
    assert len(planes) == 1
    frame, inliers = planes[0]
    assert len(inliers) == 500
    assert abs(abs(frame.normal[2]) - 1.0) < 1e-9
    np.testing.assert_array_equal(np.sort(residual), np.arange(500, 505))
    assert np.linalg.det(frame.rotation) == pytest.approx(1.0)


def test_ransac_two_walls():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.1, 1.0, (300, 2))
    b = rng.uniform(0.1, 1.0, (300, 2))
    wall_x = np.column_stack([np.zeros(300), a])
    wall_y = np.column_stack([b[:, 0], np.zeros(300), b[:, 1]])
    planes, residual = extract_planes(np.vstack([wall_x, wall_y]), RansacConfig(), seed=0)
    assert len(planes) == 2
    assert sorted(len(idx) for _, idx in planes) == [300, 300]
    assert len(residual) == 0


def test_ransac_collinear_points_give_no_plane():
    pts = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
    planes, residual = extract_planes(pts, RansacConfig(min_inliers=5), seed=0)
    assert planes == []
    assert len(residual) == 10
    assert PlaneFrame.from_points(pts) is None


def test_local_fit_single_cluster():
    rng = np.random.default_rng(3)
    uv = rng.normal(0.0, 0.05, size=(400, 2)) + [0.3, -0.2]
    pts = np.column_stack([uv, np.zeros(400), np.full(400, 0.5)])
    comps = fit_local_gmm(pts, bandwidth=(0.15, 0.15))
    assert len(comps) == 1
    c = comps[0]
    assert c.weight == pytest.approx(1.0)
    tol = 3.0 * uv.std(axis=0) / np.sqrt(len(uv))
    assert np.all(np.abs(c.mean[:2] - uv.mean(axis=0)) <= tol)
    assert c.mean[2] == 0.0
    assert np.all(c.cov[2, :] == 0.0) and np.all(c.cov[:, 2] == 0.0)


def test_local_fit_separates_gray_levels():
    rng = np.random.default_rng(4)
    uv = rng.uniform(-0.5, 0.5, size=(600, 2))
    gray = np.where(uv[:, 0] < 0, 0.1, 0.9)
    pts = np.column_stack([uv, np.zeros(600), gray])
    comps = fit_local_gmm(pts, bandwidth=(0.15, 0.15))
    assert len(comps) >= 2
    means = np.array([c.mean[3] for c in comps])
    assert means.min() < 0.3 and means.max() > 0.7
    assert sum(c.weight for c in comps) == pytest.approx(1.0)


def test_local_fit_requires_flat_points():
    with pytest.raises(ValueError):
        fit_local_gmm(np.array([[0.0, 0.0, 0.1, 0.5]] * 10))


def test_em_log_likelihood_is_non_decreasing():
    rng = np.random.default_rng(5)
    x = np.vstack([rng.normal([0, 0, 0], 0.1, (200, 3)), rng.normal([1, 1, 0.5], 0.2, (200, 3))])
    fit = fit_mixture(x, (0.3, 0.3, 0.3))
    hist = np.array(fit.log_likelihoods)
    assert len(hist) >= 2
    assert np.all(np.diff(hist) >= -1e-8 * np.abs(hist[:-1]))


def test_to_world_identity_and_translation():
    comp = GmmComponent4D(1.0, [0.2, 0.0, 0.0, 0.5], np.diag([0.04, 0.01, 0.0, 0.01]))
    same = to_world(comp, PlaneFrame(np.zeros(3), np.eye(3), np.zeros(3)))
    np.testing.assert_allclose(same.mean, comp.mean)
    np.testing.assert_allclose(same.cov, comp.cov)
    moved = to_world(comp, PlaneFrame(np.array([1.0, 0.0, 0.0]), np.eye(3), np.zeros(3)))
    np.testing.assert_allclose(moved.mean, [1.2, 0.0, 0.0, 0.5])


def test_to_world_preserves_spatial_eigenvalues():
    rng = np.random.default_rng(6)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    comp = GmmComponent4D(1.0, [0.1, 0.2, 0.0, 0.4], np.diag([0.05, 0.02, 0.0, 0.01]))
    world = to_world(comp, PlaneFrame(rng.normal(size=3), q, np.zeros(3)))
    np.testing.assert_allclose(world.eigenvalues, comp.eigenvalues, atol=1e-10)


def _isotropic_map():
    cov = np.eye(4)
    cov[3, 3] = 0.01
    gmm_map = GmmMap(1.0)
    gmm_map.add(GmmComponent4D(1.0, [0.0, 0.0, 0.0, 0.5], cov))
    return gmm_map.freeze()


def test_log_likelihood_closed_form():
    gmm_map = _isotropic_map()
    assert log_likelihood(gmm_map, (0.0, 0.0, 0.0)) == pytest.approx(-1.5 * LOG_2PI)
    assert log_likelihood(gmm_map, (0.5, 0.0, 0.0)) == pytest.approx(-1.5 * LOG_2PI - 0.125)
    assert log_likelihood(gmm_map, (10.0, 10.0, 10.0)) == -np.inf


def test_effective_points_cold_start_and_decay():
    pts = np.array([[0.2, 0.2, 0.2], [1.2, 0.2, 0.2], [7.0, 7.0, 7.0]])
    f_new, f_low = effective_points(GmmMap(2.0), pts)
    np.testing.assert_array_equal(f_new, [0, 1, 2])
    assert len(f_low) == 0

    gmm_map = GmmMap(2.0)
    gmm_map.add(plane_component((0.2, 0.2, 0.2), (0.0, 0.0, 1.0), spread=(0.01, 0.01)))
    gmm_map.voxel_counts[(0, 0, 0)] = 100
    f_new, f_low = effective_points(gmm_map, pts)
    np.testing.assert_array_equal(f_new, [2])
    np.testing.assert_array_equal(f_low, [1])


def _floor_frame(offset=(0.0, 0.0), frame_id=0, n=2000, seed=0):
    rng = np.random.default_rng(seed)
    uv = rng.uniform(0.0, 2.0, size=(n, 2))
    pts = np.column_stack([uv + offset, np.zeros(n)])
    checker = (np.floor(uv[:, 0] / 0.5) + np.floor(uv[:, 1] / 0.5)) % 2
    rgb = np.where(checker[:, None] == 0, 0.2, 0.8) * np.ones((1, 3))
    center = np.array([offset[0] + 1.0, offset[1] + 1.0, 3.0])
    rot = np.diag([1.0, -1.0, -1.0])
    cam = CameraModel.from_rotation(100.0, 100.0, 50.0, 50.0, 100, 100, rot, -rot @ center)
    return FrameCloud(frame_id, PointCloud(pts, rgb), cam, np.arange(n))


def test_integrate_frame_builds_plane_components():
    gmm_map = GmmMap(1.0)
    report = integrate_frame(gmm_map, _floor_frame(), GmmParams())
    assert report.new_components == len(gmm_map) > 0
    assert report.points_consumed == 2000
    for comp in gmm_map.components:
        assert abs(comp.normal[2]) == pytest.approx(1.0, abs=1e-6)
        assert comp.normal[2] > 0
        assert comp.eigenvalues[0] < 1e-6
        assert comp.weight > 0
    for key, idx in gmm_map.hash.items():
        for i in idx:
            assert voxel_key(gmm_map.components[i].spatial_mean, 1.0) == key


@pytest.mark.parametrize('plane_constraint', [True, False])
def test_voxel_weights_sum_to_one(plane_constraint):
    gmm_map = GmmMap(1.0)
    report = integrate_frame(gmm_map, _floor_frame(), GmmParams(plane_constraint=plane_constraint))
    assert report.new_components > 0
    for idx in gmm_map.hash.values():
        assert sum(gmm_map.components[i].weight for i in idx) == pytest.approx(1.0)


def test_integrating_the_same_frame_twice_adds_little():
    gmm_map = GmmMap(1.0)
    frame = _floor_frame()
    integrate_frame(gmm_map, frame)
    second = integrate_frame(gmm_map, frame)
    assert second.points_consumed < 0.05 * len(frame.points)


def test_disjoint_frames_add_up():
    a, b = _floor_frame(), _floor_frame(offset=(10.0, 0.0), frame_id=1, seed=1)
    only_a, only_b, both = GmmMap(1.0), GmmMap(1.0), GmmMap(1.0)
    integrate_frame(only_a, a)
    integrate_frame(only_b, b)
    integrate_frame(both, a)
    integrate_frame(both, b)
    assert len(both) == len(only_a) + len(only_b)


def test_thread_count_does_not_change_the_map():
    one, four = GmmMap(1.0), GmmMap(1.0)
    integrate_frame(one, _floor_frame(), GmmParams(threads=1))
    integrate_frame(four, _floor_frame(), GmmParams(threads=4))
    assert serialize(one) == serialize(four)


def test_frozen_map_rejects_insertions():
    gmm_map = _isotropic_map()
    with pytest.raises(MapFrozenError):
        gmm_map.add(plane_component((0, 0, 0), (0, 0, 1)))
    with pytest.raises(MapFrozenError):
        integrate_frame(gmm_map, _floor_frame())


def test_serialize_empty_map():
    blob = serialize(GmmMap(0.5))
    assert len(blob) == _HEADER.size
    back = deserialize(blob)
    assert len(back) == 0 and back.voxel_size == 0.5
    assert serialize(back) == blob


def test_serialize_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(7)
    gmm_map = GmmMap(1.0)
    for _ in range(200):
        comp = plane_component(rng.uniform(-3, 3, 3), rng.normal(size=3), weight=rng.uniform(0.1, 1.0))
        if rng.uniform() < 0.5:
            comp.normal = -comp.normal
        gmm_map.add(comp)
    gmm_map.voxel_counts = {(0, 0, 0): 12, (-1, 2, 0): 7}
    gmm_map.frame_count = 3
    blob = serialize(gmm_map)
    save_map(gmm_map, tmp_path / 'gmm.bin')
    back = load_map(tmp_path / 'gmm.bin')
    assert serialize(back) == blob
    assert back.frame_count == 3 and back.voxel_counts == gmm_map.voxel_counts
    np.testing.assert_allclose(back.arrays().normals, gmm_map.arrays().normals, atol=1e-6)


def test_deserialize_fails_closed():
    gmm_map = _isotropic_map()
    blob = serialize(gmm_map)
    with pytest.raises(GmmFormatError):
        deserialize(blob[:-3])
    with pytest.raises(GmmFormatError):
        deserialize(blob[:10])
    with pytest.raises(GmmFormatError):
        deserialize(b'XXXXXXXX' + blob[8:])
    with pytest.raises(GmmFormatError):
        deserialize(blob + b'\x00')


def test_deserialize_rejects_a_blob_cut_after_the_records():
    gmm_map = GmmMap(1.0)
    gmm_map.add(plane_component((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), weight=0.4))
    gmm_map.add(plane_component((2.0, 0.0, 0.0), (0.0, 1.0, 0.0), weight=0.6))
    gmm_map.frame_count = 3
    gmm_map.voxel_counts = {(0, 0, 0): 20}
    blob = serialize(gmm_map)
    with pytest.raises(GmmFormatError):
        deserialize(blob[:_HEADER.size + len(gmm_map) * COMPONENT_DTYPE.itemsize])
    back = deserialize(blob)
    assert back.frame_count == 3 and back.voxel_counts == {(0, 0, 0): 20}


def _corrupt_first_record(blob, field, value):
    records = np.frombuffer(blob, dtype=COMPONENT_DTYPE, count=1, offset=_HEADER.size).copy()
    records[field][0] = value
    return blob[:_HEADER.size] + records.tobytes() + blob[_HEADER.size + COMPONENT_DTYPE.itemsize:]


@pytest.mark.parametrize('field, value', [
    ('weight', np.nan),
    ('weight', -0.2),
    ('weight', 1.5),
    ('mean', [0.0, np.inf, 0.0, 0.5]),
    ('cov', [np.nan] * 10),
    ('cov', [-1.0, 0, 0, 0, 1.0, 0, 0, 1.0, 0, 0.01]),
])
def test_deserialize_rejects_bad_records(field, value):
    blob = _corrupt_first_record(serialize(_isotropic_map()), field, value)
    with pytest.raises(GmmFormatError, match='component 0'):
        deserialize(blob)
