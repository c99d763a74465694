import csv
import json

import numpy as np
import pytest

from conftest import frontal_surfels
from surfelmap.core.errors import EmptyInputError
from surfelmap.core.mesh_filter import (OrientedSamples, build_occupancy, eval_mesh_metrics, export_poisson_input,
                                        filter_samples, load_oriented_ply, sample_oriented_points, write_metrics)
from surfelmap.core.pointcloud_io import CameraModel


def test_samples_lie_on_the_rendered_surfel(camera):
    surfels = frontal_surfels([[0.0, 0.0, 2.0]], radii=5.0, opacity=1.0)
    samples = sample_oriented_points(surfels, [camera])
    assert len(samples) > 0
    np.testing.assert_allclose(samples.positions[:, 2], 2.0, atol=1e-4)
    np.testing.assert_allclose(samples.normals, np.tile([0.0, 0.0, -1.0], (len(samples), 1)), atol=1e-9)
    assert np.all(samples.view == 0)


def test_transparent_surfels_give_no_samples(camera):
    surfels = frontal_surfels([[0.0, 0.0, 2.0]], radii=5.0, opacity=0.3)
    assert len(sample_oriented_points(surfels, [camera])) == 0
    assert len(sample_oriented_points(surfels, [camera], silhouette_threshold=0.1)) > 0


def test_samples_from_two_views(camera):
    surfels = frontal_surfels([[0.0, 0.0, 2.0]], radii=0.6, opacity=1.0)
    shifted = CameraModel.from_rotation(20.0, 20.0, 12.0, 12.0, 25, 25, np.eye(3), [-0.5, 0.0, 0.0])
    one = sample_oriented_points(surfels, [camera])
    both = sample_oriented_points(surfels, [camera, shifted])
    assert len(both) > len(one)
    assert set(both.view.tolist()) == {0, 1}
    np.testing.assert_allclose(both.positions[:, 2], 2.0, atol=1e-4)


def test_single_point_occupies_a_dilated_block():
    occ = build_occupancy([[0.25, 0.25, 0.25]], 0.5, min_points=1)
    assert len(occ) == 27
    assert occ.contains([[0.9, -0.4, 0.6]])[0]
    assert not occ.contains([[1.1, 0.0, 0.0]])[0]
    assert len(build_occupancy([[0.25, 0.25, 0.25]], 0.5)) == 0
    assert len(build_occupancy(np.zeros((0, 3)), 0.5)) == 0
    with pytest.raises(ValueError):
        build_occupancy([[0.0, 0.0, 0.0]], 0.0)


def test_occupancy_of_a_floor():
    rng = np.random.default_rng(0)
    floor = np.column_stack([rng.uniform(-1.0, 1.0, (2000, 2)), np.zeros(2000)])
    plain = build_occupancy(floor, 0.5, dilate=False)
    assert {k[2] for k in plain.keys} == {0}
    assert len(plain) == 16
    dilated = build_occupancy(floor, 0.5)
    assert {k[2] for k in dilated.keys} == {-1, 0, 1}


def _floor_samples():
    positions = np.array([[0.1, 0.2, 0.0],      # on the floor
                          [-0.4, 0.3, 0.25],    # floating artifact inside the occupied block
                          [10.0, 10.0, 0.0]])   # far outside the LiDAR footprint
    return OrientedSamples(positions, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_coarse_to_fine_filtering(floor_map):
    rng = np.random.default_rng(1)
    occ = build_occupancy(np.column_stack([rng.uniform(-1.0, 1.0, (2000, 2)), np.zeros(2000)]), 0.5)
    samples = _floor_samples()

    kept, report = filter_samples(samples, occ, floor_map, fine_threshold=0.05)
    np.testing.assert_array_equal(kept.positions, samples.positions[:1])
    assert report.as_dict() == {'mode': 'coarse_to_fine', 'input': 3, 'coarse_removed': 1, 'fine_removed': 1,
                                'kept': 1}

    coarse, report = filter_samples(samples, occ, mode='coarse')
    assert len(coarse) == 2 and report.fine_removed == 0
    untouched, _ = filter_samples(samples, mode='none')
    assert len(untouched) == 3


def test_filter_argument_errors(floor_map):
    with pytest.raises(ValueError):
        filter_samples(_floor_samples(), mode='fine')
    with pytest.raises(ValueError):
        filter_samples(_floor_samples(), None, floor_map, mode='coarse')


def test_poisson_input_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    normals = rng.normal(size=(40, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    samples = OrientedSamples(rng.uniform(size=(40, 3)), normals, rng.integers(0, 5, 40))
    export_poisson_input(samples, tmp_path / 'samples.ply')
    back = load_oriented_ply(tmp_path / 'samples.ply')
    np.testing.assert_array_equal(back.positions, samples.positions)
    np.testing.assert_array_equal(back.normals, samples.normals)
    np.testing.assert_array_equal(back.view, samples.view)
    with pytest.raises(EmptyInputError):
        export_poisson_input(OrientedSamples.empty(), tmp_path / 'empty.ply')


def _grid(step=0.05):
    xs = np.arange(0.0, 1.0 + 1e-9, step)
    gx, gy = np.meshgrid(xs, xs)
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])


def test_mesh_metrics():
    ref = _grid()
    same = eval_mesh_metrics(ref, ref)
    assert same.accuracy == 0.0 and same.completeness == 0.0
    assert same.f1 == 1.0

    shifted = eval_mesh_metrics(ref + [0.0, 0.0, 0.1], ref, threshold=0.2).report()
    assert shifted['accuracy_cm'] == pytest.approx(10.0)
    assert shifted['completeness_cm'] == pytest.approx(10.0)
    assert shifted['chamfer_l1_cm'] == pytest.approx(10.0)
    assert shifted['f1'] == pytest.approx(100.0)

    strict = eval_mesh_metrics(ref + [0.0, 0.0, 0.1], ref, threshold=0.05)
    assert strict.precision == 0.0 and strict.f1 == 0.0
    with pytest.raises(EmptyInputError):
        eval_mesh_metrics(np.zeros((0, 3)), ref)


def test_write_metrics(tmp_path):
    write_metrics({'psnr': 31.5, 'f1': 88.25, 'views': 10}, tmp_path / 'm.json', tmp_path / 'm.csv')
    assert json.loads((tmp_path / 'm.json').read_text()) == {'psnr': 31.5, 'f1': 88.25, 'views': 10}
    with open(tmp_path / 'm.csv', newline='') as fh:
        rows = list(csv.reader(fh))
    assert rows == [['f1', 'psnr', 'views'], ['88.250000', '31.500000', '10']]
