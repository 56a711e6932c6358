import numpy as np
import pytest

from sfkit import voxelizer as vx
from sfkit.errors import InvalidConfig, NumericError, ShapeError
from sfkit.pointcloud import PointCloud
from sfkit.weights import MlpWeights


def small_grid():
    return vx.VoxelGrid(origin=(0.0, 0.0, 0.0), cell_size=1.0, extents=(10, 10, 10))


def random_cloud(rng, n, lo=0.0, hi=10.0):
    return PointCloud(rng.uniform(lo, hi, (n, 3)))


# --- grid / assignment ---------------------------------------------------------


def test_grid_validation():
    with pytest.raises(InvalidConfig):
        vx.VoxelGrid(cell_size=0.0)
    with pytest.raises(InvalidConfig):
        vx.VoxelGrid(extents=(0, 4, 4))
    with pytest.raises(InvalidConfig):
        vx.VoxelGrid(extents=(1 << 21, 4, 4))


def test_point_at_voxel_center_has_zero_offset():
    res = vx.voxelize(PointCloud([[2.5, 3.5, 4.5]]), small_grid())
    assert np.allclose(res.offsets, 0.0, atol=1e-12)
    assert np.array_equal(res.voxel_coords, [[2, 3, 4]])


def test_two_points_share_a_voxel():
    res = vx.voxelize(PointCloud([[1.2, 1.2, 1.2], [1.8, 1.9, 1.1]]), small_grid())
    assert res.n_voxels == 1
    assert np.array_equal(res.points_in_voxel(0), [0, 1])
    assert np.array_equal(res.assignment, [0, 0])


def test_out_of_bounds_points_flagged_not_dropped():
    res = vx.voxelize(PointCloud([[5.0, 5.0, 5.0], [-3.0, 5.0, 5.0]]), small_grid())
    assert res.assignment[0] == 0
    assert res.assignment[1] == vx.OUT_OF_BOUNDS
    assert np.all(res.offsets[1] == 0.0)
    assert res.n_points == 2


def test_grouping_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 1000, lo=-2.0, hi=12.0)  # some points out of bounds
    grid = small_grid()
    res = vx.voxelize(cloud, grid)

    # oracle: pairwise comparison of floor-divided coordinates
    floors = np.floor((cloud.points - np.asarray(grid.origin)) / grid.cell_size)
    inb = np.all((floors >= 0) & (floors < np.asarray(grid.extents)), axis=1)
    for i in range(res.n_points):
        assert inb[i] == (res.assignment[i] != vx.OUT_OF_BOUNDS)
    same_cell = lambda i, j: np.array_equal(floors[i], floors[j])
    idx = rng.choice(np.flatnonzero(inb), size=(200, 2))
    for i, j in idx:
        assert same_cell(i, j) == (res.assignment[i] == res.assignment[j])


def test_every_in_bounds_point_in_exactly_one_voxel():
    rng = np.random.default_rng(1)
    res = vx.voxelize(random_cloud(rng, 500), small_grid())
    seen = np.concatenate([res.points_in_voxel(v) for v in range(res.n_voxels)])
    assert sorted(seen) == sorted(np.flatnonzero(res.in_bounds))


def test_translation_consistency():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0.0, 10.0, (300, 3))
    delta = np.array([3.7, -1.3, 0.9])
    grid_a = small_grid()
    grid_b = vx.VoxelGrid(origin=tuple(np.asarray(grid_a.origin) + delta),
                          cell_size=1.0, extents=(10, 10, 10))
    res_a = vx.voxelize(PointCloud(pts), grid_a)
    res_b = vx.voxelize(PointCloud(pts + delta), grid_b)
    assert np.array_equal(res_a.assignment, res_b.assignment)
    assert np.allclose(res_a.offsets, res_b.offsets, atol=1e-12)


def test_offsets_bounded():
    rng = np.random.default_rng(3)
    res = vx.voxelize(random_cloud(rng, 2000), small_grid())
    assert np.max(np.abs(res.offsets[res.in_bounds])) <= 1.0 + 1e-12


# --- point features --------------------------------------------------------------


def test_zero_weights_give_zero_features():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    out = vx.encode_point_features(cloud, MlpWeights.zeros(3, 4, 4))
    assert np.array_equal(out, np.zeros((1, 4)))


def test_hand_computed_feature():
    # first layer passes coordinates through (identity-ish), second layer sums
    w = MlpWeights(
        w1=np.eye(3, 4),
        b1=np.zeros(4),
        w2=np.ones((4, 2)),
        b2=np.zeros(2),
    )
    out = vx.encode_point_features(PointCloud([[1.0, -2.0, 3.0]]), w)
    # hidden = relu([1, -2, 3, 0]) = [1, 0, 3, 0]; each output = 1 + 0 + 3 + 0
    assert np.allclose(out, [[4.0, 4.0]])


def test_row_wise_permutation_equivariance():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(20, 3))
    w = MlpWeights.seeded(3, 8, 8, rng)
    perm = rng.permutation(20)
    a = vx.encode_point_features(PointCloud(pts), w)
    b = vx.encode_point_features(PointCloud(pts[perm]), w)
    assert np.array_equal(a[perm], b)


def test_encoder_shape_mismatch():
    with pytest.raises(ShapeError):
        vx.encode_point_features(PointCloud([[0, 0, 0]]), MlpWeights.zeros(5, 4, 4))


def test_seeded_encoding_deterministic():
    cloud = PointCloud([[0.5, 0.5, 0.5]])
    a = vx.encode_point_features(cloud, seed=9)
    b = vx.encode_point_features(cloud, seed=9)
    assert np.array_equal(a, b)


# --- pooling / devoxelization ----------------------------------------------------


def test_pool_singletons_is_identity():
    cloud = PointCloud([[0.5, 0.5, 0.5], [3.5, 3.5, 3.5]])
    res = vx.voxelize(cloud, small_grid())
    feats = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(vx.pool_to_voxels(feats, res), feats)


def test_pool_mean_of_equal_features():
    cloud = PointCloud([[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]])
    res = vx.voxelize(cloud, small_grid())
    feats = np.array([[2.0, -1.0], [2.0, -1.0]])
    assert np.array_equal(vx.pool_to_voxels(feats, res), [[2.0, -1.0]])


def test_pool_matches_naive_loop():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 400, lo=-1.0, hi=11.0)
    res = vx.voxelize(cloud, small_grid())
    feats = rng.normal(size=(400, 6))
    pooled = vx.pool_to_voxels(feats, res)
    for v in range(res.n_voxels):
        members = res.points_in_voxel(v)
        expect = feats[members].mean(axis=0)
        assert np.max(np.abs(pooled[v] - expect)) < 1e-12


def test_devoxelize_copies_per_voxel():
    cloud = PointCloud([[1.1, 1.1, 1.1], [1.9, 1.9, 1.9], [5.5, 5.5, 5.5]])
    res = vx.voxelize(cloud, small_grid())
    vf = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = vx.devoxelize_coarse(vf, res)
    assert np.array_equal(out[0], out[1])  # co-voxel points identical
    assert not np.array_equal(out[0], out[2])


def test_pool_then_devoxelize_identity_for_singletons():
    rng = np.random.default_rng(6)
    pts = np.stack(np.meshgrid(*[np.arange(4) + 0.5] * 3, indexing="ij"), -1).reshape(-1, 3)
    res = vx.voxelize(PointCloud(pts), small_grid())
    feats = rng.normal(size=(len(pts), 5))
    assert np.allclose(
        vx.devoxelize_coarse(vx.pool_to_voxels(feats, res), res), feats, atol=1e-14
    )


def test_pool_devoxelize_idempotent_on_voxel_features():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 200)
    res = vx.voxelize(cloud, small_grid())
    vf = rng.normal(size=(res.n_voxels, 4))
    again = vx.pool_to_voxels(vx.devoxelize_coarse(vf, res), res)
    assert np.allclose(again, vf, atol=1e-12)


def test_devoxelize_matches_gather_loop():
    rng = np.random.default_rng(8)
    cloud = random_cloud(rng, 300, lo=-1.0, hi=11.0)
    res = vx.voxelize(cloud, small_grid())
    vf = rng.normal(size=(res.n_voxels, 3))
    out = vx.devoxelize_coarse(vf, res)
    for i in range(res.n_points):
        if res.assignment[i] == vx.OUT_OF_BOUNDS:
            assert np.array_equal(out[i], np.zeros(3))
        else:
            assert np.array_equal(out[i], vf[res.assignment[i]])


def test_pool_shape_mismatch():
    res = vx.voxelize(PointCloud([[0.5, 0.5, 0.5]]), small_grid())
    with pytest.raises(ShapeError):
        vx.pool_to_voxels(np.zeros((3, 2)), res)
    with pytest.raises(ShapeError):
        vx.devoxelize_coarse(np.zeros((5, 2)), res)


# --- temporal stacking -----------------------------------------------------------


def _frame_results(rng, grid, counts):
    results, feats = [], []
    for n in counts:
        res = vx.voxelize(PointCloud(rng.uniform(0, 10, (n, 3))), grid)
        results.append(res)
        feats.append(rng.normal(size=(res.n_voxels, 4)))
    return results, feats


def test_stack_single_occupied_frame():
    rng = np.random.default_rng(9)
    grid = small_grid()
    results, feats = _frame_results(rng, grid, [0, 5, 0])
    tensor = vx.stack_temporal(results, feats)
    assert np.all(tensor.coords[:, 0] == 1)


def test_stack_key_count_is_sum_of_frames():
    rng = np.random.default_rng(10)
    results, feats = _frame_results(rng, small_grid(), [50, 80, 20, 60, 10])
    tensor = vx.stack_temporal(results, feats)
    assert tensor.n_active == sum(r.n_voxels for r in results)


def test_stack_lookup_matches_source():
    rng = np.random.default_rng(11)
    results, feats = _frame_results(rng, small_grid(), [30, 40, 25])
    tensor = vx.stack_temporal(results, feats)
    for tau in range(3):
        v = rng.integers(0, results[tau].n_voxels)
        key = np.concatenate(([tau], results[tau].voxel_coords[v]))
        assert np.array_equal(tensor.feature_at(key), feats[tau][v])


def test_stack_rejects_mismatched_channels_and_grids():
    rng = np.random.default_rng(12)
    results, feats = _frame_results(rng, small_grid(), [10, 10])
    feats[1] = rng.normal(size=(results[1].n_voxels, 7))
    with pytest.raises(ShapeError):
        vx.stack_temporal(results, feats)

    other = vx.VoxelGrid(origin=(0, 0, 0), cell_size=0.5, extents=(10, 10, 10))
    res_other = vx.voxelize(PointCloud(rng.uniform(0, 4, (10, 3))), other)
    with pytest.raises(ShapeError):
        vx.stack_temporal(
            [results[0], res_other],
            [np.zeros((results[0].n_voxels, 4)), np.zeros((res_other.n_voxels, 4))],
        )


# --- sparse tensor container ------------------------------------------------------


def test_sparse_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        vx.SparseTensor4D(np.zeros((1, 4), dtype=int), np.array([[np.inf, 0.0]]))


def test_sparse_tensor_rejects_duplicates():
    coords = np.array([[0, 1, 2, 3], [0, 1, 2, 3]])
    with pytest.raises(ShapeError):
        vx.SparseTensor4D(coords, np.zeros((2, 2)))


def test_sparse_tensor_lookup():
    coords = np.array([[0, 5, 5, 5], [1, 2, 3, 4], [0, 0, 0, 0]])
    feats = np.arange(6.0).reshape(3, 2)
    tensor = vx.SparseTensor4D(coords, feats)
    idx, found = tensor.lookup(np.array([[1, 2, 3, 4], [2, 2, 3, 4], [0, 0, 0, 0]]))
    assert list(found) == [True, False, True]
    assert np.array_equal(tensor.features[idx[0]], feats[1])
    assert np.array_equal(tensor.features[idx[2]], feats[2])
