"""Voxel grid construction, offset-preserving point assignment, feature
encoding, voxel pooling, coarse devoxelization, and temporal stacking.

Offsets are measured from the voxel center and normalized by half the cell
size, so every in-bounds point carries a conditioning vector in [-1, 1]^3.
Out-of-bounds points are flagged with a sentinel, never dropped.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NumericError, ShapeError
from .weights import MlpWeights

OUT_OF_BOUNDS = -1

DEFAULT_CELL_SIZE = 0.2
DEFAULT_EXTENTS = (102, 102, 32)
DEFAULT_ORIGIN = (-10.2, -10.2, -3.2)
DEFAULT_CHANNELS = 16

_AXIS_LIMIT = 1 << 21  # keeps voxel coords Morton-encodable


@dataclass(frozen=True)
class VoxelGrid:
    origin: tuple = DEFAULT_ORIGIN
    cell_size: float = DEFAULT_CELL_SIZE
    extents: tuple = DEFAULT_EXTENTS

    def __post_init__(self):
        if self.cell_size <= 0.0:
            raise InvalidConfig(f"cell_size must be positive, got {self.cell_size}")
        ext = np.asarray(self.extents)
        if ext.shape != (3,) or np.any(ext < 1):
            raise InvalidConfig(f"extents must be three integers >= 1, got {self.extents}")
        if np.any(ext >= _AXIS_LIMIT) or int(np.prod(ext.astype(object))) >= 1 << 63:
            raise InvalidConfig("grid too large: extents must fit 21 bits per axis")

    @property
    def shape(self):
        return tuple(int(e) for e in self.extents)

    def centers(self, coords):
        """World-space cell centers for (N, 3) integer voxel coordinates."""
        return np.asarray(self.origin) + (np.asarray(coords) + 0.5) * self.cell_size


class VoxelizationResult:
    """Per-point voxel assignment plus the occupied-voxel index structure.

    assignment[i] is the row of point i's voxel in voxel_coords, or
    OUT_OF_BOUNDS.  offsets[i] is the point's position relative to its voxel
    center in units of half a cell (zero for out-of-bounds points).
    """

    def __init__(self, grid, assignment, offsets, point_coords, voxel_coords):
        self.grid = grid
        self.assignment = assignment
        self.offsets = offsets
        self.point_coords = point_coords  # raw floor coords, may be out of range
        self.voxel_coords = voxel_coords  # (V, 3), occupied, lexicographic order
        in_bounds = assignment != OUT_OF_BOUNDS
        self.in_bounds = in_bounds
        order = np.argsort(assignment[in_bounds], kind="stable")
        members = np.flatnonzero(in_bounds)[order]
        counts = np.bincount(assignment[in_bounds], minlength=len(voxel_coords))
        self._indptr = np.concatenate(([0], np.cumsum(counts)))
        self._members = members

    @property
    def n_points(self):
        return len(self.assignment)

    @property
    def n_voxels(self):
        return len(self.voxel_coords)

    def points_in_voxel(self, v):
        """Original indices of the points assigned to occupied voxel v."""
        return self._members[self._indptr[v] : self._indptr[v + 1]]

    def clamped_coords(self):
        """Per-point voxel coords clipped into the grid (for serialization of
        out-of-bounds points, which carry zero features anyway)."""
        ext = np.asarray(self.grid.extents, dtype=np.int64)
        return np.clip(self.point_coords, 0, ext - 1)


def voxelize(cloud, grid):
    """Assign every point to its voxel and record the in-cell offset."""
    pts = cloud.points
    fcoords = np.floor((pts - np.asarray(grid.origin)) / grid.cell_size)
    ext = np.asarray(grid.extents, dtype=np.int64)
    # Bounds test in float space; clip before the int cast so far-away points
    # cannot overflow int64.
    in_bounds = np.all((fcoords >= 0) & (fcoords < ext), axis=1)
    coords = np.clip(fcoords, -(2.0**40), 2.0**40).astype(np.int64)

    offsets = np.zeros_like(pts)
    if np.any(in_bounds):
        centers = grid.centers(coords[in_bounds])
        offsets[in_bounds] = (pts[in_bounds] - centers) / (grid.cell_size / 2.0)

    # Linear index over the grid gives a deterministic (lexicographic) order
    # for the occupied-voxel list.
    linear = (coords[:, 0] * ext[1] + coords[:, 1]) * ext[2] + coords[:, 2]
    assignment = np.full(len(pts), OUT_OF_BOUNDS, dtype=np.int64)
    if np.any(in_bounds):
        uniq, inverse = np.unique(linear[in_bounds], return_inverse=True)
        assignment[in_bounds] = inverse
        vx, rem = np.divmod(uniq, ext[1] * ext[2])
        vy, vz = np.divmod(rem, ext[2])
        voxel_coords = np.stack([vx, vy, vz], axis=1)
    else:
        voxel_coords = np.empty((0, 3), dtype=np.int64)

    return VoxelizationResult(grid, assignment, offsets, coords, voxel_coords)


def encode_point_features(cloud, weights=None, seed=0, channels=DEFAULT_CHANNELS):
    """Per-point features from a two-layer MLP over raw coordinates.

    When no weights are given they are drawn from the seeded initializer, so
    the same (cloud, seed) pair always produces identical features.
    """
    if weights is None:
        weights = MlpWeights.seeded(3, channels, channels, np.random.default_rng(seed))
    if weights.n_in != 3:
        raise ShapeError(f"point encoder must take 3 inputs, got {weights.n_in}")
    return weights.apply(cloud.points)


def pool_to_voxels(point_features, result):
    """Mean of member-point features per occupied voxel."""
    feats = np.asarray(point_features, dtype=np.float64)
    if feats.shape[0] != result.n_points:
        raise ShapeError(
            f"{feats.shape[0]} feature rows vs {result.n_points} assigned points"
        )
    if result.n_voxels == 0:
        return np.empty((0, feats.shape[1] if feats.ndim == 2 else 0))
    sums = np.zeros((result.n_voxels, feats.shape[1]))
    np.add.at(sums, result.assignment[result.in_bounds], feats[result.in_bounds])
    counts = np.bincount(
        result.assignment[result.in_bounds], minlength=result.n_voxels
    )
    return sums / counts[:, None]


def devoxelize_coarse(voxel_features, result):
    """Copy each voxel's feature to its member points (out-of-bounds -> zero)."""
    vf = np.asarray(voxel_features, dtype=np.float64)
    if vf.shape[0] != result.n_voxels:
        raise ShapeError(f"{vf.shape[0]} voxel rows vs {result.n_voxels} occupied voxels")
    out = np.zeros((result.n_points, vf.shape[1]))
    out[result.in_bounds] = vf[result.assignment[result.in_bounds]]
    return out


class SparseTensor4D:
    """Map from (t, ix, iy, iz) keys to C-channel feature rows.

    Rows are stored in canonical (t, ix, iy, iz)-lexicographic order, which
    makes active-set comparison and deterministic iteration trivial.  Inserted
    features must be finite.
    """

    def __init__(self, coords, features, _canonical=False):
        coords = np.asarray(coords, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ShapeError(f"coords must be (N, 4), got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"features {features.shape} do not align with coords {coords.shape}"
            )
        if not np.all(np.isfinite(features)):
            bad = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
            raise NumericError("non-finite feature on insert", index=bad)
        if not _canonical:
            order = np.lexsort((coords[:, 3], coords[:, 2], coords[:, 1], coords[:, 0]))
            coords = coords[order]
            features = features[order]
            if len(coords) > 1 and np.any(np.all(np.diff(coords, axis=0) == 0, axis=1)):
                raise ShapeError("duplicate (t, ix, iy, iz) keys")
        self.coords = coords
        self.features = features
        self._packed = None
        self._span = None

    @property
    def n_active(self):
        return self.coords.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]

    def _packing(self):
        if self._packed is None:
            if self.n_active == 0:
                self._span = (np.zeros(4, np.int64), np.ones(4, np.int64))
                self._packed = np.empty(0, dtype=np.int64)
            else:
                lo = self.coords.min(axis=0)
                hi = self.coords.max(axis=0)
                self._span = (lo, hi - lo + 1)
                self._packed = self._pack(self.coords)
        return self._packed

    def _pack(self, coords):
        lo, size = self._span
        rel = coords - lo
        return ((rel[:, 0] * size[1] + rel[:, 1]) * size[2] + rel[:, 2]) * size[3] + rel[:, 3]

    def lookup(self, coords):
        """Row indices for (M, 4) query keys plus a found mask."""
        coords = np.asarray(coords, dtype=np.int64)
        packed = self._packing()
        if self.n_active == 0:
            return np.zeros(len(coords), np.int64), np.zeros(len(coords), bool)
        lo, size = self._span
        rel = coords - lo
        inside = np.all((rel >= 0) & (rel < size), axis=1)
        q = np.zeros(len(coords), dtype=np.int64)
        q[inside] = self._pack(coords[inside])
        idx = np.searchsorted(packed, q)
        idx_c = np.minimum(idx, len(packed) - 1)
        found = inside & (packed[idx_c] == q)
        return np.where(found, idx_c, 0), found

    def feature_at(self, key):
        idx, found = self.lookup(np.asarray(key, dtype=np.int64).reshape(1, 4))
        if not found[0]:
            raise KeyError(f"key {tuple(key)} not active")
        return self.features[idx[0]]

    def with_features(self, features):
        """Same active set (already canonical), new feature rows."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != self.n_active:
            raise ShapeError(
                f"{features.shape[0]} feature rows vs {self.n_active} active sites"
            )
        if not np.all(np.isfinite(features)):
            bad = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
            raise NumericError("non-finite feature on insert", index=bad)
        out = SparseTensor4D.__new__(SparseTensor4D)
        out.coords = self.coords
        out.features = features
        out._packed = self._packed
        out._span = self._span
        return out

    def same_active_set(self, other):
        return np.array_equal(self.coords, other.coords)

    def slice_time(self, t):
        """Coords (without the time column) and features of one time step."""
        sel = self.coords[:, 0] == t
        return self.coords[sel, 1:], self.features[sel]

    def to_dense(self, shape):
        """(nx, ny, nz, T, C) dense array with zeros at inactive sites."""
        nx, ny, nz, nt = shape
        dense = np.zeros((nx, ny, nz, nt, self.n_channels))
        t, x, y, z = (self.coords[:, i] for i in range(4))
        dense[x, y, z, t] = self.features
        return dense


def stack_temporal(results, voxel_features):
    """Concatenate per-frame voxel features along a leading time key.

    Every frame must share the grid and the channel count.  The output holds
    key (tau, v) exactly for the voxels occupied at frame tau.
    """
    if len(results) != len(voxel_features):
        raise ShapeError("one feature matrix per voxelization result required")
    if not results:
        raise ShapeError("need at least one frame")
    grid = results[0].grid
    channels = None
    coords_parts, feat_parts = [], []
    for tau, (res, feats) in enumerate(zip(results, voxel_features)):
        if res.grid != grid:
            raise ShapeError(f"frame {tau} uses a different voxel grid")
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] != res.n_voxels:
            raise ShapeError(
                f"frame {tau}: {feats.shape[0]} rows vs {res.n_voxels} voxels"
            )
        if channels is None:
            channels = feats.shape[1]
        elif feats.shape[1] != channels:
            raise ShapeError(
                f"frame {tau}: channel count {feats.shape[1]} != {channels}"
            )
        keys = np.empty((res.n_voxels, 4), dtype=np.int64)
        keys[:, 0] = tau
        keys[:, 1:] = res.voxel_coords
        coords_parts.append(keys)
        feat_parts.append(feats)
    return SparseTensor4D(np.vstack(coords_parts), np.vstack(feat_parts))
