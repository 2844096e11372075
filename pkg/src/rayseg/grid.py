"""Sparse cylindrical voxel grid with trilinear feature sampling.

Cells are indexed ``(radial, angular, height)`` and flattened as
``(i_r * A + i_a) * H + i_h``. Interpolation works in continuous index
space where the centre of cell ``i`` sits at coordinate ``i``; the angular
axis wraps between ``A - 1`` and ``0``. Unoccupied corners carry a zero
feature, and queries outside the radial/height bounds return zeros.
"""

import struct
from dataclasses import dataclass

import numpy as np

GRID_MAGIC = b"CGRD"
GRID_VERSION = 1

# corner order for the 8-neighbourhood: bit 2 radial, bit 1 angular, bit 0 height
_CORNERS = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)])


class CylGrid:
    """Occupied cells of a cylindrical grid and their feature vectors.

    Parameters
    ----------
    res : (R, A, H) cell counts.
    bounds : (r_min, r_max, z_min, z_max) in metres; azimuth covers the full circle.
    cells : sorted flat indices of occupied cells.
    features : (len(cells), F) array, one row per occupied cell.
    """

    def __init__(self, res, bounds, cells, features=None):
        self.res = tuple(int(x) for x in res)
        self.bounds = tuple(float(x) for x in bounds)
        R, A, H = self.res
        if min(self.res) < 2:
            raise ValueError("every grid axis needs at least 2 cells")
        r_min, r_max, z_min, z_max = self.bounds
        if r_min < 0 or r_max <= r_min or z_max <= z_min:
            raise ValueError(f"invalid grid bounds {bounds}")
        cells = np.asarray(cells, dtype=np.int64)
        if cells.size and (np.any(np.diff(cells) <= 0) or cells[0] < 0 or cells[-1] >= R * A * H):
            raise ValueError("cells must be sorted, unique and inside the grid")
        self.cells = cells
        if features is None:
            features = np.zeros((len(cells), 1))
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(cells) or features.shape[1] < 1:
            raise ValueError("features must be (n_occupied, F) with F >= 1")
        self.features = features
        self.cell_size = ((r_max - r_min) / R, 2 * np.pi / A, (z_max - z_min) / H)

    @property
    def n_occupied(self):
        return len(self.cells)

    @property
    def n_features(self):
        return self.features.shape[1]

    def rows_of(self, flat):
        """Occupied-cell row of each flat index, ``-1`` for empty cells."""
        flat = np.asarray(flat, dtype=np.int64)
        if not len(self.cells):
            return np.full(flat.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.cells, flat), len(self.cells) - 1)
        return np.where(self.cells[pos] == flat, pos, -1)

    def with_features(self, features):
        out = CylGrid.__new__(CylGrid)
        out.__dict__.update(self.__dict__)
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != self.n_occupied:
            raise ValueError("feature rows must match occupied cells")
        out.features = features
        return out

    def unravel(self, flat):
        R, A, H = self.res
        flat = np.asarray(flat)
        return np.stack([flat // (A * H), (flat // H) % A, flat % H], axis=-1)

    def ravel(self, idx):
        R, A, H = self.res
        idx = np.asarray(idx)
        return (idx[..., 0] * A + idx[..., 1]) * H + idx[..., 2]

    def continuous_index(self, points):
        """(N, 3) continuous cell coordinates plus an in-bounds mask."""
        points = np.asarray(points, dtype=np.float64)
        r_min, r_max, z_min, z_max = self.bounds
        dr, da, dz = self.cell_size
        r = np.hypot(points[:, 0], points[:, 1])
        theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)
        z = points[:, 2]
        inside = (r >= r_min) & (r < r_max) & (z >= z_min) & (z < z_max)
        idx = np.stack([(r - r_min) / dr, theta / da, (z - z_min) / dz], axis=1)
        return idx, inside

    def cell_of(self, points):
        """Flat cell index per point (lower-inclusive bins), ``-1`` out of bounds."""
        idx, inside = self.continuous_index(points)
        cell = np.floor(idx).astype(np.int64)
        # theta can round to exactly 2*pi
        cell = np.minimum(cell, np.array(self.res) - 1)
        flat = self.ravel(cell)
        return np.where(inside, flat, -1)

    def cell_centers(self, flat=None):
        """Cartesian centres of the given flat cells (default: occupied cells)."""
        flat = self.cells if flat is None else np.asarray(flat)
        idx = self.unravel(flat) + 0.5
        r_min, _, z_min, _ = self.bounds
        dr, da, dz = self.cell_size
        r = r_min + idx[:, 0] * dr
        theta = idx[:, 1] * da
        z = z_min + idx[:, 2] * dz
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)

    def corner_weights(self, points):
        """Rows (``-1`` = empty) and trilinear weights of the 8 corners per point.

        Weights of in-bounds queries sum to 1 including empty corners;
        out-of-bounds queries get all-zero weights.
        """
        R, A, H = self.res
        idx, inside = self.continuous_index(points)
        u = idx - 0.5
        base = np.floor(u)
        frac = u - base
        base = base.astype(np.int64)
        ci = base[:, None, :] + _CORNERS[None, :, :]
        w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
        ci[..., 1] %= A
        valid = (ci[..., 0] >= 0) & (ci[..., 0] < R) & (ci[..., 2] >= 0) & (ci[..., 2] < H)
        flat = self.ravel(np.where(valid[..., None], ci, 0))
        rows = np.where(valid, self.rows_of(flat), -1)
        w = np.where(inside[:, None], w, 0.0)
        rows = np.where(inside[:, None], rows, -1)
        return rows, w

    def sample(self, points, return_weights=False):
        """Trilinearly interpolated features at (N, 3) points."""
        rows, w = self.corner_weights(points)
        padded = np.vstack([self.features, np.zeros((1, self.n_features))])
        feats = np.einsum("nk,nkf->nf", w, padded[rows])
        if return_weights:
            return feats, rows, w
        return feats

    def sample_backward(self, rows, weights, upstream, out=None):
        """Accumulate ``weight * upstream`` into per-cell gradients.

        ``rows``/``weights`` come from :meth:`corner_weights`; accumulation is
        sequential (``np.add.at``) so the reduction order is fixed.
        """
        if out is None:
            out = np.zeros_like(self.features)
        contrib = weights[:, :, None] * upstream[:, None, :]
        mask = rows >= 0
        np.add.at(out, rows[mask], contrib[mask])
        return out


def sample_trilinear(grid, p):
    return grid.sample(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def sample_trilinear_backward(grid, p, upstream_grad, out=None):
    rows, w = grid.corner_weights(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return grid.sample_backward(rows, w, np.asarray(upstream_grad, dtype=np.float64).reshape(1, -1), out)


@dataclass
class Voxelization:
    """A scan binned into a grid.

    ``point_rows[i]`` is the occupied-cell row of point ``i`` or ``-1`` when
    the point fell outside the grid bounds.
    """
    grid: CylGrid
    points: np.ndarray
    intensity: np.ndarray
    point_rows: np.ndarray
    n_dropped: int

    def points_of(self, row):
        return np.flatnonzero(self.point_rows == row)


def voxelize(points, intensity, res, bounds):
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("cannot voxelize an empty scan")
    proto = CylGrid(res, bounds, np.zeros(0, dtype=np.int64))
    flat = proto.cell_of(points)
    keep = flat >= 0
    cells, inverse = np.unique(flat[keep], return_inverse=True)
    grid = CylGrid(res, bounds, cells)
    point_rows = np.full(len(points), -1, dtype=np.int64)
    point_rows[keep] = inverse
    return Voxelization(grid, points, np.asarray(intensity, dtype=np.float64), point_rows,
                        int((~keep).sum()))


def save_grid(path, grid):
    R, A, H = grid.res
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<IIIII", GRID_VERSION, R, A, H, grid.n_features))
        f.write(struct.pack("<4d", *grid.bounds))
        f.write(struct.pack("<I", grid.n_occupied))
        rec = np.zeros(grid.n_occupied, dtype=[("cell", "<u4"), ("f", "<f4", (grid.n_features,))])
        rec["cell"] = grid.cells
        rec["f"] = grid.features
        f.write(rec.tobytes())


def load_grid(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid checkpoint")
    version, R, A, H, F = struct.unpack_from("<IIIII", data, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    bounds = struct.unpack_from("<4d", data, 24)
    (n,) = struct.unpack_from("<I", data, 56)
    rec = np.frombuffer(data, dtype=[("cell", "<u4"), ("f", "<f4", (F,))], count=n, offset=60)
    return CylGrid((R, A, H), bounds, rec["cell"].astype(np.int64), rec["f"].astype(np.float64))
