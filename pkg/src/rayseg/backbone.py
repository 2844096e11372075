"""Per-voxel backbone: pooled point statistics -> 2-layer MLP -> neighbour mix.

For every occupied cell the network sees eight pooled statistics of its
points, computed in the cell's local index space so they are scale free:

    [2 * mean offset from cell centre (3), 12 * variance (3),
     mean intensity, log point count]

A two-layer ReLU MLP maps them to an F-dim vector ``g``; the output feature
is ``(1 - kappa) * g + kappa * mean(g over occupied 6-neighbours)``. A cell
without occupied neighbours uses its own ``g`` for the neighbour mean.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

STATS_DIM = 8


@dataclass
class MiniVoxNet:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    kappa: float = 0.5

    def __post_init__(self):
        if self.W1.shape[1] != STATS_DIM or self.W1.shape[0] < 4:
            raise ValueError("W1 must be (F_h >= 4, 8)")
        if self.W2.shape[1] != self.W1.shape[0]:
            raise ValueError("W2 columns must match W1 rows")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")

    @property
    def n_features(self):
        return self.W2.shape[0]

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_backbone(rng, n_features=16, n_hidden=32, kappa=0.5):
    return MiniVoxNet(
        rng.normal(0.0, np.sqrt(2.0 / STATS_DIM), (n_hidden, STATS_DIM)),
        np.zeros(n_hidden),
        rng.normal(0.0, np.sqrt(2.0 / n_hidden), (n_features, n_hidden)),
        np.zeros(n_features),
        kappa,
    )


def voxel_stats(vox):
    """(n_occupied, 8) pooled statistics of a :class:`~rayseg.grid.Voxelization`."""
    grid = vox.grid
    keep = vox.point_rows >= 0
    rows = vox.point_rows[keep]
    n = grid.n_occupied
    idx, _ = grid.continuous_index(vox.points[keep])
    local = idx - np.floor(idx) - 0.5
    count = np.bincount(rows, minlength=n).astype(np.float64)
    safe = np.maximum(count, 1.0)
    mean = np.stack([np.bincount(rows, local[:, k], n) for k in range(3)], axis=1) / safe[:, None]
    sq = np.stack([np.bincount(rows, local[:, k] ** 2, n) for k in range(3)], axis=1) / safe[:, None]
    var = np.maximum(sq - mean ** 2, 0.0)
    inten = np.bincount(rows, vox.intensity[keep], n) / safe
    return np.column_stack([2.0 * mean, 12.0 * var, inten, np.log(safe)])


def neighbor_matrix(grid):
    """Row-normalised 6-neighbour averaging operator over occupied cells.

    Angular neighbours wrap; radial and height neighbours stop at the
    boundary. Isolated cells average over themselves.
    """
    R, A, H = grid.res
    n = grid.n_occupied
    idx = grid.unravel(grid.cells)
    src, dst = [], []
    for axis, step in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)):
        nb = idx.copy()
        nb[:, axis] += step
        if axis == 1:
            nb[:, 1] %= A
            ok = np.ones(n, dtype=bool)
        else:
            lim = R if axis == 0 else H
            ok = (nb[:, axis] >= 0) & (nb[:, axis] < lim)
        rows = np.full(n, -1, dtype=np.int64)
        rows[ok] = grid.rows_of(grid.ravel(nb[ok]))
        hit = rows >= 0
        src.append(np.flatnonzero(hit))
        dst.append(rows[hit])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    deg = np.bincount(src, minlength=n)
    lonely = np.flatnonzero(deg == 0)
    src = np.concatenate([src, lonely])
    dst = np.concatenate([dst, lonely])
    deg = np.maximum(deg, 1)
    vals = 1.0 / deg[src]
    return sp.csr_matrix((vals, (src, dst)), shape=(n, n))


@dataclass
class BackboneCache:
    stats: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    mix: sp.csr_matrix


def backbone_forward(net, vox):
    """Per-cell features for a voxelised scan; returns ``(features, cache)``."""
    return backbone_apply(net, voxel_stats(vox), neighbor_matrix(vox.grid))


def backbone_apply(net, stats, mix):
    """As :func:`backbone_forward` with precomputed statistics and neighbour operator."""
    pre = stats @ net.W1.T + net.b1
    hidden = np.maximum(pre, 0.0)
    g = hidden @ net.W2.T + net.b2
    feats = (1.0 - net.kappa) * g + net.kappa * (mix @ g)
    return feats, BackboneCache(stats, pre, hidden, mix)


def backbone_backward(net, cache, dfeats):
    """Weight gradients given the upstream gradient on the output features."""
    if cache is None:
        raise ValueError("backbone_backward needs the cache from backbone_forward")
    dg = (1.0 - net.kappa) * dfeats + net.kappa * (cache.mix.T @ dfeats)
    dhidden = dg @ net.W2
    dpre = dhidden * (cache.pre > 0)
    return {
        "W1": dpre.T @ cache.stats,
        "b1": dpre.sum(axis=0),
        "W2": dg.T @ cache.hidden,
        "b2": dg.sum(axis=0),
    }
