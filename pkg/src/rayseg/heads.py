"""Prediction heads on top of voxel features.

``VoxHead`` is the per-voxel linear classifier used at inference time.
``NerfHead`` maps an interpolated feature to C semantic logits and a
density through a 2-layer ReLU MLP; the density channel goes through a
truncated exponential.
"""

from dataclasses import dataclass

import numpy as np

from .scene import IGNORE

TRUNC_MAX = 15.0


def trunc_exp(x):
    return np.exp(np.minimum(x, TRUNC_MAX))


def trunc_exp_grad(x):
    # hard truncation: no gradient at or past the clamp
    return np.where(x < TRUNC_MAX, np.exp(np.minimum(x, TRUNC_MAX)), 0.0)


@dataclass
class NerfHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_classes(self):
        return self.W2.shape[0] - 1

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class VoxHead:
    W: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self):
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}


def init_nerf_head(rng, n_features, n_classes, n_hidden=64, density_bias=-2.0):
    b2 = np.zeros(n_classes + 1)
    b2[-1] = density_bias
    return NerfHead(
        rng.normal(0.0, np.sqrt(2.0 / n_features), (n_hidden, n_features)),
        np.zeros(n_hidden),
        rng.normal(0.0, np.sqrt(1.0 / n_hidden), (n_classes + 1, n_hidden)),
        b2,
    )


def init_vox_head(rng, n_features, n_classes):
    return VoxHead(rng.normal(0.0, np.sqrt(1.0 / n_features), (n_classes, n_features)),
                   np.zeros(n_classes))


@dataclass
class NerfCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    raw_density: np.ndarray


def nerf_head_forward(head, feats):
    """Logits (N, C), densities (N,) and a cache for the backward pass.

    A single F-vector may be passed; outputs then drop the batch axis.
    """
    x = np.asarray(feats, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    pre = x @ head.W1.T + head.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ head.W2.T + head.b2
    logits, raw = out[:, :-1], out[:, -1]
    density = trunc_exp(raw)
    cache = NerfCache(x, pre, hidden, raw)
    if single:
        return logits[0], float(density[0]), cache
    return logits, density, cache


def nerf_head_backward(head, cache, dlogits, ddensity):
    """Returns ``(param_grads, dfeats)``."""
    dlogits = np.atleast_2d(dlogits)
    dout = np.column_stack([dlogits, np.atleast_1d(ddensity) * trunc_exp_grad(cache.raw_density)])
    dhidden = dout @ head.W2
    dpre = dhidden * (cache.pre > 0)
    grads = {
        "W1": dpre.T @ cache.x,
        "b1": dpre.sum(axis=0),
        "W2": dout.T @ cache.hidden,
        "b2": dout.sum(axis=0),
    }
    return grads, dpre @ head.W1


def vox_head_forward(head, feats):
    """Per-cell logits (n_occupied, C)."""
    return feats @ head.W.T + head.b


def vox_head_backward(head, feats, dlogits):
    """Returns ``(param_grads, dfeats)``."""
    return {"W": dlogits.T @ feats, "b": dlogits.sum(axis=0)}, dlogits @ head.W


def point_logits(cell_logits, point_rows):
    """Gather each point's containing-cell logits.

    Returns ``(logits, valid)``; rows of out-of-bounds points are zero and
    ``valid`` is False for them.
    """
    valid = point_rows >= 0
    out = np.zeros((len(point_rows), cell_logits.shape[1]))
    out[valid] = cell_logits[point_rows[valid]]
    return out, valid


def point_predictions(cell_logits, point_rows):
    """Argmax class per point, IGNORE for points outside the grid."""
    logits, valid = point_logits(cell_logits, point_rows)
    return np.where(valid, logits.argmax(axis=1), IGNORE).astype(np.int64)


def scatter_point_grads(dpoint_logits, point_rows, n_cells):
    """Sum point-logit gradients into their cells (fixed reduction order)."""
    valid = point_rows >= 0
    C = dpoint_logits.shape[1]
    rows = point_rows[valid]
    return np.stack([np.bincount(rows, dpoint_logits[valid, c], n_cells) for c in range(C)], axis=1)
