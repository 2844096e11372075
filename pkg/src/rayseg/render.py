"""Volumetric rendering of per-pixel semantics through a voxel feature grid.

Each camera ray is sampled at M mid-bin distances between ``near`` and
``far``; the features interpolated there go through the NeRF head, and the
per-sample logits are alpha-composited into pixel logits:

    alpha_m = 1 - exp(-sigma_m * delta_m)
    T_m     = prod_{j<m} (1 - alpha_j)
    l_p     = sum_m T_m * alpha_m * l_m,   y_p = softmax(l_p)
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .geom import pixel_rays, sample_distances
from .heads import nerf_head_backward, nerf_head_forward

DEFAULT_SAMPLES = 458
DEFAULT_NEAR = 2.3
DEFAULT_FAR = 50.0


def compute_alpha_T(densities, deltas):
    """Opacities and transmittances along the last axis.

    Also returns the transmittance past the last sample, ``T_{M+1}``.
    """
    s = np.asarray(densities, dtype=np.float64) * np.asarray(deltas, dtype=np.float64)
    keep = np.exp(-s)
    alpha = -np.expm1(-s)
    cum = np.cumprod(keep, axis=-1)
    trans = np.concatenate([np.ones(s.shape[:-1] + (1,)), cum[..., :-1]], axis=-1)
    return alpha, trans, cum[..., -1]


def render_pixel(alphas, transmittances, logits):
    """Composite per-sample logits (..., M, C) into pixel logits and probabilities."""
    weights = transmittances * alphas
    l_p = np.einsum("...m,...mc->...c", weights, logits)
    return l_p, softmax(l_p, axis=-1)


def render_backward(alphas, transmittances, deltas, logits, dl_p):
    """Gradients of a loss w.r.t. per-sample logits and densities.

    ``dl_p`` is the upstream gradient on the composited logits (..., C).
    Writing ``s_m = sigma_m * delta_m``, the weight ``w_m = T_m - T_{m+1}``
    gives ``dw_m/ds_m = T_{m+1}`` and ``dw_m/ds_k = -w_m`` for ``k < m``.
    """
    if alphas is None:
        raise ValueError("render_backward needs the forward quantities")
    weights = transmittances * alphas
    dlogits = weights[..., None] * dl_p[..., None, :]
    dw = np.einsum("...mc,...c->...m", logits, dl_p)
    t_next = transmittances * (1.0 - alphas)
    dww = dw * weights
    later = np.cumsum(dww[..., ::-1], axis=-1)[..., ::-1] - dww
    ds = dw * t_next - later
    return dlogits, ds * deltas


@dataclass
class _Chunk:
    start: int
    stop: int
    nonzero: np.ndarray
    rows: np.ndarray
    corner_w: np.ndarray
    head_cache: object
    zero_cache: object


@dataclass
class RayBundle:
    """Rendered rays. Per-sample arrays are (P, M[, C]); pixel arrays (P[, C])."""
    pixels: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    l_p: np.ndarray
    y_p: np.ndarray
    alpha: np.ndarray = None
    trans: np.ndarray = None
    trans_end: np.ndarray = None
    logits: np.ndarray = None
    density: np.ndarray = None
    chunks: list = field(default_factory=list)

    @property
    def argmax(self):
        return self.y_p.argmax(axis=1)

    @property
    def n_rays(self):
        return len(self.pixels)


def _render_chunk(grid, head, origins, dirs, t, delta, start, stop, keep):
    P, M = stop - start, len(t)
    pts = origins[start:stop, None, :] + t[None, :, None] * dirs[start:stop, None, :]
    pts = pts.reshape(-1, 3)
    rows, cw = grid.corner_weights(pts)
    nonzero = np.flatnonzero(((rows >= 0) & (cw > 0)).any(axis=1))
    padded = np.vstack([grid.features, np.zeros((1, grid.n_features))])
    feats = np.einsum("nk,nkf->nf", cw[nonzero], padded[rows[nonzero]])
    C = head.n_classes
    logits = np.empty((P * M, C))
    density = np.empty(P * M)
    # every empty-space sample shares the head output at the zero feature
    z_logits, z_density, z_cache = nerf_head_forward(head, np.zeros((1, grid.n_features)))
    logits[:] = z_logits[0]
    density[:] = z_density[0]
    nz_logits, nz_density, nz_cache = nerf_head_forward(head, feats)
    logits[nonzero] = nz_logits
    density[nonzero] = nz_density
    logits = logits.reshape(P, M, C)
    density = density.reshape(P, M)
    alpha, trans, trans_end = compute_alpha_T(density, delta)
    l_p, y_p = render_pixel(alpha, trans, logits)
    chunk = None
    if keep:
        chunk = _Chunk(start, stop, nonzero, rows[nonzero], cw[nonzero], nz_cache, z_cache)
    return l_p, y_p, alpha, trans, trans_end, logits, density, chunk


def render_bundle(cam, grid, head, pixels, n_samples=DEFAULT_SAMPLES, near=DEFAULT_NEAR,
                  far=DEFAULT_FAR, keep_samples=True, chunk_size=256, threads=1):
    """Render pixel semantics for the given (u, v) pixels.

    With ``keep_samples=False`` only pixel outputs are kept (no backward).
    Chunks are fixed by ``chunk_size`` and reassembled in order, so results
    do not depend on ``threads``.
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    origins, dirs = pixel_rays(cam, pixels) if len(pixels) else (np.zeros((0, 3)), np.zeros((0, 3)))
    t, delta = sample_distances(near, far, n_samples)
    bounds = [(s, min(s + chunk_size, len(pixels))) for s in range(0, len(pixels), chunk_size)]

    def work(b):
        return _render_chunk(grid, head, origins, dirs, t, delta, b[0], b[1], keep_samples)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    C = head.n_classes

    def cat(i, shape):
        return np.concatenate([p[i] for p in parts]) if parts else np.zeros(shape)

    bundle = RayBundle(pixels, origins, dirs, t, delta, cat(0, (0, C)), cat(1, (0, C)))
    if keep_samples:
        bundle.alpha = cat(2, (0, n_samples))
        bundle.trans = cat(3, (0, n_samples))
        bundle.trans_end = cat(4, (0,))
        bundle.logits = cat(5, (0, n_samples, C))
        bundle.density = cat(6, (0, n_samples))
        bundle.chunks = [p[7] for p in parts]
    return bundle


def render_bundle_backward(bundle, grid, head, dl_p):
    """Back-propagate an upstream gradient on ``bundle.l_p``.

    Returns ``(head_grads, grid_feature_grads)``; chunks are reduced in
    their fixed order.
    """
    if bundle.alpha is None:
        raise ValueError("bundle was rendered without keep_samples; no cache for backward")
    head_grads = {k: np.zeros_like(v) for k, v in head.params().items()}
    dfeat = np.zeros_like(grid.features)
    C = head.n_classes
    for ch in bundle.chunks:
        sl = slice(ch.start, ch.stop)
        dlogits, dsigma = render_backward(bundle.alpha[sl], bundle.trans[sl], bundle.delta,
                                          bundle.logits[sl], dl_p[sl])
        dlogits = dlogits.reshape(-1, C)
        dsigma = dsigma.reshape(-1)
        zero = np.ones(len(dsigma), dtype=bool)
        zero[ch.nonzero] = False
        g, dx = nerf_head_backward(head, ch.head_cache, dlogits[ch.nonzero], dsigma[ch.nonzero])
        gz, _ = nerf_head_backward(head, ch.zero_cache, dlogits[zero].sum(axis=0, keepdims=True),
                                   dsigma[zero].sum(keepdims=True))
        for k in head_grads:
            head_grads[k] += g[k] + gz[k]
        grid.sample_backward(ch.rows, ch.corner_w, dx, out=dfeat)
    return head_grads, dfeat
