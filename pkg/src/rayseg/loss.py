"""Cross-entropy, Lovasz-softmax, entropy and their weighted combination."""

from dataclasses import dataclass

import numpy as np
from scipy.special import entr, log_softmax, softmax

from .scene import IGNORE


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5
    gamma0: float = 1.0
    lam: float = 0.1
    mu: float = 3.0
    nu: float = 1.0
    entropy_threshold: float = 1.6
    epochs: int = 10

    def __post_init__(self):
        if min(self.beta, self.gamma0, self.lam, self.mu, self.nu, self.entropy_threshold) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def gamma(self, epoch):
        """Linear decay from ``gamma0`` at epoch 0 to 0 at the final epoch."""
        return self.gamma0 * max(0.0, 1.0 - epoch / self.epochs)


def _valid(targets, n_classes):
    targets = np.asarray(targets).astype(np.int64)
    return targets, (targets != IGNORE) & (targets >= 0) & (targets < n_classes)


def cross_entropy(logits, targets, return_grad=False):
    """Mean ``-log softmax(logits)[target]`` over non-IGNORE rows.

    A single C-vector with a scalar target is accepted too.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    targets, valid = _valid(np.atleast_1d(targets), logits.shape[1])
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        value = 0.0
    else:
        rows = np.flatnonzero(valid)
        logp = log_softmax(logits[rows], axis=1)
        value = float(-logp[np.arange(n), targets[rows]].sum() / n)
        if return_grad:
            g = np.exp(logp)
            g[np.arange(n), targets[rows]] -= 1.0
            grad[rows] = g / n
    if not return_grad:
        return value
    return value, (grad[0] if single else grad)


def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, targets, return_grad=False):
    """Lovasz-softmax loss averaged over the classes present in ``targets``."""
    probs = np.asarray(probs, dtype=np.float64)
    C = probs.shape[1]
    targets, valid = _valid(targets, C)
    grad = np.zeros_like(probs)
    rows = np.flatnonzero(valid)
    present = [c for c in range(C) if np.any(targets[rows] == c)]
    if not present:
        return (0.0, grad) if return_grad else 0.0
    total = 0.0
    for c in present:
        fg = (targets[rows] == c).astype(np.float64)
        err = np.abs(fg - probs[rows, c])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(err[order] @ g)
        if return_grad:
            d_err = np.empty_like(err)
            d_err[order] = g
            grad[rows, c] += d_err * np.where(fg > 0, -1.0, 1.0)
    value = total / len(present)
    if return_grad:
        return value, grad / len(present)
    return value


def entropy(probs, axis=-1):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    return entr(np.asarray(probs, dtype=np.float64)).sum(axis=axis)


def term_loss(logits, targets, mu=3.0, nu=1.0, return_grad=False):
    """``mu * CE + nu * Lovasz`` on logits; the gradient is w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    probs = softmax(logits, axis=1)
    if not return_grad:
        return mu * cross_entropy(logits, targets) + nu * lovasz_softmax(probs, targets)
    ce, dce = cross_entropy(logits, targets, return_grad=True)
    lv, dprob = lovasz_softmax(probs, targets, return_grad=True)
    dlv = probs * (dprob - (dprob * probs).sum(axis=1, keepdims=True))
    return mu * ce + nu * lv, mu * dce + nu * dlv


def total_loss(l_3d_vox, l_3d_nerf, l_2d_nerf, weights, epoch):
    if epoch > weights.epochs:
        raise ValueError("epoch past the schedule end")
    return weights.beta * l_3d_vox + weights.gamma(epoch) * l_3d_nerf + weights.lam * l_2d_nerf
