"""Semi-supervised training: one labeled and one unlabeled scene per step.

The labeled scene drives the vox-head term and the NeRF-head term at its
point coordinates. The unlabeled scene drives a third term whose form
depends on the mode:

    full         rendered pixel logits vs confidence-sampler pseudo-labels
    no-sam       rendered pixel logits vs entropy-filtered per-pixel argmax
    perspective  vox-head point logits vs segment labels found by projection
    sup-only     nothing (lambda forced to 0, no unlabeled scene)

Gradients are written out by hand and applied with SGD + momentum.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .backbone import backbone_apply, backbone_backward, init_backbone, neighbor_matrix, voxel_stats
from .evaluation import band_means, entropy_image, miou
from .geom import all_pixels, min_cover_pixels
from .grid import voxelize
from .heads import (NerfHead, VoxHead, init_nerf_head, init_vox_head, nerf_head_backward,
                    nerf_head_forward, point_logits, point_predictions, scatter_point_grads,
                    vox_head_backward, vox_head_forward)
from .backbone import MiniVoxNet
from .loss import LossWeights, term_loss, total_loss
from .pseudo import confidence_sampler, nosam_pseudolabels, perspective_baseline, pixel_targets
from .render import render_bundle, render_bundle_backward
from .scene import IGNORE
from .weights import load_weights, save_weights

MODES = ("full", "sup-only", "perspective", "no-sam")
PIXEL_SAMPLING = ("cover", "all")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. In key=value files ``lam`` is spelled ``lambda``."""
    mode: str = "full"
    seed: int = 0
    epochs: int = 10
    steps_per_epoch: int = 40
    lr: float = 1e-2
    momentum: float = 0.9
    labeled_fraction: float = 0.1
    n_features: int = 16
    n_hidden: int = 32
    head_hidden: int = 64
    kappa: float = 0.5
    density_bias: float = -2.0
    n_samples: int = 458
    near: float = 2.3
    far: float = 50.0
    pixel_sampling: str = "cover"
    beta: float = 0.5
    gamma0: float = 1.0
    lam: float = 0.1
    mu: float = 3.0
    nu: float = 1.0
    entropy_threshold: float = 1.6
    threads: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.pixel_sampling not in PIXEL_SAMPLING:
            raise ValueError(f"pixel_sampling must be one of {', '.join(PIXEL_SAMPLING)}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if self.n_samples < 1 or not 0.0 < self.near < self.far:
            raise ValueError("need n_samples >= 1 and 0 < near < far")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def loss_weights(self):
        lam = 0.0 if self.mode == "sup-only" else self.lam
        return LossWeights(self.beta, self.gamma0, lam, self.mu, self.nu,
                           self.entropy_threshold, self.epochs)


def train_config_from_mapping(mapping, base=None):
    mapping = dict(mapping)
    if "lam" in mapping:
        raise cfgmod.ConfigError("unknown config key 'lam' (use 'lambda')")
    if "lambda" in mapping:
        mapping["lam"] = mapping.pop("lambda")
    try:
        return cfgmod.dataclass_from_mapping(TrainConfig, mapping, base)
    except cfgmod.ConfigError:
        raise
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None


def train_config_to_mapping(config):
    m = cfgmod.dataclass_to_mapping(config)
    return {("lambda" if k == "lam" else k): v for k, v in m.items()}


@dataclass
class Model:
    backbone: MiniVoxNet
    vox_head: VoxHead
    nerf_head: NerfHead = None

    def named(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out["backbone.kappa"] = np.array(self.backbone.kappa)
        out.update({f"vox.{k}": v for k, v in self.vox_head.params().items()})
        if self.nerf_head is not None:
            out.update({f"nerf.{k}": v for k, v in self.nerf_head.params().items()})
        return out

    def trainable(self):
        out = {k: v for k, v in self.named().items() if k != "backbone.kappa"}
        return out


def init_model(config, n_classes):
    rng = np.random.default_rng([int(config.seed), 5])
    backbone = init_backbone(rng, config.n_features, config.n_hidden, config.kappa)
    vox = init_vox_head(rng, config.n_features, n_classes)
    nerf = init_nerf_head(rng, config.n_features, n_classes, config.head_hidden, config.density_bias)
    return Model(backbone, vox, nerf)


def save_model(path, model):
    save_weights(path, model.named())


def load_model(path):
    """Model from a checkpoint; the NeRF head is optional (``None`` if absent)."""
    w = load_weights(path)
    try:
        backbone = MiniVoxNet(w["backbone.W1"], w["backbone.b1"], w["backbone.W2"], w["backbone.b2"],
                              float(np.ravel(w["backbone.kappa"])[0]))
        vox = VoxHead(w["vox.W"], w["vox.b"])
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks {exc.args[0]}") from None
    nerf = None
    if all(f"nerf.{k}" in w for k in ("W1", "b1", "W2", "b2")):
        nerf = NerfHead(w["nerf.W1"], w["nerf.b1"], w["nerf.W2"], w["nerf.b2"])
    return Model(backbone, vox, nerf)


@dataclass
class PreparedScene:
    """A scene plus everything about it that does not change during training."""
    record: object
    vox: object
    stats: np.ndarray
    mix: object
    pixels: np.ndarray
    labels: np.ndarray

    @property
    def camera(self):
        return self.record.camera


def prepare_scene(record, grid_res, grid_bounds, config, labeled=True):
    """Voxelise, pool statistics and pick the rendered pixels of one scene.

    With ``labeled=False`` the labels are replaced by IGNORE so nothing
    downstream can read them.
    """
    scan = record.scan
    vox = voxelize(scan.points, scan.intensity, grid_res, grid_bounds)
    if config.pixel_sampling == "cover":
        pixels = min_cover_pixels(record.camera, vox.grid, config.near, config.far, config.n_samples)
    else:
        pixels = all_pixels(record.camera)
    labels = scan.labels.astype(np.int64) if labeled else np.full(len(scan), IGNORE, dtype=np.int64)
    return PreparedScene(record, vox, voxel_stats(vox), neighbor_matrix(vox.grid),
                         np.asarray(pixels, dtype=np.int64).reshape(-1, 2), labels)


@dataclass
class TrainState:
    model: Model
    velocity: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class StepLog:
    total: float
    l3d_vox: float
    l3d_nerf: float
    l_unlabeled: float
    n_pseudo: int


def _add(grads, prefix, g):
    for k, v in g.items():
        name = f"{prefix}.{k}"
        grads[name] = grads[name] + v if name in grads else v.copy()


def _labeled_terms(model, scene, weights, epoch, grads):
    """Vox-head and NeRF-head 3D terms on a labeled scene; fills ``grads``."""
    feats, cache = backbone_apply(model.backbone, scene.stats, scene.mix)
    dfeats = np.zeros_like(feats)
    rows = scene.vox.point_rows
    targets = np.where(rows >= 0, scene.labels, IGNORE)
    l3v = l3n = 0.0
    if weights.beta > 0:
        cell_logits = vox_head_forward(model.vox_head, feats)
        pl, _ = point_logits(cell_logits, rows)
        l3v, dpl = term_loss(pl, targets, weights.mu, weights.nu, return_grad=True)
        dcell = scatter_point_grads(weights.beta * dpl, rows, len(feats))
        g, df = vox_head_backward(model.vox_head, feats, dcell)
        _add(grads, "vox", g)
        dfeats += df
    gamma = weights.gamma(epoch)
    if gamma > 0:
        grid = scene.vox.grid.with_features(feats)
        x, crow, cw = grid.sample(scene.vox.points, return_weights=True)
        logits, _, hc = nerf_head_forward(model.nerf_head, x)
        l3n, dlog = term_loss(logits, targets, weights.mu, weights.nu, return_grad=True)
        g, dx = nerf_head_backward(model.nerf_head, hc, gamma * dlog, np.zeros(len(x)))
        _add(grads, "nerf", g)
        grid.sample_backward(crow, cw, dx, out=dfeats)
    _add(grads, "backbone", backbone_backward(model.backbone, cache, dfeats))
    return l3v, l3n


def pseudo_pixel_labels(mode, bundle, masks, threshold):
    """(height, width) pixel pseudo-labels for the 2D modes."""
    if mode == "full":
        return confidence_sampler(bundle.pixels, bundle.y_p, masks, threshold)[1]
    if mode == "no-sam":
        return nosam_pseudolabels(bundle.pixels, bundle.y_p, threshold, masks.width, masks.height)
    raise ValueError(f"mode {mode!r} has no pixel pseudo-labels")


def _unlabeled_terms(model, scene, weights, config, grads):
    feats, cache = backbone_apply(model.backbone, scene.stats, scene.mix)
    lam = weights.lam
    masks = scene.record.masks
    if config.mode == "perspective":
        rows = scene.vox.point_rows
        cell_logits = vox_head_forward(model.vox_head, feats)
        preds = point_predictions(cell_logits, rows)
        plabels, _ = perspective_baseline(scene.vox.points, scene.camera, preds, masks,
                                          model.vox_head.n_classes)
        targets = np.where(rows >= 0, plabels, IGNORE)
        n_pseudo = int((targets != IGNORE).sum())
        pl, _ = point_logits(cell_logits, rows)
        loss, dpl = term_loss(pl, targets, weights.mu, weights.nu, return_grad=True)
        if n_pseudo:
            dcell = scatter_point_grads(lam * dpl, rows, len(feats))
            g, dfeats = vox_head_backward(model.vox_head, feats, dcell)
            _add(grads, "vox", g)
            _add(grads, "backbone", backbone_backward(model.backbone, cache, dfeats))
        return loss, n_pseudo
    grid = scene.vox.grid.with_features(feats)
    bundle = render_bundle(scene.camera, grid, model.nerf_head, scene.pixels, config.n_samples,
                           config.near, config.far, keep_samples=True, threads=config.threads)
    labels = pseudo_pixel_labels(config.mode, bundle, masks, weights.entropy_threshold)
    targets = pixel_targets(labels, bundle.pixels)
    n_pseudo = int((targets != IGNORE).sum())
    loss, dlp = term_loss(bundle.l_p, targets, weights.mu, weights.nu, return_grad=True)
    if n_pseudo:
        hg, dfeats = render_bundle_backward(bundle, grid, model.nerf_head, lam * dlp)
        _add(grads, "nerf", hg)
        _add(grads, "backbone", backbone_backward(model.backbone, cache, dfeats))
    return loss, n_pseudo


def compute_gradients(model, labeled, unlabeled, weights, epoch, config):
    """Loss breakdown and gradients of the weighted total w.r.t. every trainable array."""
    if config.mode == "sup-only":
        if unlabeled is not None:
            raise ValueError("sup-only mode takes no unlabeled scene")
    elif unlabeled is None:
        raise ValueError(f"mode {config.mode!r} needs an unlabeled scene")
    grads = {}
    l3v, l3n = _labeled_terms(model, labeled, weights, epoch, grads)
    lu, n_pseudo = 0.0, 0
    if unlabeled is not None and weights.lam > 0:
        lu, n_pseudo = _unlabeled_terms(model, unlabeled, weights, config, grads)
    for name, p in model.trainable().items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    total = total_loss(l3v, l3n, lu, weights, epoch)
    return StepLog(float(total), float(l3v), float(l3n), float(lu), n_pseudo), grads


def train_step(state, labeled, unlabeled, weights, epoch, config):
    """One SGD-with-momentum update (in place); returns ``(state, StepLog)``."""
    log, grads = compute_gradients(state.model, labeled, unlabeled, weights, epoch, config)
    for name, p in state.model.trainable().items():
        v = state.velocity.get(name)
        v = grads[name] if v is None else config.momentum * v + grads[name]
        state.velocity[name] = v
        p -= config.lr * v
    state.step += 1
    return state, log


def choose_labeled(n_scenes, fraction, seed):
    """Sorted indices of the labeled subset (at least one scene)."""
    n_lab = max(1, int(round(fraction * n_scenes)))
    rng = np.random.default_rng([int(seed), 3])
    return np.sort(rng.choice(n_scenes, size=n_lab, replace=False))


class _Cycler:
    """Endless stream of indices, reshuffled every pass."""

    def __init__(self, n, rng):
        self.n, self.rng, self.order, self.pos = n, rng, None, n

    def next(self):
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        self.pos += 1
        return int(self.order[self.pos - 1])


@dataclass
class EpochLog:
    epoch: int
    total: float
    l3d_vox: float
    l3d_nerf: float
    l_unlabeled: float
    pseudo_per_step: float


def train(config, labeled, unlabeled, n_classes, on_epoch=None):
    """Run the full schedule; returns ``(state, [EpochLog])``.

    ``on_epoch(epoch, state)`` is called after each epoch (checkpointing).
    """
    if not labeled:
        raise ValueError("need at least one labeled scene")
    if config.mode != "sup-only" and not unlabeled:
        raise ValueError(f"mode {config.mode!r} needs unlabeled scenes")
    weights = config.loss_weights()
    state = TrainState(init_model(config, n_classes))
    rng = np.random.default_rng([int(config.seed), 4])
    lab = _Cycler(len(labeled), rng)
    unl = _Cycler(len(unlabeled), rng) if config.mode != "sup-only" else None
    history = []
    for epoch in range(config.epochs):
        logs = []
        for _ in range(config.steps_per_epoch):
            u = unlabeled[unl.next()] if unl is not None else None
            state, log = train_step(state, labeled[lab.next()], u, weights, epoch, config)
            logs.append(log)
        history.append(EpochLog(epoch, *(float(np.mean([getattr(x, k) for x in logs]))
                                         for k in ("total", "l3d_vox", "l3d_nerf", "l_unlabeled",
                                                   "n_pseudo"))))
        if on_epoch is not None:
            on_epoch(epoch, state)
    return state, history


def predict_points(backbone, vox_head, scene):
    """Uni-modal inference: backbone + vox head only."""
    feats, _ = backbone_apply(backbone, scene.stats, scene.mix)
    return point_predictions(vox_head_forward(vox_head, feats), scene.vox.point_rows)


def evaluate(backbone, vox_head, scenes, n_classes):
    """Per-class IoU and mIoU over all points of ``scenes``."""
    preds = np.concatenate([predict_points(backbone, vox_head, s) for s in scenes])
    targets = np.concatenate([s.record.scan.labels.astype(np.int64) for s in scenes])
    return miou(preds, targets, n_classes)


def render_scene(model, scene, config, pixels=None):
    """Render the given (default: all) pixels of a scene with the NeRF head."""
    if model.nerf_head is None:
        raise ValueError("model has no NeRF head")
    feats, _ = backbone_apply(model.backbone, scene.stats, scene.mix)
    grid = scene.vox.grid.with_features(feats)
    pixels = all_pixels(scene.camera) if pixels is None else pixels
    return render_bundle(scene.camera, grid, model.nerf_head, pixels, config.n_samples,
                         config.near, config.far, keep_samples=False, threads=config.threads)


def entropy_boundary(model, scenes, config, band_width=2):
    """Per-scene (boundary-band, interior) mean rendered-pixel entropy."""
    out = []
    for s in scenes:
        bundle = render_scene(model, s, config)
        cam = s.camera
        ent = entropy_image(bundle.pixels, bundle.y_p, cam.width, cam.height)
        out.append(band_means(ent, s.record.image, band_width))
    return np.array(out)


@dataclass
class ExperimentResult:
    config: TrainConfig
    labeled_idx: np.ndarray
    history: list
    iou: np.ndarray
    miou: float
    model: Model


def run_experiment(config, train_records, test_records, grid_res, grid_bounds, n_classes,
                   on_epoch=None, prepared=None):
    """Split, train and evaluate one (mode, seed); deterministic per config.

    ``prepared`` may carry ``(train_scenes, test_scenes)`` prepared with
    :func:`prepare_scene` for every training record (labels kept) to avoid
    recomputation across runs; unlabeled scenes have their labels masked here.
    """
    idx = choose_labeled(len(train_records), config.labeled_fraction, config.seed)
    is_lab = np.zeros(len(train_records), dtype=bool)
    is_lab[idx] = True
    if prepared is None:
        train_sc = [prepare_scene(r, grid_res, grid_bounds, config) for r in train_records]
        test_sc = [prepare_scene(r, grid_res, grid_bounds, config) for r in test_records]
    else:
        train_sc, test_sc = prepared
    labeled = [train_sc[i] for i in idx]
    unlabeled = [dataclasses.replace(train_sc[i], labels=np.full_like(train_sc[i].labels, IGNORE))
                 for i in np.flatnonzero(~is_lab)]
    state, history = train(config, labeled, unlabeled, n_classes, on_epoch)
    model = state.model
    iou, m = evaluate(model.backbone, model.vox_head, test_sc, n_classes)
    return ExperimentResult(config, idx, history, iou, m, model)


def format_report(results, n_classes):
    """ASCII table: mode, split, seed, per-class IoU, mIoU; then epoch losses."""
    head = f"{'mode':<12} {'split':>6} {'seed':>5} " + " ".join(f"{'iou_' + str(c):>7}" for c in range(n_classes))
    lines = [head + f" {'miou':>7}"]
    for r in results:
        ious = " ".join(f"{'nan':>7}" if np.isnan(v) else f"{v:7.4f}" for v in r.iou)
        lines.append(f"{r.config.mode:<12} {r.config.labeled_fraction:6.3f} {r.config.seed:5d} "
                     f"{ious} {r.miou:7.4f}")
    lines.append("")
    lines.append(f"{'mode':<12} {'seed':>5} {'epoch':>5} {'total':>9} {'l3d_vox':>9} {'l3d_nerf':>9} "
                 f"{'l_unlab':>9} {'pseudo':>8}")
    for r in results:
        for e in r.history:
            lines.append(f"{r.config.mode:<12} {r.config.seed:5d} {e.epoch:5d} {e.total:9.5f} "
                         f"{e.l3d_vox:9.5f} {e.l3d_nerf:9.5f} {e.l_unlabeled:9.5f} "
                         f"{e.pseudo_per_step:8.1f}")
    return "\n".join(lines) + "\n"
