"""Metrics, image dumps and the camera-offset (parallax) diagnostic."""

import dataclasses
import os

import numpy as np
from scipy import ndimage

from .geom import all_pixels, project_points
from .grid import voxelize
from .heads import NerfHead
from .loss import entropy
from .pnm import write_pgm, write_ppm
from .pseudo import confidence_sampler, oracle_masks, perspective_baseline
from .render import DEFAULT_FAR, DEFAULT_NEAR, DEFAULT_SAMPLES, render_bundle
from .scene import IGNORE, LidarPattern, SceneConfig, generate_scene, render_label_image, simulate_lidar

PALETTE = np.array([
    [128, 64, 128], [70, 70, 70], [0, 0, 142], [220, 20, 60], [153, 153, 153],
    [107, 142, 35], [250, 170, 30], [220, 220, 0], [152, 251, 152], [70, 130, 180],
    [255, 0, 0], [0, 60, 100], [0, 80, 100], [0, 0, 230], [119, 11, 32],
    [244, 35, 232], [190, 153, 153], [102, 102, 156], [0, 0, 70],
], dtype=np.uint8)
CORRECT_RGB = np.array([56, 77, 143], dtype=np.uint8)
WRONG_RGB = np.array([227, 138, 43], dtype=np.uint8)


def confusion_matrix(preds, targets, n_classes):
    """C x C counts (rows = target, cols = prediction) over non-IGNORE targets.

    Pairs whose prediction is not a valid class are left out of the matrix
    but still count as misses in :func:`miou`.
    """
    preds = np.asarray(preds).astype(np.int64)
    targets = np.asarray(targets).astype(np.int64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    ok = (targets != IGNORE) & (targets >= 0) & (targets < n_classes)
    ok &= (preds >= 0) & (preds < n_classes)
    idx = targets[ok] * n_classes + preds[ok]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(preds, targets, n_classes):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    preds = np.asarray(preds).astype(np.int64)
    targets = np.asarray(targets).astype(np.int64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    conf = confusion_matrix(preds, targets, n_classes)
    valid = (targets != IGNORE) & (targets >= 0) & (targets < n_classes)
    n_target = np.bincount(targets[valid], minlength=n_classes)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = n_target - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = denom > 0
    return iou, (float(iou[present].mean()) if present.any() else float("nan"))


def boundary_band(instances, width=2):
    """Pixels within ``width`` px (Chebyshev) of an instance boundary."""
    inst = np.asarray(instances)
    edge = np.zeros(inst.shape, dtype=bool)
    dv = inst[1:, :] != inst[:-1, :]
    dh = inst[:, 1:] != inst[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    if width <= 1:
        return edge
    return ndimage.binary_dilation(edge, np.ones((3, 3), bool), iterations=width - 1)


def band_means(values, label_image, width=2):
    """Mean of a per-pixel map inside the boundary band and in the interior.

    Pixels without a ground-truth class (sky) or with a NaN value are skipped.
    """
    values = np.asarray(values, dtype=np.float64)
    band = boundary_band(label_image.instances, width)
    ok = (label_image.classes != IGNORE) & np.isfinite(values)
    b, i = ok & band, ok & ~band
    return (float(values[b].mean()) if b.any() else float("nan"),
            float(values[i].mean()) if i.any() else float("nan"))


def pixel_map(pixels, values, width, height, fill=np.nan):
    values = np.asarray(values)
    out = np.full((height, width) + values.shape[1:], fill, dtype=np.result_type(values, type(fill)))
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    out[pixels[:, 1], pixels[:, 0]] = values
    return out


def entropy_image(pixels, y_p, width, height):
    """Per-pixel entropy (NaN where no ray was rendered)."""
    return pixel_map(pixels, entropy(y_p, axis=1), width, height)


def entropy_to_pgm(ent, n_classes):
    scaled = np.nan_to_num(ent, nan=0.0) * 255.0 / np.log(n_classes)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def colorize(labels):
    labels = np.asarray(labels).astype(np.int64)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    ok = (labels >= 0) & (labels != IGNORE)
    rgb[ok] = PALETTE[labels[ok] % len(PALETTE)]
    return rgb


def dump_images(pixels, y_p, pseudo_labels, label_image, prefix):
    """Write ``<prefix>_semantic.ppm``, ``_entropy.pgm``, ``_correct.ppm``, ``_pseudo.ppm``.

    Returns the list of written paths.
    """
    W, H = label_image.width, label_image.height
    C = y_p.shape[1]
    pred = pixel_map(pixels, y_p.argmax(axis=1), W, H, fill=IGNORE).astype(np.int64)
    ent = entropy_image(pixels, y_p, W, H)
    gt = label_image.classes.astype(np.int64)
    known = (pred != IGNORE) & (gt != IGNORE)
    correct = np.zeros((H, W, 3), dtype=np.uint8)
    correct[known & (pred == gt)] = CORRECT_RGB
    correct[known & (pred != gt)] = WRONG_RGB
    paths = [f"{prefix}_semantic.ppm", f"{prefix}_entropy.pgm", f"{prefix}_correct.ppm",
             f"{prefix}_pseudo.ppm"]
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    write_ppm(paths[0], colorize(pred))
    write_pgm(paths[1], entropy_to_pgm(ent, C))
    write_ppm(paths[2], correct)
    write_ppm(paths[3], colorize(pseudo_labels))
    return paths


def oracle_field(vox, labels, n_classes, logit_scale=10.0, occupied_raw=4.0, empty_raw=-10.0):
    """A feature grid and NeRF head that reproduce the scan's own labels.

    Features are the one-hot majority class per cell plus an occupancy
    channel; the head copies them through its hidden layer and emits
    ``logit_scale * one_hot`` logits and a density that is high inside
    occupied cells and ~0 in empty space.
    """
    grid = vox.grid
    C = n_classes
    keep = (vox.point_rows >= 0) & (labels != IGNORE)
    counts = np.zeros((grid.n_occupied, C))
    np.add.at(counts, (vox.point_rows[keep], labels[keep].astype(np.int64)), 1.0)
    feats = np.zeros((grid.n_occupied, C + 1))
    has = counts.sum(axis=1) > 0
    feats[np.flatnonzero(has), counts[has].argmax(axis=1)] = 1.0
    feats[:, C] = 1.0
    hidden = 64
    W1 = np.zeros((hidden, C + 1))
    W1[:C + 1, :C + 1] = np.eye(C + 1)
    W2 = np.zeros((C + 1, hidden))
    W2[:C, :C] = logit_scale * np.eye(C)
    W2[C, C] = occupied_raw - empty_raw
    b2 = np.zeros(C + 1)
    b2[C] = empty_raw
    return grid.with_features(feats), NerfHead(W1, np.zeros(hidden), W2, b2)


def perspective_pixel_labels(points, point_labels, cam, n_classes):
    """Per-pixel majority label of the points projecting into it (IGNORE if none)."""
    uv, _, valid = project_points(cam, points)
    lab = np.asarray(point_labels, dtype=np.int64)
    valid &= lab != IGNORE
    px = np.floor(uv[valid]).astype(np.int64)
    flat = px[:, 1] * cam.width + px[:, 0]
    counts = np.zeros((cam.width * cam.height, n_classes), dtype=np.int64)
    np.add.at(counts, (flat, lab[valid]), 1)
    out = np.full(cam.width * cam.height, IGNORE, dtype=np.int64)
    hit = counts.sum(axis=1) > 0
    out[hit] = counts[hit].argmax(axis=1)
    return out.reshape(cam.height, cam.width)


@dataclasses.dataclass(frozen=True)
class ParallaxRow:
    offset: float
    seed: int
    ray_band: float
    persp_band: float
    ray_interior: float
    persp_interior: float
    ray_pixel_band: float
    persp_pixel_band: float
    n_band: int


_PARALLAX_COLUMNS = ("ray_band", "persp_band", "ray_interior", "persp_interior",
                     "ray_pixel_band", "persp_pixel_band")


def parallax_suite_config(base=None):
    """Scenes where parallax matters: thin objects at 4-10 m, buildings behind.

    Uses a finer grid and a 32-beam LiDAR so the oracle field resolves
    poles and pedestrians.
    """
    base = base if base is not None else SceneConfig()
    return dataclasses.replace(
        base, kind_weights=(2.0, 1.0, 3.0, 4.0, 3.0), n_objects_min=8, n_objects_max=14,
        front_fraction=1.0, object_range_min=4.0, object_range_max=10.0,
        building_range_min=14.0, building_range_max=22.0,
        grid_res=(120, 360, 20), lidar_n_elevations=32)


def _accuracy(pred, gt, mask):
    m = mask & (pred != IGNORE) & (gt != IGNORE)
    return int((pred[m] == gt[m]).sum()), int(m.sum())


def parallax_scene(config, seed, offset):
    """Scene, scan, label image and masks with the camera displaced by ``offset`` m."""
    cfg = dataclasses.replace(config, camera_offset_min=float(offset), camera_offset_max=float(offset))
    scene = generate_scene(cfg, seed)
    scan = simulate_lidar(scene, LidarPattern.from_config(cfg))
    return scene, scan, render_label_image(scene)


def parallax_report(config, seeds, offsets, n_samples=DEFAULT_SAMPLES, near=DEFAULT_NEAR,
                    far=DEFAULT_FAR, band_width=2, mask_perturbation=0, threshold=1.6):
    """Pixel pseudo-label accuracy of ray rendering vs perspective projection.

    For every offset the scenes generated from ``seeds`` are re-rendered
    with the camera displaced by exactly that offset. The 3D side is an
    oracle: the scan's ground-truth labels. Ray-based pseudo-labels run the
    confidence sampler on pixels rendered from a field built from those
    labels; perspective pseudo-labels give each segment the majority label
    of the points projecting into it. Both stamp their segment labels onto
    the segment pixels and are scored on labelled pixels inside and outside
    the boundary band. The ``*_pixel_band`` columns score the raw per-pixel
    labels before mask fusion (rendered argmax vs projected point label) on
    the pixels that receive at least one projected point.

    Returns one row per (offset, seed); see :func:`parallax_summary`.
    """
    rows = []
    C = config.n_classes
    for off in offsets:
        for seed in seeds:
            scene, scan, image = parallax_scene(config, seed, off)
            cam = scene.camera
            vox = voxelize(scan.points, scan.intensity, config.grid_res, config.grid_bounds)
            grid, head = oracle_field(vox, scan.labels, C)
            gt = image.classes.astype(np.int64)
            band = boundary_band(image.instances, band_width)
            masks = oracle_masks(image, seed, mask_perturbation)
            bundle = render_bundle(cam, grid, head, all_pixels(cam), n_samples, near, far,
                                   keep_samples=False)
            _, ray_fused = confidence_sampler(bundle.pixels, bundle.y_p, masks, threshold)
            ray_fused = ray_fused.astype(np.int64)
            _, seg_lab = perspective_baseline(scan.points, cam, scan.labels, masks, C)
            persp_fused = _segment_image(masks, seg_lab)
            ray_px = pixel_map(bundle.pixels, bundle.argmax, cam.width, cam.height,
                               fill=IGNORE).astype(np.int64)
            persp_px = perspective_pixel_labels(scan.points, scan.labels, cam, C)
            common = persp_px != IGNORE
            tallies = [_accuracy(pred, gt, region) for pred, region in [
                (ray_fused, band), (persp_fused, band), (ray_fused, ~band), (persp_fused, ~band),
                (ray_px, band & common), (persp_px, band & common)]]
            acc = [k / n if n else float("nan") for k, n in tallies]
            rows.append(ParallaxRow(float(off), int(seed), *acc, n_band=tallies[0][1]))
    return rows


def parallax_summary(rows):
    """Median of each accuracy column over seeds, per offset (seed = -1)."""
    out = []
    for off in sorted({r.offset for r in rows}):
        sel = [r for r in rows if r.offset == off]
        med = [float(np.nanmedian([getattr(r, c) for r in sel])) for c in _PARALLAX_COLUMNS]
        out.append(ParallaxRow(off, -1, *med, n_band=int(sum(r.n_band for r in sel))))
    return out


def _segment_image(masks, seg_labels):
    """Stamp perspective segment labels (lower segment index wins overlaps)."""
    image = np.full(masks.width * masks.height, IGNORE, dtype=np.int64)
    for k in range(len(masks) - 1, -1, -1):
        if seg_labels[k] != IGNORE:
            image[masks.masks[k]] = seg_labels[k]
    return image.reshape(masks.height, masks.width)


def format_parallax(rows):
    """Fixed-width table; summary rows (seed -1) print ``median`` as the seed."""
    lines = [f"{'offset_m':>8} {'seed':>6} {'ray_band':>9} {'persp_band':>10} {'ray_int':>8} "
             f"{'persp_int':>9} {'ray_px_band':>11} {'persp_px_band':>13} {'n_band':>7}"]
    for r in rows:
        seed = "median" if r.seed < 0 else str(r.seed)
        lines.append(f"{r.offset:8.2f} {seed:>6} {r.ray_band:9.4f} {r.persp_band:10.4f} "
                     f"{r.ray_interior:8.4f} {r.persp_interior:9.4f} {r.ray_pixel_band:11.4f} "
                     f"{r.persp_pixel_band:13.4f} {r.n_band:7d}")
    return "\n".join(lines) + "\n"
