"""Segment masks and pseudo-label generation from rendered pixel semantics.

Masks are label-agnostic pixel sets (what a generic mask generator would
emit). The confidence sampler gives each segment the majority argmax class
of its rendered pixels, scores it by the entropy of the mean distribution
over the pixels that agree with that class, and stamps accepted segments
onto all of their pixels.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import project_points
from .loss import entropy
from .pnm import read_pnm, write_pgm
from .scene import IGNORE

ACCEPTED = 0
REJECTED_ENTROPY = 1
REJECTED_NO_COVERAGE = 2
PENDING = -1


@dataclass
class SegmentMaskSet:
    width: int
    height: int
    masks: list
    labels: np.ndarray = None
    entropies: np.ndarray = None
    status: np.ndarray = None

    def __post_init__(self):
        n = self.width * self.height
        clean = []
        for m in self.masks:
            m = np.unique(np.asarray(m, dtype=np.int64))
            if m.size == 0:
                raise ValueError("masks must be non-empty")
            if m[0] < 0 or m[-1] >= n:
                raise ValueError("mask pixel outside the image")
            clean.append(m)
        self.masks = clean
        K = len(clean)
        if self.labels is None:
            self.labels = np.full(K, IGNORE, dtype=np.int64)
        if self.entropies is None:
            self.entropies = np.full(K, np.nan)
        if self.status is None:
            self.status = np.full(K, PENDING, dtype=np.int64)

    def __len__(self):
        return len(self.masks)

    def accepted(self):
        return np.flatnonzero(self.status == ACCEPTED)

    def as_boolean(self):
        out = np.zeros((len(self), self.height * self.width), dtype=bool)
        for k, m in enumerate(self.masks):
            out[k, m] = True
        return out.reshape(len(self), self.height, self.width)


def _perturb(mask, k, structure):
    if k > 0:
        return ndimage.binary_dilation(mask, structure, iterations=k)
    if k < 0:
        eroded = ndimage.binary_erosion(mask, structure, iterations=-k)
        return eroded if eroded.any() else mask
    return mask


def oracle_masks(label_image, seed=0, perturbation=0):
    """One mask per connected instance component, boundaries jittered.

    With ``perturbation > 0`` each mask is dilated or eroded by a random
    non-zero number of pixels in ``[-perturbation, perturbation]``. Class
    ids are not attached.
    """
    inst = label_image.instances
    rng = np.random.default_rng([int(seed), 2])
    structure = ndimage.generate_binary_structure(2, 1)
    choices = [k for k in range(-perturbation, perturbation + 1) if k != 0] or [0]
    masks = []
    for iid in np.unique(inst):
        if iid == 0:
            continue
        comps, n = ndimage.label(inst == iid, structure)
        for c in range(1, n + 1):
            mask = comps == c
            if perturbation > 0:
                mask = _perturb(mask, int(rng.choice(choices)), structure)
            masks.append(np.flatnonzero(mask.ravel()))
    return SegmentMaskSet(label_image.width, label_image.height, masks)


def _flat(pixels, width):
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return pixels[:, 1] * width + pixels[:, 0]


def _majority(classes, n_classes):
    # ties go to the smaller class id
    return int(np.argmax(np.bincount(classes, minlength=n_classes)))


def confidence_sampler(pixels, y_p, masks, threshold):
    """Segment pseudo-labels and the stamped per-pixel label image.

    ``pixels`` are the rendered (u, v) pixels and ``y_p`` their class
    probabilities. Returns ``(segments, pixel_labels)`` where ``segments``
    is a new :class:`SegmentMaskSet` with labels, entropies and status
    filled in and ``pixel_labels`` is (height, width) with IGNORE outside
    accepted segments. A pixel in several accepted segments takes the
    label of the lowest-entropy one (ties: lower segment index).
    """
    y_p = np.asarray(y_p, dtype=np.float64)
    C = y_p.shape[1]
    lookup = np.full(masks.width * masks.height, -1, dtype=np.int64)
    lookup[_flat(pixels, masks.width)] = np.arange(len(y_p))
    hard = y_p.argmax(axis=1)
    K = len(masks)
    labels = np.full(K, IGNORE, dtype=np.int64)
    ent = np.full(K, np.nan)
    status = np.full(K, REJECTED_NO_COVERAGE, dtype=np.int64)
    for k, m in enumerate(masks.masks):
        rows = lookup[m]
        rows = rows[rows >= 0]
        if rows.size == 0:
            continue
        cls = _majority(hard[rows], C)
        agree = rows[hard[rows] == cls]
        h = float(entropy(y_p[agree].mean(axis=0)))
        labels[k] = cls
        ent[k] = h
        status[k] = ACCEPTED if h < threshold else REJECTED_ENTROPY
    out = SegmentMaskSet(masks.width, masks.height, masks.masks, labels, ent, status)
    return out, stamp_segments(out)


def stamp_segments(segments):
    """Per-pixel labels from accepted segments, lowest entropy winning overlaps."""
    image = np.full(segments.width * segments.height, IGNORE, dtype=np.uint8)
    taken = np.zeros(image.shape, dtype=bool)
    acc = segments.accepted()
    order = acc[np.lexsort((acc, segments.entropies[acc]))]
    for k in order:
        m = segments.masks[k]
        free = m[~taken[m]]
        image[free] = segments.labels[k]
        taken[free] = True
    return image.reshape(segments.height, segments.width)


def pixel_targets(pixel_labels, pixels):
    """Label-image values at the rendered pixels (the 2D loss targets)."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return pixel_labels[pixels[:, 1], pixels[:, 0]].astype(np.int64)


def nosam_pseudolabels(pixels, y_p, threshold, width, height):
    """Per-pixel argmax kept only where the pixel entropy is below ``threshold``."""
    y_p = np.asarray(y_p, dtype=np.float64)
    image = np.full(width * height, IGNORE, dtype=np.uint8)
    keep = entropy(y_p, axis=1) < threshold
    flat = _flat(pixels, width)
    image[flat[keep]] = y_p[keep].argmax(axis=1)
    return image.reshape(height, width)


def perspective_baseline(points, cam, point_preds, masks, n_classes):
    """3D pseudo-labels by projecting points into the segments.

    Each segment takes the majority of the predicted classes of the points
    projecting inside it; each projected point inherits its segment's label.
    A point inside several segments uses the segment with the highest
    agreement fraction (ties: lower index). Points that do not project into
    any segment get IGNORE. Returns ``(point_labels, segment_labels)``.
    """
    uv, _, valid = project_points(cam, points)
    px = np.floor(uv[valid]).astype(np.int64)
    flat = px[:, 1] * masks.width + px[:, 0]
    idx = np.flatnonzero(valid)
    preds = np.asarray(point_preds, dtype=np.int64)[idx]
    out = np.full(len(points), IGNORE, dtype=np.int64)
    best = np.full(len(points), -1.0)
    seg_labels = np.full(len(masks), IGNORE, dtype=np.int64)
    member = np.zeros(masks.width * masks.height, dtype=bool)
    for k, m in enumerate(masks.masks):
        member[:] = False
        member[m] = True
        inside = member[flat]
        if not inside.any():
            continue
        p = preds[inside]
        p = p[p != IGNORE]
        if p.size == 0:
            continue
        cls = _majority(p, n_classes)
        frac = float(np.mean(p == cls))
        seg_labels[k] = cls
        pts = idx[inside]
        better = frac > best[pts]
        out[pts[better]] = cls
        best[pts[better]] = frac
    return out, seg_labels


def save_masks(pgm_path, masks, rle_path=None):
    """Write the flattened 16-bit id image and, optionally, the RLE sidecar.

    In the id image a pixel covered by several masks keeps the lowest id.
    Ids are 1-based; 0 means no segment.
    """
    image = np.zeros(masks.width * masks.height, dtype=np.uint16)
    for k in range(len(masks) - 1, -1, -1):
        image[masks.masks[k]] = k + 1
    write_pgm(pgm_path, image.reshape(masks.height, masks.width))
    if rle_path is not None:
        with open(rle_path, "w") as f:
            for k, m in enumerate(masks.masks):
                breaks = np.flatnonzero(np.diff(m) != 1) + 1
                starts = np.concatenate([[0], breaks])
                stops = np.concatenate([breaks, [len(m)]])
                runs = " ".join(f"{m[a]},{b - a}" for a, b in zip(starts, stops))
                f.write(f"{k + 1}: {runs}\n")


def load_masks(pgm_path, rle_path=None):
    """Read masks; the sidecar (if given) carries the overlapping masks."""
    image = read_pnm(pgm_path)
    height, width = image.shape
    if rle_path is None:
        flat = image.ravel()
        ids = np.unique(flat[flat > 0])
        return SegmentMaskSet(width, height, [np.flatnonzero(flat == i) for i in ids])
    masks = {}
    with open(rle_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            head, _, body = line.partition(":")
            try:
                sid = int(head)
                runs = [tuple(int(x) for x in tok.split(",")) for tok in body.split()]
            except ValueError:
                raise ValueError(f"{rle_path}:{lineno}: malformed run list") from None
            masks[sid] = np.concatenate([np.arange(s, s + n) for s, n in runs]) if runs else np.zeros(0, int)
    return SegmentMaskSet(width, height, [masks[k] for k in sorted(masks)])
