import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import confidence_sampler_oracle
from rayseg.geom import CameraModel, project_points
from rayseg.pseudo import (ACCEPTED, REJECTED_ENTROPY, REJECTED_NO_COVERAGE, SegmentMaskSet,
                           confidence_sampler, load_masks, nosam_pseudolabels, oracle_masks,
                           perspective_baseline, pixel_targets, save_masks)
from rayseg.scene import (IGNORE, LabelImage, LidarPattern, SceneConfig, generate_scene,
                          render_label_image, simulate_lidar)
from rayseg.evaluation import boundary_band


def _row_pixels(width, flats):
    return np.array([(f % width, f // width) for f in flats])


def random_case(rng, W=12, H=9, C=4, K=6):
    n = W * H
    px_flat = np.sort(rng.choice(n, size=int(rng.integers(1, n)), replace=False))
    pixels = _row_pixels(W, px_flat)
    y = rng.dirichlet(np.full(C, rng.uniform(0.2, 3.0)), size=len(pixels))
    masks = [rng.choice(n, size=int(rng.integers(1, 30)), replace=False) for _ in range(K)]
    return pixels, y, SegmentMaskSet(W, H, masks)


# --- masks -----------------------------------------------------------------------

def _two_blocks():
    inst = np.zeros((32, 80), dtype=np.uint16)
    inst[:, :32] = 3
    inst[:, 40:72] = 4
    return LabelImage(np.where(inst > 0, 1, 0).astype(np.uint8), inst)


def test_oracle_masks_exact_components():
    img = _two_blocks()
    masks = oracle_masks(img)
    assert len(masks) == 2
    assert np.array_equal(masks.masks[0], np.flatnonzero(img.instances.ravel() == 3))
    assert np.array_equal(masks.masks[1], np.flatnonzero(img.instances.ravel() == 4))


def test_oracle_masks_split_components():
    inst = np.zeros((10, 10), dtype=np.uint16)
    inst[1:3, 1:3] = 5
    inst[6:8, 6:8] = 5
    masks = oracle_masks(LabelImage(np.zeros_like(inst, dtype=np.uint8), inst))
    assert len(masks) == 2


def test_oracle_masks_perturbed_iou():
    img = _two_blocks()
    for seed in range(10):
        masks = oracle_masks(img, seed, perturbation=2)
        for k, iid in enumerate((3, 4)):
            comp = img.instances.ravel() == iid
            got = np.zeros_like(comp)
            got[masks.masks[k]] = True
            iou = np.sum(comp & got) / np.sum(comp | got)
            assert 0.6 < iou < 1.0
    a, b = oracle_masks(img, 5, 2), oracle_masks(img, 5, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))


def test_mask_set_validation():
    with pytest.raises(ValueError):
        SegmentMaskSet(4, 4, [np.array([], dtype=int)])
    with pytest.raises(ValueError):
        SegmentMaskSet(4, 4, [np.array([16])])


def test_mask_files_roundtrip(tmp_path):
    masks = SegmentMaskSet(6, 5, [np.arange(0, 8), np.arange(5, 12), np.array([29])])
    save_masks(tmp_path / "m.pgm", masks, tmp_path / "m.rle")
    back = load_masks(tmp_path / "m.pgm", tmp_path / "m.rle")
    assert len(back) == 3 and all(np.array_equal(a, b) for a, b in zip(back.masks, masks.masks))
    assert (tmp_path / "m.rle").read_text().splitlines()[0] == "1: 0,8"
    flat = load_masks(tmp_path / "m.pgm")
    # flattened export: overlap pixels keep the lowest id
    assert np.array_equal(flat.masks[0], np.arange(0, 8))
    assert np.array_equal(flat.masks[1], np.arange(8, 12))


def test_mask_rle_malformed(tmp_path):
    masks = SegmentMaskSet(3, 3, [np.arange(3)])
    save_masks(tmp_path / "m.pgm", masks)
    (tmp_path / "m.rle").write_text("1: 0;3\n")
    with pytest.raises(ValueError):
        load_masks(tmp_path / "m.pgm", tmp_path / "m.rle")


# --- confidence sampler ---------------------------------------------------------

def test_certain_segment_accepted():
    pixels = np.array([[0, 0], [1, 0]])
    y = np.array([[0, 0, 0, 1.0], [0, 0, 0, 1.0]])
    seg, image = confidence_sampler(pixels, y, SegmentMaskSet(2, 1, [np.array([0, 1])]), 1e-9)
    assert seg.labels[0] == 3 and seg.entropies[0] == 0 and seg.status[0] == ACCEPTED
    assert np.all(image == 3)


def test_uniform_segment_rejected():
    y = np.full((3, 16), 1 / 16)
    seg, image = confidence_sampler(np.array([[0, 0], [1, 0], [2, 0]]), y,
                                    SegmentMaskSet(3, 1, [np.arange(3)]), 1.6)
    assert seg.entropies[0] == pytest.approx(np.log(16), rel=1e-14)
    assert seg.entropies[0] == pytest.approx(2.7725887222397812, abs=1e-15)
    assert seg.status[0] == REJECTED_ENTROPY and np.all(image == IGNORE)


def test_mixed_segment_agreement_restriction():
    y = np.array([[0.8, 0.2], [0.8, 0.2], [0.8, 0.2], [0.1, 0.9]])
    pixels = np.array([[0, 0], [1, 0], [2, 0], [3, 0]])
    seg, image = confidence_sampler(pixels, y, SegmentMaskSet(4, 1, [np.arange(4)]), 1.8)
    assert seg.labels[0] == 0
    # mpmath: H(0.8, 0.2) = 0.50040242353818788
    assert seg.entropies[0] == pytest.approx(0.50040242353818788, abs=1e-15)
    assert seg.status[0] == ACCEPTED
    assert np.all(image == 0)  # disagreeing pixel is overwritten too


def test_no_coverage_segment():
    seg, _ = confidence_sampler(np.array([[0, 0]]), np.array([[1.0, 0.0]]),
                                SegmentMaskSet(3, 1, [np.array([2])]), 1.6)
    assert seg.status[0] == REJECTED_NO_COVERAGE and seg.labels[0] == IGNORE


def test_majority_tie_goes_to_smaller_class():
    y = np.array([[0.1, 0.9], [0.9, 0.1]])
    seg, _ = confidence_sampler(np.array([[0, 0], [1, 0]]), y, SegmentMaskSet(2, 1, [np.arange(2)]), 5.0)
    assert seg.labels[0] == 0


def test_overlap_lowest_entropy_then_index():
    pixels = np.array([[0, 0], [1, 0], [2, 0]])
    y = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    masks = SegmentMaskSet(3, 1, [np.array([0, 1]), np.array([1, 2]), np.array([0, 1, 2])])
    seg, image = confidence_sampler(pixels, y, masks, 5.0)
    # mask 0 (labels 0, agreeing pixels {0,1} mean (0.75,.25)) vs mask 1: pixel 1 argmax is 0
    lo = int(np.argmin(seg.entropies))
    assert image[0, 1] == seg.labels[lo]
    tie = SegmentMaskSet(2, 1, [np.array([0, 1]), np.array([0, 1])])
    seg2, image2 = confidence_sampler(np.array([[0, 0], [1, 0]]), np.array([[1.0, 0], [1.0, 0]]), tie, 1.0)
    assert seg2.entropies[0] == seg2.entropies[1] and np.all(image2 == 0)


def test_matches_brute_force_oracle(rng):
    for _ in range(30):
        pixels, y, masks = random_case(rng)
        th = rng.uniform(0.3, 1.4)
        seg, image = confidence_sampler(pixels, y, masks, th)
        labels, ents, acc, img = confidence_sampler_oracle(pixels, y, masks, th)
        assert list(seg.labels) == labels
        assert list(seg.status == ACCEPTED) == acc
        for a, b in zip(seg.entropies, ents):
            assert (b is None and np.isnan(a)) or abs(a - b) < 1e-12
        flat = image.ravel()
        assert {int(i): int(flat[i]) for i in np.flatnonzero(flat != IGNORE)} == img


@given(st.integers(0, 100_000), st.floats(0.05, 1.5), st.floats(0.0, 1.0))
def test_acceptance_monotone_in_threshold(seed, th, extra):
    pixels, y, masks = random_case(np.random.default_rng(seed))
    a, _ = confidence_sampler(pixels, y, masks, th)
    b, _ = confidence_sampler(pixels, y, masks, th + extra)
    assert set(a.accepted()) <= set(b.accepted())
    assert np.all(a.entropies[a.accepted()] < th)


def test_pixel_targets():
    labels = np.array([[1, 2], [IGNORE, 0]], dtype=np.uint8)
    assert list(pixel_targets(labels, np.array([[1, 0], [0, 1], [1, 1]]))) == [2, IGNORE, 0]


# --- ablation modes -------------------------------------------------------------

def test_nosam_gate():
    pixels = np.array([[0, 0], [1, 0], [2, 0]])
    y = np.array([[0, 1.0, 0], [1 / 3, 1 / 3, 1 / 3], [0.7, 0.2, 0.1]])
    image = nosam_pseudolabels(pixels, y, 1.0, 3, 1)
    assert list(image[0]) == [1, IGNORE, 0]  # H(0.7, 0.2, 0.1) = 0.8018 < 1.0 < ln 3


def test_perspective_zero_offset_perfect_preds():
    cfg = SceneConfig()
    scene = generate_scene(cfg, 11)
    scan = simulate_lidar(scene, LidarPattern.from_config(cfg))
    img = render_label_image(scene)
    masks = oracle_masks(img)
    labels, seg = perspective_baseline(scan.points, scene.camera, scan.labels, masks, cfg.n_classes)
    uv, _, valid = project_points(scene.camera, scan.points)
    px = np.floor(uv[valid]).astype(int)
    same = np.zeros(len(labels), dtype=bool)
    same[valid] = img.classes[px[:, 1], px[:, 0]] == scan.labels[valid]
    # exact wherever the landing pixel shows the point's own surface; the rest is
    # silhouette quantization (a pixel-centre ray hitting the neighbouring surface)
    hit = labels != IGNORE
    assert np.array_equal(labels[hit & same], scan.labels[hit & same])
    assert np.mean(labels[hit] == scan.labels[hit]) > 0.95
    for k, m in enumerate(masks.masks):
        if seg[k] != IGNORE:
            assert seg[k] == img.classes.ravel()[m[0]]  # one instance, one class


def test_perspective_behind_camera_ignored():
    cam = CameraModel.forward_facing(4, 4, 90.0)
    masks = SegmentMaskSet(4, 4, [np.arange(16)])
    labels, _ = perspective_baseline(np.array([[5.0, 0, 0], [-5.0, 0, 0]]), cam, np.array([2, 2]), masks, 3)
    assert list(labels) == [2, IGNORE]


def test_perspective_errors_concentrate_at_silhouettes():
    cfg = SceneConfig()
    cam = CameraModel.forward_facing(cfg.image_width, cfg.image_height, cfg.hfov_deg,
                                     translation=np.array([0.0, 1.0, 0.0]))
    near, far = [0, 0], [0, 0]
    for seed in range(5):
        scene = generate_scene(cfg, seed)
        scan = simulate_lidar(scene, LidarPattern.from_config(cfg))
        img = render_label_image(scene, cam)
        labels, _ = perspective_baseline(scan.points, cam, scan.labels, oracle_masks(img), cfg.n_classes)
        uv, _, valid = project_points(cam, scan.points)
        px = np.floor(uv[valid]).astype(int)
        band = boundary_band(img.instances, 2)[px[:, 1], px[:, 0]]
        lab = labels[valid]
        keep = lab != IGNORE
        wrong = lab != scan.labels[valid]
        for acc, sel in ((near, band & keep), (far, ~band & keep)):
            acc[0] += int(np.sum(wrong & sel))
            acc[1] += int(np.sum(sel))
    assert near[0] / near[1] > far[0] / far[1]


def test_perturbed_masks_bounds():
    img = _two_blocks()
    masks = oracle_masks(img, 1, perturbation=3)
    n = img.width * img.height
    for m in masks.masks:
        assert m.size > 0 and m.min() >= 0 and m.max() < n
