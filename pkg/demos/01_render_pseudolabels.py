"""From one synthetic scan to pixel pseudo-labels.

Builds a scene, voxelizes its LiDAR scan, turns the ground-truth point labels
into a semantic field, renders every camera pixel through that field and runs
the confidence sampler over the instance masks. Writes debug images to
``demo_out/``.

    python demos/01_render_pseudolabels.py
"""
# %%
import os

import numpy as np

from rayseg.dataset import make_scene
from rayseg.evaluation import band_means, dump_images, entropy_image, oracle_field, parallax_suite_config
from rayseg.geom import all_pixels, min_cover_pixels
from rayseg.grid import voxelize
from rayseg.pseudo import ACCEPTED, confidence_sampler
from rayseg.render import render_bundle

# A 32-beam scan on a finer grid: with the 16-beam dataset defaults much of
# the ground falls between occupied cells and the ground mask is rejected.
cfg = parallax_suite_config()
rec = make_scene(cfg, seed=3)
print(f"{len(rec.scan.points)} LiDAR points, {len(rec.masks)} masks, "
      f"image {rec.camera.width}x{rec.camera.height}")

# %% voxelize; each occupied cell gets a one-hot semantic field of its points
vox = voxelize(rec.scan.points, rec.scan.intensity, cfg.grid_res, cfg.grid_bounds)
grid, head = oracle_field(vox, rec.scan.labels, cfg.n_classes)
print(f"{len(grid.cells)} occupied cells out of {np.prod(cfg.grid_res)}")

# %% render every pixel (458 samples between 2.3 m and 50 m)
cam = rec.camera
bundle = render_bundle(cam, grid, head, all_pixels(cam), keep_samples=False)
hit = bundle.y_p.max(axis=1) > 0.5
print(f"rendered {bundle.n_rays} rays; {hit.mean():.0%} end on something confident")

# %% confidence sampler: one label per mask, kept if the mean entropy is low
segs, pseudo = confidence_sampler(bundle.pixels, bundle.y_p, rec.masks, threshold=1.6)
for k in range(len(segs)):
    state = "accepted" if segs.status[k] == ACCEPTED else "rejected"
    print(f"  mask {k:2d}: {len(segs.masks[k]):5d} px  label {segs.labels[k]:3d}  "
          f"H = {segs.entropies[k]:.3f}  {state}")
known = (pseudo != 255) & (rec.image.classes != 255)
print(f"pseudo-labelled pixels: {known.sum()}, accuracy {np.mean(pseudo[known] == rec.image.classes[known]):.3f}")

# %% where is the field uncertain?
ent = entropy_image(bundle.pixels, bundle.y_p, cam.width, cam.height)
band, interior = band_means(ent, rec.image)
print(f"mean entropy: boundary band {band:.3f}, interior {interior:.3f}")

# %% training renders only a covering subset of pixels
cover = min_cover_pixels(cam, grid, 2.3, 50.0, 458)
print(f"cover sampler: {len(cover)} rays instead of {cam.width * cam.height}")

os.makedirs("demo_out", exist_ok=True)
for p in dump_images(bundle.pixels, bundle.y_p, pseudo, rec.image, "demo_out/scene3"):
    print("wrote", p)
