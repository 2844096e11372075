"""Supervised-only vs. semi-supervised training on a small toy dataset.

Two modes, one seed, a reduced image and grid so it finishes in about a
minute. The full-size comparison is ``rayseg ablate`` (see README).

    python demos/03_train_small.py
"""
# %%
import dataclasses

from rayseg.dataset import DatasetConfig, make_split
from rayseg.scene import SceneConfig
from rayseg.train import TrainConfig, format_report, prepare_scene, run_experiment

scenes = dataclasses.replace(SceneConfig(), image_width=48, image_height=24, grid_res=(120, 90, 10),
                             lidar_azimuth_steps=720, lidar_n_elevations=16)
data = DatasetConfig(seed=0, n_train=30, n_val=0, n_test=10)
train_recs, test_recs = make_split(scenes, data, "train"), make_split(scenes, data, "test")
base = TrainConfig(epochs=4, steps_per_epoch=25, labeled_fraction=0.2, n_samples=128)

# scenes are prepared once and shared by both runs
prepared = tuple([prepare_scene(r, scenes.grid_res, scenes.grid_bounds, base) for r in recs]
                 for recs in (train_recs, test_recs))

# %%
results = []
for mode in ("sup-only", "full"):
    cfg = dataclasses.replace(base, mode=mode)
    res = run_experiment(cfg, train_recs, test_recs, scenes.grid_res, scenes.grid_bounds,
                         scenes.n_classes, prepared=prepared)
    print(f"{mode:9s} mIoU {res.miou:.4f}  ({len(res.labeled_idx)} labelled scenes)")
    results.append(res)

# %%
print(format_report(results, scenes.n_classes))
