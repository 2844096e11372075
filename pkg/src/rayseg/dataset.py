"""Synthetic datasets: generation of train/val/test splits and their on-disk layout.

A dataset directory holds ``dataset.cfg`` (scene-generator keys plus the
dataset keys of :class:`DatasetConfig`) and one sub-directory per split.
Scene ``i`` of a split is stored as::

    NNNN.scan  NNNN.cal  NNNN_class.pgm  NNNN_instance.pgm
    NNNN_masks.pgm  NNNN_masks.rle
"""

import dataclasses
import os
from dataclasses import dataclass

from . import config as cfgmod
from .geom import load_calibration, save_calibration
from .pseudo import load_masks, oracle_masks, save_masks
from .scene import (SceneConfig, LidarPattern, generate_scene, load_label_image, load_scan,
                    render_label_image, save_label_image, save_scan, simulate_lidar)

SPLITS = ("train", "val", "test")
_SPLIT_BASE = {"train": 0, "val": 100_000, "test": 200_000}


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    n_train: int = 200
    n_val: int = 20
    n_test: int = 40
    mask_perturbation: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("need n_train >= 1 and non-negative val/test sizes")
        if self.mask_perturbation < 0:
            raise ValueError("mask_perturbation must be >= 0")

    def size(self, split):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class SceneRecord:
    """One scene as the training code sees it.

    ``scan.labels`` are the ground truth; the trainer only reads them for
    scenes in its labeled subset. ``image`` is used for evaluation and the
    oracle masks only.
    """
    seed: int
    camera: object
    scan: object
    image: object
    masks: object


def scene_seed(dataset_seed, split, index):
    return int(dataset_seed) * 1_000_000 + _SPLIT_BASE[split] + int(index)


def make_scene(scene_config, seed, mask_perturbation=0):
    scene = generate_scene(scene_config, seed)
    scan = simulate_lidar(scene, LidarPattern.from_config(scene_config)).stored()
    image = render_label_image(scene)
    masks = oracle_masks(image, seed, mask_perturbation)
    return SceneRecord(seed, scene.camera, scan, image, masks)


def make_split(scene_config, data_config, split):
    return [make_scene(scene_config, scene_seed(data_config.seed, split, i), data_config.mask_perturbation)
            for i in range(data_config.size(split))]


def split_config_mapping(mapping):
    """Split a parsed key=value mapping into scene and dataset parts."""
    scene_keys = {f.name for f in dataclasses.fields(SceneConfig)}
    data_keys = {f.name for f in dataclasses.fields(DatasetConfig)}
    unknown = sorted(set(mapping) - scene_keys - data_keys)
    if unknown:
        raise cfgmod.ConfigError(f"unknown config keys: {', '.join(unknown)}")
    scene = {k: v for k, v in mapping.items() if k in scene_keys}
    data = {k: v for k, v in mapping.items() if k in data_keys}
    return (cfgmod.dataclass_from_mapping(SceneConfig, scene),
            cfgmod.dataclass_from_mapping(DatasetConfig, data))


def _stem(root, split, index):
    return os.path.join(root, split, f"{index:04d}")


def save_dataset(root, scene_config, data_config, splits=None):
    """Generate every split and write it under ``root``."""
    os.makedirs(root, exist_ok=True)
    mapping = {**cfgmod.dataclass_to_mapping(scene_config), **cfgmod.dataclass_to_mapping(data_config)}
    with open(os.path.join(root, "dataset.cfg"), "w") as f:
        f.write(cfgmod.format_keyvalue(mapping))
    out = {}
    for split in SPLITS:
        records = make_split(scene_config, data_config, split)
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for i, rec in enumerate(records):
            stem = _stem(root, split, i)
            save_scan(stem + ".scan", rec.scan)
            save_calibration(stem + ".cal", rec.camera)
            save_label_image(stem + "_class.pgm", stem + "_instance.pgm", rec.image)
            save_masks(stem + "_masks.pgm", rec.masks, stem + "_masks.rle")
        out[split] = records
    return out


def load_dataset_config(root):
    return split_config_mapping(cfgmod.read_keyvalue(os.path.join(root, "dataset.cfg")))


def load_split(root, split):
    scene_config, data_config = load_dataset_config(root)
    records = []
    for i in range(data_config.size(split)):
        stem = _stem(root, split, i)
        records.append(SceneRecord(
            scene_seed(data_config.seed, split, i),
            load_calibration(stem + ".cal"),
            load_scan(stem + ".scan"),
            load_label_image(stem + "_class.pgm", stem + "_instance.pgm"),
            load_masks(stem + "_masks.pgm", stem + "_masks.rle"),
        ))
    return records
