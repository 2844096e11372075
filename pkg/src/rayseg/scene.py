"""Synthetic multi-modal driving scenes.

A scene is a ground plane plus axis-aligned boxes and vertical cylinders,
observed by a LiDAR at the origin and a forward camera whose centre can be
displaced from the LiDAR (the source of parallax between the two sensors).
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from . import config as cfgmod
from .geom import CameraModel, all_pixels, pixel_rays, project_points
from .pnm import read_pnm, write_pgm

IGNORE = 255
GROUND_INSTANCE = 1
SCAN_MAGIC = b"SRAY"
SCAN_VERSION = 1
_SCAN_RECORD = np.dtype([("xyz", "<f4", (3,)), ("intensity", "<f4"), ("label", "<u2")])

KINDS = ("building", "car", "pedestrian", "pole", "trunk")

_EPS = 1e-9


@dataclass(frozen=True)
class SceneConfig:
    n_classes: int = 6
    ground_class: int = 0
    kind_classes: tuple[int, ...] = (1, 2, 3, 4, 5)
    kind_weights: tuple[float, ...] = (1.0, 3.0, 2.0, 2.0, 2.0)
    n_objects_min: int = 6
    n_objects_max: int = 12
    object_range_min: float = 5.0
    object_range_max: float = 22.0
    building_range_min: float = 14.0
    building_range_max: float = 22.0
    front_fraction: float = 0.8
    ground_z: float = -1.7
    intensity_noise: float = 0.1
    instance_intensity_spread: float = 0.1
    camera_offset_min: float = 0.0
    camera_offset_max: float = 0.0
    camera_offset_dir: tuple[float, float, float] = (0.0, 1.0, 0.0)
    image_width: int = 96
    image_height: int = 48
    hfov_deg: float = 100.0
    lidar_azimuth_steps: int = 720
    lidar_n_elevations: int = 16
    lidar_elev_min: float = -25.0
    lidar_elev_max: float = 3.0
    grid_res: tuple[int, int, int] = (240, 180, 20)
    grid_bounds: tuple[float, float, float, float] = (0.0, 30.0, -2.5, 3.5)


def load_scene_config(path, base=None):
    return cfgmod.dataclass_from_mapping(SceneConfig, cfgmod.read_keyvalue(path), base)


def save_scene_config(path, config):
    with open(path, "w") as f:
        f.write(cfgmod.format_keyvalue(cfgmod.dataclass_to_mapping(config)))


@dataclass(frozen=True, eq=False)
class Primitive:
    """``kind`` is "plane", "box" or "cylinder".

    plane: ``params = (nx, ny, nz, d)`` for ``n . x = d``;
    box: ``(xmin, ymin, zmin, xmax, ymax, zmax)``;
    cylinder: ``(cx, cy, radius, zmin, zmax)``.
    """
    kind: str
    cls: int
    instance: int
    params: tuple

    def __eq__(self, other):
        return (self.kind, self.cls, self.instance, tuple(self.params)) == \
            (other.kind, other.cls, other.instance, tuple(other.params))


@dataclass(eq=False)
class Scene:
    objects: list
    camera: CameraModel
    n_classes: int
    seed: int = 0
    intensity_noise: float = 0.1
    instance_intensity_spread: float = 0.1
    lidar_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    @property
    def camera_offset(self):
        return np.array(self.camera.translation)

    def __eq__(self, other):
        return (self.objects == other.objects and self.camera == other.camera
                and self.n_classes == other.n_classes and self.seed == other.seed
                and self.intensity_noise == other.intensity_noise
                and self.instance_intensity_spread == other.instance_intensity_spread
                and np.array_equal(self.lidar_pose, other.lidar_pose))


@dataclass(eq=False)
class Scan:
    points: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.points)

    def stored(self):
        """The scan as it reads back from disk (float32 coordinates and intensity)."""
        as32 = lambda a: a.astype(np.float32).astype(np.float64)
        return Scan(as32(self.points), as32(self.intensity), self.labels, self.n_classes)

    def unlabeled(self):
        return Scan(self.points, self.intensity, np.full(len(self), IGNORE, dtype=np.uint8), self.n_classes)


@dataclass(eq=False)
class LabelImage:
    classes: np.ndarray
    instances: np.ndarray

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]


def _validate_config(config):
    C = config.n_classes
    if C < 2:
        raise ValueError("need at least two classes")
    if len(config.kind_classes) != len(KINDS) or len(config.kind_weights) != len(KINDS):
        raise ValueError(f"kind_classes/kind_weights need {len(KINDS)} entries")
    if not 0 <= config.ground_class < C or any(not 0 <= c < C for c in config.kind_classes):
        raise ValueError("class ids must lie in [0, n_classes)")
    if config.n_objects_min < 0 or config.n_objects_max < config.n_objects_min:
        raise ValueError("invalid object-count range")
    if config.camera_offset_min < 0 or config.camera_offset_max < config.camera_offset_min:
        raise ValueError("invalid camera offset range")
    r_min, r_max, z_min, z_max = config.grid_bounds
    if not z_min <= config.ground_z < z_max:
        raise ValueError("ground plane outside grid height bounds")
    if max(config.object_range_max, config.building_range_max) + 5.0 > r_max:
        raise ValueError("objects would leave the grid radially")
    if not (0 < config.object_range_min <= config.object_range_max
            and 0 < config.building_range_min <= config.building_range_max):
        raise ValueError("invalid placement range")


def _camera_for(config, offset):
    return CameraModel.forward_facing(config.image_width, config.image_height, config.hfov_deg,
                                      translation=offset)


def _inside_grid(config, p):
    r_min, r_max, z_min, z_max = config.grid_bounds
    r = np.hypot(p[0], p[1])
    return r_min <= r < r_max and z_min <= p[2] < z_max


def _object_params(kind, rng, config):
    g = config.ground_z
    z_top = config.grid_bounds[3] - 0.01
    if kind == "building":
        return "box", (rng.uniform(3, 7), rng.uniform(3, 7), min(g + rng.uniform(3.0, 4.5), z_top))
    if kind == "car":
        length, width = rng.uniform(3.6, 4.6), rng.uniform(1.6, 2.0)
        if rng.random() < 0.5:
            length, width = width, length
        return "box", (length, width, g + rng.uniform(1.3, 1.7))
    if kind == "pedestrian":
        return "box", (rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8), g + rng.uniform(1.6, 1.9))
    if kind == "pole":
        return "cylinder", (rng.uniform(0.12, 0.22), min(g + rng.uniform(3.5, 5.0), z_top))
    return "cylinder", (rng.uniform(0.35, 0.6), g + rng.uniform(1.2, 2.5))


def generate_scene(config, seed):
    """Deterministic random scene for ``(config, seed)``."""
    _validate_config(config)
    rng = np.random.default_rng([int(seed), 0])
    offset_dir = np.asarray(config.camera_offset_dir, dtype=np.float64)
    norm = np.linalg.norm(offset_dir)
    offset_dir = offset_dir / norm if norm > 0 else np.zeros(3)
    offset = offset_dir * rng.uniform(config.camera_offset_min, config.camera_offset_max)
    if not _inside_grid(config, offset):
        raise ValueError("camera offset places the camera outside the grid bounds")
    camera = _camera_for(config, offset)

    ground = Primitive("plane", config.ground_class, GROUND_INSTANCE, (0.0, 0.0, 1.0, config.ground_z))
    objects = [ground]
    n_obj = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    weights = np.asarray(config.kind_weights, dtype=np.float64)
    weights = weights / weights.sum()
    half_fov = np.radians(config.hfov_deg) / 2
    placed = []
    for _ in range(n_obj):
        k = int(rng.choice(len(KINDS), p=weights))
        kind = KINDS[k]
        shape, dims = _object_params(kind, rng, config)
        footprint = 0.5 * np.hypot(dims[0], dims[1]) if shape == "box" else dims[0]
        for _try in range(50):
            if rng.random() < config.front_fraction:
                az = rng.uniform(-0.9 * half_fov, 0.9 * half_fov)
            else:
                az = rng.uniform(-np.pi, np.pi)
            if kind == "building":
                dist = rng.uniform(config.building_range_min, config.building_range_max)
            else:
                dist = rng.uniform(config.object_range_min, config.object_range_max)
            cx, cy = dist * np.cos(az), dist * np.sin(az)
            if np.hypot(cx - offset[0], cy - offset[1]) < footprint + 2.0:
                continue
            if all(np.hypot(cx - px, cy - py) > footprint + pr + 0.5 for px, py, pr in placed):
                break
        else:
            continue
        placed.append((cx, cy, footprint))
        instance = GROUND_INSTANCE + len(objects)
        cls = int(config.kind_classes[k])
        if shape == "box":
            sx, sy, top = dims
            params = (cx - sx / 2, cy - sy / 2, config.ground_z, cx + sx / 2, cy + sy / 2, top)
        else:
            radius, top = dims
            params = (cx, cy, radius, config.ground_z, top)
        objects.append(Primitive(shape, cls, instance, tuple(float(p) for p in params)))
    return Scene(objects, camera, config.n_classes, int(seed),
                 config.intensity_noise, config.instance_intensity_spread)


def intersect(primitive, origins, dirs):
    """Nearest positive ray parameter per ray, ``inf`` on a miss."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    p = primitive.params
    with np.errstate(divide="ignore", invalid="ignore"):
        if primitive.kind == "plane":
            n = np.asarray(p[:3])
            denom = d @ n
            t = (p[3] - o @ n) / denom
            return np.where((np.abs(denom) > 1e-15) & (t > _EPS), t, np.inf)
        if primitive.kind == "box":
            lo, hi = np.asarray(p[:3]), np.asarray(p[3:])
            zero = d == 0
            t1 = np.where(zero, -np.inf, (lo - o) / d)
            t2 = np.where(zero, np.inf, (hi - o) / d)
            outside = zero & ((o < lo) | (o > hi))
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            hit = (tmin <= tmax) & (tmax > _EPS) & ~outside.any(axis=1)
            t = np.where(tmin > _EPS, tmin, tmax)
            return np.where(hit, t, np.inf)
        if primitive.kind == "cylinder":
            cx, cy, rad, z0, z1 = p
            ox, oy = o[:, 0] - cx, o[:, 1] - cy
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = 2 * (ox * d[:, 0] + oy * d[:, 1])
            c = ox ** 2 + oy ** 2 - rad ** 2
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0))
            best = np.full(len(o), np.inf)
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                z = o[:, 2] + t * d[:, 2]
                ok = (disc >= 0) & (a > 0) & (t > _EPS) & (z >= z0) & (z <= z1)
                best = np.where(ok & (t < best), t, best)
            for zc in (z0, z1):
                t = (zc - o[:, 2]) / d[:, 2]
                x, y = ox + t * d[:, 0], oy + t * d[:, 1]
                ok = (d[:, 2] != 0) & (t > _EPS) & (x * x + y * y <= rad * rad)
                best = np.where(ok & (t < best), t, best)
            return best
    raise ValueError(f"unknown primitive kind {primitive.kind!r}")


def cast(objects, origins, dirs):
    """Nearest hit distance and hit-object index (``-1`` on a miss)."""
    best = np.full(len(origins), np.inf)
    which = np.full(len(origins), -1, dtype=np.int64)
    for i, obj in enumerate(objects):
        t = intersect(obj, origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
    return best, which


@dataclass(frozen=True)
class LidarPattern:
    azimuths: np.ndarray
    elevations: np.ndarray
    max_range: float = np.inf

    @classmethod
    def from_config(cls, config):
        az = np.linspace(-np.pi, np.pi, config.lidar_azimuth_steps, endpoint=False)
        el = np.radians(np.linspace(config.lidar_elev_min, config.lidar_elev_max, config.lidar_n_elevations))
        r_min, r_max, z_min, z_max = config.grid_bounds
        return cls(az, el, 0.999 * r_max)

    def directions(self):
        az, el = np.meshgrid(self.azimuths, self.elevations, indexing="ij")
        az, el = az.ravel(), el.ravel()
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


def _class_reflectance(n_classes):
    # fixed per-class base reflectance; classes overlap under the noise model
    return 0.2 + 0.6 * ((np.arange(n_classes) * 0.618034) % 1.0)


def simulate_lidar(scene, pattern):
    """Nearest-hit LiDAR returns (misses and returns beyond ``max_range`` omitted).

    Coordinates are exact in float64; :meth:`Scan.stored` gives the
    float32-rounded copy that a saved scan reads back as.
    """
    dirs = pattern.directions()
    origins = np.zeros_like(dirs)
    t, which = cast(scene.objects, origins, dirs)
    hit = np.isfinite(t) & (t <= pattern.max_range)
    pts = dirs[hit] * t[hit, None]
    obj = which[hit]
    labels = np.array([o.cls for o in scene.objects], dtype=np.uint8)[obj]

    rng = np.random.default_rng([scene.seed, 1])
    inst_offset = rng.normal(0.0, scene.instance_intensity_spread, len(scene.objects))
    base = _class_reflectance(scene.n_classes)[labels] + inst_offset[obj]
    intensity = np.clip(base + rng.normal(0.0, scene.intensity_noise, len(obj)), 0.0, 1.0)
    return Scan(pts, intensity, labels, scene.n_classes)


def render_label_image(scene, cam=None):
    """Per-pixel nearest-hit class and instance seen from the camera centre."""
    cam = scene.camera if cam is None else cam
    origins, dirs = pixel_rays(cam, all_pixels(cam))
    t, which = cast(scene.objects, origins, dirs)
    classes = np.array([o.cls for o in scene.objects] + [IGNORE], dtype=np.uint8)
    instances = np.array([o.instance for o in scene.objects] + [0], dtype=np.uint16)
    which = np.where(np.isfinite(t), which, -1)
    shape = (cam.height, cam.width)
    return LabelImage(classes[which].reshape(shape), instances[which].reshape(shape))


def projection_mismatch(scan, image, cam, tolerance=0):
    """Labelled points landing on an image pixel of another class.

    With ``tolerance = r`` a point only counts as mismatched if its class is
    absent from the ``(2r+1)``-pixel square around the pixel it lands on,
    which absorbs pixel quantization along silhouettes. Returns
    ``(n_mismatched, n_projected)``; points that miss the image or land on
    IGNORE pixels are not counted.
    """
    uv, _, valid = project_points(cam, scan.points)
    px = np.floor(uv[valid]).astype(np.int64)
    lab = scan.labels[valid].astype(np.int64)
    pix = image.classes[px[:, 1], px[:, 0]]
    keep = (lab != IGNORE) & (pix != IGNORE)
    px, lab = px[keep], lab[keep]
    if tolerance <= 0:
        return int(np.sum(lab != pix[keep])), int(keep.sum())
    size = 2 * int(tolerance) + 1
    present = np.stack([maximum_filter(image.classes == c, size=size)
                        for c in range(scan.n_classes)], axis=-1)
    return int(np.sum(~present[px[:, 1], px[:, 0], lab])), int(keep.sum())


def save_scan(path, scan):
    rec = np.zeros(len(scan), dtype=_SCAN_RECORD)
    rec["xyz"] = scan.points
    rec["intensity"] = scan.intensity
    rec["label"] = scan.labels
    with open(path, "wb") as f:
        f.write(SCAN_MAGIC)
        f.write(struct.pack("<III", SCAN_VERSION, len(scan), scan.n_classes))
        f.write(rec.tobytes())


def load_scan(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SCAN_MAGIC:
        raise ValueError(f"{path}: not a scan file")
    version, n, C = struct.unpack_from("<III", data, 4)
    if version != SCAN_VERSION:
        raise ValueError(f"{path}: unsupported scan version {version}")
    rec = np.frombuffer(data, dtype=_SCAN_RECORD, count=n, offset=16)
    labels = rec["label"]
    labels = np.where(labels >= IGNORE, IGNORE, labels).astype(np.uint8)
    return Scan(rec["xyz"].astype(np.float64), rec["intensity"].astype(np.float64), labels, int(C))


def save_label_image(class_path, instance_path, image):
    write_pgm(class_path, image.classes.astype(np.uint8))
    write_pgm(instance_path, image.instances.astype(np.uint16))


def load_label_image(class_path, instance_path):
    classes = read_pnm(class_path).astype(np.uint8)
    instances = read_pnm(instance_path).astype(np.uint16)
    if classes.shape != instances.shape:
        raise ValueError("class and instance images differ in size")
    return LabelImage(classes, instances)
