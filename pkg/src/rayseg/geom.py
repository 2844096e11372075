"""Pinhole camera geometry: projection, per-pixel rays and the cover sampler.

Frames: points live in the LiDAR frame. ``CameraModel.rotation`` maps
camera-frame directions (x right, y down, z forward) into the LiDAR frame
and ``CameraModel.translation`` is the camera centre in the LiDAR frame, so
``p_lidar = rotation @ p_cam + translation``.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, format_keyvalue, read_keyvalue

# camera looking along LiDAR +x, image x to LiDAR -y, image y to LiDAR -z
FORWARD_ROTATION = np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9 or np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be a proper orthonormal matrix")
        if not np.all(np.isfinite(trans)):
            raise ValueError("translation must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def forward_facing(cls, width, height, hfov_deg, translation=(0.0, 0.0, 0.0)):
        """Square-pixel camera looking along LiDAR +x with the given horizontal FOV."""
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, FORWARD_ROTATION, translation)

    def to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def save_calibration(path, cam):
    values = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
              "width": cam.width, "height": cam.height}
    for i in range(3):
        for j in range(3):
            values[f"r{i}{j}"] = float(cam.rotation[i, j])
    for i in range(3):
        values[f"t{i}"] = float(cam.translation[i])
    with open(path, "w") as f:
        f.write(format_keyvalue({k: repr(float(v)) if isinstance(v, float) else int(v)
                                for k, v in values.items()}))


def load_calibration(path):
    kv = read_keyvalue(path)
    keys = ["fx", "fy", "cx", "cy", "width", "height"]
    keys += [f"r{i}{j}" for i in range(3) for j in range(3)] + [f"t{i}" for i in range(3)]
    unknown = sorted(set(kv) - set(keys))
    missing = [k for k in keys if k not in kv]
    if unknown or missing:
        raise ConfigError(f"{path}: unknown keys {unknown}, missing keys {missing}")
    try:
        rot = [[float(kv[f"r{i}{j}"]) for j in range(3)] for i in range(3)]
        trans = [float(kv[f"t{i}"]) for i in range(3)]
        return CameraModel(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                           int(kv["width"]), int(kv["height"]), rot, trans)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def project_points(cam, points):
    """Vectorised projection of LiDAR-frame points.

    Returns ``(uv, depth, valid)`` where ``uv`` is (N, 2) continuous pixel
    coordinates, ``depth`` the camera-frame z and ``valid`` marks points in
    front of the camera that land inside the image.
    """
    pc = cam.to_camera(np.atleast_2d(points))
    depth = pc[:, 2]
    in_front = depth > 0
    safe = np.where(in_front, depth, 1.0)
    u = cam.fx * pc[:, 0] / safe + cam.cx
    v = cam.fy * pc[:, 1] / safe + cam.cy
    valid = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), depth, valid


def project_point(cam, p):
    """Project one LiDAR-frame point; ``None`` if behind the camera or off-image."""
    uv, depth, valid = project_points(cam, np.asarray(p, dtype=np.float64)[None])
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def pixel_rays(cam, pixels):
    """Origins and unit directions (LiDAR frame) through pixel centres.

    ``pixels`` is an (N, 2) integer array of ``(u, v)``.
    """
    pixels = np.atleast_2d(np.asarray(pixels))
    u = pixels[:, 0]
    v = pixels[:, 1]
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise ValueError("pixel outside the image")
    d_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx,
                      (v + 0.5 - cam.cy) / cam.fy,
                      np.ones(len(pixels))], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ cam.rotation.T
    origins = np.broadcast_to(cam.translation, dirs.shape).copy()
    return origins, dirs


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple


def pixel_ray(cam, u, v):
    origins, dirs = pixel_rays(cam, [[u, v]])
    return Ray(origins[0], dirs[0], (int(u), int(v)))


def all_pixels(cam):
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def sample_distances(near, far, n_samples):
    """Mid-bin sample distances along a unit ray and their (constant) spacing."""
    if not near < far:
        raise ValueError("near must be < far")
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    step = (far - near) / n_samples
    t = near + (np.arange(n_samples) + 0.5) * step
    return t, np.full(n_samples, step)


def ray_sample_points(origins, dirs, near, far, n_samples):
    t, _ = sample_distances(near, far, n_samples)
    return origins[:, None, :] + t[None, :, None] * dirs[:, None, :]


def frustum_cells(cam, grid, near, far):
    """Occupied cell rows whose centre projects into the image at range [near, far]."""
    if grid.n_occupied == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0)
    centers = grid.cell_centers()
    uv, _, valid = project_points(cam, centers)
    rng = np.linalg.norm(centers - cam.translation, axis=1)
    valid &= (rng >= near) & (rng <= far)
    rows = np.flatnonzero(valid)
    return rows, uv[rows], rng[rows]


def touched_rows(cam, grid, pixels, near, far, n_samples):
    """Occupied rows that receive non-zero interpolation weight from each pixel's samples."""
    origins, dirs = pixel_rays(cam, pixels)
    pts = ray_sample_points(origins, dirs, near, far, n_samples)
    rows, weights = grid.corner_weights(pts.reshape(-1, 3))
    rows = np.where(weights > 0, rows, -1).reshape(len(pixels), -1)
    return [np.unique(r[r >= 0]) for r in rows]


def min_cover_pixels(cam, grid, near, far, n_samples):
    """Greedy pixel set whose ray samples touch every visible occupied voxel.

    Visible voxels are occupied cells whose centre lies in the frustum
    between ``near`` and ``far`` (range from the camera centre); occlusion is
    not considered. Voxels are visited far-to-near; an uncovered voxel emits
    the pixel nearest its centre projection whose samples touch it, and every
    voxel that pixel touches is marked covered. Cells no pixel can touch are
    left out, so the result covers exactly the brute-force touchable set.
    """
    rows, uv, rng = frustum_cells(cam, grid, near, far)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    covered = np.zeros(grid.n_occupied, dtype=bool)
    cache = {}

    def touched(px):
        if px not in cache:
            cache[px] = touched_rows(cam, grid, np.array([px]), near, far, n_samples)[0]
        return cache[px]

    chosen = []
    for k in np.argsort(-rng, kind="stable"):
        row = rows[k]
        if covered[row]:
            continue
        pick = None
        for px in _pixels_by_distance(cam, uv[k]):
            t = touched(px)
            i = np.searchsorted(t, row)
            if i < len(t) and t[i] == row:
                pick = px
                break
        if pick is None:
            continue
        chosen.append(pick)
        covered[touched(pick)] = True
    return np.array(chosen, dtype=np.int64).reshape(-1, 2)


def _pixels_by_distance(cam, uv, window=2):
    """Pixels ordered by centre distance to ``uv``: a small window first, then all."""
    u0, v0 = int(np.floor(uv[0])), int(np.floor(uv[1]))
    seen = set()
    for w in (window, max(cam.width, cam.height)):
        us = np.arange(max(0, u0 - w), min(cam.width, u0 + w + 1))
        vs = np.arange(max(0, v0 - w), min(cam.height, v0 + w + 1))
        uu, vv = np.meshgrid(us, vs)
        uu, vv = uu.ravel(), vv.ravel()
        d = (uu + 0.5 - uv[0]) ** 2 + (vv + 0.5 - uv[1]) ** 2
        for i in np.lexsort((uu, vv, d)):
            px = (int(uu[i]), int(vv[i]))
            if px not in seen:
                seen.add(px)
                yield px
