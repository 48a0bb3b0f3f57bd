"""Procedural scenes, pinhole rendering, pose sampling, dataset persistence.

A scene is a cloud of colored landmark points inside a ball. Cameras orbit on
a shell outside the ball looking roughly at the origin, and the renderer
splats each landmark as a depth-sorted filled disc through an ideal pinhole.
Everything is driven by SplitMix64 streams keyed on (seed, sample-index), so
any sample can be regenerated independently and order never matters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .posemath import Pose, canonical_quat, make_pose, quat_conj, quat_mul, rotate_vector
from .rng import SplitMix64
from .serial import read_f32_blob, read_json, write_f32_blob, write_json

POSE_MODES = ("orbit-shell", "random-jitter")
SHELL_RADII = (1.5, 2.5)        # orbit radius band, in units of scene extent
JITTER_SHELL_RADII = (1.2, 2.8)
_SHELL_STREAM = 1 << 32         # reserved child-stream index for the orbit radius
LOOK_JITTER_DEG = 0.25          # sigma of the look-at orientation jitter
MIN_LANDMARKS = 8
_EDGE = 0.5                     # flat cap radius at the disc center, pixels


@dataclass(frozen=True)
class SceneSpec:
    """Landmark cloud plus pinhole intrinsics; fully determined by its seed."""
    scene_id: int
    points: np.ndarray          # (n, 3) meters, inside the extent ball
    colors: np.ndarray          # (n, 3) in [0.2, 1.0]
    focal: float                # pixels
    principal: tuple            # (cx, cy) pixels
    extent: float               # meters
    point_radius: float         # world-space disc radius, meters
    seed: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        cols = np.ascontiguousarray(self.colors, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < MIN_LANDMARKS:
            raise ValueError(f"need at least {MIN_LANDMARKS} landmarks, "
                             f"got shape {pts.shape}")
        if cols.shape != pts.shape:
            raise ValueError("colors must pair one-to-one with landmarks")
        if self.focal <= 0.0:
            raise ValueError("focal length must be positive")
        radii = np.linalg.norm(pts, axis=1)
        if radii.max() > self.extent + 1e-9:
            raise ValueError(f"landmark at radius {radii.max()} exceeds "
                             f"extent {self.extent}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)
        object.__setattr__(self, "principal", tuple(float(c) for c in self.principal))


@dataclass(frozen=True)
class Sample:
    """One rendered view; image is float32 in [0,1], shape (res, res, 3)."""
    image: np.ndarray
    pose: Pose
    scene_id: int


@dataclass
class Dataset:
    train: list
    test: list
    scenes: list
    resolution: int
    n_train: int    # per scene
    n_test: int     # per scene
    seed: int


def generate_scene(seed: int, n_landmarks: int, extent: float, scene_id: int = 0,
                   focal: float = 40.0, principal: tuple = (16.0, 16.0),
                   point_radius: float | None = None) -> SceneSpec:
    """Landmarks uniform in the extent ball, colors uniform in [0.2, 1.0]."""
    if n_landmarks < MIN_LANDMARKS:
        raise ValueError(f"n_landmarks must be >= {MIN_LANDMARKS}")
    rng = SplitMix64(seed)
    pts = np.empty((n_landmarks, 3))
    for i in range(n_landmarks):
        direction = rng.unit_vector(3)
        pts[i] = direction * extent * rng.uniform() ** (1.0 / 3.0)
    cols = 0.2 + 0.8 * np.array(rng.uniforms(3 * n_landmarks)).reshape(-1, 3)
    if point_radius is None:
        point_radius = 0.08 * extent
    return SceneSpec(scene_id, pts, cols, focal, principal, extent,
                     point_radius, seed)


def render(scene: SceneSpec, pose: Pose, resolution: int) -> np.ndarray:
    """Disc-splat pinhole render; nearest depth wins, background black.

    Discs are cone-shaded: full color at the center, linear falloff to the
    rim. Interior pixels then vary smoothly under small camera motion, which
    keeps the image a learnable function of pose at sparse sample counts;
    hard discs only carry pose information on their one-pixel rims.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    img = np.zeros((resolution, resolution, 3))
    zbuf = np.full((resolution, resolution), np.inf)
    cx, cy = scene.principal
    q_inv = quat_conj(pose.q)
    for p, color in zip(scene.points, scene.colors):
        pc = rotate_vector(q_inv, p - pose.x)
        z = pc[2]
        if z <= 1e-6:
            continue  # behind the camera
        u = scene.focal * pc[0] / z + cx
        v = scene.focal * pc[1] / z + cy
        rad = max(scene.focal * scene.point_radius / z, 0.75)
        c0 = max(int(math.floor(u - rad - _EDGE)), 0)
        c1 = min(int(math.ceil(u + rad + _EDGE)), resolution - 1)
        r0 = max(int(math.floor(v - rad - _EDGE)), 0)
        r1 = min(int(math.ceil(v + rad + _EDGE)), resolution - 1)
        if c0 > c1 or r0 > r1:
            continue
        rows = np.arange(r0, r1 + 1)
        cols = np.arange(c0, c1 + 1)
        dist = np.hypot(cols[None, :] - u, rows[:, None] - v)
        alpha = np.clip((rad + _EDGE - dist) / rad, 0.0, 1.0)
        hit = (alpha > 0.0) & (z < zbuf[r0:r1 + 1, c0:c1 + 1])
        if not hit.any():
            continue
        patch = img[r0:r1 + 1, c0:c1 + 1]
        patch[hit] = alpha[hit, None] * color
        zbuf[r0:r1 + 1, c0:c1 + 1][hit] = z
    return img.astype(np.float32)


def _quat_from_rotmat(m: np.ndarray) -> np.ndarray:
    """Largest-pivot quaternion extraction (Shepperd's method)."""
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return canonical_quat(np.array(q))


def _look_at_quat(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with +z pointing from position to target."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(up, fwd))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return _quat_from_rotmat(np.column_stack([right, down, fwd]))


def _jitter_quat(rng: SplitMix64, sigma_deg: float) -> np.ndarray:
    axis = rng.unit_vector(3)
    angle = math.radians(rng.normal(sigma_deg))
    return np.concatenate([[math.cos(angle / 2.0)],
                           math.sin(angle / 2.0) * axis])


def sample_poses(scene: SceneSpec, n: int, seed: int,
                 mode: str = "orbit-shell") -> list:
    """Cameras on a shell outside the scene, looking at the origin.

    orbit-shell draws one orbit radius from 1.5-2.5x extent per call and
    keeps every camera on that sphere; position interpolation between
    neighboring train poses then stays accurate, which the test-time
    refinement applications rely on. random-jitter redraws the radius per
    pose (a thick shell). Pose i depends only on (seed, i): each index gets
    its own child stream, so prefixes are stable across different n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in POSE_MODES:
        raise ValueError(f"mode must be one of {POSE_MODES}, got {mode!r}")
    base = SplitMix64(seed)
    lo, hi = SHELL_RADII
    orbit = scene.extent * (lo + (hi - lo) * base.spawn(_SHELL_STREAM).uniform())
    poses = []
    for i in range(n):
        rng = base.spawn(i)
        if mode == "orbit-shell":
            radius = orbit
        else:
            jlo, jhi = JITTER_SHELL_RADII
            radius = scene.extent * (jlo + (jhi - jlo) * rng.uniform())
        position = radius * rng.unit_vector(3)
        q = _look_at_quat(position, np.zeros(3))
        q = quat_mul(q, _jitter_quat(rng, LOOK_JITTER_DEG))
        poses.append(make_pose(position, q))
    return poses


def build_dataset(scenes, n_train: int, n_test: int, resolution: int,
                  seed: int, out_dir: Path | None = None,
                  mode: str = "orbit-shell") -> Dataset:
    """Render train/test splits (counts are per scene) and persist them."""
    if not scenes:
        raise ValueError("need at least one scene")
    root = SplitMix64(seed)
    train, test = [], []
    for j, scene in enumerate(scenes):
        pose_seed = root.spawn(j).seed
        poses = sample_poses(scene, n_train + n_test, pose_seed, mode)
        for i, pose in enumerate(poses):
            sample = Sample(render(scene, pose, resolution), pose, scene.scene_id)
            (train if i < n_train else test).append(sample)
    ds = Dataset(train, test, list(scenes), resolution, n_train, n_test, seed)
    _check_split_disjoint(ds)
    if out_dir is not None:
        save_dataset(ds, Path(out_dir))
    return ds


def _check_split_disjoint(ds: Dataset) -> None:
    tr = np.array([s.pose.x for s in ds.train])
    te = np.array([s.pose.x for s in ds.test])
    gap = np.linalg.norm(tr[:, None, :] - te[None, :, :], axis=2).min()
    if gap <= 0.0:
        raise ValueError("train/test splits share a camera position")


# -- persistence ----------------------------------------------------------------

def _scene_to_json(s: SceneSpec) -> dict:
    return {
        "scene_id": s.scene_id, "seed": s.seed, "extent": s.extent,
        "focal": s.focal, "principal": list(s.principal),
        "point_radius": s.point_radius,
        "points": s.points, "colors": s.colors,
    }


def _scene_from_json(d: dict) -> SceneSpec:
    return SceneSpec(int(d["scene_id"]), np.array(d["points"]),
                     np.array(d["colors"]), float(d["focal"]),
                     tuple(d["principal"]), float(d["extent"]),
                     float(d["point_radius"]), int(d["seed"]))


def save_dataset(ds: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    meta = {
        "resolution": ds.resolution, "seed": ds.seed,
        "n_train": ds.n_train, "n_test": ds.n_test,
        "scenes": [_scene_to_json(s) for s in ds.scenes],
        "splits": {
            "train": _split_ranges(ds.train),
            "test": _split_ranges(ds.test),
        },
    }
    write_json(out_dir / "meta.json", meta)
    for name, samples in (("train", ds.train), ("test", ds.test)):
        write_f32_blob(out_dir / f"{name}.images.bin",
                       np.stack([s.image for s in samples]))
        write_json(out_dir / f"{name}.poses.json",
                   [{"x": s.pose.x, "q": s.pose.q, "scene": s.scene_id}
                    for s in samples])


def _split_ranges(samples) -> list:
    """Contiguous [scene-id, start, stop) runs over the sample list."""
    runs = []
    for i, s in enumerate(samples):
        if runs and runs[-1][0] == s.scene_id:
            runs[-1][2] = i + 1
        else:
            runs.append([s.scene_id, i, i + 1])
    return runs


def load_dataset(in_dir: Path) -> Dataset:
    in_dir = Path(in_dir)
    meta = read_json(in_dir / "meta.json")
    res = int(meta["resolution"])
    splits = {}
    for name in ("train", "test"):
        poses = read_json(in_dir / f"{name}.poses.json")
        images = read_f32_blob(in_dir / f"{name}.images.bin",
                               (len(poses), res, res, 3))
        splits[name] = [
            Sample(images[i],
                   Pose(np.array(p["x"]), np.array(p["q"])), int(p["scene"]))
            for i, p in enumerate(poses)
        ]
    return Dataset(splits["train"], splits["test"],
                   [_scene_from_json(d) for d in meta["scenes"]],
                   res, int(meta["n_train"]), int(meta["n_test"]),
                   int(meta["seed"]))


# -- array views used by training ------------------------------------------------

def stack_images(samples) -> np.ndarray:
    """(n, 3*res*res) float64 matrix of flattened images."""
    return np.stack([s.image.reshape(-1).astype(np.float64) for s in samples])


def stack_positions(samples) -> np.ndarray:
    return np.stack([s.pose.x for s in samples])


def stack_quats(samples) -> np.ndarray:
    return np.stack([s.pose.q for s in samples])


def stack_scene_ids(samples) -> np.ndarray:
    return np.array([s.scene_id for s in samples], dtype=np.int64)
