"""Pose retrieval and test-time refinement on learned pose encodings.

A PoseDatabase stores only seven reals and one integer per training view.
Position refinement matches a query's latent pair against affine
combinations of encoded neighbor poses: weights live on the plane
sum(a) = 1 (negatives allowed), optimized either iteratively with AdamW
on an unconstrained vector plus orthogonal projection, or exactly via
the bordered KKT system of the constrained least-squares problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import make_optim, step
from .models import (AprModel, DecoderModel, PaeModel, RprModel, apr_forward,
                     decode_image, pae_forward, rpr_forward)
from .posemath import LatentPair, Pose, canonical_quat, make_pose, quat_mul
from .rng import SplitMix64
from .serial import read_json, write_json

REFINE_MODES = ("iterative", "closed-form")
KKT_DAMPING = 1e-8
WEIGHT_SUM_TOL = 1e-9
ORIENT_JITTER_DEG = 10.0


class RefineDiverged(RuntimeError):
    """Raised when the refinement objective becomes non-finite."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RefineConfig:
    k: int = 3
    outer: int = 3
    inner: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-2
    mode: str = "iterative"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"need k >= 2 neighbors, got {self.k}")
        if self.outer < 1 or self.inner < 1:
            raise ValueError("need at least one outer and one inner step")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.mode not in REFINE_MODES:
            raise ValueError(f"mode must be one of {REFINE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class AffineWeights:
    """Weights on the constraint plane sum(a) = 1; entries may be negative."""

    a: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.a, dtype=np.float64))
        if a.ndim != 1 or a.size < 2:
            raise ValueError(f"weights must be a k-vector with k >= 2, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("weights must be finite")
        if abs(float(a.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {a.sum()!r}, expected 1")
        object.__setattr__(self, "a", a)


@dataclass(frozen=True)
class PoseDatabase:
    """Immutable train-split pose store: (pose, scene id) per entry."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((pose, int(scene)) for pose, scene in self.entries)
        for pose, _ in entries:
            if not isinstance(pose, Pose):
                raise TypeError(f"database entries need Pose values, got {type(pose)}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def positions(self) -> np.ndarray:
        return np.stack([pose.x for pose, _ in self.entries])

    @classmethod
    def from_dataset(cls, dataset) -> "PoseDatabase":
        return cls(tuple((s.pose, s.scene_id) for s in dataset.train))


def save_pose_db(db: PoseDatabase, path) -> None:
    write_json(path, [{"x": pose.x.tolist(), "q": pose.q.tolist(),
                       "scene": scene} for pose, scene in db.entries])


def load_pose_db(path) -> PoseDatabase:
    rows = read_json(path)
    return PoseDatabase(tuple((make_pose(r["x"], r["q"]), r["scene"])
                              for r in rows))


def knn_poses(db: PoseDatabase, position: np.ndarray, k: int) -> list:
    """Exact k nearest entries by position; ties broken by index ascending."""
    if k < 1:
        raise ValueError(f"need k >= 1, got {k}")
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    position = np.asarray(position, dtype=np.float64).reshape(3)
    dists = np.linalg.norm(db.positions() - position, axis=1)
    order = np.argsort(dists, kind="stable")[:k]
    return [db.entries[i] for i in order]


# -- affine weight optimization ------------------------------------------------

def project_to_weight_plane(w: np.ndarray) -> np.ndarray:
    """Euclidean projection of w onto the plane sum(a) = 1."""
    w = np.asarray(w, dtype=np.float64)
    return w + (1.0 - float(w.sum())) / w.size


def closed_form_affine_weights(z_p: np.ndarray,
                               encodings: np.ndarray) -> AffineWeights:
    """Exact constrained least-squares weights via the bordered KKT system.

    encodings holds one latent column per neighbor. The normal equations
    get Tikhonov damping on the Gram matrix, so duplicated columns still
    yield the symmetric minimum-norm solution.
    """
    z_p = np.asarray(z_p, dtype=np.float64).reshape(-1)
    enc = np.asarray(encodings, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[0] != z_p.size:
        raise ValueError(
            f"encodings shape {enc.shape} incompatible with latent length {z_p.size}")
    k = enc.shape[1]
    if k < 2:
        raise ValueError(f"need k >= 2 neighbor encodings, got {k}")
    if not (np.isfinite(z_p).all() and np.isfinite(enc).all()):
        raise ValueError("latents must be finite")
    system = np.zeros((k + 1, k + 1))
    system[:k, :k] = enc.T @ enc + KKT_DAMPING * np.eye(k)
    system[:k, k] = 1.0
    system[k, :k] = 1.0
    rhs = np.concatenate([enc.T @ z_p, [1.0]])
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular constrained least-squares system: {exc}")
    if not np.isfinite(solution).all():
        raise ValueError("singular constrained least-squares system")
    return AffineWeights(project_to_weight_plane(solution[:k]))


def _latent_objective(z_p: np.ndarray, enc: np.ndarray, a: np.ndarray) -> float:
    return float(np.linalg.norm(z_p - enc @ a))


def _iterate_weights(z_p: np.ndarray, enc: np.ndarray,
                     cfg: RefineConfig) -> tuple:
    """Projected AdamW descent; returns (best weights, best-so-far trace).

    The trace records the best objective seen at the start and after each
    outer block, so it is non-increasing by construction; the returned
    weights are the best iterate, not necessarily the last one.
    """
    k = enc.shape[1]
    w = np.full(k, 1.0 / k)
    optim = make_optim("adamw", [w], cfg.lr, weight_decay=cfg.weight_decay)
    best_a = project_to_weight_plane(w)
    best_f = _latent_objective(z_p, enc, best_a)
    trace = [best_f]
    for _ in range(cfg.outer):
        for _ in range(cfg.inner):
            a = project_to_weight_plane(w)
            f = _latent_objective(z_p, enc, a)
            if not math.isfinite(f):
                raise RefineDiverged(f"objective became {f!r}", trace)
            if f < best_f:
                best_f, best_a = f, a
            residual = z_p - enc @ a
            scale = np.linalg.norm(residual)
            if scale < 1e-12:
                grad = np.zeros(k)
            else:
                pulled = -(enc.T @ residual) / scale
                grad = pulled - pulled.mean()
            (w,) = step(optim, [w], [grad], names=["weights"])
        a = project_to_weight_plane(w)
        f = _latent_objective(z_p, enc, a)
        if not math.isfinite(f):
            raise RefineDiverged(f"objective became {f!r}", trace)
        if f < best_f:
            best_f, best_a = f, a
        trace.append(best_f)
    return best_a, trace


def weight_gradient(z_p: np.ndarray, enc: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of ||z_p - enc a(w)|| in w, a(w) the plane projection.

    Matches reverse-mode differentiation of the same graph; kept analytic
    so per-query refinement stays well under the latency budget.
    """
    a = project_to_weight_plane(w)
    residual = z_p - enc @ a
    scale = np.linalg.norm(residual)
    if scale < 1e-12:
        return np.zeros(w.size)
    pulled = -(enc.T @ residual) / scale
    return pulled - pulled.mean()


def refine_position(query: LatentPair, neighbors, pae: PaeModel,
                    cfg: RefineConfig) -> tuple:
    """Move a position estimate onto the best affine mix of its neighbors.

    Returns (refined position, AffineWeights, objective trace).
    """
    if len(neighbors) != cfg.k:
        raise ValueError(f"got {len(neighbors)} neighbors for k={cfg.k}")
    z_p = query.concatenated()
    enc = np.column_stack([pae_forward(pae, pose, scene).concatenated()
                           for pose, scene in neighbors])
    if cfg.mode == "closed-form":
        weights = closed_form_affine_weights(z_p, enc)
        trace = [_latent_objective(z_p, enc, weights.a)]
    else:
        a, trace = _iterate_weights(z_p, enc, cfg)
        weights = AffineWeights(a)
    positions = np.stack([pose.x for pose, _ in neighbors])
    refined = positions.T @ weights.a
    return refined, weights, trace


def refine_with_random_guess(gt_pose: Pose, sigma: float, pae: PaeModel,
                             db: PoseDatabase, cfg: RefineConfig,
                             seed: int = 0, scene_id: int = 0,
                             orient_jitter_deg: float = ORIENT_JITTER_DEG
                             ) -> tuple:
    """Refine a corrupted copy of a known pose without any image.

    The guess perturbs the position by an isotropic Gaussian and the
    orientation by a small random rotation; its own encoding serves as
    the query latent. Returns (initial error, refined error).
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = SplitMix64(seed)
    guess_x = gt_pose.x + sigma * np.array(rng.normals(3))
    axis = rng.unit_vector(3)
    angle = math.radians(rng.normal(orient_jitter_deg))
    twist = np.concatenate([[math.cos(angle / 2.0)],
                            math.sin(angle / 2.0) * axis])
    guess = make_pose(guess_x, quat_mul(gt_pose.q, twist))
    query = pae_forward(pae, guess, scene_id)
    neighbors = knn_poses(db, guess.x, cfg.k)
    refined, _, _ = refine_position(query, neighbors, pae, cfg)
    initial_error = float(np.linalg.norm(guess.x - gt_pose.x))
    refined_error = float(np.linalg.norm(refined - gt_pose.x))
    return initial_error, refined_error


def affine_orientation(quats, a) -> np.ndarray:
    """Normalized affine mix of quaternions, all sign-aligned to the first."""
    quats = np.asarray(quats, dtype=np.float64)
    if quats.ndim != 2 or quats.shape[1] != 4:
        raise ValueError(f"expected k x 4 quaternions, got {quats.shape}")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size != quats.shape[0]:
        raise ValueError(f"{a.size} weights for {quats.shape[0]} quaternions")
    if abs(float(a.sum()) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights sum to {a.sum()!r}, expected 1")
    signs = np.where(quats @ quats[0] < 0.0, -1.0, 1.0)
    combined = (signs[:, None] * quats).T @ a
    norm = float(np.linalg.norm(combined))
    if norm < 1e-9:
        raise ValueError("weighted quaternions cancel; mix is undefined")
    return canonical_quat(combined / norm)


def virtual_rpr_refine(query_image: np.ndarray, apr: AprModel, pae: PaeModel,
                       decoder: DecoderModel, rpr: RprModel,
                       db: PoseDatabase, rpr_fn=None) -> Pose:
    """Refine an image-based position estimate against a decoded neighbor.

    The nearest stored pose to the initial estimate is re-rendered through
    the decoder, and the relative regressor predicts the world-frame offset
    from that neighbor to the query. Orientation stays as estimated.
    rpr_fn(query image, decoded image, neighbor pose) may replace the
    learned regressor.
    """
    _, estimate = apr_forward(apr, query_image)
    (ref_pose, ref_scene), = knn_poses(db, estimate.x, 1)
    decoded = decode_image(decoder, pae, ref_pose, ref_scene)
    if rpr_fn is None:
        delta = rpr_forward(rpr, query_image, decoded)
    else:
        delta = np.asarray(rpr_fn(query_image, decoded, ref_pose),
                           dtype=np.float64).reshape(3)
    return make_pose(ref_pose.x + delta, estimate.q)
