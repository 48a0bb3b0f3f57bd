"""Camera poses, quaternion geometry, training losses, and Fourier features.

A pose is a world-frame position x (meters) plus a unit quaternion q in
(w, x, y, z) order. Quaternions are kept in canonical sign (first nonzero
component positive) so that datasets and checkpoints serialize identically
across runs. The orientation loss compares raw quaternion components, which
is sign-sensitive on purpose: training data is canonicalized instead of
symmetrizing the loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NonFiniteError

QUAT_NORM_TOL = 1e-6
_ZERO_NORM = 1e-12


def canonical_quat(q) -> np.ndarray:
    """Normalize to unit length and flip sign so the first nonzero entry > 0."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < _ZERO_NORM:
        raise ValueError("quaternion norm too small to normalize")
    q = q / n
    for c in q:
        if c != 0.0:
            return -q if c < 0.0 else q
    raise ValueError("zero quaternion")  # unreachable after the norm check


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product in (w, x, y, z) order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotate_vector(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion (q v q*)."""
    qv = q[1:]
    t = 2.0 * np.cross(qv, v)
    return v + q[0] * t + np.cross(qv, t)


@dataclass(frozen=True)
class Pose:
    """World-frame camera pose; q must already be unit and canonical-sign."""
    x: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        q = np.ascontiguousarray(self.q, dtype=np.float64)
        if x.shape != (3,) or q.shape != (4,):
            raise ValueError(f"pose needs x (3,) and q (4,), got {x.shape}, {q.shape}")
        if not (np.isfinite(x).all() and np.isfinite(q).all()):
            raise ValueError("pose holds non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)} not unit")
        for c in q:
            if c != 0.0:
                if c < 0.0:
                    raise ValueError("quaternion sign not canonical")
                break
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "q", q)


def make_pose(x, q) -> Pose:
    """Build a Pose, normalizing and sign-canonicalizing q first."""
    return Pose(np.asarray(x, dtype=np.float64), canonical_quat(q))


@dataclass(frozen=True)
class LatentPair:
    """Position and orientation latent codes of equal dimension."""
    z_x: np.ndarray
    z_q: np.ndarray

    def __post_init__(self):
        zx = np.ascontiguousarray(self.z_x, dtype=np.float64)
        zq = np.ascontiguousarray(self.z_q, dtype=np.float64)
        if zx.ndim != 1 or zq.ndim != 1 or zx.shape != zq.shape:
            raise ValueError(
                f"latents must be equal-length vectors, got {zx.shape}, {zq.shape}")
        if not (np.isfinite(zx).all() and np.isfinite(zq).all()):
            raise ValueError("latent pair holds non-finite values")
        object.__setattr__(self, "z_x", zx)
        object.__setattr__(self, "z_q", zq)

    @property
    def dim(self) -> int:
        return self.z_x.shape[0]

    def concatenated(self) -> np.ndarray:
        """Joint code (position latent first), used by the pose database."""
        return np.concatenate([self.z_x, self.z_q])


@dataclass(frozen=True)
class FourierSpec:
    """Sinusoidal feature map: levels frequencies 2^0..2^(levels-1), input kept.

    levels = 0 keeps only the raw input (the ablation baseline).
    """
    levels: int
    include_input: bool = True

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if not self.include_input:
            raise ValueError("the raw input is always part of the encoding")

    def encoded_length(self, m: int) -> int:
        return m * (2 * self.levels + 1)


@dataclass
class LossWeights:
    """Learnable uncertainty weights for the combined pose loss."""
    s_x: float = 0.0
    s_q: float = -3.0

    def __post_init__(self):
        if not (math.isfinite(self.s_x) and math.isfinite(self.s_q)):
            raise ValueError("loss weights must be finite")


def fourier_encode(v, spec: FourierSpec) -> np.ndarray:
    """Per coordinate p: (p, sin(2^0 pi p), cos(2^0 pi p), ..., sin/cos 2^(L-1))."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a nonempty vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteError("fourier_encode: non-finite input")
    freqs = np.pi * (2.0 ** np.arange(spec.levels))
    out = np.empty(spec.encoded_length(v.size))
    w = 2 * spec.levels + 1
    for i, p in enumerate(v):
        out[i * w] = p
        out[i * w + 1:(i + 1) * w:2] = np.sin(freqs * p)
        out[i * w + 2:(i + 1) * w:2] = np.cos(freqs * p)
    return out


# -- scalar losses and metrics ------------------------------------------------

def position_loss(x, x0) -> float:
    """Euclidean distance in meters."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != (3,) or x0.shape != (3,):
        raise ValueError(f"positions must be 3-vectors, got {x.shape}, {x0.shape}")
    return float(np.linalg.norm(x - x0))


def orientation_loss(q, q0) -> float:
    """Component distance ||q0 - q/||q|| ||; q is normalized, sign is kept."""
    q = np.asarray(q, dtype=np.float64)
    q0 = np.asarray(q0, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < _ZERO_NORM:
        raise ValueError("orientation_loss: quaternion norm below 1e-12")
    return float(np.linalg.norm(q0 - q / n))


def learnable_pose_loss(loss_x: float, loss_q: float, weights: LossWeights) -> float:
    return (loss_x * math.exp(-weights.s_x) + weights.s_x
            + loss_q * math.exp(-weights.s_q) + weights.s_q)


def distillation_loss(teacher: LatentPair, student: LatentPair,
                      decoded_pose: Pose, gt_pose: Pose,
                      weights: LossWeights) -> float:
    """Latent matching plus the weighted pose loss on the decoded pose."""
    if teacher.dim != student.dim:
        raise ValueError(
            f"latent dims differ: teacher {teacher.dim}, student {student.dim}")
    lat = (float(np.linalg.norm(teacher.z_x - student.z_x))
           + float(np.linalg.norm(teacher.z_q - student.z_q)))
    pose_term = learnable_pose_loss(
        position_loss(decoded_pose.x, gt_pose.x),
        orientation_loss(decoded_pose.q, gt_pose.q), weights)
    return lat + pose_term


def angular_error_deg(q1, q2) -> float:
    """Rotation angle between unit quaternions, degrees; double-cover safe.

    Equals 2*arccos(min(1, |<q1, q2>|)) in exact arithmetic; evaluated via
    atan2 on the relative quaternion so identical inputs give exactly 0
    (arccos would amplify the dot product's last-bit rounding to ~1e-6 deg).
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    # Vector part of q1 * conj(q2), grouped so q1 = +/-q2 cancels exactly.
    vec = (q2[0] * q1[1:] - q1[0] * q2[1:]) - np.cross(q1[1:], q2[1:])
    return math.degrees(
        2.0 * math.atan2(np.linalg.norm(vec), abs(float(np.dot(q1, q2)))))


def median_report(errors) -> tuple[float, float]:
    """Median position and angular error with midpoint interpolation."""
    pairs = list(errors)
    if not pairs:
        raise ValueError("median_report: empty error list")
    pos = np.array([p[0] for p in pairs], dtype=np.float64)
    ang = np.array([p[1] for p in pairs], dtype=np.float64)
    return float(np.median(pos)), float(np.median(ang))


# -- graph-side loss builders ---------------------------------------------

def position_loss_node(g: Graph, x: int, x0: int) -> int:
    return g.l2norm(g.sub(x, x0))


def orientation_loss_node(g: Graph, q: int, q0: int) -> int:
    return g.l2norm(g.sub(q0, g.unit(q)))


def pose_loss_node(g: Graph, loss_x: int, loss_q: int, s_x: int, s_q: int) -> int:
    """Uncertainty-weighted sum; s_x, s_q are (1,) parameter nodes."""
    term_x = g.add(g.mul(loss_x, g.exp(g.neg(s_x))), s_x)
    term_q = g.add(g.mul(loss_q, g.exp(g.neg(s_q))), s_q)
    return g.add(term_x, term_q)
