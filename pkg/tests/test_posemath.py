"""Pose types, quaternion geometry, losses, Fourier features, metrics."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poselab.autodiff import Graph, grad_check
from poselab.posemath import (
    FourierSpec, LatentPair, LossWeights, Pose, angular_error_deg,
    canonical_quat, distillation_loss, fourier_encode, learnable_pose_loss,
    make_pose, median_report, orientation_loss, orientation_loss_node,
    pose_loss_node, position_loss, position_loss_node, quat_conj, quat_mul,
    rotate_vector,
)
from poselab.rng import SplitMix64


def _random_unit_quat(rng):
    return canonical_quat(np.array(rng.normals(4)))


# -- pose and quaternion basics ----------------------------------------------

def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(ValueError, match="norm"):
        Pose(np.zeros(3), np.array([1.0, 1.0, 0.0, 0.0]))


def test_pose_rejects_non_canonical_sign():
    with pytest.raises(ValueError, match="sign"):
        Pose(np.zeros(3), np.array([-1.0, 0.0, 0.0, 0.0]))


def test_make_pose_canonicalizes():
    p = make_pose([1, 2, 3], [-2.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(p.q, [1.0, 0.0, 0.0, 0.0])


def test_canonical_quat_first_nonzero_positive():
    q = canonical_quat([0.0, -0.6, 0.0, 0.8])
    np.testing.assert_allclose(q, [0.0, 0.6, 0.0, -0.8], atol=1e-15)


def test_rotate_vector_quarter_turn_about_z():
    half = math.sqrt(0.5)
    q = np.array([half, 0.0, 0.0, half])  # 90 deg about z
    np.testing.assert_allclose(rotate_vector(q, np.array([1.0, 0, 0])),
                               [0.0, 1.0, 0.0], atol=1e-15)


def test_quat_mul_matches_sequential_rotation():
    rng = SplitMix64(11)
    for _ in range(20):
        qa, qb = _random_unit_quat(rng), _random_unit_quat(rng)
        v = np.array(rng.normals(3))
        lhs = rotate_vector(quat_mul(qa, qb), v)
        rhs = rotate_vector(qa, rotate_vector(qb, v))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_quat_conj_inverts_rotation():
    rng = SplitMix64(12)
    q = _random_unit_quat(rng)
    v = np.array(rng.normals(3))
    np.testing.assert_allclose(rotate_vector(quat_conj(q), rotate_vector(q, v)),
                               v, atol=1e-12)


def test_latent_pair_rejects_length_mismatch():
    with pytest.raises(ValueError):
        LatentPair(np.zeros(4), np.zeros(5))


# -- fourier features ----------------------------------------------------------

def test_fourier_encode_zero_scalar():
    out = fourier_encode(np.array([0.0]), FourierSpec(levels=2))
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 0.0, 1.0])


def test_fourier_encode_half():
    out = fourier_encode(np.array([0.5]), FourierSpec(levels=1))
    np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-15)


def test_fourier_encode_three_vector_l6_length():
    out = fourier_encode(np.zeros(3), FourierSpec(levels=6))
    assert out.shape == (39,)


def test_fourier_encode_zero_levels_is_raw_input():
    v = np.array([1.5, -2.0])
    np.testing.assert_array_equal(fourier_encode(v, FourierSpec(levels=0)), v)
    with pytest.raises(ValueError, match="levels"):
        FourierSpec(levels=-1)


@given(st.integers(1, 8), st.integers(0, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_fourier_encode_length_and_bounds(m, levels, seed):
    rng = SplitMix64(seed)
    v = 5.0 * np.array(rng.normals(m))
    spec = FourierSpec(levels=levels)
    out = fourier_encode(v, spec)
    assert out.shape == (m * (2 * levels + 1),)
    w = 2 * levels + 1
    for i in range(m):
        assert out[i * w] == v[i]
        assert np.all(np.abs(out[i * w + 1:(i + 1) * w]) <= 1.0 + 1e-12)


def test_fourier_encode_matches_direct_formula():
    rng = SplitMix64(3)
    v = np.array(rng.normals(3))
    out = fourier_encode(v, FourierSpec(levels=4))
    direct = []
    for p in v:
        direct.append(p)
        for lvl in range(4):
            direct.append(math.sin(2.0 ** lvl * math.pi * p))
            direct.append(math.cos(2.0 ** lvl * math.pi * p))
    np.testing.assert_allclose(out, direct, atol=1e-15)


# -- losses --------------------------------------------------------------------

def test_position_loss_examples():
    assert position_loss([1, 2, 3], [1, 2, 3]) == 0.0
    assert position_loss([3, 4, 0], [0, 0, 0]) == 5.0


def test_position_loss_matches_norm_oracle():
    rng = SplitMix64(4)
    for _ in range(25):
        a, b = np.array(rng.normals(3)), np.array(rng.normals(3))
        assert position_loss(a, b) == pytest.approx(
            math.sqrt(float(((a - b) ** 2).sum())), abs=1e-12)


def test_orientation_loss_examples():
    q0 = canonical_quat([0.3, -0.5, 0.1, 0.8])
    assert orientation_loss(q0, q0) == 0.0
    assert orientation_loss(2.0 * q0, q0) == pytest.approx(0.0, abs=1e-15)
    assert orientation_loss(-q0, q0) == pytest.approx(2.0, abs=1e-12)


def test_orientation_loss_scale_invariant():
    rng = SplitMix64(5)
    q = np.array(rng.normals(4))
    q0 = _random_unit_quat(rng)
    for c in (0.1, 1.0, 42.0):
        assert orientation_loss(c * q, q0) == pytest.approx(
            orientation_loss(q, q0), abs=1e-12)


def test_orientation_loss_rejects_tiny_norm():
    with pytest.raises(ValueError):
        orientation_loss(np.zeros(4), np.array([1.0, 0, 0, 0]))


def test_learnable_pose_loss_examples():
    assert learnable_pose_loss(1.2, 0.4, LossWeights(0.0, 0.0)) == pytest.approx(1.6)
    assert learnable_pose_loss(0.0, 0.0, LossWeights(0.7, -0.2)) == pytest.approx(0.5)
    expected = 1.0 * math.exp(0.0) + 0.0 + 0.1 * math.exp(3.0) - 3.0
    assert learnable_pose_loss(1.0, 0.1, LossWeights(0.0, -3.0)) == pytest.approx(
        expected, abs=1e-12)


def test_loss_weights_defaults():
    w = LossWeights()
    assert (w.s_x, w.s_q) == (0.0, -3.0)


def test_distillation_loss_teacher_equals_student():
    rng = SplitMix64(6)
    z = LatentPair(np.array(rng.normals(8)), np.array(rng.normals(8)))
    pose = make_pose(rng.normals(3), rng.normals(4))
    w = LossWeights(0.25, -1.5)
    assert distillation_loss(z, z, pose, pose, w) == pytest.approx(
        w.s_x + w.s_q, abs=1e-12)


def test_distillation_loss_unit_latents_zero_student():
    teacher = LatentPair(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    student = LatentPair(np.zeros(3), np.zeros(3))
    pose = make_pose([0, 0, 0], [1, 0, 0, 0])
    w = LossWeights(0.5, -2.0)
    assert distillation_loss(teacher, student, pose, pose, w) == pytest.approx(
        2.0 + w.s_x + w.s_q, abs=1e-12)


def test_distillation_loss_termwise_oracle():
    rng = SplitMix64(7)
    t = LatentPair(np.array(rng.normals(16)), np.array(rng.normals(16)))
    s = LatentPair(np.array(rng.normals(16)), np.array(rng.normals(16)))
    decoded = make_pose(rng.normals(3), rng.normals(4))
    gt = make_pose(rng.normals(3), rng.normals(4))
    w = LossWeights(0.3, -0.9)
    expected = (np.linalg.norm(t.z_x - s.z_x) + np.linalg.norm(t.z_q - s.z_q)
                + learnable_pose_loss(position_loss(decoded.x, gt.x),
                                      orientation_loss(decoded.q, gt.q), w))
    assert distillation_loss(t, s, decoded, gt, w) == pytest.approx(
        expected, abs=1e-12)


def test_distillation_loss_rejects_dim_mismatch():
    t = LatentPair(np.zeros(4), np.zeros(4))
    s = LatentPair(np.zeros(5), np.zeros(5))
    pose = make_pose([0, 0, 0], [1, 0, 0, 0])
    with pytest.raises(ValueError):
        distillation_loss(t, s, pose, pose, LossWeights())


# -- metrics -------------------------------------------------------------------

def test_angular_error_examples():
    q = canonical_quat([0.2, 0.4, -0.1, 0.6])
    assert angular_error_deg(q, q) == 0.0
    assert angular_error_deg(q, -q) == 0.0
    half = math.sqrt(0.5)
    assert angular_error_deg([1, 0, 0, 0], [half, 0, 0, half]) == pytest.approx(90.0)


def test_angular_error_matches_arccos_formula():
    rng = SplitMix64(14)
    for _ in range(30):
        a, b = _random_unit_quat(rng), _random_unit_quat(rng)
        ref = math.degrees(2.0 * math.acos(min(1.0, abs(float(np.dot(a, b))))))
        assert angular_error_deg(a, b) == pytest.approx(ref, abs=1e-7)


def test_angular_error_pseudometric_on_sampled_triples():
    rng = SplitMix64(8)
    for _ in range(30):
        a, b, c = (_random_unit_quat(rng) for _ in range(3))
        assert angular_error_deg(a, b) == pytest.approx(angular_error_deg(b, a))
        assert angular_error_deg(a, c) <= (
            angular_error_deg(a, b) + angular_error_deg(b, c) + 1e-9)
    assert angular_error_deg(a, a) == 0.0


def test_median_report_examples():
    assert median_report([(1.0, 10.0), (3.0, 30.0)]) == (2.0, 20.0)
    assert median_report([(5.0, 50.0)]) == (5.0, 50.0)


def test_median_report_matches_sort_oracle():
    rng = SplitMix64(9)
    for n in (3, 4, 11, 20):
        pairs = [(rng.uniform() * 9, rng.uniform() * 90) for _ in range(n)]
        got = median_report(pairs)
        for idx in (0, 1):
            vals = sorted(p[idx] for p in pairs)
            mid = (vals[(n - 1) // 2] + vals[n // 2]) / 2.0
            assert got[idx] == pytest.approx(mid, abs=1e-12)


def test_median_report_rejects_empty():
    with pytest.raises(ValueError):
        median_report([])


# -- graph-side builders -------------------------------------------------------

def test_graph_losses_match_scalar_losses():
    rng = SplitMix64(10)
    x = np.array(rng.normals(3))
    x0 = np.array(rng.normals(3))
    q = np.array(rng.normals(4))
    q0 = _random_unit_quat(rng)
    w = LossWeights(0.4, -1.1)

    g = Graph()
    lx = position_loss_node(g, g.constant(x.reshape(1, 3)),
                            g.constant(x0.reshape(1, 3)))
    lq = orientation_loss_node(g, g.constant(q.reshape(1, 4)),
                               g.constant(q0.reshape(1, 4)))
    total = pose_loss_node(g, lx, lq, g.constant([w.s_x]), g.constant([w.s_q]))

    assert g.value(lx)[0] == pytest.approx(position_loss(x, x0), abs=1e-12)
    assert g.value(lq)[0] == pytest.approx(orientation_loss(q, q0), abs=1e-12)
    assert g.value(total)[0] == pytest.approx(
        learnable_pose_loss(position_loss(x, x0), orientation_loss(q, q0), w),
        abs=1e-12)


def test_pose_loss_gradient_wrt_uncertainty_weights():
    """d/ds_x of the combined loss is 1 - L_x * exp(-s_x); same pattern for s_q."""
    lx_val, lq_val = 0.8, 0.05
    sx0, sq0 = 0.3, -2.0

    def build(g, p):
        lx = g.constant([lx_val])
        lq = g.constant([lq_val])
        return pose_loss_node(g, lx, lq, p[0], p[1])

    res = grad_check(build, [np.array([sx0]), np.array([sq0])], fd_step=1e-6)
    assert res.max_rel_error < 1e-6

    g = Graph()
    sx = g.param([sx0])
    sq = g.param([sq0])
    loss = build(g, [sx, sq])
    grads = g.backward(loss)
    assert grads[sx][0] == pytest.approx(1.0 - lx_val * math.exp(-sx0), abs=1e-12)
    assert grads[sq][0] == pytest.approx(1.0 - lq_val * math.exp(-sq0), abs=1e-12)
