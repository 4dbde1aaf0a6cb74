import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from gtfuse import geometry as geo
from gtfuse.errors import DegenerateScrew
from gtfuse.geometry import Pose


def _hamilton(a, b):
    # written out term by term as an independent oracle
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _rand_pose(rng):
    return Pose(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))


vec3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


def test_exp_identity():
    np.testing.assert_array_equal(geo.so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_x():
    R = geo.so3_exp([np.pi / 2, 0, 0])
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 0, 1], [0, -1, 0], atol=1e-15)


def test_exp_matches_scipy(rng):
    phi = rng.normal(size=(200, 3))
    np.testing.assert_allclose(geo.so3_exp(phi), Rotation.from_rotvec(phi).as_matrix(), atol=1e-13)


def test_exp_log_roundtrip_1000(rng):
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    phi = d * rng.uniform(0, np.pi - 1e-6, (1000, 1))
    np.testing.assert_allclose(geo.so3_log(geo.so3_exp(phi)), phi, atol=1e-10)


@pytest.mark.parametrize("scale", [0.0, 1e-12, 1e-8, 1e-6, 1e-5, 1e-3])
def test_small_angle_branches(rng, scale):
    phi = rng.normal(size=3)
    phi = phi / np.linalg.norm(phi) * scale
    R = geo.so3_exp(phi)
    np.testing.assert_allclose(R, Rotation.from_rotvec(phi).as_matrix(), atol=1e-15)
    np.testing.assert_allclose(geo.so3_log(R), phi, atol=1e-15)


def test_log_identity():
    np.testing.assert_array_equal(geo.so3_log(np.eye(3)), np.zeros(3))


def test_log_half_turn_z():
    R = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(geo.so3_log(R), [0, 0, np.pi], atol=1e-12)


@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-7, 1e-5, 1e-3])
def test_log_near_pi(rng, eps):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * (np.pi - eps)
    out = geo.so3_log(geo.so3_exp(phi))
    assert abs(np.linalg.norm(out) - (np.pi - eps)) < 1e-9
    # exactly at pi the sign is a convention; otherwise it must match
    if eps > 0:
        np.testing.assert_allclose(out, phi, atol=1e-7)
    np.testing.assert_allclose(geo.so3_exp(out), geo.so3_exp(phi), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_exp_is_rotation(phi):
    assert geo.is_rotation(geo.so3_exp(phi))


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_log_norm_in_range(phi):
    n = np.linalg.norm(geo.so3_log(geo.so3_exp(phi)))
    assert 0.0 <= n <= np.pi + 1e-12


def test_right_jacobian_inverse(rng):
    phi = rng.normal(size=(50, 3))
    np.testing.assert_allclose(geo.right_jacobian(phi) @ geo.right_jacobian_inv(phi),
                               np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)


def test_right_jacobian_first_order(rng):
    # Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)
    phi = rng.normal(size=3)
    d = 1e-6 * rng.normal(size=3)
    lhs = geo.so3_exp(phi + d)
    rhs = geo.so3_exp(phi) @ geo.so3_exp(geo.right_jacobian(phi) @ d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_quat_identity_operators():
    q = np.array([1.0, 0, 0, 0])
    np.testing.assert_array_equal(geo.quat_left(q), np.eye(4))
    np.testing.assert_array_equal(geo.quat_right(q), np.eye(4))


def test_quat_operators_hamilton(rng):
    for _ in range(100):
        a, b = rng.normal(size=4), rng.normal(size=4)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        ref = _hamilton(a, b)
        np.testing.assert_allclose(geo.quat_left(a) @ b, ref, atol=1e-12)
        np.testing.assert_allclose(geo.quat_right(b) @ a, ref, atol=1e-12)
        np.testing.assert_allclose(geo.quat_mul(a, b), ref, atol=1e-12)
        L, R = geo.quat_left(a), geo.quat_right(b)
        np.testing.assert_allclose(L @ R - R @ L, 0, atol=1e-12)


def test_quat_product_is_rotation_product(rng):
    for _ in range(100):
        a, b = rng.normal(size=4), rng.normal(size=4)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        np.testing.assert_allclose(geo.quat_to_rot(geo.quat_mul(a, b)),
                                   geo.quat_to_rot(a) @ geo.quat_to_rot(b), atol=1e-12)


def test_quat_convention_scalar_first_hamilton():
    # 90 deg about z: scalar-first (cos 45, 0, 0, sin 45) maps x to y
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(geo.quat_to_rot(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_quat_rot_roundtrip(rng):
    R = Rotation.random(300, random_state=rng).as_matrix()
    q = geo.rot_to_quat(R)
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(geo.quat_to_rot(q), R, atol=1e-12)
    sq = Rotation.from_matrix(R).as_quat()[:, [3, 0, 1, 2]]
    sq *= np.sign(sq[:, :1])
    np.testing.assert_allclose(q, sq, atol=1e-12)


def test_project_rotation(rng):
    R = Rotation.random(20, random_state=rng).as_matrix()
    noisy = R + 1e-6 * rng.normal(size=R.shape)
    P = geo.project_rotation(noisy)
    assert np.all(geo.is_rotation(P))
    np.testing.assert_allclose(P, R, atol=1e-5)


def test_pose_group_laws(rng):
    a, b, c = (_rand_pose(rng) for _ in range(3))
    I = Pose.identity()
    e = geo.pose_compose(a, geo.pose_inverse(a))
    np.testing.assert_allclose(e.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(e.p, 0, atol=1e-12)
    ib = I @ b
    np.testing.assert_array_equal(ib.R, b.R)
    np.testing.assert_array_equal(ib.p, b.p)
    ii = a.inverse().inverse()
    np.testing.assert_allclose(ii.R, a.R, atol=1e-12)
    np.testing.assert_allclose(ii.p, a.p, atol=1e-12)
    l, r = (a @ b) @ c, a @ (b @ c)
    np.testing.assert_allclose(l.matrix(), r.matrix(), atol=1e-12)
    np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_screw_axis_aligned():
    s = geo.screw_invariants(Pose(geo.so3_exp([0, 0, np.pi / 2]), np.array([0.0, 0.0, 2.0])))
    assert s.theta == pytest.approx(np.pi / 2, abs=1e-12)
    assert s.d == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("p", [[0, 0, 0], [1, 2, 3]])
def test_screw_identity_degenerate(p):
    with pytest.raises(DegenerateScrew):
        geo.screw_invariants(Pose(np.eye(3), np.array(p, dtype=float)))


def test_screw_below_floor_degenerate():
    with pytest.raises(DegenerateScrew):
        geo.screw_invariants(Pose(geo.so3_exp([5e-5, 0, 0]), np.ones(3)))


def test_screw_matches_closed_form(rng):
    # d = ((R - R^T)^v . p) / (2 sin theta)
    for _ in range(50):
        T = _rand_pose(rng)
        th = np.arccos(np.clip((np.trace(T.R) - 1) / 2, -1, 1))
        w = np.array([T.R[2, 1] - T.R[1, 2], T.R[0, 2] - T.R[2, 0], T.R[1, 0] - T.R[0, 1]])
        s = geo.screw_invariants(T)
        assert s.theta == pytest.approx(th, abs=1e-9)
        assert s.d == pytest.approx(w @ T.p / (2 * np.sin(th)), rel=1e-9, abs=1e-9)


def test_screw_congruence(rng):
    for _ in range(100):
        T, X = _rand_pose(rng), _rand_pose(rng)
        if np.pi - geo.rotation_angle(T.R) < 1e-3:
            continue
        s0 = geo.screw_invariants(T)
        s1 = geo.screw_invariants(X.inverse() @ T @ X)
        assert s1.theta == pytest.approx(s0.theta, abs=1e-9)
        assert s1.d == pytest.approx(s0.d, abs=1e-9)
