import math

import numpy as np
import pytest

from armtwin import kinematics as kin


# --- independent oracles -----------------------------------------------------


def dh_matrix_oracle(a, d, alpha, theta):
    """Element-wise 4x4 of the modified-DH transform, written out directly."""
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array(
        [
            [ct, -st, 0.0, a],
            [st * ca, ct * ca, -sa, -sa * d],
            [st * sa, ct * sa, ca, ca * d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def chain_matrix_oracle(chain, joints):
    """Plain 4x4 product over the rows, independent of Transform composition."""
    mat = np.eye(4)
    for row, theta in zip(chain.rows, joints):
        mat = mat @ dh_matrix_oracle(row.a, row.d, row.alpha, theta)
    return mat


def fd_position_jacobian(chain, q, h=1e-6):
    jac = np.zeros((3, chain.joint_count))
    for i in range(chain.joint_count):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        pp = kin.forward_kinematics(chain, qp).position
        pm = kin.forward_kinematics(chain, qm).position
        jac[:, i] = (pp - pm) / (2.0 * h)
    return jac


def fd_rotation_axis(chain, q, i, h=1e-6):
    """Instantaneous rotation axis of the end frame w.r.t. joint i, by FD."""
    qp, qm = q.copy(), q.copy()
    qp[i] += h
    qm[i] -= h
    n = chain.joint_count
    rp = kin.chain_transform(chain, qp, n).rotation
    rm = kin.chain_transform(chain, qm, n).rotation
    r0 = kin.chain_transform(chain, q, n).rotation
    skew = (rp - rm) @ r0.T / (2.0 * h)
    return np.array([skew[2, 1], skew[0, 2], skew[1, 0]])


def rodrigues(axis, angle):
    """Rotation matrix about a unit axis, built independently of the package."""
    k = np.asarray(axis, dtype=float)
    kmat = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kmat + (1 - math.cos(angle)) * (kmat @ kmat)


def single_row_chain(a=1.0, d=0.0, alpha=0.0):
    return kin.KinematicChain((kin.DHRow(a=a, d=d, alpha=alpha, joint_index=1),))


# --- dh_transform ------------------------------------------------------------


def test_dh_transform_zero_row_is_identity():
    t = kin.dh_transform(kin.DHRow(0.0, 0.0, 0.0, 1), 0.0)
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, np.zeros(3))


def test_dh_transform_pure_offset():
    t = kin.dh_transform(kin.DHRow(a=0.0, d=0.333, alpha=0.0, joint_index=1), 0.0)
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, [0.0, 0.0, 0.333])


def test_dh_transform_matches_elementwise_oracle():
    t = kin.dh_transform(kin.DHRow(a=0.0, d=0.0, alpha=-math.pi / 2, joint_index=1), 0.3)
    expect = dh_matrix_oracle(0.0, 0.0, -math.pi / 2, 0.3)
    assert np.allclose(t.as_matrix(), expect, atol=1e-12)


def test_dh_transform_rotations_orthonormal():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, d, alpha, theta = rng.uniform(-2, 2, 4)
        t = kin.dh_transform(kin.DHRow(a, d, alpha, 1), theta)
        assert np.abs(t.rotation @ t.rotation.T - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9


# --- chain_transform / forward_kinematics ------------------------------------


def test_chain_transform_first_frame_equals_row_transform():
    chain = kin.panda7()
    q = np.full(7, 0.4)
    got = kin.chain_transform(chain, q, 1)
    want = kin.dh_transform(chain.rows[0], 0.4)
    assert np.allclose(got.as_matrix(), want.as_matrix())


def test_chain_transform_panda_zero_matches_product_oracle():
    chain = kin.panda7()
    q = np.zeros(7)
    got = kin.chain_transform(chain, q, 7).as_matrix()
    assert np.allclose(got, chain_matrix_oracle(chain, q), atol=1e-12)


def test_chain_transform_is_associative():
    chain = kin.panda7()
    rng = np.random.default_rng(3)
    q = rng.uniform(-2, 2, 7)
    for i in range(2, 8):
        left = kin.chain_transform(chain, q, i)
        step = kin.chain_transform(chain, q, i - 1) @ kin.dh_transform(chain.rows[i - 1], q[i - 1])
        assert np.allclose(left.as_matrix(), step.as_matrix(), atol=1e-12)


def test_chain_transform_index_out_of_range():
    chain = kin.panda7()
    with pytest.raises(IndexError):
        kin.chain_transform(chain, np.zeros(7), 8)
    with pytest.raises(IndexError):
        kin.chain_transform(chain, np.zeros(7), 0)


def test_forward_kinematics_panda_zero_matches_oracle():
    chain = kin.panda7()
    mat = chain_matrix_oracle(chain, np.zeros(7))
    pose = kin.forward_kinematics(chain, np.zeros(7))
    assert np.allclose(pose.position, mat[:3, 3], atol=1e-12)
    rotated = np.array([pose.orientation.rotate(v) for v in np.eye(3)]).T
    assert np.allclose(rotated, mat[:3, :3], atol=1e-9)


def test_forward_kinematics_single_link():
    pose = kin.forward_kinematics(single_row_chain(a=1.0), [0.0])
    assert np.allclose(pose.position, [1.0, 0.0, 0.0])
    assert np.allclose(pose.orientation.as_array(), [0, 0, 0, 1])


def test_forward_kinematics_periodicity():
    chain = kin.panda7()
    rng = np.random.default_rng(11)
    q = rng.uniform(-3, 3, 7)
    a = kin.forward_kinematics(chain, q)
    b = kin.forward_kinematics(chain, q + 2 * math.pi)
    assert np.abs(a.position - b.position).max() < 1e-9
    assert np.abs(a.orientation.as_array() - b.orientation.as_array()).max() < 1e-9


def test_forward_kinematics_wrong_length():
    with pytest.raises(ValueError):
        kin.forward_kinematics(kin.panda7(), np.zeros(6))


# --- quaternions -------------------------------------------------------------


def test_rotation_to_quaternion_identity():
    q = kin.rotation_to_quaternion(np.eye(3))
    assert np.allclose(q.as_array(), [0, 0, 0, 1])


def test_rotation_to_quaternion_pi_about_z():
    rot = np.diag([-1.0, -1.0, 1.0])
    q = kin.rotation_to_quaternion(rot)
    assert np.allclose(q.as_array(), [0, 0, 1, 0], atol=1e-12)


def test_rotation_to_quaternion_action_matches_matrix():
    rng = np.random.default_rng(5)
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rot = rodrigues(axis, rng.uniform(-math.pi, math.pi))
        q = kin.rotation_to_quaternion(rot)
        assert q.w >= 0.0
        for _ in range(5):
            v = rng.normal(size=3)
            assert np.abs(q.rotate(v) - rot @ v).max() < 1e-8


def test_rotation_to_quaternion_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 1] = 0.01
    with pytest.raises(ValueError):
        kin.rotation_to_quaternion(bad)


def test_quaternion_from_axis_angle_examples():
    q0 = kin.quaternion_from_axis_angle(kin.AxisAngle(np.array([0, 0, 1.0]), 0.0))
    assert np.allclose(q0.as_array(), [0, 0, 0, 1])
    q1 = kin.quaternion_from_axis_angle(kin.AxisAngle(np.array([0, 0, 1.0]), math.pi))
    assert np.allclose(q1.as_array(), [0, 0, 1, 0], atol=1e-12)
    q2 = kin.quaternion_from_axis_angle(kin.AxisAngle(np.array([1.0, 0, 0]), math.pi / 2))
    root_half = math.sqrt(2.0) / 2.0
    assert np.allclose(q2.as_array(), [root_half, 0, 0, root_half])


def test_quaternion_from_axis_angle_unit_norm():
    rng = np.random.default_rng(9)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        q = kin.quaternion_from_axis_angle(kin.AxisAngle(axis, rng.uniform(-6, 6)))
        assert abs(q.norm() - 1.0) < 1e-12


def test_quaternion_from_axis_angle_rejects_non_unit_axis():
    with pytest.raises(ValueError):
        kin.quaternion_from_axis_angle(kin.AxisAngle(np.array([1.0, 1.0, 0.0]), 0.5))


def test_quaternion_canonicalization_tiebreak():
    # w == 0: the first nonzero imaginary part becomes positive
    q = kin.Quaternion(0.0, -1.0, 0.0, 0.0).canonicalized()
    assert q.y == 1.0
    q2 = kin.Quaternion(0.3, 0.4, 0.5, -0.7).canonicalized()
    assert q2.w > 0


# --- cross product -----------------------------------------------------------


def test_cross_examples():
    assert np.allclose(kin.cross(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])), [0, 0, 1])
    a = np.array([0.3, -0.2, 0.9])
    assert np.allclose(kin.cross(a, a), np.zeros(3))


def test_cross_antisymmetry():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert np.allclose(kin.cross(a, b), -kin.cross(b, a))
        assert np.allclose(kin.cross(a, b), np.cross(a, b))


# --- geometric jacobian ------------------------------------------------------


def test_geometric_jacobian_single_link_matches_fd():
    # For a=1, d=0, alpha=0 the frame origin is fixed at (1,0,0), so the
    # position rows vanish and the rotation axis is the base z-axis.
    chain = single_row_chain(a=1.0)
    q = np.array([0.0])
    jac = kin.geometric_jacobian(chain, q)
    assert np.allclose(jac[:3, 0], fd_position_jacobian(chain, q)[:, 0], atol=1e-9)
    assert np.allclose(jac[3:, 0], [0.0, 0.0, 1.0])
    assert np.allclose(jac[3:, 0], fd_rotation_axis(chain, q, 0), atol=1e-9)


def test_geometric_jacobian_panda_matches_fd():
    chain = kin.panda7()
    rng = np.random.default_rng(17)
    for _ in range(20):
        q = rng.uniform(-2.5, 2.5, 7)
        jac = kin.geometric_jacobian(chain, q)
        assert np.abs(jac[:3] - fd_position_jacobian(chain, q)).max() < 1e-5


def test_geometric_jacobian_angular_rows():
    chain = kin.panda7()
    rng = np.random.default_rng(19)
    q = rng.uniform(-2, 2, 7)
    jac = kin.geometric_jacobian(chain, q)
    for i in range(7):
        col = jac[3:, i]
        assert abs(np.linalg.norm(col) - 1.0) < 1e-9
        assert np.abs(col - fd_rotation_axis(chain, q, i)).max() < 1e-5


# --- planar three-link arm ---------------------------------------------------


def test_planar3_fk_examples():
    assert np.allclose(kin.planar3_fk((1, 1, 1), (0, 0, 0)), (3.0, 0.0, 0.0))
    x, y, phi = kin.planar3_fk((1, 1, 1), (math.pi / 2, 0, 0))
    assert np.allclose((x, y, phi), (0.0, 3.0, math.pi / 2), atol=1e-12)
    assert np.allclose(
        kin.planar3_fk((1, 1, 1), (math.pi / 2, -math.pi / 2, 0)), (2.0, 1.0, 0.0), atol=1e-12
    )


def test_planar3_jacobian_rows():
    jac = kin.planar3_jacobian((1, 1, 1), (0.2, -0.4, 1.1))
    assert np.allclose(jac[2], [1.0, 1.0, 1.0])
    jac0 = kin.planar3_jacobian((1, 1, 1), (0, 0, 0))
    assert np.allclose(jac0[0], [0.0, 0.0, 0.0])
    assert np.allclose(jac0[1], [3.0, 2.0, 1.0])


def test_planar3_jacobian_matches_fd():
    rng = np.random.default_rng(23)
    lengths = (0.5, 0.35, 0.25)
    for _ in range(50):
        t = rng.uniform(-math.pi, math.pi, 3)
        jac = kin.planar3_jacobian(lengths, t)
        h = 1e-6
        for i in range(3):
            tp, tm = t.copy(), t.copy()
            tp[i] += h
            tm[i] -= h
            fd = (np.array(kin.planar3_fk(lengths, tp)) - np.array(kin.planar3_fk(lengths, tm))) / (2 * h)
            assert np.abs(jac[:, i] - fd).max() < 1e-6


# --- pose error --------------------------------------------------------------


def test_pose_error_identical_is_zero():
    pose = kin.forward_kinematics(kin.panda7(), np.full(7, 0.3))
    assert kin.pose_error(pose, pose, 0.5, 0.5) == 0.0


def test_pose_error_position_offset():
    q = kin.Quaternion(0, 0, 0, 1)
    a = kin.Pose(np.array([0.02, 0.0, 0.0]), q)
    b = kin.Pose(np.zeros(3), q)
    assert abs(kin.pose_error(a, b, 0.5, 0.5) - 0.01) < 1e-12


def test_pose_error_orientation_offset():
    pos = np.zeros(3)
    qa = kin.Quaternion(0, 0, 0, 1)
    qb = kin.Quaternion(0, 0, math.sin(0.05), math.cos(0.05))
    expect = 0.5 * math.sqrt(math.sin(0.05) ** 2 + (math.cos(0.05) - 1.0) ** 2)
    got = kin.pose_error(kin.Pose(pos, qa), kin.Pose(pos, qb), 0.5, 0.5)
    assert abs(got - expect) < 1e-12


def test_pose_error_symmetry():
    rng = np.random.default_rng(29)
    chain = kin.panda7()
    a = kin.forward_kinematics(chain, rng.uniform(-1, 1, 7))
    b = kin.forward_kinematics(chain, rng.uniform(-1, 1, 7))
    assert kin.pose_error(a, b, 0.5, 0.5) == kin.pose_error(b, a, 0.5, 0.5)


# --- arm models --------------------------------------------------------------


def test_planar_arm_pose_embedding():
    arm = kin.PlanarArm((1.0, 1.0, 1.0))
    pose = arm.pose((math.pi / 2, 0.0, 0.0))
    assert np.allclose(pose.position, [0.0, 3.0, 0.0], atol=1e-12)
    half = math.pi / 4
    assert np.allclose(pose.orientation.as_array(), [0, 0, math.sin(half), math.cos(half)])
    assert arm.jacobian((0.1, 0.2, 0.3)).shape == (3, 3)


def test_chain_arm_shapes():
    arm = kin.ChainArm(kin.panda7())
    assert arm.joint_count == 7
    assert arm.jacobian(np.zeros(7)).shape == (6, 7)
    assert arm.pose(np.zeros(7)).position.shape == (3,)


def test_planar_arm_rejects_bad_lengths():
    with pytest.raises(ValueError):
        kin.PlanarArm((1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        kin.PlanarArm((1.0, 1.0))
