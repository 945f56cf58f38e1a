import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hoiplaus import hand as H


def random_pose(seed, scale=0.4):
    rng = np.random.default_rng(seed)
    return H.HandPose(rng.normal(0, 0.05, 3), rng.normal(0, 1.0, 3), rng.normal(0, scale, (H.N_JOINTS, 3)))


def test_rest_keypoints_and_bone_lengths():
    pose = H.HandPose.rest()
    kp = H.forward_kinematics(pose).keypoints
    assert kp.shape == (21, 3)
    assert np.allclose(kp[0], 0)
    # Fingers extend along +x in the rest pose.
    assert np.all(kp[1:, 0] > 0)
    L = pose.shape.lengths.reshape(5, 4)
    for f in range(5):
        chain = np.vstack([kp[0], kp[1 + 4 * f : 5 + 4 * f]])
        assert np.allclose(np.linalg.norm(np.diff(chain, axis=0), axis=1), L[f], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bone_lengths_preserved(seed):
    pose = random_pose(seed)
    kp = H.forward_kinematics(pose).keypoints
    L = pose.shape.lengths.reshape(5, 4)
    for f in range(5):
        chain = np.vstack([kp[0], kp[1 + 4 * f : 5 + 4 * f]])
        assert np.allclose(np.linalg.norm(np.diff(chain, axis=0), axis=1), L[f], atol=1e-9)


def test_translation_equivariance():
    a = H.forward_kinematics(H.HandPose.rest()).keypoints
    b = H.forward_kinematics(H.HandPose.rest(trans=(0.1, 0, 0))).keypoints
    assert np.allclose(b - a, [0.1, 0, 0], atol=1e-15)


def test_root_rotation_about_z():
    rest = H.forward_kinematics(H.HandPose.rest()).keypoints
    pose = H.HandPose(np.zeros(3), [0, 0, np.pi - 1e-12], np.zeros((15, 3)))
    rot = H.forward_kinematics(pose).keypoints
    Rz = Rotation.from_rotvec([0, 0, np.pi - 1e-12]).as_matrix()
    assert np.allclose(rot, rest @ Rz.T, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(seed)
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(0, 0.1, 3)
    moved = H.transform_pose(pose, R, t)
    a = H.forward_kinematics(pose).keypoints @ R.T + t
    b = H.forward_kinematics(moved).keypoints
    assert np.allclose(a, b, atol=1e-9)
    va = H.skin(pose).mesh.vertices @ R.T + t
    assert np.allclose(va, H.skin(moved).mesh.vertices, atol=1e-9)


def test_skin_determinism_and_topology():
    a, b = random_pose(1), random_pose(2)
    m1, m2, m3 = H.skin(a), H.skin(a), H.skin(b)
    assert np.array_equal(m1.mesh.vertices, m2.mesh.vertices)
    assert np.array_equal(m1.mesh.faces, m3.mesh.faces)
    assert not np.array_equal(m1.mesh.vertices, m3.mesh.vertices)
    assert m1.mesh.is_watertight
    assert m1.mesh.n_vertices == len(m1.canonical_vertices) == len(m1.bone_assignment)


def test_rest_vertices_on_capsules():
    pose = H.HandPose.rest()
    hm = H.skin(pose)
    s, e = H.bone_segments(pose)
    v = hm.mesh.vertices
    b = hm.bone_assignment
    seg = e[b] - s[b]
    u = np.clip(np.einsum("ij,ij->i", v - s[b], seg) / np.einsum("ij,ij->i", seg, seg), 0, 1)
    dist = np.linalg.norm(v - (s[b] + u[:, None] * seg), axis=1)
    assert np.all(dist <= pose.shape.radii[b] + 1e-6)
    assert np.allclose(hm.canonical_vertices, v)


def test_vertices_subset_matches_full():
    model = H.hand_model(H.HandShape())
    vecs = np.stack([random_pose(s).to_vector() for s in range(3)])
    idx = np.array([5, 0, 77, 300])
    assert np.allclose(model.vertices_subset(vecs, idx), model.vertices_batch(vecs)[:, idx], atol=1e-15)


def test_clamp_angles():
    v = np.array([[0.0, 0.0, 4.0], [0.1, 0.2, 0.3]])
    c = H.clamp_angles(v)
    assert np.linalg.norm(c[0]) < np.pi and np.allclose(c[0] / np.linalg.norm(c[0]), [0, 0, 1])
    assert np.array_equal(c[1], v[1])
    pose = H.HandPose(np.zeros(3), [0, 0, 7.0], np.full((15, 3), 3.0))
    assert np.linalg.norm(pose.root_rot) < np.pi
    assert np.all(np.linalg.norm(pose.joint_angles, axis=1) < np.pi)


def test_shape_must_be_positive():
    with pytest.raises(ValueError):
        H.HandShape(lengths=-np.ones(20))


def test_perturb_zero_noise_is_identity():
    p = random_pose(3)
    assert H.perturb(p, H.NoiseConfig(0, 0, 0, seed=9)) == p


def test_perturb_translation_std():
    p = H.HandPose.rest()
    offs = np.array([H.perturb(p, H.NoiseConfig(0.01, 0, 0, seed=s)).trans for s in range(10000)])
    std = offs.std()
    assert 0.0095 <= std <= 0.0105


def test_perturb_root_only():
    p = random_pose(4)
    q = H.perturb(p, H.NoiseConfig(0, 0, 0.05, seed=1))
    assert np.array_equal(q.trans, p.trans) and np.array_equal(q.joint_angles, p.joint_angles)
    assert not np.array_equal(q.root_rot, p.root_rot)


def test_perturb_deterministic_and_validated():
    p = random_pose(5)
    cfg = H.NoiseConfig(0.01, 0.3, 0.05, seed=42)
    assert H.perturb(p, cfg) == H.perturb(p, cfg)
    with pytest.raises(ValueError):
        H.NoiseConfig(-1.0, 0, 0)


def test_interpolate():
    a, b = random_pose(6), random_pose(7)
    two = H.interpolate(a, b, 2)
    assert two[0] == a and two[1] == b
    three = H.interpolate(a, b, 3)
    assert np.allclose(three[1].trans, (a.trans + b.trans) / 2, atol=1e-15)
    same = H.interpolate(a, a, 5)
    assert len(same) == 5 and all(p == a for p in same)
    five = H.interpolate(a, b, 5)
    assert five[0] == a and five[-1] == b
    with pytest.raises(ValueError):
        H.interpolate(a, b, 1)
    other = H.HandPose.rest(H.HandShape(lengths=H.DEFAULT_LENGTHS * 1.1))
    with pytest.raises(ValueError):
        H.interpolate(a, other, 3)


def test_vector_round_trip():
    p = random_pose(8)
    assert H.HandPose.from_vector(p.to_vector(), p.shape) == p
    assert p.to_vector().shape == (H.POSE_DIM,)
