import numpy as np
import pytest

from hoiplaus import dataset as DS
from hoiplaus import geometry as G
from hoiplaus import hand as H
from hoiplaus import metrics as M
from hoiplaus.config import GlobalConfig


@pytest.fixture(scope="module")
def resting_palm():
    """Palm 1 mm above the top of a wide box, fingers straight."""
    obj = G.box((0.25, 0.25, 0.05)).transformed(np.eye(3), [0.05, 0, -0.025])
    r = H.DEFAULT_RADII[[4, 8, 12, 16]].max()
    clean = H.HandPose.rest(trans=(0.0, 0.0, r + 0.001))
    return obj, clean


def _moved(pose, delta):
    return H.HandPose(pose.trans + np.asarray(delta), pose.root_rot, pose.joint_angles, pose.shape)


def test_pd_pure_normal_intrusion(resting_palm):
    obj, clean = resting_palm
    pd = M.penetration_depth(H.skin(_moved(clean, [0, 0, -0.005])), H.skin(clean), obj)
    assert pd == pytest.approx(0.005, abs=2e-4)


def test_pd_tangential_shift_is_filtered(resting_palm):
    obj, clean = resting_palm
    pd = M.penetration_depth(H.skin(_moved(clean, [0.02, 0, -0.005])), H.skin(clean), obj)
    assert pd == 0.0


def test_pd_lift_off_is_zero(resting_palm):
    obj, clean = resting_palm
    assert M.penetration_depth(H.skin(_moved(clean, [0, 0, 0.01])), H.skin(clean), obj) == 0.0


def test_pd_clean_against_itself_on_generated_grasps():
    for k, name in enumerate(DS.OBJECT_CATALOG):
        obj = DS.catalog_mesh(name)
        grasp = DS.generate_grasp(obj, DS.derive_seed(5, k))
        hm = H.skin(grasp)
        assert len(M.contact_reference(hm, obj).index) > 0
        assert M.penetration_depth(hm, hm, obj) == 0.0


def test_pd_topology_mismatch():
    a = H.skin(H.HandPose.rest())
    b = H.HandMesh(G.box((1, 1, 1)), np.zeros((8, 3)), np.zeros(8, dtype=np.int64))
    with pytest.raises(ValueError):
        M.penetration_depth(a, b, G.box((1, 1, 1)))


def test_mpjpe_mpvpe():
    a = H.HandPose.rest()
    b = _moved(a, [0.003, 0.004, 0.0])
    assert M.mpjpe(H.forward_kinematics(a), H.forward_kinematics(b)) == pytest.approx(5.0)
    assert M.mpvpe(H.skin(a), H.skin(b)) == pytest.approx(5.0)
    assert M.mpjpe(H.forward_kinematics(a), H.forward_kinematics(a)) == 0.0


def test_mpjpe_is_symmetric_and_triangle():
    rng = np.random.default_rng(0)
    poses = [H.HandPose(rng.normal(0, 0.01, 3), rng.normal(0, 0.2, 3), rng.normal(0, 0.2, (15, 3)))
             for _ in range(3)]
    sk = [H.forward_kinematics(p) for p in poses]
    assert M.mpjpe(sk[0], sk[1]) == pytest.approx(M.mpjpe(sk[1], sk[0]))
    assert M.mpjpe(sk[0], sk[2]) <= M.mpjpe(sk[0], sk[1]) + M.mpjpe(sk[1], sk[2]) + 1e-12


def test_plausibility_thresholds():
    cfg = GlobalConfig()
    assert M.is_plausible(0.0, 0.0, cfg)
    assert not M.is_plausible(cfg.c_pd, 0.0, cfg)
    assert not M.is_plausible(0.0, cfg.c_fe, cfg)
    frames = [M.FrameMetrics(0, 0, 0, 0, 1, 0, 0, p) for p in (True, False, True, True)]
    assert M.plausible_rate(frames) == 0.75
    with pytest.raises(ValueError):
        M.plausible_rate([])


def test_pd_grows_along_intrusion(resting_palm):
    obj, clean = resting_palm
    cm = H.skin(clean)
    depths = [M.penetration_depth(H.skin(_moved(clean, [0, 0, -z])), cm, obj) for z in np.linspace(0, 0.01, 6)]
    assert np.all(np.diff(depths) > 0)


def test_iv_matches_voxel_volume():
    hand = H.skin(H.HandPose.rest())
    far = G.box((0.05, 0.05, 0.05)).transformed(np.eye(3), [1.0, 0, 0])
    assert M.iv(hand, far) == 0.0
    lower = G.box((0.4, 0.4, 0.2)).transformed(np.eye(3), [0, 0, -0.1])
    upper = G.box((0.4, 0.4, 0.2)).transformed(np.eye(3), [0, 0, 0.1])
    parts = [G.intersection_volume(hand.mesh, s, 0.002) for s in (lower, upper)]
    assert min(parts) > 0
    # Volumes of the two halves add up to the whole hand.
    whole = G.intersection_volume(hand.mesh, G.box((0.6, 0.6, 0.6)), 0.002)
    assert sum(parts) == pytest.approx(whole, rel=0.03)


def test_summarize_units():
    f = [M.FrameMetrics(0.01, 0.2, 0.0, 1.0, 0.5, 2.0, 3.0, False),
         M.FrameMetrics(0.03, 0.0, 0.0, float("nan"), 1.0, 4.0, 5.0, True)]
    s = M.summarize(f)
    assert s["pd"] == pytest.approx(2.0)
    assert s["mpjpe"] == 3.0 and s["iv"] == 1.0 and s["plausible"] == 0.5


def test_pd_staircase_along_interpolation(resting_palm):
    obj, clean = resting_palm
    noisy = _moved(clean, [0, 0, -0.012])
    cm = H.skin(clean)
    depths = [M.penetration_depth(H.skin(p), cm, obj) for p in H.interpolate(clean, noisy, 5)]
    assert depths[0] == 0.0
    assert np.all(np.diff(depths) >= 0)
    assert depths[-1] == pytest.approx(0.012, abs=2e-4)
