import json

import numpy as np
import pytest

from hoiplaus import dataset as DS
from hoiplaus import dynamics
from hoiplaus import hand as H
from hoiplaus import surrogate as S
from hoiplaus.config import GlobalConfig

SMALL = DS.GenConfig(pairs=10, eval_sequences=2, eval_frames=5)


@pytest.fixture(scope="module")
def small_build(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = DS.build_dataset(SMALL, 7, out)
    return out, manifest


# ------------------------------------------------------------ trajectories
def test_hold_has_zero_acceleration():
    traj = DS.generate_trajectory("hold", 9, seed=1)
    assert all(np.allclose(dynamics.acceleration(traj, i), 0) for i in range(9))


def test_swing_acceleration_matches_closed_form():
    dt = 1 / 240
    traj = DS.generate_trajectory("swing", 40, dt, seed=2)
    p = traj.params
    t = np.arange(40) * dt
    axis = np.array(p["axis"])
    for i in range(1, 39):
        exact = -p["amplitude"] * p["omega"] ** 2 * np.sin(p["omega"] * t[i] + p["phase"]) * axis
        assert np.allclose(dynamics.acceleration(traj, i), exact, atol=2e-3 * np.abs(exact).max() + 1e-9)


def test_lift_rises_by_its_height():
    traj = DS.generate_trajectory("lift", 9, seed=3)
    rise = traj.translations[-1, 2] - traj.translations[0, 2]
    assert rise == pytest.approx(traj.params["height"])
    with pytest.raises(ValueError):
        DS.generate_trajectory("teleport")
    with pytest.raises(ValueError):
        DS.generate_trajectory("hold", 2)


# ------------------------------------------------------------------ grasps
@pytest.mark.parametrize("name", list(DS.OBJECT_CATALOG))
def test_generated_grasp_touches_without_deep_penetration(name):
    obj = DS.catalog_mesh(name)
    pose = DS.generate_grasp(obj, 11)
    hm = H.skin(pose)
    d = obj.closest_points(hm.mesh.vertices)[0]
    inside = obj.contains(hm.mesh.vertices)
    depth = np.where(inside, d, 0.0).max()
    assert depth <= 0.004
    assert np.sum(d <= 0.002) >= 10


def test_generate_grasp_deterministic_and_bounded():
    obj = DS.catalog_mesh("cylinder")
    assert DS.generate_grasp(obj, 3) == DS.generate_grasp(obj, 3)
    huge = DS.catalog_mesh("box").transformed(np.eye(3) * 5, np.zeros(3))
    with pytest.raises(DS.GraspError):
        DS.generate_grasp(huge, 0)


# --------------------------------------------------------------- sequences
def test_sequence_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [H.HandPose(rng.normal(0, 0.1, 3), rng.normal(0, 0.5, 3), rng.normal(0, 0.3, (15, 3))) for _ in range(4)]
    seq = DS.Sequence(poses, np.tile(np.eye(3), (4, 1, 1)), rng.normal(size=(4, 3)), 1 / 30, "builtin:box", {"k": 1})
    p = tmp_path / "a.seq.jsonl"
    DS.write_sequence(seq, p)
    back = DS.read_sequence(p)
    lines = p.read_text().splitlines()
    assert json.loads(lines[0])["type"] == "header" and len(lines) == 5
    for a, b in zip(seq.poses, back.poses):
        assert np.allclose(a.to_vector(), b.to_vector(), rtol=1e-8, atol=0)
    assert back.meta == {"k": 1} and back.object_ref == "builtin:box"
    # Re-writing a read sequence reproduces the same bytes.
    q = tmp_path / "b.seq.jsonl"
    DS.write_sequence(back, q)
    assert q.read_bytes() == p.read_bytes()


def test_read_sequence_errors(tmp_path):
    p = tmp_path / "x.seq.jsonl"
    p.write_text('{"type": "frame"}\n')
    with pytest.raises(DS.SchemaError):
        DS.read_sequence(p)
    p.write_text("not json\n")
    with pytest.raises(DS.SchemaError):
        DS.read_sequence(p)
    with pytest.raises(FileNotFoundError):
        DS.read_sequence(tmp_path / "missing.seq.jsonl")


def test_r9_rounds_to_nine_digits():
    assert DS.r9(1 / 3) == 0.333333333
    assert DS.r9({"a": [np.float32(0.1), np.int64(3)]}) == {"a": [0.100000001, 3]}
    assert DS.dumps({"b": 1, "a": 2.0}) == '{"a":2.0,"b":1}'


# -------------------------------------------------------------- full build
def test_build_counts_and_manifest(small_build):
    out, manifest = small_build
    recs = DS.read_labels(out)
    assert manifest["counts"]["frames"] == len(recs) == 5 * (10 - manifest["counts"]["failed"])
    assert manifest["counts"]["sequences"] == 2
    assert json.loads((out / "manifest.json").read_text()) == manifest
    assert sorted(p.name for p in (out / "sequences").iterdir()) == [
        "seq000.clean.seq.jsonl", "seq000.noisy.seq.jsonl", "seq001.clean.seq.jsonl", "seq001.noisy.seq.jsonl"]


def test_interpolation_siblings_share_a_split(small_build):
    out, _ = small_build
    recs = DS.read_labels(out)
    by_pair = {}
    for r in recs:
        by_pair.setdefault(r["pair"], set()).add(r["split"])
    assert all(len(s) == 1 for s in by_pair.values())
    assert [r["j"] for r in recs if r["pair"] == recs[0]["pair"]] == [1, 2, 3, 4, 5]


def test_first_sibling_is_clean(small_build):
    out, _ = small_build
    for r in DS.read_labels(out):
        if r["j"] == 1:
            assert r["pose"] == r["clean_pose"]
            assert r["labels"]["pd"] == 0.0


def test_stored_targets_match_stored_labels(small_build):
    out, _ = small_build
    for r in DS.read_labels(out):
        g = S.grasp_targets(r["labels"]["pd"])
        m = S.manip_targets(r["labels"]["fe"], r["labels"]["me"])
        assert (r["grasp_targets"]["b_hard"], r["grasp_targets"]["b_soft"]) == (g.b_hard, DS.r9(g.b_soft))
        assert (r["manip_targets"]["s_hard"], r["manip_targets"]["s_soft"]) == (m.s_hard, DS.r9(m.s_soft))


def test_labels_recompute_from_stored_poses(small_build):
    out, _ = small_build
    cfg = GlobalConfig()
    recs = [r for r in DS.read_labels(out) if r["pair"] == DS.read_labels(out)[0]["pair"]]
    shape = H.HandShape()
    r = recs[-1]
    obj = DS.catalog_mesh(r["object"])
    rot, trans = np.array(r["object_pose"]["rot"]), np.array(r["object_pose"]["trans"])
    obj_w = obj.transformed(rot, trans)
    samples_w = obj.sample_surface(cfg.n_samples, r["sample_seed"]).transformed(rot, trans)
    clean = H.skin(DS.pose_from_dict(r["clean_pose"], shape))
    from hoiplaus.metrics import contact_reference

    ref = contact_reference(clean, obj_w, cfg.c_contact)
    F = dynamics.required_force(np.array(r["accel"]), cfg.mass, cfg.gravity)
    fld, pd, fe, me = DS.label_frame(DS.pose_from_dict(r["pose"], shape), clean, ref, obj_w, samples_w, F, cfg)
    assert pd == pytest.approx(r["labels"]["pd"], rel=1e-8, abs=1e-12)
    assert fe == pytest.approx(r["labels"]["fe"], rel=1e-6, abs=1e-9)
    assert np.array_equal(np.nonzero(fld.m)[0], r["field"]["idx"])


def test_training_sets_shapes(small_build):
    out, _ = small_build
    recs = DS.read_labels(out)
    g = DS.training_sets(recs, "grasp")
    m = DS.training_sets(recs, "manip")
    n = {k: sum(r["split"] == k for r in recs) for k in ("train", "val", "test")}
    for k in n:
        assert g[k].x.shape == (n[k], 277, len(S.GRASP_CHANNELS))
        assert m[k].x.shape == (n[k], 1024, len(S.MANIP_CHANNELS))
    with pytest.raises(ValueError):
        DS.training_sets(recs, "other")


def test_build_is_deterministic_across_threads(small_build, tmp_path):
    out, _ = small_build
    DS.build_dataset(SMALL, 7, tmp_path / "again", threads=2)
    for rel in ("labels.jsonl", "manifest.json", "sequences/seq001.noisy.seq.jsonl", "objects/torus.obj"):
        assert (out / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel


def test_split_ratios():
    splits = [DS.split_of(i, 400, 0) for i in range(400)]
    assert splits.count("train") == 320 and splits.count("val") == 40 and splits.count("test") == 40
    assert DS.split_of(5, 400, 0) == DS.split_of(5, 400, 0)


def test_read_labels_errors(tmp_path):
    p = tmp_path / "labels.jsonl"
    p.write_text('{"type": "frame"}\n')
    with pytest.raises(DS.SchemaError):
        DS.read_labels(p)
    with pytest.raises(FileNotFoundError):
        DS.read_labels(tmp_path / "nope.jsonl")


def test_gen_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        DS.GenConfig.from_dict({"pairz": 3})
    assert DS.GenConfig.from_dict(SMALL.to_dict()) == SMALL
