"""Synthetic HOI data: procedural grasps, object trajectories, labeled frames, file formats."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import dynamics
from .config import DEFAULT, GlobalConfig
from .field import compute_field
from .geometry import SurfaceSamples, TriMesh, load_mesh, make_primitive, save_obj
from .hand import (
    HandPose,
    HandShape,
    NoiseConfig,
    N_JOINTS,
    bone_segments,
    forward_kinematics,
    interpolate,
    perturb,
    skin,
    transform_pose,
)
from .metrics import contact_reference, penetration_depth
from .surrogate import (
    GRASP_CHANNELS,
    MANIP_CHANNELS,
    TrainSet,
    grasp_features,
    grasp_targets,
    manip_features,
    manip_targets,
)

log = logging.getLogger(__name__)

SEQ_FORMAT = "hoiplaus.seq"
LABEL_FORMAT = "hoiplaus.labels"
FORMAT_VERSION = 1

OBJECT_CATALOG: dict[str, dict] = {
    "sphere": {"radius": 0.03, "n_lon": 32, "n_lat": 16},
    "box": {"extents": (0.05, 0.05, 0.08)},
    "cylinder": {"radius": 0.03, "height": 0.10, "segments": 32},
    "torus": {"major": 0.04, "minor": 0.012},
    "thin_plate": {"width": 0.10, "depth": 0.08, "thickness": 0.004},
}
TRAJECTORY_KINDS = ("hold", "lift", "swing", "shake")
OBJECT_BOUND = 0.10  # radius of the admissible bounding sphere, m


class SchemaError(ValueError):
    pass


class GraspError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


@lru_cache(maxsize=None)
def catalog_mesh(name: str) -> TriMesh:
    if name not in OBJECT_CATALOG:
        raise ValueError(f"unknown catalog object {name!r}")
    return make_primitive(name, **OBJECT_CATALOG[name])


def resolve_object(ref: str, base: Path | None = None) -> TriMesh:
    """``builtin:<name>`` or a path to an OBJ file (relative to ``base``)."""
    if ref.startswith("builtin:"):
        return catalog_mesh(ref.split(":", 1)[1])
    path = Path(ref)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise FileNotFoundError(str(path))
    return load_mesh(path)


# --------------------------------------------------------------- float I/O
def r9(x):
    """Round floats (recursively) to 9 significant digits."""
    if isinstance(x, np.ndarray):
        return r9(x.tolist())
    if isinstance(x, (list, tuple)):
        return [r9(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.9g}")
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, dict):
        return {k: r9(v) for k, v in x.items()}
    return x


def dumps(obj) -> str:
    return json.dumps(r9(obj), separators=(",", ":"), sort_keys=True)


def pose_to_dict(p: HandPose) -> dict:
    return {"trans": p.trans, "root_rot": p.root_rot, "joint_angles": p.joint_angles}


def pose_from_dict(d: dict, shape: HandShape) -> HandPose:
    try:
        return HandPose(np.array(d["trans"]), np.array(d["root_rot"]), np.array(d["joint_angles"]), shape)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad pose record: {exc}") from exc


def round_pose(p: HandPose) -> HandPose:
    return pose_from_dict(r9(pose_to_dict(p)), p.shape)


def shape_to_dict(s: HandShape) -> dict:
    return {"lengths": s.lengths, "radii": s.radii}


def shape_from_dict(d: dict) -> HandShape:
    return HandShape(np.array(d["lengths"]), np.array(d["radii"]))


# ------------------------------------------------------------- trajectories
def generate_trajectory(kind: str, length: int = 9, dt: float = 1 / 30, seed: int = 0,
                        mass: float = 1.0, gravity=dynamics.GRAVITY) -> dynamics.ObjectTrajectory:
    """Analytic translational trajectories with closed-form accelerations."""
    if length < 3:
        raise ValueError("trajectory length must be >= 3")
    rng = np.random.default_rng(seed)
    t = np.arange(length) * dt
    base = np.array([0.0, 0.0, 0.10]) + rng.uniform(-0.02, 0.02, 3)
    pos = np.repeat(base[None], length, axis=0)
    params: dict = {"kind": kind}
    if kind == "hold":
        pass
    elif kind == "lift":
        h = rng.uniform(0.05, 0.15)
        total = max(t[-1], dt)
        tau = t / total
        pos[:, 2] += h * (3 * tau**2 - 2 * tau**3)
        params.update(height=h)
    elif kind in ("swing", "shake"):
        if kind == "swing":
            amp, freq = rng.uniform(0.05, 0.10), rng.uniform(0.8, 1.2)
        else:
            amp, freq = rng.uniform(0.008, 0.015), rng.uniform(3.0, 4.5)
        phase = rng.uniform(0, 2 * np.pi)
        ang = rng.uniform(0, 2 * np.pi)
        axis = np.array([np.cos(ang), np.sin(ang), 0.0])
        omega = 2 * np.pi * freq
        pos += amp * np.sin(omega * t + phase)[:, None] * axis
        params.update(amplitude=amp, omega=omega, phase=phase, axis=axis.tolist())
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    rots = np.repeat(np.eye(3)[None], length, axis=0)
    traj = dynamics.ObjectTrajectory(rots, pos, dt, mass, np.asarray(gravity, dtype=np.float64))
    object.__setattr__(traj, "params", params)
    return traj


# --------------------------------------------------------------------- grasp
def _axis_points(starts: np.ndarray, ends: np.ndarray, k: int = 6) -> np.ndarray:
    s = np.linspace(0.0, 1.0, k)
    return (starts[:, None] * (1 - s)[None, :, None] + ends[:, None] * s[None, :, None])


def _clearance(obj: TriMesh, starts, ends, radii, k: int = 6) -> np.ndarray:
    """Signed clearance per bone: min over axis samples of signed distance minus radius."""
    pts = _axis_points(starts, ends, k)
    flat = pts.reshape(-1, 3)
    dist, _, _, _ = obj.closest_points(flat)
    inside = obj.contains(flat)
    signed = np.where(inside, -dist, dist).reshape(len(starts), k)
    return signed.min(axis=1) - radii


def _bone_clearance(obj: TriMesh, pose: HandPose, bones) -> np.ndarray:
    s, e = bone_segments(pose)
    bones = list(bones)
    return _clearance(obj, s[bones], e[bones], pose.shape.radii[bones])


def _flex(pose: HandPose, finger: int, mcp: float, pip: float, dip: float) -> HandPose:
    ja = pose.joint_angles.copy()
    ja[3 * finger] = (0.0, mcp, 0.0)
    ja[3 * finger + 1] = (0.0, pip, 0.0)
    ja[3 * finger + 2] = (0.0, dip, 0.0)
    return HandPose(pose.trans, pose.root_rot, ja, pose.shape)


def _close_finger(obj: TriMesh, pose: HandPose, finger: int, target: float, limit: float = 1.6,
                  step: float = 0.04) -> HandPose:
    """Flex one finger until some phalanx reaches ``target`` clearance, then wrap the tip."""
    bones = [4 * finger + 1, 4 * finger + 2, 4 * finger + 3]

    def settle(make, lo, hi):
        # lo is clear of the object, hi is not; bisect to land on the target clearance.
        for _ in range(14):
            mid = 0.5 * (lo + hi)
            if _bone_clearance(obj, make(mid), bones).min() > target:
                lo = mid
            else:
                hi = mid
        return lo

    ratios = (1.0, 1.1, 0.8)
    make1 = lambda th: _flex(pose, finger, ratios[0] * th, ratios[1] * th, ratios[2] * th)  # noqa: E731
    if _bone_clearance(obj, make1(0.0), bones).min() <= target:
        return make1(0.0)
    th, prev = 0.0, 0.0
    while th < limit:
        th = min(th + step, limit)
        if _bone_clearance(obj, make1(th), bones).min() <= target:
            th = settle(make1, prev, th)
            break
        prev = th
    else:
        return make1(limit)
    base = make1(th)
    if _bone_clearance(obj, base, bones[2:]).min() <= target + 1e-3:
        return base
    # Wrap: keep the MCP, continue curling PIP and DIP.
    m0 = ratios[0] * th
    make2 = lambda s: _flex(pose, finger, m0, ratios[1] * th + s, ratios[2] * th + 0.8 * s)  # noqa: E731
    s, prev = 0.0, 0.0
    while s < limit:
        s = min(s + step, limit)
        if _bone_clearance(obj, make2(s), bones).min() <= target:
            return make2(settle(make2, prev, s))
        prev = s
    return base


def _frame_from_approach(u: np.ndarray, roll: float) -> np.ndarray:
    z = u / np.linalg.norm(u)
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, z)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(z, e1)
    x = np.cos(roll) * e1 + np.sin(roll) * e2
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


_PALM_CENTER = np.array([0.055, 0.0, 0.0])


def force_closure_error(obj: TriMesh, pose: HandPose, mu: float = DEFAULT.mu,
                        c_contact: float = DEFAULT.c_contact, n_samples: int = DEFAULT.n_samples) -> float:
    """Worst normalized force error over the six axis-aligned unit loads and three sample draws."""
    hm = skin(pose)
    loads = np.vstack([np.eye(3), -np.eye(3)])
    worst = 0.0
    for s in range(3):
        fld = compute_field(hm, obj.sample_surface(n_samples, s))
        normals = dynamics.contact_normals(fld, c_contact)
        worst = max(worst, max(dynamics.solve_fe(normals, F, mu)[0] for F in loads))
    return worst


def generate_grasp(obj: TriMesh, seed: int, shape: HandShape | None = None,
                   c_contact: float = DEFAULT.c_contact, retries: int = 32,
                   min_tips: int = 3, closure_tol: float | None = 0.05, seat: float = -0.0015) -> HandPose:
    """Heuristic grasp in the object frame: palm against the surface, fingers closed onto it.

    With ``closure_tol`` set, only grasps whose contacts can resist a load in
    every axis direction are accepted. ``seat`` is the signed clearance each
    touching capsule settles at; slightly negative mimics soft-tissue compression.
    """
    from scipy.spatial.transform import Rotation

    shape = shape or HandShape()
    center = obj.vertices.mean(axis=0)
    if np.linalg.norm(obj.vertices - center, axis=1).max() > OBJECT_BOUND:
        raise GraspError("object does not fit in the admissible bounding sphere")
    rng = np.random.default_rng(seed)
    target = seat
    palm_bones = [0, 4, 8, 12, 16]
    for _ in range(retries):
        az = rng.uniform(0, 2 * np.pi)
        el = np.arcsin(rng.uniform(-1.0, 1.0))
        u = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R = _frame_from_approach(u, rng.uniform(0, 2 * np.pi))
        rotvec = Rotation.from_matrix(R).as_rotvec()

        def placed(dist):
            trans = center + dist * u - R @ _PALM_CENTER
            return HandPose(trans, rotvec, np.zeros((N_JOINTS, 3)), shape)

        lo, hi = 0.0, 0.25
        if _bone_clearance(obj, placed(hi), range(20)).min() <= target:
            continue
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            if _bone_clearance(obj, placed(mid), range(20)).min() > target:
                hi = mid
            else:
                lo = mid
        pose = placed(hi)
        if _bone_clearance(obj, pose, palm_bones).min() > 4 * c_contact:
            continue  # first touch was a finger, not the palm
        for f in (1, 2, 3, 4, 0):
            pose = _close_finger(obj, pose, f, target)
        tips = _bone_clearance(obj, pose, [4 * f + 3 for f in range(5)])
        if np.sum((tips <= c_contact) & (tips >= -c_contact)) < min_tips or \
                _bone_clearance(obj, pose, range(20)).min() < target - 0.5 * c_contact:
            continue
        if closure_tol is None or force_closure_error(obj, pose, c_contact=c_contact) <= closure_tol:
            return pose
    raise GraspError(f"no valid grasp after {retries} retries")


# ----------------------------------------------------------------- sequences
@dataclass
class Sequence:
    poses: list[HandPose]
    object_rot: np.ndarray  # (T, 3, 3)
    object_trans: np.ndarray  # (T, 3)
    dt: float
    object_ref: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.poses) < 3:
            raise ValueError("a sequence needs at least 3 frames")
        if any(p.shape != self.poses[0].shape for p in self.poses):
            raise ValueError("all frames must share one hand shape")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def shape(self) -> HandShape:
        return self.poses[0].shape

    def trajectory(self, mass: float = 1.0, gravity=dynamics.GRAVITY) -> dynamics.ObjectTrajectory:
        return dynamics.ObjectTrajectory(self.object_rot, self.object_trans, self.dt, mass,
                                         np.asarray(gravity, dtype=np.float64))

    def with_poses(self, poses: list[HandPose], **meta) -> "Sequence":
        return Sequence(list(poses), self.object_rot, self.object_trans, self.dt, self.object_ref,
                        {**self.meta, **meta})


def write_sequence(seq: Sequence, path) -> None:
    header = {
        "type": "header", "format": SEQ_FORMAT, "version": FORMAT_VERSION, "dt": seq.dt,
        "object_ref": seq.object_ref, "meta": seq.meta, "shape": shape_to_dict(seq.shape),
        "n_frames": len(seq),
    }
    lines = [dumps(header)]
    for i, p in enumerate(seq.poses):
        lines.append(dumps({"type": "frame", "i": i, "pose": pose_to_dict(p),
                            "object": {"rot": seq.object_rot[i], "trans": seq.object_trans[i]}}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence(path) -> Sequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if not rows or rows[0].get("type") != "header" or rows[0].get("format") != SEQ_FORMAT:
        raise SchemaError(f"{path}: missing {SEQ_FORMAT} header")
    h = rows[0]
    if h.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported version {h.get('version')}")
    shape = shape_from_dict(h["shape"])
    frames = rows[1:]
    if any(r.get("type") != "frame" for r in frames):
        raise SchemaError(f"{path}: unexpected record type")
    poses = [pose_from_dict(r["pose"], shape) for r in frames]
    rot = np.array([r["object"]["rot"] for r in frames], dtype=np.float64)
    trans = np.array([r["object"]["trans"] for r in frames], dtype=np.float64)
    return Sequence(poses, rot, trans, float(h["dt"]), h["object_ref"], h.get("meta", {}))


# ------------------------------------------------------------ labeled frames
@dataclass
class GenConfig:
    objects: tuple[str, ...] = tuple(OBJECT_CATALOG)
    pairs: int = 400
    interp_steps: int = 5
    sigma_trans: float = 0.01
    sigma_pose: float = 0.3
    sigma_root: float = 0.05
    traj_length: int = 9
    dt: float = 1 / 30
    eval_sequences: int = 50
    eval_frames: int = 5
    surrogate_object_points: int = 256

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "objects" in d:
            d["objects"] = tuple(d["objects"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown gen config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = list(self.objects)
        return d

    def noise(self, seed: int) -> NoiseConfig:
        return NoiseConfig(self.sigma_trans, self.sigma_pose, self.sigma_root, seed)


def split_of(pair_id: int, n_pairs: int, seed: int) -> str:
    """8:1:1 split by pair id; interpolation siblings always share a split."""
    order = np.random.default_rng(derive_seed(seed, 7)).permutation(n_pairs)
    rank = int(np.nonzero(order == pair_id)[0][0])
    n_train = int(round(0.8 * n_pairs))
    n_val = int(round(0.1 * n_pairs))
    if rank < n_train:
        return "train"
    if rank < n_train + n_val:
        return "val"
    return "test"


def sparse_field(fld) -> dict:
    idx = np.nonzero(fld.m)[0]
    return {"idx": idx.tolist(), "d": fld.d[idx], "p": fld.p[idx]}


def label_frame(pose: HandPose, clean_mesh, ref, obj_w: TriMesh, samples_w: SurfaceSamples, F,
                cfg: GlobalConfig):
    hm = skin(pose)
    fld = compute_field(hm, samples_w, cfg.ray_cutoff, cfg.ray_offset)
    pd = penetration_depth(hm, clean_mesh, obj_w, cfg.c_contact, cfg.c_tangent, ref=ref)
    fe, _ = dynamics.force_error(fld, F, cfg.mu, cfg.c_contact, cfg.fe_max_iter)
    me, _ = dynamics.manipulation_expense(fld, F, hm.mesh, cfg.mu, cfg.c_contact, cfg.ray_cutoff, cfg.me_max_iter)
    return fld, pd, fe, me


def _generate_pair(args):
    pair_id, seed, gen, cfg_dict = args
    cfg = GlobalConfig.from_dict(cfg_dict)
    pseed = derive_seed(seed, pair_id)
    rng = np.random.default_rng(pseed)
    name = gen.objects[pair_id % len(gen.objects)]
    obj = catalog_mesh(name)
    try:
        grasp = generate_grasp(obj, derive_seed(pseed, 1), c_contact=cfg.c_contact)
    except GraspError as exc:
        return pair_id, None, str(exc)
    kind = TRAJECTORY_KINDS[int(rng.integers(len(TRAJECTORY_KINDS)))]
    traj = generate_trajectory(kind, gen.traj_length, gen.dt, derive_seed(pseed, 2), cfg.mass, cfg.gravity)
    frame = int(rng.integers(1, gen.traj_length - 1))
    rot, trans = traj.rotations[frame], traj.translations[frame]
    a = dynamics.acceleration(traj, frame)
    F = dynamics.required_force(a, cfg.mass, cfg.gravity)
    clean = round_pose(transform_pose(grasp, rot, trans))
    noisy = round_pose(perturb(clean, gen.noise(derive_seed(pseed, 3))))
    obj_w = obj.transformed(rot, trans)
    sample_seed = derive_seed(pseed, 4)
    samples_w = obj.sample_surface(cfg.n_samples, sample_seed).transformed(rot, trans)
    clean_mesh = skin(clean)
    ref = contact_reference(clean_mesh, obj_w, cfg.c_contact)
    split = split_of(pair_id, gen.pairs, seed)
    records = []
    for j, pose in enumerate(interpolate(clean, noisy, gen.interp_steps)):
        pose = round_pose(pose)
        fld, pd, fe, me = label_frame(pose, clean_mesh, ref, obj_w, samples_w, F, cfg)
        # Targets come from the stored (rounded) labels so they can be recomputed exactly.
        pd, fe, me = r9([pd, fe, me])
        gt, mt = grasp_targets(pd, cfg.c_pd), manip_targets(fe, me, cfg.c_fe)
        kp = forward_kinematics(pose).keypoints
        records.append({
            "type": "frame", "pair": pair_id, "j": j + 1, "split": split, "object": name,
            "trajectory": kind, "frame": frame,
            "pose": pose_to_dict(pose), "clean_pose": pose_to_dict(clean),
            "object_pose": {"rot": rot, "trans": trans}, "accel": a,
            "keypoints": kp, "sample_seed": sample_seed, "field": sparse_field(fld),
            "labels": {"pd": pd, "fe": fe, "me": me},
            "grasp_targets": {"b_hard": gt.b_hard, "b_soft": gt.b_soft},
            "manip_targets": {"s_hard": mt.s_hard, "s_soft": mt.s_soft},
        })
    return pair_id, records, None


def _make_eval_sequence(args):
    k, seed, gen, cfg_dict = args
    cfg = GlobalConfig.from_dict(cfg_dict)
    sseed = derive_seed(seed, 1_000_000 + k)
    rng = np.random.default_rng(sseed)
    name = gen.objects[k % len(gen.objects)]
    obj = catalog_mesh(name)
    for attempt in range(8):
        try:
            grasp = generate_grasp(obj, derive_seed(sseed, 1, attempt), c_contact=cfg.c_contact)
            break
        except GraspError:
            continue
    else:
        return k, None, None
    kind = TRAJECTORY_KINDS[int(rng.integers(len(TRAJECTORY_KINDS)))]
    traj = generate_trajectory(kind, gen.eval_frames, gen.dt, derive_seed(sseed, 2), cfg.mass, cfg.gravity)
    clean = [round_pose(transform_pose(grasp, traj.rotations[i], traj.translations[i])) for i in range(len(traj))]
    noisy = [round_pose(perturb(p, gen.noise(derive_seed(sseed, 3, i)))) for i, p in enumerate(clean)]
    meta = {"seed": sseed, "generator": "hoiplaus.gen", "trajectory": kind, "object": name}
    ref = f"builtin:{name}"
    clean_seq = Sequence(clean, traj.rotations, traj.translations, traj.dt, ref, {**meta, "role": "clean"})
    noisy_seq = Sequence(noisy, traj.rotations, traj.translations, traj.dt, ref,
                         {**meta, "role": "noisy", "noise": asdict(gen.noise(0)) | {"seed": sseed}})
    return k, clean_seq, noisy_seq


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(threads) as pool:
        return pool.map(fn, items, chunksize=1)


def build_dataset(gen: GenConfig, seed: int, out_dir, cfg: GlobalConfig = DEFAULT, threads: int = 1,
                  write_objects: bool = True) -> dict:
    """Write labels.jsonl, sequences/ and manifest.json under ``out_dir``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    results = _map(_generate_pair, [(i, seed, gen, cfg_dict) for i in range(gen.pairs)], threads)
    failures = []
    n_frames = 0
    with (out / "labels.jsonl").open("w") as fh:
        fh.write(dumps({"type": "header", "format": LABEL_FORMAT, "version": FORMAT_VERSION,
                        "n_samples": cfg.n_samples}) + "\n")
        for pair_id, records, err in sorted(results, key=lambda r: r[0]):
            if records is None:
                failures.append({"pair": pair_id, "error": err})
                log.warning("pair %d skipped: %s", pair_id, err)
                continue
            for rec in records:
                fh.write(dumps(rec) + "\n")
                n_frames += 1

    seq_dir = out / "sequences"
    seq_dir.mkdir(exist_ok=True)
    seqs = _map(_make_eval_sequence, [(k, seed, gen, cfg_dict) for k in range(gen.eval_sequences)], threads)
    seq_files = []
    for k, clean_seq, noisy_seq in sorted(seqs, key=lambda r: r[0]):
        if clean_seq is None:
            failures.append({"sequence": k, "error": "no grasp"})
            continue
        for role, s in (("clean", clean_seq), ("noisy", noisy_seq)):
            p = seq_dir / f"seq{k:03d}.{role}.seq.jsonl"
            write_sequence(s, p)
        seq_files.append(f"seq{k:03d}")

    if write_objects:
        (out / "objects").mkdir(exist_ok=True)
        for name in gen.objects:
            save_obj(catalog_mesh(name), out / "objects" / f"{name}.obj")

    manifest = {
        "format": "hoiplaus.manifest", "version": FORMAT_VERSION, "seed": seed,
        "config": {"global": cfg_dict, "gen": gen.to_dict()},
        "counts": {"pairs": gen.pairs, "frames": n_frames, "failed": len(failures),
                   "sequences": len(seq_files)},
        "failures": failures, "sequences": seq_files,
        "pair_seeds": [derive_seed(seed, i) for i in range(gen.pairs)],
    }
    manifest = r9(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_labels(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "labels.jsonl"
    if not path.exists():
        raise FileNotFoundError(str(path))
    lines = path.read_text().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty label file")
    head = json.loads(lines[0])
    if head.get("format") != LABEL_FORMAT:
        raise SchemaError(f"{path}: missing {LABEL_FORMAT} header")
    return [json.loads(line) for line in lines[1:] if line.strip()]


@lru_cache(maxsize=64)
def object_samples(name: str, n: int, seed: int) -> SurfaceSamples:
    return catalog_mesh(name).sample_surface(n, seed)


def dense_field(rec: dict, n_samples: int):
    """Rebuild (normals, m, d, p) arrays in world frame from a sparse record."""
    samples = object_samples(rec["object"], n_samples, int(rec["sample_seed"]))
    rot = np.asarray(rec["object_pose"]["rot"])
    normals = samples.normals @ rot.T
    m = np.zeros(n_samples)
    d = np.zeros(n_samples)
    p = np.zeros((n_samples, 3))
    idx = np.asarray(rec["field"]["idx"], dtype=np.int64)
    if len(idx):
        m[idx] = 1.0
        d[idx] = rec["field"]["d"]
        p[idx] = rec["field"]["p"]
    return normals, m, d, p


def grasp_input(rec: dict, n_object_points: int = 256) -> np.ndarray:
    rot = np.asarray(rec["object_pose"]["rot"])
    trans = np.asarray(rec["object_pose"]["trans"])
    kp_obj = (np.asarray(rec["keypoints"]) - trans) @ rot
    return grasp_features(kp_obj, _cloud(rec["object"], n_object_points))


@lru_cache(maxsize=None)
def _cloud(name: str, n: int) -> np.ndarray:
    from .refine import object_cloud

    return object_cloud(catalog_mesh(name), n)


def manip_input(rec: dict, n_samples: int) -> np.ndarray:
    normals, m, d, p = dense_field(rec, n_samples)
    return manip_features(normals, m, d, p, rec["accel"])


def training_sets(records: list[dict], kind: str, n_samples: int = DEFAULT.n_samples,
                  n_object_points: int = 256) -> dict[str, TrainSet]:
    """Stack records into per-split network inputs and targets."""
    out = {}
    for split in ("train", "val", "test"):
        rows = [r for r in records if r["split"] == split]
        if kind == "grasp":
            x = [grasp_input(r, n_object_points) for r in rows]
            th = [r["grasp_targets"]["b_hard"] for r in rows]
            ts = [r["grasp_targets"]["b_soft"] for r in rows]
        elif kind == "manip":
            x = [manip_input(r, n_samples) for r in rows]
            th = [r["manip_targets"]["s_hard"] for r in rows]
            ts = [r["manip_targets"]["s_soft"] for r in rows]
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        width = len(GRASP_CHANNELS) if kind == "grasp" else len(MANIP_CHANNELS)
        pts = 21 + n_object_points if kind == "grasp" else n_samples
        out[split] = TrainSet(np.array(x).reshape(len(rows), pts, width), np.array(th, dtype=np.float64),
                              np.array(ts, dtype=np.float64))
    return out
