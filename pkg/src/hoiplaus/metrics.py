"""Frame- and sequence-level plausibility and accuracy metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import dynamics
from .config import DEFAULT, GlobalConfig
from .field import compute_field, contact_iou, contact_map
from .geometry import SurfaceSamples, TriMesh, intersection_volume
from .hand import HandMesh, HandPose, HandSkeleton, forward_kinematics, skin


@dataclass
class FrameMetrics:
    pd: float
    fe: float
    me: float
    iv: float
    contact_iou: float
    mpjpe: float
    mpvpe: float
    plausible: bool

    def as_dict(self) -> dict:
        return asdict(self)


def is_plausible(pd: float, fe: float, cfg: GlobalConfig = DEFAULT) -> bool:
    return bool(pd < cfg.c_pd and fe < cfg.c_fe)


@dataclass(frozen=True)
class ContactReference:
    """Clean-mesh contact vertices and the object normals at their closest points."""

    index: np.ndarray
    normals: np.ndarray


def contact_reference(clean: HandMesh, obj: TriMesh, c_contact: float = DEFAULT.c_contact) -> ContactReference:
    dist, _, nrm, _ = obj.closest_points(clean.mesh.vertices)
    idx = np.nonzero(dist <= c_contact)[0]
    return ContactReference(idx, nrm[idx])


def penetration_depth(noisy: HandMesh, clean: HandMesh, obj: TriMesh, c_contact: float = DEFAULT.c_contact,
                      c_tangent: float = DEFAULT.c_tangent, ref: ContactReference | None = None) -> float:
    """Deepest inward normal shift of clean contact vertices, ignoring large tangential slides."""
    if noisy.mesh.n_vertices != clean.mesh.n_vertices or not np.array_equal(noisy.mesh.faces, clean.mesh.faces):
        raise ValueError("noisy and clean hand meshes must share topology")
    if ref is None:
        ref = contact_reference(clean, obj, c_contact)
    if len(ref.index) == 0:
        return 0.0
    shift = noisy.mesh.vertices[ref.index] - clean.mesh.vertices[ref.index]
    normal_part = np.einsum("ij,ij->i", shift, ref.normals)
    tangent = np.linalg.norm(shift - normal_part[:, None] * ref.normals, axis=1)
    keep = tangent < c_tangent
    if not keep.any():
        return 0.0
    return float(max(0.0, np.max(-normal_part[keep])))


def mpjpe(a: HandSkeleton, b: HandSkeleton) -> float:
    return float(np.linalg.norm(a.keypoints - b.keypoints, axis=1).mean() * 1000.0)


def mpvpe(a: HandMesh, b: HandMesh) -> float:
    if a.mesh.n_vertices != b.mesh.n_vertices:
        raise ValueError("meshes must share topology")
    return float(np.linalg.norm(a.mesh.vertices - b.mesh.vertices, axis=1).mean() * 1000.0)


def iv(hand: HandMesh, obj: TriMesh, voxel_size: float = DEFAULT.voxel_size) -> float:
    return intersection_volume(hand.mesh, obj, voxel_size)


def evaluate_frame(noisy_pose: HandPose, clean_pose: HandPose, obj: TriMesh, traj: dynamics.ObjectTrajectory,
                   frame: int, samples: SurfaceSamples, cfg: GlobalConfig = DEFAULT,
                   compute_iv: bool = True) -> FrameMetrics:
    """All metrics for one frame; ``obj`` and ``samples`` are in the object frame."""
    rot, trans = traj.rotations[frame], traj.translations[frame]
    obj_w = obj.transformed(rot, trans)
    samp_w = samples.transformed(rot, trans)
    noisy, clean = skin(noisy_pose), skin(clean_pose)

    fld = compute_field(noisy, samp_w, cfg.ray_cutoff, cfg.ray_offset)
    fld_clean = compute_field(clean, samp_w, cfg.ray_cutoff, cfg.ray_offset)
    a = dynamics.acceleration(traj, frame)
    F = dynamics.required_force(a, traj.mass, traj.gravity)
    fe, _ = dynamics.force_error(fld, F, cfg.mu, cfg.c_contact, cfg.fe_max_iter)
    me, _ = dynamics.manipulation_expense(fld, F, noisy.mesh, cfg.mu, cfg.c_contact, cfg.ray_cutoff, cfg.me_max_iter)
    pd = penetration_depth(noisy, clean, obj_w, cfg.c_contact, cfg.c_tangent)
    iou = contact_iou(contact_map(fld_clean, cfg.c_contact), contact_map(fld, cfg.c_contact))
    vol = iv(noisy, obj_w, cfg.voxel_size) if compute_iv else float("nan")
    return FrameMetrics(
        pd=pd, fe=fe, me=me, iv=vol, contact_iou=iou,
        mpjpe=mpjpe(forward_kinematics(noisy_pose), forward_kinematics(clean_pose)),
        mpvpe=mpvpe(noisy, clean),
        plausible=is_plausible(pd, fe, cfg),
    )


def plausible_rate(frames) -> float:
    frames = list(frames)
    if not frames:
        raise ValueError("plausible_rate needs at least one frame")
    return float(np.mean([bool(f.plausible) for f in frames]))


def evaluate_sequence(poses: list[HandPose], ref_poses: list[HandPose], obj: TriMesh,
                      traj: dynamics.ObjectTrajectory, cfg: GlobalConfig = DEFAULT, sample_seed: int = 0,
                      compute_iv: bool = True) -> list[FrameMetrics]:
    """Per-frame metrics of ``poses`` against ``ref_poses``; ``obj`` is in the object frame."""
    if len(poses) != len(ref_poses) or len(poses) != len(traj):
        raise ValueError("sequence lengths differ")
    samples = obj.sample_surface(cfg.n_samples, sample_seed)
    return [evaluate_frame(p, r, obj, traj, i, samples, cfg, compute_iv)
            for i, (p, r) in enumerate(zip(poses, ref_poses))]


SUMMARY_ROWS = (
    ("mpjpe", "MPJPE (mm)"),
    ("mpvpe", "MPVPE (mm)"),
    ("contact_iou", "Contact IoU"),
    ("iv", "IV (cm^3)"),
    ("pd", "PD (cm)"),
    ("fe", "FE"),
    ("plausible", "Plausible rate"),
)


def summarize(frames: list[FrameMetrics]) -> dict:
    if not frames:
        raise ValueError("no frames to summarize")
    out = {}
    for key, _ in SUMMARY_ROWS:
        vals = np.array([float(getattr(f, key)) for f in frames])
        if key == "pd":
            vals = vals * 100.0
        out[key] = float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else float("nan")
    return out
