"""Pose-space refinement of noisy hand sequences under the learned plausibility losses."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics
from .config import DEFAULT, GlobalConfig
from .field import compute_field
from .geometry import SurfaceSamples, TriMesh
from .hand import POSE_DIM, HandPose, clamp_angles, fk_batch, hand_model
from .surrogate import SurrogateNet, contact_weight_slope, grasp_features, manip_features

log = logging.getLogger(__name__)

GRASP_CLOUD_SEED = 0


@dataclass
class RefineConfig:
    alpha_grasp: float = 1.0
    alpha_manip: float = 1.0
    alpha_reg: float = 10.0
    alpha_smooth: float = 1.0
    steps: int = 100
    step_size: float = 1e-2
    fd_step: float = 1e-4
    trans_unit: float = 0.03  # meters per optimizer unit for the wrist translation
    tol: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 20
    sample_seed: int = 0

    def __post_init__(self):
        w = (self.alpha_grasp, self.alpha_manip, self.alpha_reg, self.alpha_smooth)
        if min(w) < 0 or max(w) == 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")
        if self.steps < 0 or self.step_size <= 0 or self.fd_step <= 0 or self.trans_unit <= 0:
            raise ValueError("invalid refine schedule")

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown refine config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefineResult:
    poses: list[HandPose]
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


def object_cloud(obj: TriMesh, n: int = 256) -> np.ndarray:
    """Fixed surface sample cloud fed to the grasp network (object frame)."""
    return obj.sample_surface(n, GRASP_CLOUD_SEED).positions


class _Frame:
    """Everything about one frame that stays fixed while its pose moves."""

    def __init__(self, rot, trans, accel, samples_obj: SurfaceSamples, cloud, cfg: GlobalConfig):
        self.rot = np.asarray(rot, dtype=np.float64)
        self.trans = np.asarray(trans, dtype=np.float64)
        self.accel = np.asarray(accel, dtype=np.float64)
        self.samples = samples_obj.transformed(self.rot, self.trans)
        self.cloud = cloud
        self.cfg = cfg

    def to_object(self, pts):
        return (pts - self.trans) @ self.rot


class Objective:
    """E(Z) over a whole sequence; Z holds pose vectors with translations in ``trans_unit``."""

    def __init__(self, noisy: list[HandPose], traj: dynamics.ObjectTrajectory, obj: TriMesh,
                 nets: tuple[SurrogateNet | None, SurrogateNet | None], cfg: RefineConfig,
                 gcfg: GlobalConfig = DEFAULT):
        if len(noisy) < 3:
            raise ValueError("refinement needs at least 3 frames")
        if len(noisy) != len(traj):
            raise ValueError("pose and trajectory lengths differ")
        self.shape = noisy[0].shape
        self.model = hand_model(self.shape)
        self.cfg, self.gcfg = cfg, gcfg
        self.grasp_net, self.manip_net = nets
        if cfg.alpha_grasp > 0 and self.grasp_net is None:
            raise ValueError("alpha_grasp > 0 needs a grasp network")
        if cfg.alpha_manip > 0 and self.manip_net is None:
            raise ValueError("alpha_manip > 0 needs a manipulation network")
        self.unit = np.ones(POSE_DIM)
        self.unit[:3] = cfg.trans_unit
        samples = obj.sample_surface(gcfg.n_samples, cfg.sample_seed)
        n_cloud = 256 if self.grasp_net is None or self.grasp_net.n_points is None else self.grasp_net.n_points - 21
        cloud = object_cloud(obj, n_cloud)
        self.frames = [
            _Frame(traj.rotations[i], traj.translations[i], dynamics.acceleration(traj, i), samples, cloud, gcfg)
            for i in range(len(traj))
        ]
        self.Z0 = np.stack([p.to_vector() / self.unit for p in noisy])

    # -- pieces
    def to_vectors(self, Z):
        return Z * self.unit

    def poses(self, Z) -> list[HandPose]:
        return [HandPose.from_vector(v, self.shape) for v in self.to_vectors(Z)]

    def _grasp_input(self, fr: _Frame, v):
        kp, _, _ = fk_batch(v[None], self.shape)
        return grasp_features(fr.to_object(kp[0]), fr.cloud)

    def _field(self, fr: _Frame, v):
        return compute_field(self.model.skin(HandPose.from_vector(v, self.shape)), fr.samples,
                             self.gcfg.ray_cutoff, self.gcfg.ray_offset)

    def _manip_input(self, fr: _Frame, fld):
        return manip_features(fld.normals, fld.m, fld.d, fld.p, fr.accel, self.gcfg.c_contact)

    def frame_scores(self, fr: _Frame, v) -> tuple[float, float]:
        sg = self.grasp_net.forward(self._grasp_input(fr, v)) if self.cfg.alpha_grasp > 0 else 0.0
        sm = self.manip_net.forward(self._manip_input(fr, self._field(fr, v))) if self.cfg.alpha_manip > 0 else 0.0
        return sg, sm

    def value(self, Z) -> float:
        c = self.cfg
        V = self.to_vectors(Z)
        total = 0.0
        for fr, v in zip(self.frames, V):
            sg, sm = self.frame_scores(fr, v)
            total += c.alpha_grasp * sg + c.alpha_manip * sm
        total += c.alpha_reg * float(((Z - self.Z0) ** 2).sum())
        total += c.alpha_smooth * float((np.diff(Z, axis=0) ** 2).sum())
        return total

    # -- gradients
    def _fd_vectors(self, v):
        h = self.cfg.fd_step
        eye = np.eye(POSE_DIM) * h
        return np.concatenate([v + eye, v - eye]), 2 * h

    def _grasp_grad(self, fr: _Frame, v):
        _, dx = self.grasp_net.score_gradient(self._grasp_input(fr, v))
        dkp = dx[:21, :3]  # keypoint part of the input gradient
        vecs, span = self._fd_vectors(v)
        kp, _, _ = fk_batch(vecs, self.shape)
        kp = fr.to_object(kp)
        jac = (kp[:POSE_DIM] - kp[POSE_DIM:]) / span  # (51, 21, 3)
        return np.einsum("kij,ij->k", jac, dkp)

    def _manip_grad(self, fr: _Frame, v):
        fld = self._field(fr, v)
        _, dx = self.manip_net.score_gradient(self._manip_input(fr, fld))
        hit = np.nonzero(fld.m)[0]
        if len(hit) == 0:
            return np.zeros(POSE_DIM)
        faces = self.model.faces[fld.hit_face[hit]]  # (H, 3)
        uniq, inv = np.unique(faces.ravel(), return_inverse=True)
        vecs, span = self._fd_vectors(v)
        verts = self.model.vertices_subset(vecs, uniq)[:, inv.reshape(-1, 3)]  # (102, H, 3, 3)
        sign = np.sign(fld.d[hit])
        nrm = fld.normals[hit]
        off = self.gcfg.ray_offset
        origin = fld.samples.positions[hit] + (sign * off)[:, None] * nrm
        direction = sign[:, None] * nrm
        d, p = _reintersect(origin, direction, verts, self.model.canonical_vertices[faces], off, sign)
        dd = (d[:POSE_DIM] - d[POSE_DIM:]) / span  # (51, H)
        dp = (p[:POSE_DIM] - p[POSE_DIM:]) / span  # (51, H, 3)
        # d enters both the raw distance channel and the contact channel.
        dd_in = dx[hit, 4] + dx[hit, 11] * contact_weight_slope(1.0, fld.d[hit], self.gcfg.c_contact)
        return dd @ dd_in + np.einsum("khj,hj->k", dp, dx[hit, 5:8])

    def gradient(self, Z) -> np.ndarray:
        c = self.cfg
        V = self.to_vectors(Z)
        G = np.zeros_like(Z)
        for i, (fr, v) in enumerate(zip(self.frames, V)):
            g = np.zeros(POSE_DIM)
            if c.alpha_grasp > 0:
                g += c.alpha_grasp * self._grasp_grad(fr, v)
            if c.alpha_manip > 0:
                g += c.alpha_manip * self._manip_grad(fr, v)
            G[i] = g * self.unit  # chain rule into optimizer units
        G += 2 * c.alpha_reg * (Z - self.Z0)
        if c.alpha_smooth > 0:
            dZ = np.diff(Z, axis=0)
            G[:-1] -= 2 * c.alpha_smooth * dZ
            G[1:] += 2 * c.alpha_smooth * dZ
        return G

    def project(self, Z) -> np.ndarray:
        out = Z.copy()
        out[:, 3:] = clamp_angles(out[:, 3:].reshape(-1, 3)).reshape(len(Z), -1)
        return out


def _reintersect(origin, direction, tri, canon, offset, sign):
    """Ray/plane hit against fixed (possibly moved) faces: signed distance and canonical point.

    ``tri`` has shape (K, H, 3, 3); rays are shared across the K batch entries.
    """
    v0 = tri[:, :, 0]
    e1 = tri[:, :, 1] - v0
    e2 = tri[:, :, 2] - v0
    d = np.broadcast_to(direction, v0.shape)
    p = np.cross(d, e2)
    det = np.einsum("khj,khj->kh", e1, p)
    det = np.where(np.abs(det) < 1e-18, 1e-18, det)
    s = origin[None] - v0
    u = np.einsum("khj,khj->kh", s, p) / det
    q = np.cross(s, e1)
    w = np.einsum("khj,khj->kh", d, q) / det
    t = np.einsum("khj,khj->kh", e2, q) / det
    bary = np.stack([1 - u - w, u, w], axis=-1)
    pos = np.einsum("khc,hcj->khj", bary, canon)
    return sign[None] * (t + offset), pos


def refine_sequence(noisy: list[HandPose], traj: dynamics.ObjectTrajectory, obj: TriMesh,
                    nets: tuple[SurrogateNet | None, SurrogateNet | None], cfg: RefineConfig = RefineConfig(),
                    gcfg: GlobalConfig = DEFAULT) -> RefineResult:
    """Projected gradient descent with Armijo backtracking; ``obj`` is in the object frame."""
    if cfg.alpha_grasp == 0 and cfg.alpha_manip == 0 and cfg.alpha_smooth == 0:
        # The regularizer alone is minimized by the input itself.
        return RefineResult(list(noisy), True, 0, [])
    f = Objective(noisy, traj, obj, nets, cfg, gcfg)
    Z = f.Z0.copy()
    E = f.value(Z)
    history = [E]
    converged = False
    it = 0
    step = cfg.step_size
    for it in range(1, cfg.steps + 1):
        G = f.gradient(Z)
        if not np.any(G):
            converged = True
            break
        accepted = False
        for _ in range(cfg.max_backtracks):
            Zn = f.project(Z - step * G)
            En = f.value(Zn)
            if En <= E - cfg.armijo * float((G * (Z - Zn)).sum()):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent left at resolvable step sizes
            break
        drop = E - En
        Z, E = Zn, En
        history.append(E)
        step = min(step * 2.0, cfg.step_size * 64)
        if drop <= cfg.tol * max(1.0, abs(E)):
            converged = True
            break
    if not converged:
        log.warning("refinement stopped after %d steps without converging", it)
    return RefineResult(f.poses(Z), converged, it, history)
