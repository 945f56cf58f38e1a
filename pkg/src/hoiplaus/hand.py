"""Procedural capsule hand: pose parameters, forward kinematics, skinning, noise.

Hand-local frame: wrist at the origin, fingers extend along +x, the palm faces
-z and the thumb sits on the +y side. Keypoints are ordered wrist, then
(MCP, PIP, DIP, tip) for thumb, index, middle, ring and pinky. Bones are
(metacarpal, proximal, middle, distal) per finger in the same order, and the
15 articulated joints sit at MCP, PIP and DIP.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import TriMesh

N_KEYPOINTS = 21
N_BONES = 20
N_JOINTS = 15
POSE_DIM = 3 + 3 + 3 * N_JOINTS
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

_META_DIRS = np.array(
    [[1.0, 0.9, -0.25], [0.085, 0.024, 0.0], [0.085, 0.004, 0.0], [0.080, -0.016, 0.0], [0.072, -0.034, 0.0]]
)
_META_DIRS /= np.linalg.norm(_META_DIRS, axis=1, keepdims=True)

DEFAULT_LENGTHS = np.array(
    [
        0.035, 0.033, 0.027, 0.024,
        0.085, 0.040, 0.024, 0.021,
        0.085, 0.044, 0.028, 0.022,
        0.080, 0.041, 0.027, 0.021,
        0.075, 0.032, 0.020, 0.019,
    ]
)
DEFAULT_RADII = np.array(
    [
        0.0110, 0.0100, 0.0095, 0.0085,
        0.0110, 0.0095, 0.0085, 0.0078,
        0.0110, 0.0095, 0.0085, 0.0078,
        0.0105, 0.0090, 0.0080, 0.0075,
        0.0100, 0.0080, 0.0075, 0.0070,
    ]
)

CAPSULE_SEGMENTS = 8
CAP_RINGS = 4


def _frame_from(x: np.ndarray, bend: np.ndarray) -> np.ndarray:
    """Rotation whose columns are (x, y, z) with positive rotation about y tipping x toward ``bend``."""
    x = x / np.linalg.norm(x)
    b = bend - (bend @ x) * x
    z = -b / np.linalg.norm(b)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


# Finger chain rest frames: local x along the bone, flexion about local +y.
_CHAIN_FRAMES = np.stack(
    [_frame_from(_META_DIRS[0], np.array([0.3, -0.6, -1.0]))] + [np.eye(3)] * 4
)
# Metacarpal bone frames (local x along the metacarpal).
_META_FRAMES = np.stack(
    [_CHAIN_FRAMES[0]] + [_frame_from(_META_DIRS[f], np.array([0.0, 0.0, -1.0])) for f in range(1, 5)]
)


@dataclass(frozen=True)
class HandShape:
    """Per-bone lengths and capsule radii in meters (fixed per subject)."""

    lengths: np.ndarray = field(default_factory=lambda: DEFAULT_LENGTHS.copy())
    radii: np.ndarray = field(default_factory=lambda: DEFAULT_RADII.copy())

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64).reshape(N_BONES)
        radii = np.asarray(self.radii, dtype=np.float64).reshape(N_BONES)
        if np.any(lengths <= 0) or np.any(radii <= 0):
            raise ValueError("shape values must be strictly positive")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "radii", radii)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HandShape)
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.radii, other.radii)
        )

    __hash__ = None  # type: ignore[assignment]


def clamp_angles(v: np.ndarray) -> np.ndarray:
    """Scale axis-angle rows whose magnitude reaches pi back just below it."""
    v = np.array(v, dtype=np.float64)
    mag = np.linalg.norm(v, axis=-1, keepdims=True)
    limit = np.pi - 1e-9
    return np.where(mag >= limit, v * (limit / np.maximum(mag, 1e-300)), v)


@dataclass(frozen=True)
class HandPose:
    trans: np.ndarray
    root_rot: np.ndarray
    joint_angles: np.ndarray  # (15, 3)
    shape: HandShape = field(default_factory=HandShape)

    def __post_init__(self):
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))
        object.__setattr__(self, "root_rot", clamp_angles(np.asarray(self.root_rot, dtype=np.float64).reshape(3)))
        object.__setattr__(
            self, "joint_angles", clamp_angles(np.asarray(self.joint_angles, dtype=np.float64).reshape(N_JOINTS, 3))
        )

    @classmethod
    def rest(cls, shape: HandShape | None = None, trans=(0.0, 0.0, 0.0)) -> "HandPose":
        return cls(np.asarray(trans, dtype=np.float64), np.zeros(3), np.zeros((N_JOINTS, 3)), shape or HandShape())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.trans, self.root_rot, self.joint_angles.ravel()])

    @classmethod
    def from_vector(cls, vec, shape: HandShape) -> "HandPose":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], vec[3:6], vec[6:].reshape(N_JOINTS, 3), shape)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HandPose)
            and np.array_equal(self.to_vector(), other.to_vector())
            and self.shape == other.shape
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class HandSkeleton:
    keypoints: np.ndarray  # (21, 3)


@dataclass(frozen=True)
class HandMesh:
    mesh: TriMesh
    canonical_vertices: np.ndarray
    bone_assignment: np.ndarray


@dataclass(frozen=True)
class NoiseConfig:
    sigma_trans: float = 0.01
    sigma_pose: float = 0.3
    sigma_root: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_trans, self.sigma_pose, self.sigma_root) < 0:
            raise ValueError("noise sigmas must be nonnegative")


# ----------------------------------------------------------------------- FK
def _rotvec_matrices(v: np.ndarray) -> np.ndarray:
    shp = v.shape[:-1]
    return Rotation.from_rotvec(v.reshape(-1, 3)).as_matrix().reshape(*shp, 3, 3)


def fk_batch(vectors: np.ndarray, shape: HandShape):
    """Batched kinematics over pose vectors (B, POSE_DIM).

    Returns keypoints (B, 21, 3), bone rotations (B, 20, 3, 3) and bone
    origins (B, 20, 3) in world coordinates.
    """
    vec = np.atleast_2d(vectors)
    B = len(vec)
    trans = vec[:, :3]
    root = _rotvec_matrices(vec[:, 3:6])  # (B,3,3)
    joints = _rotvec_matrices(vec[:, 6:].reshape(B, N_JOINTS, 3))  # (B,15,3,3)
    L = shape.lengths.reshape(5, 4)

    kp = np.empty((B, N_KEYPOINTS, 3))
    rots = np.empty((B, N_BONES, 3, 3))
    origins = np.empty((B, N_BONES, 3))
    kp[:, 0] = trans
    for f in range(5):
        b0 = 4 * f
        mcp = trans + np.einsum("bij,j->bi", root, _META_DIRS[f] * L[f, 0])
        rots[:, b0] = root @ _META_FRAMES[f]
        origins[:, b0] = trans
        kp[:, 1 + 4 * f] = mcp
        R = root @ _CHAIN_FRAMES[f]
        pos = mcp
        for k in range(3):
            R = R @ joints[:, 3 * f + k]
            rots[:, b0 + 1 + k] = R
            origins[:, b0 + 1 + k] = pos
            pos = pos + R[:, :, 0] * L[f, k + 1]
            kp[:, 2 + 4 * f + k] = pos
    return kp, rots, origins


def forward_kinematics(pose: HandPose) -> HandSkeleton:
    kp, _, _ = fk_batch(pose.to_vector()[None], pose.shape)
    return HandSkeleton(kp[0])


def bone_segments(pose: HandPose) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points (20, 3) of every bone."""
    _, rots, origins = fk_batch(pose.to_vector()[None], pose.shape)
    return origins[0], origins[0] + rots[0, :, :, 0] * pose.shape.lengths[:, None]


# ------------------------------------------------------------------ skinning
def _capsule_local(length: float, radius: float) -> np.ndarray:
    """Vertices of one capsule along +x: pole, 2*CAP_RINGS rings, pole."""
    phi = 2 * np.pi * np.arange(CAPSULE_SEGMENTS) / CAPSULE_SEGMENTS
    theta = (np.pi / 2) * np.arange(1, CAP_RINGS + 1) / CAP_RINGS  # from pole toward equator
    rings = []
    for th in theta:
        rings.append(np.stack([np.full_like(phi, -radius * np.cos(th)), radius * np.sin(th) * np.cos(phi),
                               radius * np.sin(th) * np.sin(phi)], axis=1))
    for th in theta[::-1]:
        rings.append(np.stack([np.full_like(phi, length + radius * np.cos(th)), radius * np.sin(th) * np.cos(phi),
                               radius * np.sin(th) * np.sin(phi)], axis=1))
    return np.vstack([[[-radius, 0.0, 0.0]], *rings, [[length + radius, 0.0, 0.0]]])


def _capsule_faces(offset: int) -> np.ndarray:
    seg, n_rings = CAPSULE_SEGMENTS, 2 * CAP_RINGS
    top = 1 + n_rings * seg
    faces = []
    for j in range(seg):
        j2 = (j + 1) % seg
        faces.append([0, 1 + j2, 1 + j])
    for i in range(n_rings - 1):
        for j in range(seg):
            j2 = (j + 1) % seg
            a, b = 1 + i * seg + j, 1 + i * seg + j2
            c, d = a + seg, b + seg
            faces += [[a, c, d], [a, d, b]]
    last = 1 + (n_rings - 1) * seg
    for j in range(seg):
        j2 = (j + 1) % seg
        faces.append([top, last + j, last + j2])
    return np.array(faces) + offset


class HandModel:
    """Skinning template for one hand shape: fixed vertex order and faces."""

    def __init__(self, shape: HandShape | None = None):
        self.shape = shape or HandShape()
        local, faces, bone = [], [], []
        offset = 0
        for b in range(N_BONES):
            v = _capsule_local(self.shape.lengths[b], self.shape.radii[b])
            local.append(v)
            faces.append(_capsule_faces(offset))
            bone.append(np.full(len(v), b))
            offset += len(v)
        self.local_vertices = np.vstack(local)
        self.faces = np.vstack(faces)
        self.bone_assignment = np.concatenate(bone)
        self._check_orientation()
        self.canonical_vertices = self.vertices_batch(HandPose.rest(self.shape).to_vector()[None])[0]
        self.canonical_vertices.setflags(write=False)

    def _check_orientation(self):
        # Capsule faces are built counter-clockwise seen from outside; flip once if not.
        v = self.local_vertices[: 2 + 2 * CAP_RINGS * CAPSULE_SEGMENTS]
        tri = v[self.faces[: 2 * CAP_RINGS * CAPSULE_SEGMENTS * 2]]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
        if vol < 0:
            self.faces = self.faces[:, ::-1].copy()

    @property
    def n_vertices(self) -> int:
        return len(self.local_vertices)

    def vertices_batch(self, vectors: np.ndarray) -> np.ndarray:
        _, rots, origins = fk_batch(vectors, self.shape)
        b = self.bone_assignment
        return origins[:, b] + np.einsum("nbij,bj->nbi", rots[:, b], self.local_vertices)

    def vertices_subset(self, vectors: np.ndarray, index: np.ndarray) -> np.ndarray:
        """World positions of selected vertices for a batch of pose vectors."""
        _, rots, origins = fk_batch(vectors, self.shape)
        b = self.bone_assignment[index]
        return origins[:, b] + np.einsum("nbij,bj->nbi", rots[:, b], self.local_vertices[index])

    def skin(self, pose: HandPose) -> HandMesh:
        if pose.shape != self.shape:
            raise ValueError("pose shape does not match hand model")
        verts = self.vertices_batch(pose.to_vector()[None])[0]
        return HandMesh(TriMesh(verts, self.faces), self.canonical_vertices, self.bone_assignment)


_MODELS: dict[bytes, HandModel] = {}


def hand_model(shape: HandShape) -> HandModel:
    key = shape.lengths.tobytes() + shape.radii.tobytes()
    if key not in _MODELS:
        _MODELS[key] = HandModel(shape)
    return _MODELS[key]


def skin(pose: HandPose) -> HandMesh:
    return hand_model(pose.shape).skin(pose)


# ------------------------------------------------------------ noise & blends
def perturb(pose: HandPose, cfg: NoiseConfig) -> HandPose:
    rng = np.random.default_rng(cfg.seed)
    d_trans = rng.normal(0.0, cfg.sigma_trans, 3)
    d_root = rng.normal(0.0, cfg.sigma_root, 3)
    d_joint = rng.normal(0.0, cfg.sigma_pose, (N_JOINTS, 3))
    return HandPose(pose.trans + d_trans, pose.root_rot + d_root, pose.joint_angles + d_joint, pose.shape)


def interpolate(clean: HandPose, noisy: HandPose, m: int = 5) -> list[HandPose]:
    """Linear blend in parameter space; first element is ``clean``, last is ``noisy``."""
    if clean.shape != noisy.shape:
        raise ValueError("cannot interpolate poses of different shapes")
    if m < 2:
        raise ValueError("m must be >= 2")
    a, b = clean.to_vector(), noisy.to_vector()
    out = [clean]
    for j in range(1, m - 1):
        s = j / (m - 1)
        out.append(HandPose.from_vector((1 - s) * a + s * b, clean.shape))
    out.append(noisy)
    return out


def transform_pose(pose: HandPose, rot: np.ndarray, trans: np.ndarray) -> HandPose:
    """Apply the rigid map x -> rot @ x + trans to the whole hand."""
    rot = np.asarray(rot, dtype=np.float64)
    new_root = Rotation.from_matrix(rot @ Rotation.from_rotvec(pose.root_rot).as_matrix()).as_rotvec()
    return replace(pose, trans=rot @ pose.trans + np.asarray(trans, dtype=np.float64), root_rot=new_root)
