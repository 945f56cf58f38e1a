"""Object-centric correspondence field and contact maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SurfaceSamples, TriMesh
from .hand import HandMesh, HandSkeleton

RAY_CUTOFF = 0.20
RAY_OFFSET = 1e-5
C_CONTACT = 0.002


@dataclass(frozen=True)
class CorrField:
    """Per-sample correspondence (m, d, p) plus the hit record used for re-intersection.

    ``hit_face`` is -1 where ``m`` is 0; ``hit_sign`` is +1 for hits along the
    outward normal and -1 for hits along the inward normal.
    """

    samples: SurfaceSamples
    m: np.ndarray  # (N,) int8
    d: np.ndarray  # (N,) meters, signed
    p: np.ndarray  # (N, 3) canonical hand positions
    hit_face: np.ndarray
    hit_bary: np.ndarray

    def __len__(self) -> int:
        return len(self.m)

    @property
    def normals(self) -> np.ndarray:
        return self.samples.normals

    @property
    def hit_sign(self) -> np.ndarray:
        return np.sign(self.d).astype(np.int8)


@dataclass(frozen=True)
class HoiFrame:
    skeleton: HandSkeleton
    field: CorrField
    object_rot: np.ndarray
    object_trans: np.ndarray


@dataclass(frozen=True)
class ContactMap:
    bits: np.ndarray

    def __len__(self) -> int:
        return len(self.bits)


def compute_field(hand: HandMesh, samples: SurfaceSamples, cutoff: float = RAY_CUTOFF,
                  offset: float = RAY_OFFSET) -> CorrField:
    """Cast along +normal first, then along -normal, from each object sample."""
    pos, nrm = samples.positions, samples.normals
    n = len(pos)
    mesh = hand.mesh
    t_out, f_out, b_out = mesh.raycast_batch(pos + offset * nrm, nrm, cutoff)
    hit_out = f_out >= 0
    t = np.where(hit_out, t_out + offset, 0.0)
    face = f_out.copy()
    bary = b_out.copy()
    sign = np.where(hit_out, 1.0, 0.0)

    rest = np.nonzero(~hit_out)[0]
    if len(rest):
        t_in, f_in, b_in = mesh.raycast_batch(pos[rest] - offset * nrm[rest], -nrm[rest], cutoff)
        hit_in = f_in >= 0
        r = rest[hit_in]
        t[r] = t_in[hit_in] + offset
        face[r] = f_in[hit_in]
        bary[r] = b_in[hit_in]
        sign[r] = -1.0

    m = (face >= 0).astype(np.int8)
    d = sign * t
    p = np.zeros((n, 3))
    hit = face >= 0
    if hit.any():
        tri = hand.canonical_vertices[mesh.faces[face[hit]]]
        p[hit] = np.einsum("nk,nkj->nj", bary[hit], tri)
    return CorrField(samples, m, d, p, face, bary)


def contact_map(field: CorrField, c_contact: float = C_CONTACT) -> ContactMap:
    return ContactMap((field.m == 1) & (np.abs(field.d) <= c_contact))


def contact_iou(a: ContactMap, b: ContactMap) -> float:
    if len(a) != len(b):
        raise ValueError("contact maps have different lengths")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def vertex_contact_map(hand: HandMesh, obj: TriMesh, c_contact: float = C_CONTACT) -> ContactMap:
    """Contact bits on the object's own vertices (distance to the hand surface)."""
    dist, _, _, _ = hand.mesh.closest_points(obj.vertices)
    return ContactMap(dist <= c_contact)
