"""Triangle-mesh kernel: OBJ loading, primitives, sampling, ray and proximity queries.

All coordinates are meters. Meshes are immutable once built; every query is
vectorized over batches of rays or points and accelerated by a two-level
bounding-volume index (leaf clusters of spatially coherent faces with AABBs).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

LEAF_SIZE = 32
# Fixed, non-axis-aligned directions for the inside test (majority of 3).
_JITTER_DIRS = np.array(
    [[0.5773, 0.5774, 0.5775], [-0.6123, 0.2834, 0.7384], [0.1923, -0.8412, 0.5054]]
)
_JITTER_DIRS = _JITTER_DIRS / np.linalg.norm(_JITTER_DIRS, axis=1, keepdims=True)


class MeshParseError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    pass


class NotWatertightError(ValueError):
    pass


class RayHit(NamedTuple):
    distance: float
    point: np.ndarray
    face_id: int


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    normal: np.ndarray
    face_id: int
    barycentric: np.ndarray


@dataclass(frozen=True)
class SurfaceSamples:
    """A batch of surface samples stored column-wise."""

    positions: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3)
    face_ids: np.ndarray  # (n,)
    barycentric: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return len(self.face_ids)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(
            self.positions[i], self.normals[i], int(self.face_ids[i]), self.barycentric[i]
        )

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "SurfaceSamples":
        return SurfaceSamples(
            self.positions @ rot.T + trans, self.normals @ rot.T, self.face_ids, self.barycentric
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _build_leaves(centroids: np.ndarray, leaf_size: int) -> list[np.ndarray]:
    leaves = []
    stack = [np.arange(len(centroids))]
    while stack:
        idx = stack.pop()
        if len(idx) <= leaf_size:
            leaves.append(idx)
            continue
        c = centroids[idx]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        order = idx[np.argsort(c[:, axis], kind="stable")]
        half = len(order) // 2
        stack.append(order[half:])
        stack.append(order[:half])
    return leaves


class TriMesh:
    """Indexed triangle surface with unit normals and a leaf-cluster ray index."""

    def __init__(self, vertices, faces, *, leaf_size: int = LEAF_SIZE):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshParseError("face index out of range")
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        dbl_area = np.linalg.norm(cross, axis=1)
        keep = dbl_area > 1e-14
        self.dropped_faces = int((~keep).sum())
        if self.dropped_faces:
            log.warning("dropped %d degenerate faces", self.dropped_faces)
        f, cross, dbl_area = f[keep], cross[keep], dbl_area[keep]
        if len(f) == 0:
            raise DegenerateMeshError("mesh has no non-degenerate faces")

        self.vertices = _frozen(v)
        self.faces = _frozen(f)
        self.face_areas = _frozen(0.5 * dbl_area)
        self.face_normals = _frozen(cross / dbl_area[:, None])
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, f[:, k], cross)
        norms = np.linalg.norm(vn, axis=1)
        vn[norms > 0] /= norms[norms > 0, None]
        vn[norms == 0] = (0.0, 0.0, 1.0)
        self.vertex_normals = _frozen(vn)

        tri = v[f]
        self._v0 = np.ascontiguousarray(tri[:, 0])
        self._e1 = tri[:, 1] - tri[:, 0]
        self._e2 = tri[:, 2] - tri[:, 0]
        leaves = _build_leaves(tri.mean(axis=1), leaf_size)
        n_leaf = len(leaves)
        self._leaf_faces = np.full((n_leaf, leaf_size), -1, dtype=np.int64)
        for i, idx in enumerate(leaves):
            self._leaf_faces[i, : len(idx)] = idx
        self._leaf_lo = np.array([tri[idx].reshape(-1, 3).min(0) for idx in leaves])
        self._leaf_hi = np.array([tri[idx].reshape(-1, 3).max(0) for idx in leaves])
        self._tri = None

    # ------------------------------------------------------------------ basics
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def is_watertight(self) -> bool:
        f = self.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def signed_volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(rot).T + np.asarray(trans), self.faces)

    def __repr__(self) -> str:
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    # --------------------------------------------------------------- ray index
    def raycast_batch(self, origins, dirs, tmax=np.inf):
        """Nearest hit per ray.

        Returns ``(t, face, bary)`` where ``t`` is ``inf`` and ``face`` is -1 on a miss
        and ``bary`` holds barycentric coordinates of the hit within its face.
        """
        origins = np.ascontiguousarray(np.atleast_2d(np.asarray(origins, dtype=np.float64)))
        dirs = np.ascontiguousarray(np.atleast_2d(np.asarray(dirs, dtype=np.float64)))
        n = len(origins)
        tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,)))
        t, face, u, v = _kernels.raycast_nearest(origins, dirs, _kernels._inv(dirs), tmax, self._leaf_lo,
                                                 self._leaf_hi, self._leaf_faces, self._v0, self._e1, self._e2)
        bary = np.zeros((n, 3))
        hit = face >= 0
        bary[hit, 0] = 1.0 - u[hit] - v[hit]
        bary[hit, 1] = u[hit]
        bary[hit, 2] = v[hit]
        return t, face, bary

    def raycast(self, origin, direction) -> RayHit | None:
        direction = np.asarray(direction, dtype=np.float64)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise ValueError("direction must be a unit vector")
        t, f, _ = self.raycast_batch(np.asarray(origin, dtype=np.float64)[None], direction[None])
        if f[0] < 0:
            return None
        return RayHit(float(t[0]), np.asarray(origin) + t[0] * direction, int(f[0]))

    def winding_along(self, points, direction) -> np.ndarray:
        """Signed crossing count of a ray from each point: exits minus entries.

        For a closed, outward-oriented surface this counts how many closed
        shells contain the point, so overlapping components are handled.
        """
        points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        d = np.asarray(direction, dtype=np.float64)
        return _kernels.winding_counts(points, d, _kernels._inv(d), self._leaf_lo, self._leaf_hi,
                                       self._leaf_faces, self._v0, self._e1, self._e2, self.face_normals)

    def contains(self, points) -> np.ndarray:
        """Inside test by majority vote over three jittered ray directions."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        votes = np.zeros(len(points), dtype=np.int64)
        for d in _JITTER_DIRS:
            votes += self.winding_along(points, d) > 0.5
        return votes >= 2

    # ------------------------------------------------------------- proximity
    def closest_points(self, queries):
        """Unsigned distance, closest point and face normal for each query."""
        q = np.ascontiguousarray(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
        if self._tri is None:
            tri = self.vertices[self.faces]
            self._tri = tuple(np.ascontiguousarray(tri[:, k]) for k in range(3))
        dist, pts, face = _kernels.closest_points(q, self._leaf_lo, self._leaf_hi, self._leaf_faces, *self._tri)
        return dist, pts, self.face_normals[face], face

    def closest_point(self, query):
        d, p, n, _ = self.closest_points(np.asarray(query, dtype=np.float64)[None])
        return float(d[0]), p[0], n[0]

    # --------------------------------------------------------------- sampling
    def sample_surface(self, n: int, seed: int) -> SurfaceSamples:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        prob = self.face_areas / self.face_areas.sum()
        fid = rng.choice(self.n_faces, size=n, p=prob)
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
        tri = self.vertices[self.faces[fid]]
        pos = np.einsum("nk,nkj->nj", bary, tri)
        return SurfaceSamples(pos, self.face_normals[fid].copy(), fid, bary)


def _moller_trumbore(o, d, v0, e1, e2):
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-18
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return t, u, v, hit


def closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to p; all inputs (n, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[:, None] + ac * w[:, None]
        # Priority runs from the interior up to vertex regions (last write wins).
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        wbc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(m[:, None], b + (c - b) * wbc[:, None], out)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        wac = d2 / (d2 - d6)
        out = np.where(m[:, None], a + ac * wac[:, None], out)
        m = (d6 >= 0) & (d5 <= d6)
        out = np.where(m[:, None], c, out)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        vab = d1 / (d1 - d3)
        out = np.where(m[:, None], a + ab * vab[:, None], out)
        m = (d3 >= 0) & (d4 <= d3)
        out = np.where(m[:, None], b, out)
        m = (d1 <= 0) & (d2 <= 0)
        out = np.where(m[:, None], a, out)
    return out


# ----------------------------------------------------------------- OBJ files
def load_mesh(path) -> TriMesh:
    """Read a Wavefront OBJ file; quads and n-gons are fan-triangulated."""
    path = Path(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with path.open("r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
            except ValueError as exc:
                raise MeshParseError(f"{path}:{lineno}: {exc}") from exc
    if not verts:
        raise MeshParseError(f"{path}: no vertices")
    if not faces:
        raise DegenerateMeshError(f"{path}: no faces")
    return TriMesh(np.array(verts), np.array(faces))


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- primitives
def _outward(v: np.ndarray, f: np.ndarray) -> TriMesh:
    mesh = TriMesh(v, f)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(v, f[:, ::-1])
    return mesh


def box(extents=(1.0, 1.0, 1.0)) -> TriMesh:
    hx, hy, hz = np.asarray(extents, dtype=np.float64) / 2
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
        ]
    )
    return _outward(v, f)


def thin_plate(width: float = 0.10, depth: float = 0.08, thickness: float = 0.004) -> TriMesh:
    return box((width, depth, thickness))


def _ring_grid(rings: int, seg: int, offset: int = 0, close_rings: bool = False) -> list[list[int]]:
    faces = []
    n_r = rings if close_rings else rings - 1
    for i in range(n_r):
        i2 = (i + 1) % rings
        for j in range(seg):
            j2 = (j + 1) % seg
            a, b = offset + i * seg + j, offset + i * seg + j2
            c, d = offset + i2 * seg + j, offset + i2 * seg + j2
            faces += [[a, c, d], [a, d, b]]
    return faces


def _capped(rings_xyz: np.ndarray, bottom: np.ndarray, top: np.ndarray) -> TriMesh:
    """Stack of rings (r, seg, 3) closed by two apex vertices."""
    r, seg, _ = rings_xyz.shape
    v = np.vstack([bottom[None], rings_xyz.reshape(-1, 3), top[None]])
    faces = _ring_grid(r, seg, offset=1)
    top_i = len(v) - 1
    for j in range(seg):
        j2 = (j + 1) % seg
        faces.append([0, 1 + j2, 1 + j])
        faces.append([top_i, 1 + (r - 1) * seg + j, 1 + (r - 1) * seg + j2])
    return _outward(v, np.array(faces))


def sphere(radius: float = 1.0, n_lon: int = 32, n_lat: int = 16) -> TriMesh:
    lat = np.pi * np.arange(1, n_lat) / n_lat - np.pi / 2
    lon = 2 * np.pi * np.arange(n_lon) / n_lon
    ring = np.stack(
        [np.cos(lat)[:, None] * np.cos(lon), np.cos(lat)[:, None] * np.sin(lon), np.repeat(np.sin(lat)[:, None], n_lon, 1)],
        axis=-1,
    )
    return _capped(radius * ring, np.array([0, 0, -radius]), np.array([0, 0, radius]))


def cylinder(radius: float = 0.03, height: float = 0.10, segments: int = 32) -> TriMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    zs = np.array([-height / 2, height / 2])
    ring = np.stack(
        [np.broadcast_to(radius * np.cos(ang), (2, segments)), np.broadcast_to(radius * np.sin(ang), (2, segments)),
         np.repeat(zs[:, None], segments, 1)],
        axis=-1,
    )
    return _capped(ring, np.array([0, 0, -height / 2]), np.array([0, 0, height / 2]))


def torus(major: float = 0.04, minor: float = 0.012, n_major: int = 32, n_minor: int = 12) -> TriMesh:
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    rr = major + minor * np.cos(w)[None, :]
    v = np.stack(
        [rr * np.cos(u)[:, None], rr * np.sin(u)[:, None], np.broadcast_to(minor * np.sin(w), (n_major, n_minor))],
        axis=-1,
    ).reshape(-1, 3)
    return _outward(v, np.array(_ring_grid(n_major, n_minor, close_rings=True)))


PRIMITIVES: dict[str, Callable[..., TriMesh]] = {
    "box": box,
    "sphere": sphere,
    "cylinder": cylinder,
    "torus": torus,
    "thin_plate": thin_plate,
}


def make_primitive(name: str, **params) -> TriMesh:
    try:
        return PRIMITIVES[name](**params)
    except KeyError:
        raise ValueError(f"unknown primitive {name!r}; choose from {sorted(PRIMITIVES)}") from None


# ------------------------------------------------------------------- volumes
def intersection_volume(a: TriMesh, b: TriMesh, voxel_size: float = 0.002, chunk: int = 200_000) -> float:
    """Volume (cm^3) of voxel centers inside both meshes."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    for m in (a, b):
        if not m.is_watertight:
            raise NotWatertightError("intersection_volume needs watertight meshes")
    lo = np.maximum(a.bounds[0], b.bounds[0])
    hi = np.minimum(a.bounds[1], b.bounds[1])
    if np.any(hi <= lo):
        return 0.0
    # Smaller mesh goes first; the second test only sees its survivors.
    first, second = (a, b) if a.n_faces <= b.n_faces else (b, a)
    counts = np.ceil((hi - lo) / voxel_size).astype(int)
    axes = [lo[k] + (np.arange(counts[k]) + 0.5) * voxel_size for k in range(3)]
    total = 0
    n_total = int(np.prod(counts))
    for s in range(0, n_total, chunk):
        flat = np.arange(s, min(s + chunk, n_total))
        i, j, k = np.unravel_index(flat, counts)
        centers = np.stack([axes[0][i], axes[1][j], axes[2][k]], axis=1)
        inside = first.contains(centers)
        if inside.any():
            total += int(second.contains(centers[inside]).sum())
    return total * voxel_size**3 * 1e6
