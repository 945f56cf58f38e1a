"""Compiled inner loops for ray casting and closest-point queries over leaf clusters."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _slab(ox, oy, oz, ix, iy, iz, lo, hi):
    t0 = (lo[0] - ox) * ix
    t1 = (hi[0] - ox) * ix
    tn, tf = min(t0, t1), max(t0, t1)
    t0 = (lo[1] - oy) * iy
    t1 = (hi[1] - oy) * iy
    tn, tf = max(tn, min(t0, t1)), min(tf, max(t0, t1))
    t0 = (lo[2] - oz) * iz
    t1 = (hi[2] - oz) * iz
    tn, tf = max(tn, min(t0, t1)), min(tf, max(t0, t1))
    return tn, tf


@njit(cache=True, inline="always")
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2):
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) <= 1e-18:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - v0[0], oy - v0[1], oz - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return False, 0.0, 0.0, 0.0
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return False, 0.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return True, t, u, v


def _inv(d):
    with np.errstate(divide="ignore"):
        safe = np.where(np.abs(d) < 1e-30, 1e-30, d)
        return 1.0 / safe


@njit(cache=True)
def raycast_nearest(origins, dirs, inv, tmax, leaf_lo, leaf_hi, leaf_faces, v0, e1, e2):
    """Nearest hit with 0 < t <= tmax; ties go to the lower face index."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    n_leaf, leaf_size = leaf_faces.shape
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = inv[r, 0], inv[r, 1], inv[r, 2]
        lim = tmax[r]
        for L in range(n_leaf):
            tn, tf = _slab(ox, oy, oz, ix, iy, iz, leaf_lo[L], leaf_hi[L])
            if tn > tf + 1e-12 or tf < 0.0 or tn > lim or tn > best_t[r]:
                continue
            for k in range(leaf_size):
                f = leaf_faces[L, k]
                if f < 0:
                    break
                ok, t, u, v = _tri_hit(ox, oy, oz, dx, dy, dz, v0[f], e1[f], e2[f])
                if not ok or t <= 0.0 or t > lim:
                    continue
                if t < best_t[r] or (t == best_t[r] and f < best_f[r]):
                    best_t[r], best_f[r], best_u[r], best_v[r] = t, f, u, v
    return best_t, best_f, best_u, best_v


@njit(cache=True)
def winding_counts(origins, d, inv, leaf_lo, leaf_hi, leaf_faces, v0, e1, e2, normals):
    """Exits minus entries along one direction for every origin."""
    n = origins.shape[0]
    out = np.zeros(n)
    dx, dy, dz = d[0], d[1], d[2]
    ix, iy, iz = inv[0], inv[1], inv[2]
    n_leaf, leaf_size = leaf_faces.shape
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        acc = 0.0
        for L in range(n_leaf):
            tn, tf = _slab(ox, oy, oz, ix, iy, iz, leaf_lo[L], leaf_hi[L])
            if tn > tf + 1e-12 or tf < 0.0:
                continue
            for k in range(leaf_size):
                f = leaf_faces[L, k]
                if f < 0:
                    break
                ok, t, u, v = _tri_hit(ox, oy, oz, dx, dy, dz, v0[f], e1[f], e2[f])
                if ok and t > 0.0:
                    s = normals[f, 0] * dx + normals[f, 1] * dy + normals[f, 2] * dz
                    if s > 0:
                        acc += 1.0
                    elif s < 0:
                        acc -= 1.0
        out[r] = acc
    return out


@njit(cache=True, inline="always")
def _closest_tri(px, py, pz, a, b, c):
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]
    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3)
        return a[0] + w * abx, a[1] + w * aby, a[2] + w * abz
    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a[0] + abx * v + acx * w, a[1] + aby * v + acy * w, a[2] + abz * v + acz * w


@njit(cache=True)
def closest_points(queries, leaf_lo, leaf_hi, leaf_faces, tri_a, tri_b, tri_c):
    """Exact closest surface point; leaves visited in order of their box distance."""
    n = queries.shape[0]
    n_leaf, leaf_size = leaf_faces.shape
    dist = np.empty(n)
    pts = np.empty((n, 3))
    face = np.empty(n, dtype=np.int64)
    lb = np.empty(n_leaf)
    for q in range(n):
        px, py, pz = queries[q, 0], queries[q, 1], queries[q, 2]
        for L in range(n_leaf):
            acc = 0.0
            for j in range(3):
                p = queries[q, j]
                g = max(leaf_lo[L, j] - p, 0.0, p - leaf_hi[L, j])
                acc += g * g
            lb[L] = acc
        order = np.argsort(lb, kind="mergesort")
        best = np.inf
        bf = -1
        bx = by = bz = 0.0
        for oi in range(n_leaf):
            L = order[oi]
            if lb[L] > best:
                break
            for k in range(leaf_size):
                f = leaf_faces[L, k]
                if f < 0:
                    break
                cx, cy, cz = _closest_tri(px, py, pz, tri_a[f], tri_b[f], tri_c[f])
                d2 = (cx - px) ** 2 + (cy - py) ** 2 + (cz - pz) ** 2
                if d2 < best or (d2 == best and f < bf):
                    best, bf, bx, by, bz = d2, f, cx, cy, cz
        dist[q] = np.sqrt(best)
        pts[q, 0], pts[q, 1], pts[q, 2] = bx, by, bz
        face[q] = bf
    return dist, pts, face


@njit(cache=True)
def cone_project(f, normals, mu):
    """Row-wise Euclidean projection onto the friction cone around -normal."""
    n = f.shape[0]
    out = np.zeros_like(f)
    k = 1.0 / (1.0 + mu * mu)
    for i in range(n):
        ax, ay, az = -normals[i, 0], -normals[i, 1], -normals[i, 2]
        fx, fy, fz = f[i, 0], f[i, 1], f[i, 2]
        s = fx * ax + fy * ay + fz * az
        px, py, pz = fx - s * ax, fy - s * ay, fz - s * az
        t = np.sqrt(px * px + py * py + pz * pz)
        if t <= mu * s:
            out[i, 0], out[i, 1], out[i, 2] = fx, fy, fz
        elif mu * t <= -s:
            continue
        else:
            c = (s + mu * t) * k
            out[i, 0] = c * (ax + mu * px / t)
            out[i, 1] = c * (ay + mu * py / t)
            out[i, 2] = c * (az + mu * pz / t)
    return out
