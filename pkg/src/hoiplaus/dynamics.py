"""Object kinematics and the two friction-cone force problems (FE and ME).

Both problems are convex second-order-cone programs over per-contact forces.
FE is solved by accelerated projected gradient with exact cone projection,
ME by an augmented Lagrangian whose inner problem is a proximal-gradient loop
using the closed-form prox of ``w * ||f||`` restricted to a cone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

MU = 0.8
GRAVITY = np.array([0.0, 0.0, -9.81])
ME_SENTINEL = 1e6


@dataclass(frozen=True)
class ObjectTrajectory:
    """Rigid object poses per frame: rotations (T,3,3) and translations (T,3)."""

    rotations: np.ndarray
    translations: np.ndarray
    dt: float
    mass: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.translations) < 3:
            raise ValueError("trajectory needs at least 3 frames")
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        object.__setattr__(self, "translations", np.asarray(self.translations, dtype=np.float64))
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=np.float64))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.translations)


@dataclass(frozen=True)
class FrictionCone:
    normal: np.ndarray
    mu: float = MU

    def contains(self, f, tol: float = 0.0) -> bool:
        f = np.asarray(f, dtype=np.float64)
        nf = np.linalg.norm(f)
        if nf == 0:
            return True
        return bool(f @ (-self.normal) / nf >= (1 + self.mu**2) ** -0.5 - tol)


@dataclass
class ForceSolve:
    forces: np.ndarray
    objective: float
    converged: bool
    iterations: int


def acceleration(traj: ObjectTrajectory, frame: int) -> np.ndarray:
    """Second difference of the object centroid; one-sided 2nd order at the ends."""
    p = traj.translations
    n = len(p)
    if not 0 <= frame < n:
        raise IndexError(f"frame {frame} out of range for {n} frames")
    dt2 = traj.dt**2
    if frame == 0:
        if n >= 4:
            return (2 * p[0] - 5 * p[1] + 4 * p[2] - p[3]) / dt2
        return (p[0] - 2 * p[1] + p[2]) / dt2
    if frame == n - 1:
        if n >= 4:
            return (2 * p[-1] - 5 * p[-2] + 4 * p[-3] - p[-4]) / dt2
        return (p[-1] - 2 * p[-2] + p[-3]) / dt2
    return (p[frame + 1] - 2 * p[frame] + p[frame - 1]) / dt2


def required_force(a, mass: float = 1.0, gravity=GRAVITY) -> np.ndarray:
    if mass <= 0:
        raise ValueError("mass must be positive")
    return mass * (-np.asarray(gravity, dtype=np.float64) + np.asarray(a, dtype=np.float64))


def cone_project_batch(f: np.ndarray, normals: np.ndarray, mu: float = MU) -> np.ndarray:
    """Euclidean projection of each row of f onto the cone around -normal."""
    return _kernels.cone_project(np.ascontiguousarray(f, dtype=np.float64),
                                 np.ascontiguousarray(normals, dtype=np.float64), float(mu))


def cone_project(f, cone: FrictionCone) -> np.ndarray:
    return cone_project_batch(np.asarray(f, dtype=np.float64)[None], np.asarray(cone.normal)[None], cone.mu)[0]


def _fe_iterate(normals, F, mu, f0, max_iter, tol):
    """FISTA with adaptive restart on 0.5 * ||sum f - F||^2."""
    M = len(normals)
    step = 1.0 / M
    x = f0.copy()
    y = x.copy()
    tk = 1.0
    fn = np.linalg.norm(F)
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        r = y.sum(0) - F
        x_new = cone_project_batch(y - step * r[None], normals, mu)
        res = np.linalg.norm(x_new.sum(0) - F)
        if res > prev:  # restart momentum
            tk = 1.0
            y = x.copy()
            x_new = cone_project_batch(y - step * (y.sum(0) - F)[None], normals, mu)
            res = np.linalg.norm(x_new.sum(0) - F)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        y = x_new + ((tk - 1) / t_new) * (x_new - x)
        delta = np.abs(x_new - x).max()
        x, tk, prev = x_new, t_new, res
        if res <= tol * fn or delta <= 1e-12 * max(fn, 1.0):
            return x, res, True, it
    return x, prev, False, it


def solve_fe(normals, F, mu: float = MU, max_iter: int = 2000, tol: float = 1e-7):
    """Normalized force error min ||sum f_j - F|| / ||F|| over friction-cone forces."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(F, dtype=np.float64)
    fn = np.linalg.norm(F)
    M = len(normals)
    if fn == 0:
        return 0.0, ForceSolve(np.zeros((M, 3)), 0.0, True, 0)
    if M == 0:
        return 1.0, ForceSolve(np.zeros((0, 3)), float(fn), True, 0)
    # Warm start: each contact proposes the projection of F / M.
    f0 = cone_project_batch(np.broadcast_to(F / M, (M, 3)).copy(), normals, mu)
    x, res, ok, it = _fe_iterate(normals, F, mu, f0, max_iter, tol)
    if not ok:
        # Block-coordinate polish: exact minimization per contact.
        for _ in range(200):
            for j in range(M):
                others = x.sum(0) - x[j]
                x[j] = cone_project_batch((F - others)[None], normals[j : j + 1], mu)[0]
            new = np.linalg.norm(x.sum(0) - F)
            it += 1
            done = new <= tol * fn or res - new <= 1e-12 * fn
            res = new
            if done:
                ok = True
                break
    fe = float(min(max(res / fn, 0.0), 1.0))
    return fe, ForceSolve(x, float(res), bool(ok), it)


def prox_cone_norm(v: np.ndarray, normals: np.ndarray, tau_w: np.ndarray, mu: float = MU) -> np.ndarray:
    """argmin_f 0.5||f - v||^2 + tau_w ||f|| subject to f in its cone."""
    pv = cone_project_batch(v, normals, mu)
    n = np.linalg.norm(pv, axis=1)
    scale = np.where(n > 0, np.maximum(n - tau_w, 0.0) / np.where(n > 0, n, 1.0), 0.0)
    return pv * scale[:, None]


def solve_me(normals, weights, F, mu: float = MU, max_iter: int = 2000, tol: float = 1e-6,
             feas_tol: float = 1e-3):
    """Manipulation expense min sum w_j ||f_j|| with sum f_j = F and cone forces.

    Returns ``(me, ForceSolve)``; an infeasible target yields ``ME_SENTINEL``.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    F = np.asarray(F, dtype=np.float64)
    N = len(normals)
    fn = np.linalg.norm(F)
    if fn == 0:
        return 0.0, ForceSolve(np.zeros((N, 3)), 0.0, True, 0)
    if N == 0:
        return ME_SENTINEL, ForceSolve(np.zeros((0, 3)), ME_SENTINEL, False, 0)

    free = w <= 0
    if free.any():
        fe0, s0 = solve_fe(normals[free], F, mu)
        if fe0 <= 1e-6:
            forces = np.zeros((N, 3))
            forces[free] = s0.forces
            return 0.0, ForceSolve(forces, 0.0, True, s0.iterations)

    fe_all, s_all = solve_fe(normals, F, mu, max_iter=max_iter)
    if fe_all > feas_tol:
        return ME_SENTINEL, ForceSolve(s_all.forces, ME_SENTINEL, False, s_all.iterations)

    # Augmented Lagrangian on the equality, in units of ||F||.
    Fs = F / fn
    rho = 0.1
    step = 1.0 / (rho * N)
    lam = np.zeros(3)
    x = s_all.forces / fn
    it = 0
    converged = False
    while it < max_iter:
        y = x.copy()
        tk = 1.0
        for _ in range(100):
            g = lam + rho * (y.sum(0) - Fs)
            x_new = prox_cone_norm(y - step * g[None], normals, step * w, mu)
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
            dx = np.abs(x_new - x).max()
            y = x_new + ((tk - 1) / t_new) * (x_new - x)
            x, tk = x_new, t_new
            it += 1
            if dx < 1e-9:
                break
        r = x.sum(0) - Fs
        lam_new = lam + rho * r
        dlam = np.linalg.norm(lam_new - lam)
        lam = lam_new
        if np.linalg.norm(r) <= tol and dlam <= tol * max(1.0, np.linalg.norm(lam)):
            converged = True
            break
    forces = x * fn
    resid = F - forces.sum(0)
    if np.linalg.norm(resid) > 1e-9 * fn:
        # Close the remaining equality gap with cone-feasible corrections.
        fe_r, s_r = solve_fe(normals, resid, mu, max_iter=max_iter)
        forces = forces + s_r.forces
    if np.linalg.norm(forces.sum(0) - F) / fn > feas_tol:
        return ME_SENTINEL, ForceSolve(forces, ME_SENTINEL, False, it)
    obj = float((w * np.linalg.norm(forces, axis=1)).sum())
    return obj, ForceSolve(forces, obj, converged, it)


# ------------------------------------------------------------ field wrappers
def contact_normals(field, c_contact: float = 0.002) -> np.ndarray:
    """Normals of field samples with a correspondence within c_contact."""
    mask = (field.m == 1) & (np.abs(field.d) <= c_contact)
    return field.normals[mask]


def force_error(field, F, mu: float = MU, c_contact: float = 0.002, max_iter: int = 2000):
    return solve_fe(contact_normals(field, c_contact), F, mu, max_iter=max_iter)


def expense_weights(field, hand_mesh=None, c_contact: float = 0.002, cutoff: float = 0.20) -> np.ndarray:
    """(|d| - c)^+ per sample; samples without a correspondence use the
    closest-point distance to the hand surface, capped at the ray cutoff."""
    dist = np.abs(field.d).astype(np.float64)
    miss = field.m == 0
    if miss.any():
        if hand_mesh is None:
            dist[miss] = cutoff
        else:
            cp, _, _, _ = hand_mesh.closest_points(field.samples.positions[miss])
            dist[miss] = np.minimum(cp, cutoff)
    return np.maximum(dist - c_contact, 0.0)


def manipulation_expense(field, F, hand_mesh=None, mu: float = MU, c_contact: float = 0.002,
                         cutoff: float = 0.20, max_iter: int = 2000):
    F = np.asarray(F, dtype=np.float64)
    if np.linalg.norm(F) == 0:
        return 0.0, ForceSolve(np.zeros((len(field), 3)), 0.0, True, 0)
    # Zero-weight samples decide the common case without any proximity queries.
    w_cheap = expense_weights(field, None, c_contact, cutoff)
    free = w_cheap <= 0
    if free.any():
        fe0, s0 = solve_fe(field.normals[free], F, mu)
        if fe0 <= 1e-6:
            forces = np.zeros((len(field), 3))
            forces[free] = s0.forces
            return 0.0, ForceSolve(forces, 0.0, True, s0.iterations)
    w = expense_weights(field, hand_mesh, c_contact, cutoff)
    return solve_me(field.normals, w, F, mu, max_iter=max_iter)
