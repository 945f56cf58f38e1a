"""Learned plausibility losses: targets, a small point-set classifier with
hand-written gradients, Adam training and a flat binary weight format.

Binary layout (little-endian)::

    8 bytes   magic b"HOIPNET1"
    uint32    number of layers L
    L times:  uint32 rows, uint32 cols, rows*cols float32 (weight, row-major),
              cols float32 (bias)

The JSON sidecar next to the binary holds the kind, channel names, point
count and per-channel input scale.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

C_PD = 0.015
C_FE = 0.1
C_CONTACT = 0.002
C_SOFT = math.log(2.0) / C_PD
EPS = 1e-7
MAGIC = b"HOIPNET1"

GRASP_CHANNELS = ("x", "y", "z", "is_hand", "is_object")
GRASP_SCALE = (10.0, 10.0, 10.0, 1.0, 1.0)
MANIP_CHANNELS = ("nx", "ny", "nz", "m", "d", "px", "py", "pz", "ax", "ay", "az", "contact")
MANIP_SCALE = (1.0, 1.0, 1.0, 1.0, 100.0, 10.0, 10.0, 10.0, 0.1, 0.1, 0.1, 1.0)


class LayoutError(ValueError):
    pass


class GraspTargets(NamedTuple):
    b_hard: int
    b_soft: float


class ManipTargets(NamedTuple):
    s_hard: int
    s_soft: float


def grasp_targets(pd: float, c_pd: float = C_PD) -> GraspTargets:
    if pd < 0:
        raise ValueError("pd must be nonnegative")
    hard = int(pd >= c_pd)
    # 1 - 2**(-pd/c_pd) lands on exactly 0.5 at pd == c_pd.
    soft = 1.0 - 2.0 ** (-pd / c_pd)
    return GraspTargets(hard, float(soft))


def manip_targets(fe: float, me: float, c_fe: float = C_FE) -> ManipTargets:
    hard = int(fe >= c_fe)
    soft = hard * (0.5 + math.atan(me) / math.pi)
    return ManipTargets(hard, float(soft))


def bce(p, t):
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    t = np.asarray(t, dtype=np.float64)
    return -t * np.log(p) - (1 - t) * np.log(1 - p)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def f_score(scores, labels, threshold: float = 0.5) -> float:
    pred = np.asarray(scores) >= threshold
    lab = np.asarray(labels).astype(bool)
    tp = np.sum(pred & lab)
    denom = 2 * tp + np.sum(pred & ~lab) + np.sum(~pred & lab)
    return 1.0 if denom == 0 else float(2 * tp / denom)


# ----------------------------------------------------------------- features
def grasp_features(keypoints_obj: np.ndarray, object_points: np.ndarray) -> np.ndarray:
    """Keypoints and object cloud (both object frame), centered on the cloud mean."""
    c = object_points.mean(axis=0)
    kp = np.asarray(keypoints_obj) - c
    op = np.asarray(object_points) - c
    hand = np.hstack([kp, np.ones((len(kp), 1)), np.zeros((len(kp), 1))])
    obj = np.hstack([op, np.zeros((len(op), 1)), np.ones((len(op), 1))])
    return np.vstack([hand, obj])


def contact_weight(m, d, c_contact: float = C_CONTACT):
    """Smooth contact indicator m * 2**(-(d/c)**2): 1 on the surface, 0.5 at |d| = c."""
    return np.asarray(m, dtype=np.float64) * np.exp2(-(np.asarray(d, dtype=np.float64) / c_contact) ** 2)


def contact_weight_slope(m, d, c_contact: float = C_CONTACT):
    """d(contact_weight)/dd."""
    d = np.asarray(d, dtype=np.float64)
    return -2.0 * math.log(2.0) * d / c_contact**2 * contact_weight(m, d, c_contact)


def manip_features(normals, m, d, p, a, c_contact: float = C_CONTACT) -> np.ndarray:
    """Per-sample (n, m, d, p), broadcast acceleration, and a smooth contact channel."""
    n = len(normals)
    return np.hstack([
        np.asarray(normals, dtype=np.float64), np.asarray(m, dtype=np.float64)[:, None],
        np.asarray(d, dtype=np.float64)[:, None], np.asarray(p, dtype=np.float64),
        np.broadcast_to(np.asarray(a, dtype=np.float64), (n, 3)),
        contact_weight(m, d, c_contact)[:, None],
    ])


# ---------------------------------------------------------------------- net
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


class SurrogateNet:
    """Per-point MLP (two hidden layers), max-pool, MLP head with one logit."""

    def __init__(self, params: dict, kind: str, channels, in_scale, n_points: int | None = None,
                 meta: dict | None = None):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self.kind = kind
        self.channels = tuple(channels)
        self.in_scale = np.asarray(in_scale, dtype=np.float64)
        self.n_points = n_points
        self.meta = dict(meta or {})
        if self.params["W1"].shape[0] != len(self.channels) or len(self.in_scale) != len(self.channels):
            raise LayoutError("channel count does not match the first layer")

    @classmethod
    def init(cls, kind: str, channels, in_scale, seed: int = 0, hidden=(64, 128), head: int = 64,
             n_points: int | None = None, scale: float = 1.0) -> "SurrogateNet":
        rng = np.random.default_rng(seed)
        dims = [len(channels), hidden[0], hidden[1], head, 1]
        params = {}
        for i in range(4):
            fan_in = dims[i]
            params[f"W{i + 1}"] = rng.normal(0, scale * math.sqrt(2.0 / fan_in), (dims[i], dims[i + 1]))
            params[f"b{i + 1}"] = np.zeros(dims[i + 1])
        return cls(params, kind, channels, in_scale, n_points)

    @classmethod
    def zeros_like(cls, net: "SurrogateNet") -> "SurrogateNet":
        return cls({k: np.zeros_like(v) for k, v in net.params.items()}, net.kind, net.channels,
                   net.in_scale, net.n_points)

    def copy(self) -> "SurrogateNet":
        return SurrogateNet({k: v.copy() for k, v in self.params.items()}, self.kind, self.channels,
                            self.in_scale, self.n_points, self.meta)

    # -- evaluation
    def _check(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != len(self.channels):
            raise LayoutError(f"expected (..., P, {len(self.channels)}) input, got {x.shape}")
        if self.n_points is not None and x.shape[1] != self.n_points:
            raise LayoutError(f"expected {self.n_points} points, got {x.shape[1]}")
        return x, single

    def _forward(self, x, dtype=np.float64):
        P = self.params
        B, N, C = x.shape
        xs = (x * self.in_scale).reshape(B * N, C).astype(dtype, copy=False)
        z1 = xs @ P["W1"].astype(dtype) + P["b1"].astype(dtype)
        h1 = np.maximum(z1, 0)
        z2 = h1 @ P["W2"].astype(dtype) + P["b2"].astype(dtype)
        # relu is monotone, so pooling the pre-activations picks the same points.
        zp = z2.reshape(B, N, -1)
        arg = zp.argmax(axis=1)
        g = np.maximum(np.take_along_axis(zp, arg[:, None, :], axis=1)[:, 0], 0).astype(np.float64)
        z3 = g @ P["W3"] + P["b3"]
        h3 = np.maximum(z3, 0)
        logit = (h3 @ P["W4"] + P["b4"])[:, 0]
        cache = (xs, z1, h1, z2, arg, g, z3, h3, (B, N, C))
        return logit, cache

    def logits(self, x) -> np.ndarray:
        x, single = self._check(x)
        z, _ = self._forward(x)
        return z[0] if single else z

    def forward(self, x):
        x, single = self._check(x)
        z, _ = self._forward(x)
        s = sigmoid(z)
        return float(s[0]) if single else s

    __call__ = forward

    def _backward(self, cache, dlogit, want_dx: bool = True):
        """Reverse pass from d(loss)/d(logit) of shape (B,).

        The max-pool routes gradient only to the argmax point of each channel,
        so everything below it runs on (B, H2) gathered rows instead of B*N.
        """
        P = self.params
        xs, z1, h1, z2, arg, g, z3, h3, (B, N, C) = cache
        grads = {}
        grads["W4"] = h3.T @ dlogit[:, None]
        grads["b4"] = np.array([dlogit.sum()])
        dh3 = dlogit[:, None] * P["W4"][:, 0][None]
        dz3 = dh3 * (z3 > 0)
        grads["W3"] = g.T @ dz3
        grads["b3"] = dz3.sum(0)
        dg = dz3 @ P["W3"].T  # (B, H2)
        H2 = P["W2"].shape[1]
        rows = (arg + N * np.arange(B)[:, None]).ravel()  # flat point index per (b, channel)
        chan = np.tile(np.arange(H2), B)
        dz2 = dg.ravel() * (z2[rows, chan] > 0)  # one live entry per gathered row
        h1g = h1[rows]
        grads["W2"] = np.einsum("bkh,bk->hk", h1g.reshape(B, H2, -1), dz2.reshape(B, H2))
        grads["b2"] = dz2.reshape(B, H2).sum(0)
        # Relu masks are per point, so masking each channel's share before summing is exact.
        dz1 = dz2[:, None] * P["W2"].T[chan] * (z1[rows] > 0)
        grads["W1"] = xs[rows].T @ dz1
        grads["b1"] = dz1.sum(0)
        dx = None
        if want_dx:
            flat = np.zeros((B * N, C))
            np.add.at(flat, rows, dz1 @ P["W1"].T)
            dx = flat.reshape(B, N, C) * self.in_scale
        return grads, dx

    def score_gradient(self, x):
        """Score and d(score)/d(input) for one point set (used by the refiner)."""
        x, single = self._check(x)
        z, cache = self._forward(x)
        s = sigmoid(z)
        _, dx = self._backward(cache, s * (1 - s))
        if single:
            return float(s[0]), dx[0]
        return s, dx

    def loss_and_gradients(self, x, t_hard, t_soft, alpha_hard: float = 1.0, alpha_soft: float = 1.0,
                           want_dx: bool = True, dtype=np.float64):
        """Mean combined BCE over the batch, parameter gradients and input gradients.

        ``dtype`` sets the precision of the per-point layers; training uses float32.
        """
        x, _ = self._check(x)
        t_hard = np.atleast_1d(np.asarray(t_hard, dtype=np.float64))
        t_soft = np.atleast_1d(np.asarray(t_soft, dtype=np.float64))
        z, cache = self._forward(x, dtype)
        p = sigmoid(z)
        B = len(p)
        loss = float(np.mean(alpha_hard * bce(p, t_hard) + alpha_soft * bce(p, t_soft)))
        live = (p > EPS) & (p < 1 - EPS)  # the clamp zeroes gradients outside
        dlogit = np.where(live, alpha_hard * (p - t_hard) + alpha_soft * (p - t_soft), 0.0) / B
        grads, dx = self._backward(cache, dlogit, want_dx)
        return loss, grads, dx

    # -- persistence
    def save(self, path) -> None:
        path = Path(path)
        buf = bytearray(MAGIC)
        buf += struct.pack("<I", 4)
        for i in range(1, 5):
            W = self.params[f"W{i}"].astype("<f4")
            b = self.params[f"b{i}"].astype("<f4")
            buf += struct.pack("<II", *W.shape)
            buf += W.tobytes(order="C") + b.tobytes()
        path.write_bytes(bytes(buf))
        side = {
            "format": "hoiplaus.net", "version": 1, "kind": self.kind, "channels": list(self.channels),
            "in_scale": self.in_scale.tolist(), "n_points": self.n_points,
            "layers": [list(self.params[f"W{i}"].shape) for i in range(1, 5)],
            "meta": self.meta,
        }
        sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogateNet":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise LayoutError(f"{path}: bad magic bytes")
        (n_layers,) = struct.unpack_from("<I", raw, 8)
        off = 12
        params = {}
        for i in range(1, n_layers + 1):
            if off + 8 > len(raw):
                raise LayoutError(f"{path}: truncated layer header")
            r, c = struct.unpack_from("<II", raw, off)
            if off + 8 + 4 * (r * c + c) > len(raw):
                raise LayoutError(f"{path}: truncated layer {i}")
            off += 8
            W = np.frombuffer(raw, "<f4", r * c, off).reshape(r, c)
            off += 4 * r * c
            b = np.frombuffer(raw, "<f4", c, off)
            off += 4 * c
            params[f"W{i}"], params[f"b{i}"] = W.astype(np.float64), b.astype(np.float64)
        if off != len(raw) or n_layers != 4:
            raise LayoutError(f"{path}: unexpected layer layout")
        sp = sidecar_path(path)
        if not sp.exists():
            raise FileNotFoundError(str(sp))
        side = json.loads(sp.read_text())
        return cls(params, side["kind"], side["channels"], side["in_scale"], side.get("n_points"),
                   side.get("meta"))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# ----------------------------------------------------------------- training
@dataclass
class TrainConfig:
    alpha_hard: float = 1.0
    alpha_soft: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.alpha_hard < 0 or self.alpha_soft < 0 or self.alpha_hard + self.alpha_soft == 0:
            raise ValueError("alpha weights must be >= 0 and not both zero")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("invalid optimizer settings")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainSet:
    x: np.ndarray  # (B, P, C)
    t_hard: np.ndarray
    t_soft: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class TrainResult:
    net: SurrogateNet
    f_score: float
    history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"f_score": self.f_score, "history": self.history}


class Adam:
    def __init__(self, params: dict, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _mean_loss(net, data: TrainSet, cfg: TrainConfig, chunk: int = 64) -> tuple[float, np.ndarray]:
    scores = np.concatenate([net.forward(data.x[i : i + chunk]) for i in range(0, len(data), chunk)])
    loss = float(np.mean(cfg.alpha_hard * bce(scores, data.t_hard) + cfg.alpha_soft * bce(scores, data.t_soft)))
    return loss, scores


def train(net: SurrogateNet, train_set: TrainSet, cfg: TrainConfig, val_set: TrainSet | None = None,
          test_set: TrainSet | None = None) -> TrainResult:
    """Adam on the combined hard/soft BCE; keeps the weights with the best validation loss."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.lr)
    best = (np.inf, net.copy())
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            loss, grads, _ = net.loss_and_gradients(train_set.x[idx], train_set.t_hard[idx],
                                                    train_set.t_soft[idx], cfg.alpha_hard, cfg.alpha_soft,
                                                    want_dx=False, dtype=np.float32)
            opt.step(net.params, grads)
            total += loss * len(idx)
        row = {"epoch": epoch + 1, "train_loss": total / len(train_set)}
        if val_set is not None and len(val_set):
            vl, vs = _mean_loss(net, val_set, cfg)
            row.update(val_loss=vl, val_f=f_score(vs, val_set.t_hard))
            if vl < best[0]:
                best = (vl, net.copy())
        history.append(row)
    if val_set is not None and len(val_set) and cfg.epochs:
        net = best[1]
    # Round to the storage precision so in-memory and reloaded nets agree.
    for k in net.params:
        net.params[k] = net.params[k].astype(np.float32).astype(np.float64)
    held = test_set if test_set is not None and len(test_set) else val_set
    fs = f_score(net.forward(held.x), held.t_hard) if held is not None and len(held) else float("nan")
    net.meta = {"train_config": asdict(cfg), "f_score": fs}
    return TrainResult(net, fs, history)


def new_grasp_net(seed: int, n_object_points: int = 256) -> SurrogateNet:
    return SurrogateNet.init("grasp", GRASP_CHANNELS, GRASP_SCALE, seed, n_points=21 + n_object_points)


def new_manip_net(seed: int, n_samples: int = 1024) -> SurrogateNet:
    return SurrogateNet.init("manip", MANIP_CHANNELS, MANIP_SCALE, seed, n_points=n_samples)
