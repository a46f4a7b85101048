"""Learned self-body image: muscle length = ideal map(theta) + tension correction(theta, T).

The ideal joint-muscle map (``ijmm``, 5 -> 10) carries the rigid geometry; the
muscle-route change model (``mrcm``, 15 -> 10) carries everything tension
dependent.  Both are plain sigmoid networks from :mod:`tendonarm.mlp`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import mlp
from .kinematics import GeometricModel, muscle_lengths_abs
from .plant import ElasticityParams, elongation

IMAGE_MAGIC = b"TAIMG\n"
IMAGE_VERSION = 1

GN_DAMPING = 1e-3
GN_STEP_TOL = 1e-4
GN_MAX_ITERS = 50
GN_STALL_ITERS = 5

STIFF_HALF_WINDOW = 10.0  # N
STIFF_POINTS = 9
STIFF_SLOPE_MIN = 1e-3  # mm/N, i.e. stiffness cap 1000 N/mm


class InitialTrainingFailed(RuntimeError):
    pass


@dataclass
class SelfBodyImage:
    ijmm: mlp.Network
    mrcm: mlp.Network
    T_lim: float = 200.0

    def __post_init__(self):
        n_in, _, n_out = self.ijmm.layer_dims
        m_in, _, m_out = self.mrcm.layer_dims
        if m_in != n_in + n_out or m_out != n_out:
            raise mlp.InputShapeError("mrcm must map (theta, T) to one correction per muscle")

    @property
    def n_joints(self) -> int:
        return self.ijmm.layer_dims[0]

    @property
    def n_muscles(self) -> int:
        return self.ijmm.layer_dims[2]

    def copy(self) -> "SelfBodyImage":
        return SelfBodyImage(self.ijmm.copy(), self.mrcm.copy(), self.T_lim)


def _theta_T(theta, T):
    theta = np.asarray(theta, dtype=float)
    T = np.asarray(T, dtype=float)
    if theta.ndim == 2 and T.ndim == 1:
        T = np.broadcast_to(T, (len(theta), T.shape[0]))
    elif theta.ndim == 1 and T.ndim == 2:
        theta = np.broadcast_to(theta, (len(T), theta.shape[0]))
    return np.concatenate([theta, T], axis=-1)


def ideal_lengths(image: SelfBodyImage, theta) -> np.ndarray:
    return mlp.forward(image.ijmm, theta)


def compensation(image: SelfBodyImage, theta, T) -> np.ndarray:
    return mlp.forward(image.mrcm, _theta_T(theta, T))


def predict_lengths(image: SelfBodyImage, theta, T) -> np.ndarray:
    """Relative muscle lengths (mm) for one posture or a stack of postures."""
    return ideal_lengths(image, theta) + compensation(image, theta, T)


def predict_jacobian_theta(image: SelfBodyImage, theta, T) -> np.ndarray:
    """d predict / d theta including the tension-correction term (10x5)."""
    n = image.n_joints
    return (mlp.input_jacobian(image.ijmm, theta)
            + mlp.input_jacobian(image.mrcm, _theta_T(theta, T))[:, :n])


def muscle_jacobian(image: SelfBodyImage, theta) -> np.ndarray:
    """Learned muscle Jacobian dl/dtheta from the ideal map, mm/rad."""
    return mlp.input_jacobian(image.ijmm, np.asarray(theta, dtype=float))


# ------------------------------------------------------------ initial fit

@dataclass
class InitialTrainConfig:
    n_samples: int = 20000
    n_val: int = 2000
    hidden: int = 128
    T_lim: float = 200.0
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay_every: int = 30  # epochs
    lr_decay: float = 0.5
    max_epochs: int = 150
    patience: int = 20
    anchors_per_batch: int = 1
    max_val_rmse: float = 2.0  # mm

    def __post_init__(self):
        if self.n_samples < 1000:
            raise ValueError("initial training needs at least 1000 samples")


def _fit(net: mlp.Network, X, Y, Xv, Yv, cfg: InitialTrainConfig, rng, anchor_x, anchor_y):
    opt = mlp.Adam(net, lr=cfg.lr)
    best, best_net, since = np.inf, net.copy(), 0
    n = len(X)
    for epoch in range(cfg.max_epochs):
        if epoch and epoch % cfg.lr_decay_every == 0:
            opt.lr *= cfg.lr_decay
        perm = rng.permutation(n)
        for k in range(0, n, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            xa, ya = anchor_x(cfg.anchors_per_batch), anchor_y(cfg.anchors_per_batch)
            opt.step(net, mlp.TrainBatch(np.vstack([X[idx], xa]), np.vstack([Y[idx], ya])))
        val = float(np.sqrt(np.mean((mlp.forward(net, Xv) - Yv) ** 2)))
        if val < best - 1e-6:
            best, best_net, since = val, net.copy(), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return best_net, best


def geometric_targets(nominal: GeometricModel, elasticity: ElasticityParams, theta, T):
    """Training targets from the geometric model: (f_geo(theta), -L_e(f_geo_abs(theta), T))."""
    theta = np.atleast_2d(theta)
    T = np.atleast_2d(T)
    l_abs = np.array([muscle_lengths_abs(nominal, t) for t in theta])
    l_rel = l_abs - muscle_lengths_abs(nominal, np.zeros(theta.shape[1]))
    return l_rel, -elongation(elasticity, l_abs, T)


def initial_train(nominal: GeometricModel, elasticity: ElasticityParams, n_samples: int = 20000,
                  seed: int = 0, config: InitialTrainConfig | None = None) -> SelfBodyImage:
    """Fit both networks to the geometric model and nominal elasticity.

    Raises InitialTrainingFailed if either validation RMSE stays above
    ``config.max_val_rmse`` mm.
    """
    cfg = replace(config or InitialTrainConfig(), n_samples=n_samples)
    rng = np.random.default_rng(seed)
    ch = nominal.chain
    nj, nm = ch.n_joints, nominal.n_muscles

    def draw(n):
        th = rng.uniform(ch.lower, ch.upper, (n, nj))
        T = rng.uniform(0.0, cfg.T_lim, (n, nm))
        return (th, T) + geometric_targets(nominal, elasticity, th, T)

    th, T, l_rel, comp = draw(cfg.n_samples)
    thv, Tv, l_relv, compv = draw(cfg.n_val)

    in_c, in_s = (ch.lower + ch.upper) / 2, (ch.upper - ch.lower) / 2
    t_c, t_s = np.full(nm, cfg.T_lim / 2), np.full(nm, cfg.T_lim / 2)
    ijmm = mlp.init_network((nj, cfg.hidden, nm), rng, in_center=in_c, in_scale=in_s,
                            out_center=np.zeros(nm), out_scale=np.maximum(l_rel.std(axis=0), 1.0))
    mrcm = mlp.init_network((nj + nm, cfg.hidden, nm), rng,
                            in_center=np.concatenate([in_c, t_c]), in_scale=np.concatenate([in_s, t_s]),
                            out_center=np.zeros(nm), out_scale=np.maximum(np.abs(comp).max(axis=0), 1.0))

    # zero-posture anchor for the ideal map, zero-tension anchor for the correction
    zero_th = lambda k: np.zeros((k, nj))
    zero_l = lambda k: np.zeros((k, nm))

    def rand_zero_T(k):
        return np.hstack([rng.uniform(ch.lower, ch.upper, (k, nj)), np.zeros((k, nm))])

    ijmm, rmse_i = _fit(ijmm, th, l_rel, thv, l_relv, cfg, rng, zero_th, zero_l)
    X, Xv = np.hstack([th, T]), np.hstack([thv, Tv])
    mrcm, rmse_m = _fit(mrcm, X, comp, Xv, compv, cfg, rng, rand_zero_T, zero_l)
    if rmse_i > cfg.max_val_rmse or rmse_m > cfg.max_val_rmse:
        raise InitialTrainingFailed(
            f"validation RMSE {rmse_i:.2f} mm (ideal) / {rmse_m:.2f} mm (correction) "
            f"above {cfg.max_val_rmse} mm")
    return SelfBodyImage(ijmm, mrcm, cfg.T_lim)


# ------------------------------------------------------- joint estimation

@dataclass
class JointEstimate:
    theta: np.ndarray
    iterations: int
    residual: float  # rms length residual, mm
    stalled: bool


def estimate_joints(image: SelfBodyImage, l_m, T_m, theta_init, lower=None, upper=None,
                    damping: float = GN_DAMPING, use=None) -> JointEstimate:
    """Invert the image for the posture best explaining measured lengths.

    Damped Gauss-Newton from ``theta_init``; the result is clamped to the
    joint limits when they are given.  ``use`` optionally masks out muscles
    (slack or broken ones) from the fit.
    """
    l_m = np.asarray(l_m, dtype=float)
    T_m = np.asarray(T_m, dtype=float)
    w = np.ones(len(l_m)) if use is None else np.asarray(use, dtype=float)
    theta = np.array(theta_init, dtype=float)
    clamp = (lambda x: np.clip(x, lower, upper)) if lower is not None else (lambda x: x)
    theta = clamp(theta)
    r = w * (l_m - predict_lengths(image, theta, T_m))
    cost = float(r @ r)
    best_theta, best_cost = theta.copy(), cost
    worse = 0
    it = 0
    for it in range(1, GN_MAX_ITERS + 1):
        G = w[:, None] * predict_jacobian_theta(image, theta, T_m)
        A = G.T @ G + damping * np.eye(len(theta))
        d = np.linalg.solve(A, G.T @ r)
        theta = clamp(theta + d)
        r = w * (l_m - predict_lengths(image, theta, T_m))
        cost = float(r @ r)
        if cost < best_cost:
            best_theta, best_cost, worse = theta.copy(), cost, 0
        else:
            worse += 1
            if worse >= GN_STALL_ITERS:
                return JointEstimate(best_theta, it, np.sqrt(best_cost / max(w.sum(), 1.0)), True)
        if np.max(np.abs(d)) < GN_STEP_TOL:
            break
    return JointEstimate(best_theta, it, np.sqrt(best_cost / max(w.sum(), 1.0)), False)


# ------------------------------------------------------ muscle stiffness

def muscle_stiffness(image: SelfBodyImage, theta, T, half_window: float = STIFF_HALF_WINDOW,
                     n_points: int = STIFF_POINTS, slope_min: float = STIFF_SLOPE_MIN) -> np.ndarray:
    """Diagonal muscle stiffness (N/mm) from the slope of the tension correction.

    For each muscle the tension is swept over a window around its current
    value (shifted up so it stays non-negative) and a least-squares line is
    fitted to that muscle's correction output.
    """
    theta = np.asarray(theta, dtype=float)
    T = np.asarray(T, dtype=float)
    m = len(T)
    offs = np.linspace(-half_window, half_window, n_points)
    centers = np.maximum(T, half_window)
    rows = np.repeat(T[None, :], m * n_points, axis=0)
    for i in range(m):
        rows[i * n_points:(i + 1) * n_points, i] = centers[i] + offs
    out = compensation(image, theta, rows)
    k = np.empty(m)
    x = offs - offs.mean()
    for i in range(m):
        y = out[i * n_points:(i + 1) * n_points, i]
        s = float(x @ (y - y.mean()) / (x @ x))
        k[i] = -1.0 / min(s, -slope_min)
    return np.diag(k)


# --------------------------------------------------------------- storage

def image_to_bytes(image: SelfBodyImage) -> bytes:
    a, b = mlp.to_bytes(image.ijmm), mlp.to_bytes(image.mrcm)
    header = json.dumps({"version": IMAGE_VERSION, "T_lim": image.T_lim,
                         "ijmm_bytes": len(a), "mrcm_bytes": len(b)}).encode()
    buf = io.BytesIO()
    buf.write(IMAGE_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(a)
    buf.write(b)
    return buf.getvalue()


def image_from_bytes(data: bytes) -> SelfBodyImage:
    if not data.startswith(IMAGE_MAGIC):
        raise ValueError("not a body-image file")
    pos = len(IMAGE_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + n])
    pos += n
    if header.get("version") != IMAGE_VERSION:
        raise ValueError(f"unsupported body-image version {header.get('version')}")
    na, nb = header["ijmm_bytes"], header["mrcm_bytes"]
    if pos + na + nb != len(data):
        raise ValueError("truncated or padded body-image file")
    ijmm = mlp.from_bytes(data[pos:pos + na])
    mrcm = mlp.from_bytes(data[pos + na:pos + na + nb])
    return SelfBodyImage(ijmm, mrcm, float(header["T_lim"]))


def save_image(image: SelfBodyImage, path) -> None:
    Path(path).write_bytes(image_to_bytes(image))


def load_image(path) -> SelfBodyImage:
    return image_from_bytes(Path(path).read_bytes())
