"""Serial revolute chain and straight-line muscle routes.

Link 0 is the fixed base (torso); joint ``j`` (0-based) connects link ``j``
to link ``j + 1``.  Lengths are in mm, angles in rad.  Muscle routes are
polylines through attachment points fixed in link frames, with no wrapping.

The numeric kernels are compiled with numba because the plant evaluates
them at every 1 ms physics substep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .textconfig import ConfigError, Document, check_keys, parse_file, parse_text

JOINT_NAMES = ("S_r", "S_p", "S_y", "E_p", "E_y")
N_JOINTS = 5
N_MUSCLES = 10
FD_EPS = 1e-5


@dataclass(frozen=True)
class Chain:
    axes: np.ndarray  # (n, 3) unit axes in parent link frame
    offsets: np.ndarray  # (n, 3) joint origin in parent link frame, mm
    lower: np.ndarray
    upper: np.ndarray
    ee_offset: np.ndarray  # end effector in last link frame, mm
    names: tuple = JOINT_NAMES

    def __post_init__(self):
        n = len(self.axes)
        if self.offsets.shape != (n, 3) or self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("inconsistent chain array shapes")
        norms = np.linalg.norm(self.axes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("joint axes must be unit vectors")
        if np.any(self.lower >= self.upper):
            raise ValueError("joint limits must satisfy lower < upper")

    @property
    def n_joints(self) -> int:
        return len(self.axes)

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def within_limits(self, theta: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))


@dataclass(frozen=True)
class MuscleRoute:
    muscle_id: int
    links: tuple  # link index per attachment point
    points: np.ndarray  # (k, 3) positions in the owning link frame, mm

    def __post_init__(self):
        if len(self.links) < 2 or len(self.links) != len(self.points):
            raise ValueError(f"muscle #{self.muscle_id}: a route needs at least 2 points")
        if self.links[0] == self.links[-1]:
            raise ValueError(f"muscle #{self.muscle_id}: first and last point on the same link")

    def spanned_joints(self) -> range:
        lo, hi = min(self.links), max(self.links)
        return range(lo, hi)


@dataclass(frozen=True)
class GeometricModel:
    chain: Chain
    routes: tuple
    # flattened route data for the compiled kernels
    pt_link: np.ndarray = field(init=False, repr=False)
    pt_pos: np.ndarray = field(init=False, repr=False)
    starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.routes) != N_MUSCLES:
            raise ValueError(f"expected {N_MUSCLES} muscle routes, got {len(self.routes)}")
        if not any(len(r.spanned_joints()) >= 2 for r in self.routes):
            raise ValueError("at least one muscle must span two or more joints")
        for r in self.routes:
            if max(r.links) > self.chain.n_joints:
                raise ValueError(f"muscle #{r.muscle_id}: link index out of range")
        links = np.concatenate([np.asarray(r.links, dtype=np.int64) for r in self.routes])
        pos = np.concatenate([np.asarray(r.points, dtype=float) for r in self.routes])
        starts = np.zeros(len(self.routes) + 1, dtype=np.int64)
        starts[1:] = np.cumsum([len(r.links) for r in self.routes])
        object.__setattr__(self, "pt_link", links)
        object.__setattr__(self, "pt_pos", pos)
        object.__setattr__(self, "starts", starts)

    @property
    def n_muscles(self) -> int:
        return len(self.routes)

    def with_points(self, pos: np.ndarray) -> "GeometricModel":
        """Copy with attachment points replaced by ``pos`` (flattened order)."""
        routes = []
        for i, r in enumerate(self.routes):
            routes.append(MuscleRoute(r.muscle_id, r.links, pos[self.starts[i]:self.starts[i + 1]].copy()))
        return GeometricModel(self.chain, tuple(routes))


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _axis_rotation(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c = np.cos(angle)
    s = np.sin(angle)
    C = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * C
    R[0, 1] = x * y * C - z * s
    R[0, 2] = x * z * C + y * s
    R[1, 0] = y * x * C + z * s
    R[1, 1] = c + y * y * C
    R[1, 2] = y * z * C - x * s
    R[2, 0] = z * x * C - y * s
    R[2, 1] = z * y * C + x * s
    R[2, 2] = c + z * z * C
    return R


@njit(cache=True)
def _frames(axes, offsets, theta):
    # small fixed-size products written out; BLAS calls dominate otherwise
    n = axes.shape[0]
    R = np.zeros((n + 1, 3, 3))
    o = np.zeros((n + 1, 3))
    R[0, 0, 0] = R[0, 1, 1] = R[0, 2, 2] = 1.0
    for j in range(n):
        A = _axis_rotation(axes[j], theta[j])
        for r in range(3):
            o[j + 1, r] = o[j, r] + R[j, r, 0] * offsets[j, 0] + R[j, r, 1] * offsets[j, 1] + R[j, r, 2] * offsets[j, 2]
            for c in range(3):
                R[j + 1, r, c] = R[j, r, 0] * A[0, c] + R[j, r, 1] * A[1, c] + R[j, r, 2] * A[2, c]
    return R, o


@njit(cache=True)
def _world_points(R, o, pt_link, pt_pos):
    P = np.empty_like(pt_pos)
    for k in range(pt_pos.shape[0]):
        L = pt_link[k]
        x, y, z = pt_pos[k, 0], pt_pos[k, 1], pt_pos[k, 2]
        for r in range(3):
            P[k, r] = o[L, r] + R[L, r, 0] * x + R[L, r, 1] * y + R[L, r, 2] * z
    return P


@njit(cache=True)
def _path_lengths(P, starts):
    m = starts.shape[0] - 1
    out = np.zeros(m)
    for i in range(m):
        for k in range(starts[i], starts[i + 1] - 1):
            d = P[k + 1] - P[k]
            out[i] += np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    return out


@njit(cache=True)
def _lengths_abs(axes, offsets, theta, pt_link, pt_pos, starts):
    R, o = _frames(axes, offsets, theta)
    return _path_lengths(_world_points(R, o, pt_link, pt_pos), starts)


@njit(cache=True)
def _length_jacobian(axes, R, o, P, pt_link, starts):
    # d|b - a|/dq_j = u . (db/dq_j - da/dq_j); a point on link L moves with
    # joint j iff L > j, velocity w_j x (p - o_{j+1}).  Since u . (w x d) =
    # w . (d x u), each segment contributes w_j . ((p - o_{j+1}) x u) per end.
    n = axes.shape[0]
    m = starts.shape[0] - 1
    W = np.empty((n, 3))
    for j in range(n):
        for r in range(3):
            W[j, r] = R[j, r, 0] * axes[j, 0] + R[j, r, 1] * axes[j, 1] + R[j, r, 2] * axes[j, 2]
    G = np.zeros((m, n))
    for i in range(m):
        for k in range(starts[i], starts[i + 1] - 1):
            dx = P[k + 1, 0] - P[k, 0]
            dy = P[k + 1, 1] - P[k, 1]
            dz = P[k + 1, 2] - P[k, 2]
            inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
            ux, uy, uz = dx * inv, dy * inv, dz * inv
            la = pt_link[k]
            lb = pt_link[k + 1]
            for j in range(min(la, lb), max(la, lb)):
                # exactly one end moves with joint j
                q = k + 1 if lb > j else k
                sgn = 1.0 if lb > j else -1.0
                rx = P[q, 0] - o[j + 1, 0]
                ry = P[q, 1] - o[j + 1, 1]
                rz = P[q, 2] - o[j + 1, 2]
                cx = ry * uz - rz * uy
                cy = rz * ux - rx * uz
                cz = rx * uy - ry * ux
                G[i, j] += sgn * (W[j, 0] * cx + W[j, 1] * cy + W[j, 2] * cz)
    return G


@njit(cache=True)
def _ee_and_jacobian(axes, R, o, ee_offset):
    n = axes.shape[0]
    p = np.empty(3)
    for r in range(3):
        p[r] = o[n, r] + R[n, r, 0] * ee_offset[0] + R[n, r, 1] * ee_offset[1] + R[n, r, 2] * ee_offset[2]
    J = np.empty((3, n))
    for j in range(n):
        w0 = R[j, 0, 0] * axes[j, 0] + R[j, 0, 1] * axes[j, 1] + R[j, 0, 2] * axes[j, 2]
        w1 = R[j, 1, 0] * axes[j, 0] + R[j, 1, 1] * axes[j, 1] + R[j, 1, 2] * axes[j, 2]
        w2 = R[j, 2, 0] * axes[j, 0] + R[j, 2, 1] * axes[j, 1] + R[j, 2, 2] * axes[j, 2]
        d0, d1, d2 = p[0] - o[j + 1, 0], p[1] - o[j + 1, 1], p[2] - o[j + 1, 2]
        J[0, j] = w1 * d2 - w2 * d1
        J[1, j] = w2 * d0 - w0 * d2
        J[2, j] = w0 * d1 - w1 * d0
    return p, J


# ------------------------------------------------------------- public API


def link_frames(model: GeometricModel, theta) -> tuple[np.ndarray, np.ndarray]:
    """World rotation and origin of every link, base first."""
    c = model.chain
    return _frames(c.axes, c.offsets, np.asarray(theta, dtype=float))


def forward_kinematics(model: GeometricModel, theta) -> tuple[np.ndarray, tuple]:
    """End-effector position (mm) and per-link frames ``(R, o)``."""
    R, o = link_frames(model, theta)
    p = o[-1] + R[-1] @ model.chain.ee_offset
    return p, (R, o)


def end_effector(model: GeometricModel, theta) -> np.ndarray:
    return forward_kinematics(model, theta)[0]


def muscle_lengths_abs(model: GeometricModel, theta) -> np.ndarray:
    c = model.chain
    return _lengths_abs(c.axes, c.offsets, np.asarray(theta, dtype=float),
                        model.pt_link, model.pt_pos, model.starts)


def muscle_lengths_rel(model: GeometricModel, theta) -> np.ndarray:
    """Lengths relative to the all-zero posture."""
    return muscle_lengths_abs(model, theta) - muscle_lengths_abs(model, np.zeros(model.chain.n_joints))


def joint_jacobian(model: GeometricModel, theta) -> np.ndarray:
    """Translational end-effector Jacobian, 3 x n, mm/rad."""
    c = model.chain
    R, o = _frames(c.axes, c.offsets, np.asarray(theta, dtype=float))
    return _ee_and_jacobian(c.axes, R, o, c.ee_offset)[1]


def muscle_jacobian_geo(model: GeometricModel, theta, eps: float = FD_EPS) -> np.ndarray:
    """dl/dtheta of the geometric model by central differences (10 x 5, mm/rad)."""
    theta = np.asarray(theta, dtype=float)
    G = np.empty((model.n_muscles, len(theta)))
    for j in range(len(theta)):
        d = np.zeros_like(theta)
        d[j] = eps
        G[:, j] = (muscle_lengths_abs(model, theta + d) - muscle_lengths_abs(model, theta - d)) / (2 * eps)
    return G


def muscle_jacobian_analytic(model: GeometricModel, theta) -> np.ndarray:
    """Closed-form dl/dtheta for straight-line routes."""
    c = model.chain
    R, o = _frames(c.axes, c.offsets, np.asarray(theta, dtype=float))
    P = _world_points(R, o, model.pt_link, model.pt_pos)
    return _length_jacobian(c.axes, R, o, P, model.pt_link, model.starts)


# ------------------------------------------------------------ model files


_JOINT_KEYS = {"axis", "offset", "lower", "upper"}


def _build_model(doc: Document) -> GeometricModel:
    path = doc.path
    chain_sec = doc.require("chain")
    check_keys(chain_sec, {"ee_offset"})
    ee = chain_sec.vector("ee_offset", 3)

    joint_secs = doc.with_prefix("joint")
    names = [" ".join(s.name.split()[1:]) for s in joint_secs]
    if names != list(JOINT_NAMES):
        line = joint_secs[0].line if joint_secs else 1
        raise ConfigError(f"joints must be declared in order {', '.join(JOINT_NAMES)}; got {names}", path, line)
    axes, offsets, lo, hi = [], [], [], []
    for s in joint_secs:
        check_keys(s, _JOINT_KEYS)
        a = s.vector("axis", 3)
        if abs(np.linalg.norm(a) - 1.0) > 1e-6:
            raise ConfigError("joint axis must be a unit vector", path, s.require("axis").line)
        low, up = s.float("lower"), s.float("upper")
        if not low < up:
            raise ConfigError("joint limits need lower < upper", path, s.require("upper").line)
        axes.append(a)
        offsets.append(s.vector("offset", 3))
        lo.append(low)
        hi.append(up)
    chain = Chain(np.array(axes), np.array(offsets), np.array(lo), np.array(hi), ee)

    routes = []
    muscle_secs = doc.with_prefix("muscle")
    for s in muscle_secs:
        check_keys(s, {"point"})
        try:
            mid = int(s.name.split()[1])
        except (IndexError, ValueError):
            raise ConfigError(f"muscle section needs an integer id: [{s.name}]", path, s.line) from None
        links, pts = [], []
        for e in s.all("point"):
            parts = e.value.split()
            if len(parts) != 4:
                raise ConfigError("'point' expects: link x y z", path, e.line)
            try:
                link = int(parts[0])
                xyz = [float(p) for p in parts[1:]]
            except ValueError:
                raise ConfigError(f"bad point '{e.value}'", path, e.line) from None
            if not 0 <= link <= chain.n_joints:
                raise ConfigError(f"link index {link} out of range 0..{chain.n_joints}", path, e.line)
            links.append(link)
            pts.append(xyz)
        if len(links) < 2:
            raise ConfigError(f"muscle #{mid} needs at least 2 points", path, s.line)
        if links[0] == links[-1]:
            raise ConfigError(f"muscle #{mid}: first and last point lie on the same link", path, s.line)
        routes.append(MuscleRoute(mid, tuple(links), np.array(pts)))
    ids = [r.muscle_id for r in routes]
    if ids != list(range(1, N_MUSCLES + 1)):
        line = muscle_secs[0].line if muscle_secs else 1
        raise ConfigError(f"expected muscles 1..{N_MUSCLES} in order, got {ids}", path, line)
    try:
        return GeometricModel(chain, tuple(routes))
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def load_model(path) -> GeometricModel:
    return _build_model(parse_file(path))


def parse_model(text: str) -> GeometricModel:
    return _build_model(parse_text(text))


def default_model_path():
    from importlib.resources import files
    return files("tendonarm") / "data" / "arm.model"


def default_model() -> GeometricModel:
    return load_model(default_model_path())
