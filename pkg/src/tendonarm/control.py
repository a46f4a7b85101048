"""Controllers built on the self-body image.

Muscle stiffness control turns a length error into a target tension, the
position stack derives target lengths from the image, torque control spreads
a joint torque over the muscles, and the variable-stiffness part estimates and
searches operational (end-effector) stiffness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_image import SelfBodyImage, muscle_jacobian, muscle_stiffness, predict_lengths

N_MUSCLES = 10


class InfeasibleTorque(ValueError):
    def __init__(self, msg, best_tau, T):
        super().__init__(msg)
        self.best_tau = best_tau
        self.T = T


class SingularPosture(ValueError):
    pass


class InvalidTarget(ValueError):
    pass


# -------------------------------------------------------- stiffness control

@dataclass
class StiffnessControlGains:
    T_bias: np.ndarray = field(default_factory=lambda: np.full(N_MUSCLES, 10.0))  # N
    K_stiff: float = 2.0  # N/mm

    def __post_init__(self):
        self.T_bias = np.asarray(self.T_bias, dtype=float)
        if np.any(self.T_bias < 0):
            raise ValueError("T_bias must be non-negative")
        if not self.K_stiff > 0:
            raise ValueError("K_stiff must be positive")


def muscle_stiffness_command(l_m, l_target, g: StiffnessControlGains) -> np.ndarray:
    """One-sided spring: tension rises only when a muscle is longer than its target."""
    return g.T_bias + np.maximum(0.0, g.K_stiff * (np.asarray(l_m) - np.asarray(l_target)))


def l_soft(T, g: StiffnessControlGains) -> np.ndarray:
    """Length offset at which the stiffness law reproduces tension ``T``."""
    return -(np.asarray(T, dtype=float) - g.T_bias) / g.K_stiff


def position_targets(image: SelfBodyImage, theta_target, T_ref, g: StiffnessControlGains) -> np.ndarray:
    """Target muscle lengths holding ``theta_target`` at tensions ``T_ref``.

    Pass ``T_ref = g.T_bias`` for the first stage and the tensions measured
    after it settles for the second.
    """
    T_ref = np.asarray(T_ref, dtype=float)
    return predict_lengths(image, np.asarray(theta_target, dtype=float), T_ref) + l_soft(T_ref, g)


# ------------------------------------------------------------- safety

@dataclass
class SafetyParams:
    K_T: float = 1.0  # mm/N
    K_C: float = 1.0  # mm/degC
    T_lim: float = 200.0  # N
    C_lim: float = 60.0  # degC
    dl_lim: float = 0.01  # mm per tick
    C_burn: float = 90.0  # degC
    dl: np.ndarray = field(default_factory=lambda: np.zeros(N_MUSCLES))

    def __post_init__(self):
        self.dl = np.asarray(self.dl, dtype=float)
        for k in ("K_T", "K_C", "T_lim", "C_lim", "dl_lim", "C_burn"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if not np.all(np.isfinite(self.dl)):
            raise ValueError("accumulated length offset must be finite")


def safety_adjust(s: SafetyParams, T_m, C) -> np.ndarray:
    """Rate-limited lengthening of target lengths while tension or temperature is high.

    Updates ``s.dl`` in place and returns it; add it to the target lengths.
    """
    ideal = s.K_T * np.maximum(np.asarray(T_m) - s.T_lim, 0.0) + s.K_C * np.maximum(np.asarray(C) - s.C_lim, 0.0)
    s.dl = s.dl + np.clip(ideal - s.dl, -s.dl_lim, s.dl_lim)
    return s.dl.copy()


# -------------------------------------------------------------- torque

def joint_torque(G, T) -> np.ndarray:
    return -np.asarray(G).T @ np.asarray(T)


def distribute_torque(G, tau_des, T_bias, max_iter: int = 200, tol: float = 1.0):
    """Least tension above bias that produces ``tau_des``.

    Solves  min |T - T_bias|^2  s.t.  -G^T T = tau_des,  T >= T_bias  with an
    active-set loop: least-norm solve on the free muscles, pin the most
    negative one at its bias, and release pinned muscles whose multiplier
    says they want to pull.  Returns (T, achieved torque, converged flag).
    """
    G = np.asarray(G, dtype=float)
    tau_des = np.asarray(tau_des, dtype=float)
    T_bias = np.asarray(T_bias, dtype=float)
    A = -G.T
    b = tau_des - A @ T_bias
    m = A.shape[1]
    free = np.ones(m, dtype=bool)
    best_x, best_res = np.zeros(m), np.linalg.norm(b)
    for _ in range(max_iter):
        x = np.zeros(m)
        Af = A[:, free]
        lam = np.linalg.pinv(Af @ Af.T) @ b if free.any() else np.zeros(len(b))
        x[free] = Af.T @ lam
        neg = free & (x < -1e-12)
        if neg.any():
            worst = np.argmin(np.where(neg, x, np.inf))
            free[worst] = False
            continue
        res = np.linalg.norm(A @ x - b)
        if res < best_res - 1e-12 or (res <= best_res + 1e-12 and x @ x < best_x @ best_x):
            best_x, best_res = x, res
        # pinned muscles whose pull would help (positive multiplier) are released
        want = ~free & (A.T @ lam > 1e-9)
        if res <= tol and not want.any():
            break
        if not want.any():
            break
        free[np.argmax(np.where(want, A.T @ lam, -np.inf))] = True
    T = T_bias + np.maximum(best_x, 0.0)
    return T, A @ T, best_res <= tol


def torque_command(image: SelfBodyImage, theta, tau_des, g: StiffnessControlGains,
                   max_iter: int = 200, tol: float = 1.0) -> np.ndarray:
    """Target tensions realizing joint torque ``tau_des`` (N mm) with the learned Jacobian."""
    G = muscle_jacobian(image, theta)
    T, tau, _ = distribute_torque(G, tau_des, g.T_bias, max_iter, tol)
    err = np.linalg.norm(tau - np.asarray(tau_des))
    if err > 0.05 * np.linalg.norm(tau_des) + 10.0:
        raise InfeasibleTorque(f"torque residual {err:.1f} N mm", tau, T)
    return T


# ---------------------------------------------------- operational stiffness

@dataclass(frozen=True)
class OperationalStiffness:
    K_w: np.ndarray  # N/mm
    theta: np.ndarray | None = None


def joint_stiffness(G, K_m) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    return G.T @ np.asarray(K_m) @ G


def operational_stiffness(J, G, K_m, theta=None, method: str = "pinv") -> OperationalStiffness:
    """Task-space stiffness from muscle stiffness through the two Jacobians.

    ``pinv`` maps joint stiffness with the pseudoinverse of the 3x5 joint
    Jacobian on both sides.  ``compliance`` inverts the task-space compliance
    ``J K_joint^-1 J^T`` instead, which is what a locked redundant arm
    actually exhibits when pushed at the hand.
    """
    J = np.asarray(J, dtype=float)
    if np.linalg.matrix_rank(J, tol=1e-8 * max(1.0, np.abs(J).max())) < J.shape[0]:
        raise SingularPosture("joint Jacobian is rank deficient at this posture")
    K_th = joint_stiffness(G, K_m)
    if method == "pinv":
        Jp = np.linalg.pinv(J)
        K = Jp.T @ K_th @ Jp
    elif method == "compliance":
        K = np.linalg.inv(J @ np.linalg.solve(K_th, J.T))
    else:
        raise ValueError(f"unknown method '{method}'")
    K = 0.5 * (K + K.T)
    return OperationalStiffness(K, None if theta is None else np.asarray(theta, dtype=float).copy())


class StiffnessProblem:
    """Objective for one posture: stiffness match plus a torque-change penalty.

    Torques enter the penalty in N m so the weight keeps its usual scale.
    """

    def __init__(self, image: SelfBodyImage, theta, J, K_target, T_current, alpha: float,
                 method: str = "pinv"):
        K_target = np.asarray(K_target, dtype=float)
        if np.linalg.cond(K_target) > 1e12:
            raise InvalidTarget("target stiffness is singular")
        self.image = image
        self.theta = np.asarray(theta, dtype=float)
        self.J = np.asarray(J, dtype=float)
        self.G = muscle_jacobian(image, self.theta)
        self.K_target_inv = np.linalg.inv(K_target)
        self.tau_ref = joint_torque(self.G, T_current)
        self.alpha = alpha
        self.method = method

    def K_w(self, T) -> np.ndarray:
        K_m = muscle_stiffness(self.image, self.theta, np.asarray(T, dtype=float))
        return operational_stiffness(self.J, self.G, K_m, method=self.method).K_w

    def stiffness_error(self, T) -> float:
        M = self.K_target_inv @ self.K_w(T)
        return float(np.linalg.norm(M - np.eye(len(M)), "fro"))

    def __call__(self, T) -> float:
        dtau = (self.tau_ref - joint_torque(self.G, T)) * 1e-3
        return self.stiffness_error(T) + self.alpha * float(np.linalg.norm(dtau))


def stiffness_objective(theta, T, T_current, K_target, image: SelfBodyImage, alpha: float, J,
                        method: str = "pinv") -> float:
    return StiffnessProblem(image, theta, J, K_target, T_current, alpha, method)(T)


@dataclass
class StiffnessSearchParams:
    alpha: float = 0.02
    N_v1: int = 10
    N_v2: int = 2
    N_v3: int = 50
    rand_range: float = 20.0  # N

    def __post_init__(self):
        if not (self.N_v1 > self.N_v2 >= 1 and self.N_v3 >= 1):
            raise ValueError("search counts need N_v1 > N_v2 >= 1 and N_v3 >= 1")
        if not self.rand_range > 0:
            raise ValueError("rand_range must be positive")


@dataclass
class SearchResult:
    T: np.ndarray
    E_trace: list  # objective after each accepted step, starting with the initial value
    accepted: int


def search_tensions(problem: StiffnessProblem, T_current, p: StiffnessSearchParams, T_bias, T_lim,
                    rng) -> SearchResult:
    """Stochastic hill climb on the tensions for the objective in ``problem``."""
    rng = np.random.default_rng(rng)
    T_bias = np.broadcast_to(np.asarray(T_bias, dtype=float), np.shape(T_current))
    T = np.clip(np.asarray(T_current, dtype=float), T_bias, T_lim)
    E = problem(T)
    trace = [E]
    for _ in range(p.N_v3):
        T_rand = rng.uniform(-p.rand_range, p.rand_range, (p.N_v1, len(T)))
        scores = np.array([problem(np.clip(T + d, T_bias, T_lim)) for d in T_rand])
        best = np.argsort(scores, kind="stable")[:p.N_v2]
        cand = np.clip(T + T_rand[best].mean(axis=0), T_bias, T_lim)
        E_new = problem(cand)
        if E_new < E:
            T, E = cand, E_new
            trace.append(E)
    return SearchResult(T, trace, len(trace) - 1)


# ------------------------------------------------------------- ellipsoids

def compliance_axes(K_w, plane=(0, 1), force: float = 10.0):
    """Displacement ellipse for a force of fixed size swept in a coordinate plane.

    Returns (semi-axis lengths in mm, descending; axis directions as columns).
    """
    C = np.linalg.inv(np.asarray(K_w, dtype=float))
    idx = np.asarray(plane)
    U, s, _ = np.linalg.svd(C[np.ix_(idx, idx)])
    return force * s, U


def probe_forces(n: int = 8, force: float = 10.0, plane=(0, 1)) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n) / n
    F = np.zeros((n, 3))
    F[:, plane[0]] = force * np.cos(ang)
    F[:, plane[1]] = force * np.sin(ang)
    return F


def fitted_axes(forces, displacements, plane=(0, 1)):
    """Semi-axes of the in-plane compliance fitted to probe data (same force size)."""
    idx = np.asarray(plane)
    F = np.asarray(forces)[:, idx]
    D = np.asarray(displacements)[:, idx]
    C, *_ = np.linalg.lstsq(F, D, rcond=None)
    C = C.T
    force = float(np.mean(np.linalg.norm(F, axis=1)))
    U, s, _ = np.linalg.svd(0.5 * (C + C.T))
    return force * s, U
