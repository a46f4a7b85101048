"""Ground-truth simulated arm.

The plant is what the learner has to discover: attachment points jittered
away from the nominal model, elastic constants off from the nominal ones, a
series tendon spring the initial model does not know about, quasi-static
tendons on rigid-link joint dynamics, and a first-order motor thermal model.

Tendon of muscle ``i``::

    path length r_i(theta) = motor length p_i + elastic elongation L_e(T) + T / k_lin

so for a given posture and motor position the tension is the unique root of
``T = k_lin * max(r - L_e(T) - p, 0)``.  The motor encoder reports
``l_m = p - p_zero`` with ``p_zero`` the slack length at the zero posture, so
``l_m = r_rel(theta) - L_e(T) - T / k_lin``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .kinematics import (
    GeometricModel,
    _ee_and_jacobian,
    _frames,
    _length_jacobian,
    _path_lengths,
    _world_points,
    muscle_lengths_abs,
)
from .textconfig import ConfigError, check_keys, parse_file, parse_text

GRAVITY = 9.81
MAX_DT = 0.01


class SimulationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ElasticityParams:
    """Saturating elongation ``L_e = (l_abs / L0) * a * (1 - exp(-b T))``."""

    a: float = 6.0  # mm per reference length
    b: float = 0.01  # 1/N
    L0: float = 500.0  # mm

    def __post_init__(self):
        if self.a < 0 or self.b <= 0 or self.L0 <= 0:
            raise ValueError("elasticity needs a >= 0, b > 0, L0 > 0")


def elongation(params: ElasticityParams, l_abs, T):
    """Elastic elongation in mm; monotone in ``T`` and saturating at ``l_abs/L0 * a``."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise ValueError("tension must be non-negative")
    return (np.asarray(l_abs) / params.L0) * params.a * (1.0 - np.exp(-params.b * T))


def elongation_slope(params: ElasticityParams, l_abs, T):
    """dL_e/dT in mm/N."""
    return (np.asarray(l_abs) / params.L0) * params.a * params.b * np.exp(-params.b * np.asarray(T))


@dataclass
class PlantConfig:
    seed: int = 7
    jitter: float = 8.0  # mm, uniform per coordinate
    nominal: ElasticityParams = field(default_factory=ElasticityParams)
    elasticity_error: float = 0.2  # true a is +err, true b is -err relative to nominal
    k_lin: float = 300.0  # N/mm, series tendon stiffness
    inertia: np.ndarray = field(default_factory=lambda: np.array([30.0, 30.0, 15.0, 12.0, 4.0]))  # N mm s^2
    damping: np.ndarray = field(default_factory=lambda: np.array([900.0, 900.0, 450.0, 360.0, 120.0]))  # N mm s
    v_max: float = 40.0  # mm/s
    motor_travel: float = 150.0  # mm either side of the zero-posture motor position
    servo_gain: float = 1.0  # mm/s per N of tension error
    k_heat: float = 2.25e-5  # degC / (s N^2)
    k_cool: float = 0.02  # 1/s
    C_amb: float = 25.0
    hysteresis: float = 0.0  # mm, backlash band width on path length
    payload_mass: float = 0.0  # kg
    noise_theta: float = 0.0  # rad
    noise_length: float = 0.0  # mm
    noise_tension: float = 0.0  # N
    noise_temp: float = 0.0  # degC
    dt: float = 1e-3

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.damping = np.asarray(self.damping, dtype=float)
        if self.k_lin <= 0:
            raise ValueError("k_lin must be positive")
        if not 0 <= self.elasticity_error < 1:
            raise ValueError("elasticity_error must lie in [0, 1)")
        if np.any(self.inertia <= 0) or np.any(self.damping < 0):
            raise ValueError("inertia must be positive and damping non-negative")
        if self.v_max <= 0 or self.servo_gain <= 0 or self.motor_travel <= 0:
            raise ValueError("servo limits must be positive")
        if self.k_heat < 0 or self.k_cool <= 0:
            raise ValueError("thermal constants: k_heat >= 0, k_cool > 0")
        if self.hysteresis < 0 or self.payload_mass < 0 or self.jitter < 0:
            raise ValueError("hysteresis, payload_mass and jitter must be non-negative")
        if not 0 < self.dt <= MAX_DT:
            raise ValueError("dt must lie in (0, 0.01]")
        for v in (self.noise_theta, self.noise_length, self.noise_tension, self.noise_temp):
            if v < 0:
                raise ValueError("noise levels must be non-negative")

    @property
    def true_elasticity(self) -> ElasticityParams:
        e = self.elasticity_error
        n = self.nominal
        return ElasticityParams(n.a * (1 + e), n.b * (1 - e), n.L0)


_PLANT_KEYS = {
    "seed", "jitter", "a", "b", "L0", "elasticity_error", "k_lin", "inertia", "damping",
    "v_max", "motor_travel", "servo_gain", "k_heat", "k_cool", "C_amb", "hysteresis", "payload_mass",
    "noise_theta", "noise_length", "noise_tension", "noise_temp", "dt",
}


def _plant_config_from_doc(doc) -> PlantConfig:
    sec = doc.require("plant")
    check_keys(sec, _PLANT_KEYS)
    d = PlantConfig()
    try:
        nominal = ElasticityParams(sec.float("a", d.nominal.a), sec.float("b", d.nominal.b),
                                   sec.float("L0", d.nominal.L0))
        return PlantConfig(
            seed=sec.int("seed", d.seed),
            jitter=sec.float("jitter", d.jitter),
            nominal=nominal,
            elasticity_error=sec.float("elasticity_error", d.elasticity_error),
            k_lin=sec.float("k_lin", d.k_lin),
            inertia=sec.vector("inertia", 5, d.inertia),
            damping=sec.vector("damping", 5, d.damping),
            v_max=sec.float("v_max", d.v_max),
            motor_travel=sec.float("motor_travel", d.motor_travel),
            servo_gain=sec.float("servo_gain", d.servo_gain),
            k_heat=sec.float("k_heat", d.k_heat),
            k_cool=sec.float("k_cool", d.k_cool),
            C_amb=sec.float("C_amb", d.C_amb),
            hysteresis=sec.float("hysteresis", d.hysteresis),
            payload_mass=sec.float("payload_mass", d.payload_mass),
            noise_theta=sec.float("noise_theta", d.noise_theta),
            noise_length=sec.float("noise_length", d.noise_length),
            noise_tension=sec.float("noise_tension", d.noise_tension),
            noise_temp=sec.float("noise_temp", d.noise_temp),
            dt=sec.float("dt", d.dt),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), doc.path, sec.line) from None


def load_plant_config(path) -> PlantConfig:
    return _plant_config_from_doc(parse_file(path))


def parse_plant_config(text: str) -> PlantConfig:
    return _plant_config_from_doc(parse_text(text))


@dataclass(frozen=True)
class SensorFrame:
    theta: np.ndarray  # potentiometer joint angles, rad
    l_m: np.ndarray  # motor encoder lengths, mm
    T_m: np.ndarray  # load cell tensions, N
    C: np.ndarray  # motor temperatures, degC
    t: float


@dataclass
class PlantState:
    true_model: GeometricModel
    theta: np.ndarray
    theta_dot: np.ndarray
    motor_pos: np.ndarray  # absolute motor-side length, mm
    motor_zero: np.ndarray  # motor_pos reading as l_m = 0
    T: np.ndarray
    C: np.ndarray
    elasticity: ElasticityParams
    ruptured: np.ndarray
    payload_mass: float
    hysteresis_band: float
    config: PlantConfig
    r_eff: np.ndarray  # path length seen through the backlash band
    t: float = 0.0
    rng: np.random.Generator = field(default=None, repr=False)

    def copy(self) -> "PlantState":
        return copy.deepcopy(self)


def perturb_model(nominal: GeometricModel, jitter: float, seed: int) -> GeometricModel:
    rng = np.random.default_rng(seed)
    pos = nominal.pt_pos + rng.uniform(-jitter, jitter, size=nominal.pt_pos.shape)
    return nominal.with_points(pos)


def make_plant(config: PlantConfig, nominal: GeometricModel, noise_seed: int = 0,
               theta0=None, T0: float = 10.0) -> PlantState:
    """Build the ground-truth plant at ``theta0`` with every tendon holding ``T0``."""
    true_model = perturb_model(nominal, config.jitter, config.seed)
    el = config.true_elasticity
    theta = np.zeros(true_model.chain.n_joints) if theta0 is None else np.array(theta0, dtype=float)
    r0 = muscle_lengths_abs(true_model, np.zeros_like(theta))
    r = muscle_lengths_abs(true_model, theta)
    T = np.full(true_model.n_muscles, float(T0))
    p = r - elongation(el, r, T) - T / config.k_lin
    return PlantState(
        true_model=true_model,
        theta=theta,
        theta_dot=np.zeros_like(theta),
        motor_pos=p,
        motor_zero=r0.copy(),
        T=T,
        C=np.full(true_model.n_muscles, config.C_amb),
        elasticity=el,
        ruptured=np.zeros(true_model.n_muscles, dtype=bool),
        payload_mass=config.payload_mass,
        hysteresis_band=config.hysteresis,
        config=config,
        r_eff=r.copy(),
        rng=np.random.default_rng(noise_seed),
    )


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _solve_tensions(r, p, a, b, L0, k_lin, ruptured, tol):
    # h(T) = T - k max(r - L_e(T) - p, 0) is increasing with h(0) <= 0 and
    # h(k max(r - p, 0)) >= 0.  Newton steps stay inside the shrinking
    # bracket; a step that would leave it is replaced by bisection.
    m = r.shape[0]
    T = np.zeros(m)
    for i in range(m):
        if ruptured[i]:
            continue
        hi = k_lin * max(r[i] - p[i], 0.0)
        if hi <= 0.0:
            continue
        lo = 0.0
        sat = r[i] / L0 * a
        x = 0.5 * hi
        for _ in range(200):
            e = np.exp(-b * x)
            s = r[i] - sat * (1.0 - e) - p[i]
            if s > 0.0:
                h = x - k_lin * s
                dh = 1.0 + k_lin * sat * b * e
            else:
                h = x
                dh = 1.0
            if h > 0.0:
                hi = x
            else:
                lo = x
            if hi - lo <= tol or h == 0.0:
                break
            xn = x - h / dh
            if xn <= lo or xn >= hi:
                xn = 0.5 * (lo + hi)
            if abs(xn - x) <= 0.25 * tol:
                x = xn
                break
            x = xn
        T[i] = x
    return T


@njit(cache=True)
def _integrate(n_sub, dt, axes, offsets, lower, upper, ee_offset, pt_link, pt_pos, starts,
               theta, theta_dot, p, p_lo, p_hi, r_eff, C, ruptured, T, T_target, F_ext, lock,
               a, b, L0, k_lin, inertia, damping, v_max, servo_gain,
               k_heat, k_cool, C_amb, band, payload_mass, tol):
    n = theta.shape[0]
    m = p.shape[0]
    half = 0.5 * band
    force = F_ext.copy()
    force[2] -= payload_mass * GRAVITY
    for _ in range(n_sub):
        R, o = _frames(axes, offsets, theta)
        P = _world_points(R, o, pt_link, pt_pos)
        r = _path_lengths(P, starts)
        for i in range(m):
            if r_eff[i] < r[i] - half:
                r_eff[i] = r[i] - half
            elif r_eff[i] > r[i] + half:
                r_eff[i] = r[i] + half
        # (1) rate-limited tension servo on the last measured tension;
        # winding in (p down) raises tension
        if not lock:
            for i in range(m):
                v = servo_gain * (T_target[i] - T[i])
                if v > v_max:
                    v = v_max
                elif v < -v_max:
                    v = -v_max
                p[i] = min(max(p[i] - v * dt, p_lo[i]), p_hi[i])
        # (2) tensions at the new motor positions
        T = _solve_tensions(r_eff, p, a, b, L0, k_lin, ruptured, tol)
        # (3) joint dynamics, semi-implicit Euler
        G = _length_jacobian(axes, R, o, P, pt_link, starts)
        _, J = _ee_and_jacobian(axes, R, o, ee_offset)
        for j in range(n):
            tau = J[0, j] * force[0] + J[1, j] * force[1] + J[2, j] * force[2] - damping[j] * theta_dot[j]
            for i in range(m):
                tau -= G[i, j] * T[i]
            theta_dot[j] += dt * tau / inertia[j]
            theta[j] += dt * theta_dot[j]
            # (4) joint stops
            if theta[j] < lower[j]:
                theta[j] = lower[j]
                theta_dot[j] = 0.0
            elif theta[j] > upper[j]:
                theta[j] = upper[j]
                theta_dot[j] = 0.0
        # (5) motor heating
        for i in range(m):
            C[i] += dt * (k_heat * T[i] * T[i] - k_cool * (C[i] - C_amb))
    return T


# ------------------------------------------------------------- operations


def solve_tension(state: PlantState, i: int, tol: float = 1e-6) -> float:
    """Tension of muscle ``i`` at the current posture and motor position."""
    if state.ruptured[i]:
        raise ValueError(f"muscle #{i + 1} is ruptured")
    el, cfg = state.elasticity, state.config
    r = state.r_eff[i:i + 1].copy()
    return float(_solve_tensions(r, state.motor_pos[i:i + 1], el.a, el.b, el.L0, cfg.k_lin,
                                 np.zeros(1, dtype=np.bool_), tol)[0])


def true_lengths_rel(state: PlantState, theta) -> np.ndarray:
    return muscle_lengths_abs(state.true_model, theta) - state.motor_zero


def sense(state: PlantState) -> SensorFrame:
    cfg = state.config
    l_m = state.motor_pos - state.motor_zero
    theta, T, C = state.theta.copy(), state.T.copy(), state.C.copy()
    if cfg.noise_theta or cfg.noise_length or cfg.noise_tension or cfg.noise_temp:
        rng = state.rng
        theta = theta + rng.normal(0.0, cfg.noise_theta, theta.shape)
        l_m = l_m + rng.normal(0.0, cfg.noise_length, l_m.shape)
        T = T + rng.normal(0.0, cfg.noise_tension, T.shape)
        C = C + rng.normal(0.0, cfg.noise_temp, C.shape)
    return SensorFrame(theta, l_m, T, C, state.t)


def step(state: PlantState, T_target, F_ext=None, dt: float | None = None, *,
         n_sub: int = 1, motor_lock: bool = False) -> SensorFrame:
    """Advance ``n_sub`` physics substeps of ``dt`` and return the sensor frame.

    With ``motor_lock`` the motors hold their positions instead of servoing
    on ``T_target``; the stiffness probes use this.
    """
    cfg = state.config
    dt = cfg.dt if dt is None else dt
    if not 0 < dt <= MAX_DT:
        raise ValueError("dt must lie in (0, 0.01]")
    T_target = np.asarray(T_target, dtype=float)
    lo, total = T_target.min(), T_target.sum()
    if not (lo >= 0 and np.isfinite(total)):
        raise ValueError("T_target must be finite and non-negative")
    F = np.zeros(3) if F_ext is None else np.asarray(F_ext, dtype=float)
    model, el = state.true_model, state.elasticity
    ch = model.chain
    T = _integrate(
        int(n_sub), float(dt), ch.axes, ch.offsets, ch.lower, ch.upper, ch.ee_offset,
        model.pt_link, model.pt_pos, model.starts,
        state.theta, state.theta_dot, state.motor_pos,
        state.motor_zero - cfg.motor_travel, state.motor_zero + cfg.motor_travel, state.r_eff, state.C, state.ruptured,
        state.T.copy(), T_target, F, bool(motor_lock), el.a, el.b, el.L0, cfg.k_lin, cfg.inertia, cfg.damping,
        cfg.v_max, cfg.servo_gain, cfg.k_heat, cfg.k_cool, cfg.C_amb, state.hysteresis_band,
        state.payload_mass, 1e-6,
    )
    state.T = T
    state.t += n_sub * dt
    # any inf or nan survives the sum
    if not np.isfinite(state.theta.sum() + state.theta_dot.sum() + T.sum() + state.C.sum()):
        raise SimulationDiverged(f"non-finite plant state at t={state.t:.3f}s (dt too large?)")
    return sense(state)


def rupture(state: PlantState, i: int) -> None:
    """Break muscle ``i`` (0-based); it carries no tension from now on."""
    if not 0 <= i < len(state.ruptured):
        raise IndexError(f"no muscle with index {i}")
    state.ruptured[i] = True
    state.T[i] = 0.0


def end_effector_position(state: PlantState) -> np.ndarray:
    ch = state.true_model.chain
    R, o = _frames(ch.axes, ch.offsets, state.theta)
    return _ee_and_jacobian(ch.axes, R, o, ch.ee_offset)[0]


def with_payload(state: PlantState, mass: float) -> PlantState:
    s = state.copy()
    s.payload_mass = float(mass)
    return s


def default_plant_config_path():
    from importlib.resources import files
    return files("tendonarm") / "data" / "plant.cfg"


def default_plant_config() -> PlantConfig:
    return load_plant_config(default_plant_config_path())

