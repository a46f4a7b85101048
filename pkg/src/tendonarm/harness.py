"""Scenario runner and command line.

One simulated clock drives everything: a control tick every 8 ms (eight 1 ms
physics substeps), a learner tick every 500 ms, and inside each control tick
the fixed order physics -> sensors -> safety -> control -> learner.  Every
random draw comes from the run seed, so a scenario rerun with the same seed
writes byte-identical metrics.

Shipped scenario configs live in ``tendonarm/data/scenarios``.  Paths inside a
config resolve against the config's own directory first and then against the
package data directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import body_image as bi
from . import control as ct
from . import learner as ln
from . import plant as pl
from .kinematics import GeometricModel, end_effector, joint_jacobian, load_model
from .textconfig import ConfigError, Document, Section, check_keys, parse_file, parse_text

SCHEMA = "tendonarm.summary/1"
CONTROL_MS = 8
LEARN_MS = 500

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

_CATALOG = (
    ("compare_learning", "full learner vs degraded one-sample baseline on identical arms; "
                         "joint-estimate RMSE before and after a push at the hand"),
    ("longrun", "random-target cycles with online learning and a scheduled muscle rupture"),
    ("dumbbell", "repeated lifts of a hand payload to a target posture while learning"),
    ("variable_stiffness", "warm-up, then search tensions for twice the current hand stiffness "
                           "and probe the result"),
    ("stiffness_eval", "low and high stiffness states, each probed from 8 directions with 10 N"),
    ("impact", "half-sine force pulse at the hand in a low and a high stiffness state"),
)

COLUMNS = {
    "longrun": ["t", "cycle", "rmse_target", "rmse_est", "max_T", "max_C", "n_ruptured"],
    "compare_learning": ["t", "arm", "sample", "phase", "rmse_target", "rmse_est", "max_T", "max_C"],
    "dumbbell": ["t", "rep", "rmse_target", "rmse_est", "max_T", "max_C", "height", "target_height"],
    "variable_stiffness": ["t", "probe", "F_x", "F_y", "d_x", "d_y", "rmse_target", "rmse_est",
                           "max_T", "max_C"],
    "stiffness_eval": ["t", "state", "probe", "F_x", "F_y", "d_x", "d_y", "rmse_target", "rmse_est",
                       "max_T", "max_C"],
    "impact": ["t", "state", "force", "joint_disp", "rmse_target", "rmse_est", "max_T", "max_C"],
}


class ScenarioError(RuntimeError):
    """A run stopped early: divergence, learner halt or wall-clock budget."""


def scenario_catalog() -> list[tuple[str, str]]:
    return list(_CATALOG)


def scenario_names() -> list[str]:
    return [n for n, _ in _CATALOG]


def data_dir() -> Path:
    return Path(__file__).resolve().parent / "data"


def default_config_path(name: str) -> Path:
    return data_dir() / "scenarios" / f"{name}.cfg"


# ------------------------------------------------------------------ config

@dataclass
class CycleSettings:
    stage_times: tuple = (5.0, 2.0, 3.0)  # s
    ramp: float = 0.8  # s


@dataclass
class CompareSettings:
    disturb_at: float = 500.0  # s
    disturb_time: float = 10.0  # s
    disturb_force: np.ndarray = field(default_factory=lambda: np.array([20.0, 0.0, -20.0]))  # N
    post_changes: int = 2
    est_period: float = 2.5  # s
    slope_samples: int = 200


@dataclass
class DumbbellSettings:
    payload_mass: float = 1.0  # kg
    rest: np.ndarray = field(default_factory=lambda: np.zeros(5))
    lift: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.6, 0.0, -1.4, 0.0]))
    lower_time: float = 3.0  # s


@dataclass
class StiffnessSettings:
    posture: np.ndarray = field(default_factory=lambda: np.radians([45.0, 0.0, 0.0, -90.0, 0.0]))
    scale: float = 2.0
    low_scale: float = 0.5
    high_scale: float = 2.0
    method: str = "compliance"
    search: ct.StiffnessSearchParams = field(default_factory=ct.StiffnessSearchParams)
    probe_force: float = 10.0  # N
    n_probes: int = 8
    probe_settle: float = 2.4  # s
    apply_time: float = 3.0  # s


@dataclass
class ImpactSettings:
    peak: float = 50.0  # N
    width: float = 0.05  # s
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    before: float = 0.1  # s recorded before the pulse
    after: float = 1.0  # s recorded after the pulse starts


@dataclass
class ScenarioConfig:
    name: str
    plant_path: Path
    model_path: Path
    image_path: Path | None = None
    seed: int = 0
    duration: float = 100.0  # simulated s; see README for per-scenario meaning
    wall_budget: float = 300.0  # s
    gains: ct.StiffnessControlGains = field(default_factory=ct.StiffnessControlGains)
    safety: ct.SafetyParams = field(default_factory=ct.SafetyParams)
    safety_enabled: bool = True
    learner: ln.LearnerConfig = field(default_factory=ln.LearnerConfig)
    learning: bool = True
    cycle: CycleSettings = field(default_factory=CycleSettings)
    rupture: list = field(default_factory=list)  # (1-based cycle, 0-based muscle)
    compare: CompareSettings = field(default_factory=CompareSettings)
    dumbbell: DumbbellSettings = field(default_factory=DumbbellSettings)
    stiffness: StiffnessSettings = field(default_factory=StiffnessSettings)
    impact: ImpactSettings = field(default_factory=ImpactSettings)
    checks: dict = field(default_factory=dict)
    path: str | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.wall_budget > 0:
            raise ValueError("wall_budget must be positive")


DEFAULT_CHECKS = {
    "initial_rmse_min": 0.1,  # rad
    "decay_ratio_max": 0.4,
    "decay_cycles": 300,
    "spike_ratio_min": 1.5,
    "recovery_ratio_max": 1.5,
    "pre_rupture_cycles": 20,
    "spike_cycles": 5,
    "recovery_after": 40,
    "recovery_cycles": 10,
    "post_ratio_max": 1.5,
    "error_reduction_min": 0.5,
    "axis_rel_error_max": 0.3,
}

_SECTION_KEYS = {
    "scenario": {"name", "plant", "model", "image", "seed", "duration", "wall_budget"},
    "control": {"T_bias", "K_stiff", "stage_times", "ramp"},
    "safety": {"enabled", "K_T", "K_C", "T_lim", "C_lim", "dl_lim", "C_burn"},
    "learner": {"enabled", "optimizer", "lr", "capacity", "N_b", "N_c", "N_d", "dtheta_div",
                "sample_rate", "trigger_dtheta", "trigger_dl", "slack_tension"},
    "rupture": {"event"},
    "compare": {"disturb_at", "disturb_time", "disturb_force", "post_changes", "est_period",
                "slope_samples"},
    "dumbbell": {"payload_mass", "rest", "lift", "lower_time"},
    "stiffness": {"posture_deg", "scale", "low_scale", "high_scale", "method", "alpha", "N_v1", "N_v2",
                  "N_v3", "rand_range", "probe_force", "n_probes", "probe_settle", "apply_time"},
    "impact": {"peak", "width", "direction", "before", "after"},
    "checks": set(DEFAULT_CHECKS),
}


def _resolve(entry, base: Path, path) -> Path:
    p = Path(entry.value)
    for cand in (base / p, data_dir() / p):
        if cand.is_file():
            return cand.resolve()
    raise ConfigError(f"referenced file '{entry.value}' not found", path, entry.line)


def _wrap(sec: Section, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), sec.path, sec.line) from None


def _config_from_doc(doc: Document, base: Path) -> ScenarioConfig:
    for s in doc.sections:
        if s.name not in _SECTION_KEYS:
            raise ConfigError(f"unknown section [{s.name}]", doc.path, s.line)
        check_keys(s, _SECTION_KEYS[s.name])
    sc = doc.require("scenario")
    name = sc.require("name").value
    if name not in scenario_names():
        e = sc.require("name")
        raise ConfigError(f"unknown scenario '{name}' (one of: {', '.join(scenario_names())})",
                          doc.path, e.line)
    plant_path = _resolve(sc.require("plant"), base, doc.path)
    model_path = _resolve(sc.require("model"), base, doc.path)
    image_path = _resolve(sc.get("image"), base, doc.path) if sc.get("image") else None
    empty = Section("", 0, path=doc.path)
    sec = lambda n: doc.section(n) or empty

    c = sec("control")
    dg = ct.StiffnessControlGains()
    T_bias = c.vector("T_bias", None, [float(dg.T_bias[0])])
    gains = _wrap(c, lambda: ct.StiffnessControlGains(
        np.broadcast_to(T_bias, (ct.N_MUSCLES,)).copy() if len(T_bias) in (1, ct.N_MUSCLES)
        else _bad(c, "T_bias", "expects 1 or 10 values"), c.float("K_stiff", dg.K_stiff)))
    stages = c.vector("stage_times", 3, CycleSettings().stage_times)
    cycle = CycleSettings(tuple(float(v) for v in stages), c.float("ramp", CycleSettings.ramp))
    if min(cycle.stage_times) <= 0 or cycle.ramp <= 0:
        raise ConfigError("stage_times and ramp must be positive", doc.path, c.line)

    s = sec("safety")
    d = ct.SafetyParams()
    safety = _wrap(s, lambda: ct.SafetyParams(
        s.float("K_T", d.K_T), s.float("K_C", d.K_C), s.float("T_lim", d.T_lim), s.float("C_lim", d.C_lim),
        s.float("dl_lim", d.dl_lim), s.float("C_burn", d.C_burn)))

    le = sec("learner")
    da = ln.AugmentationParams()
    aug = _wrap(le, lambda: ln.AugmentationParams(
        le.int("N_b", da.N_b), le.int("N_c", da.N_c), le.int("N_d", da.N_d),
        le.float("dtheta_div", da.dtheta_div), le.float("sample_rate", da.sample_rate),
        le.float("trigger_dtheta", da.trigger_dtheta), le.float("trigger_dl", da.trigger_dl),
        le.float("slack_tension", da.slack_tension)))
    lcfg = ln.LearnerConfig(aug, le.int("capacity", 10000), le.str("optimizer", "adam"), le.float("lr", 1e-3))
    if lcfg.optimizer not in ("adam", "sgd"):
        e = le.get("optimizer")
        raise ConfigError(f"optimizer must be 'adam' or 'sgd', got '{lcfg.optimizer}'", doc.path, e.line)
    if not (lcfg.lr > 0 and lcfg.capacity > 0):
        raise ConfigError("lr and capacity must be positive", doc.path, le.line)

    rupture = []
    for e in sec("rupture").all("event"):
        parts = e.value.split()
        try:
            cyc, mus = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise ConfigError(f"rupture event expects '<cycle> <muscle number>', got '{e.value}'",
                              doc.path, e.line) from None
        if cyc < 1 or not 1 <= mus <= ct.N_MUSCLES:
            raise ConfigError("rupture cycle must be >= 1 and muscle in 1..10", doc.path, e.line)
        rupture.append((cyc, mus - 1))

    cm = sec("compare")
    dc = CompareSettings()
    compare = CompareSettings(cm.float("disturb_at", dc.disturb_at), cm.float("disturb_time", dc.disturb_time),
                              cm.vector("disturb_force", 3, dc.disturb_force),
                              cm.int("post_changes", dc.post_changes), cm.float("est_period", dc.est_period),
                              cm.int("slope_samples", dc.slope_samples))
    if compare.disturb_time < 0 or compare.est_period <= 0 or compare.post_changes < 0 or compare.slope_samples < 2:
        raise ConfigError("invalid [compare] values", doc.path, cm.line)

    db = sec("dumbbell")
    dd = DumbbellSettings()
    dumbbell = DumbbellSettings(db.float("payload_mass", dd.payload_mass), db.vector("rest", 5, dd.rest),
                                db.vector("lift", 5, dd.lift), db.float("lower_time", dd.lower_time))
    if dumbbell.payload_mass < 0 or dumbbell.lower_time <= 0:
        raise ConfigError("payload_mass must be >= 0 and lower_time > 0", doc.path, db.line)

    st = sec("stiffness")
    ds = StiffnessSettings()
    dsp = ds.search
    search = _wrap(st, lambda: ct.StiffnessSearchParams(
        st.float("alpha", dsp.alpha), st.int("N_v1", dsp.N_v1), st.int("N_v2", dsp.N_v2),
        st.int("N_v3", dsp.N_v3), st.float("rand_range", dsp.rand_range)))
    stiff = StiffnessSettings(
        np.radians(st.vector("posture_deg", 5, np.degrees(ds.posture))), st.float("scale", ds.scale),
        st.float("low_scale", ds.low_scale), st.float("high_scale", ds.high_scale),
        st.str("method", ds.method), search, st.float("probe_force", ds.probe_force),
        st.int("n_probes", ds.n_probes), st.float("probe_settle", ds.probe_settle),
        st.float("apply_time", ds.apply_time))
    if stiff.method not in ("pinv", "compliance"):
        raise ConfigError(f"method must be 'pinv' or 'compliance', got '{stiff.method}'", doc.path, st.line)
    if min(stiff.scale, stiff.low_scale, stiff.high_scale, stiff.probe_force, stiff.probe_settle,
           stiff.apply_time) <= 0 or stiff.n_probes < 3:
        raise ConfigError("stiffness scales, force and times must be positive; n_probes >= 3",
                          doc.path, st.line)

    im = sec("impact")
    di = ImpactSettings()
    impact = ImpactSettings(im.float("peak", di.peak), im.float("width", di.width),
                            im.vector("direction", 3, di.direction), im.float("before", di.before),
                            im.float("after", di.after))
    if impact.width <= 0 or impact.after <= impact.width or impact.before < 0 or not np.any(impact.direction):
        raise ConfigError("invalid [impact] values", doc.path, im.line)
    impact.direction = impact.direction / np.linalg.norm(impact.direction)

    ch = sec("checks")
    checks = {k: ch.float(k, v) for k, v in DEFAULT_CHECKS.items()}

    for key in ("duration", "wall_budget"):
        if sc.get(key) and not sc.float(key) > 0:
            _bad(sc, key, "must be positive")
    if sc.get("seed") and sc.int("seed") < 0:
        _bad(sc, "seed", "must be non-negative")

    return _wrap(sc, lambda: ScenarioConfig(
        name=name, plant_path=plant_path, model_path=model_path, image_path=image_path,
        seed=sc.int("seed", 0), duration=sc.float("duration", 100.0),
        wall_budget=sc.float("wall_budget", 300.0), gains=gains, safety=safety,
        safety_enabled=s.bool("enabled", True), learner=lcfg, learning=le.bool("enabled", True),
        cycle=cycle, rupture=rupture, compare=compare, dumbbell=dumbbell, stiffness=stiff,
        impact=impact, checks=checks, path=doc.path))


def _bad(sec: Section, key: str, msg: str):
    e = sec.get(key)
    raise ConfigError(f"'{key}' {msg}", sec.path, e.line if e else sec.line)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    return _config_from_doc(parse_file(path), path.resolve().parent)


def parse_config(text: str, base=".") -> ScenarioConfig:
    return _config_from_doc(parse_text(text), Path(base))


def load_default_config(name: str) -> ScenarioConfig:
    return load_config(default_config_path(name))


# -------------------------------------------------------------- simulation

def rmse(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(np.mean(d * d)))


class Arm:
    """One simulated arm with its controller, safety layer, image and learner."""

    def __init__(self, cfg: ScenarioConfig, plant_cfg: pl.PlantConfig, model: GeometricModel,
                 image: bi.SelfBodyImage, seed, baseline: bool = False, budget=None):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_noise, s_learn = ss.spawn(2)
        self.cfg = cfg
        self.model = model
        self.lower, self.upper = model.chain.lower, model.chain.upper
        self.plant = pl.make_plant(plant_cfg, model, noise_seed=s_noise)
        self.image = image.copy()
        self.gains = copy.deepcopy(cfg.gains)
        self.safety = copy.deepcopy(cfg.safety) if cfg.safety_enabled else None
        self.learner = None
        if cfg.learning:
            self.learner = ln.OnlineLearner(self.image, self.lower, self.upper,
                                            replace(cfg.learner, baseline=baseline), s_learn)
        n_sub = CONTROL_MS * 1e-3 / plant_cfg.dt
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise ValueError("plant dt must divide the 8 ms control tick")
        self.n_sub = int(round(n_sub))
        self.frame = pl.sense(self.plant)
        self.T_cmd = self.gains.T_bias.copy()
        self.l_cmd = self.frame.l_m.copy()
        self.theta_est = self.frame.theta.copy()
        self.ms = 0
        self.next_learn = LEARN_MS
        self.force = None  # callable(t) -> N, or None
        self.lock = False
        self.budget = budget
        self.reset_peaks()

    @property
    def t(self) -> float:
        return self.ms * 1e-3

    def reset_peaks(self):
        self.peak_T = float(np.max(self.frame.T_m))
        self.peak_C = float(np.max(self.frame.C))

    def estimate(self) -> np.ndarray:
        use = self.frame.T_m >= self.cfg.learner.aug.slack_tension
        est = bi.estimate_joints(self.image, self.frame.l_m, self.frame.T_m, self.theta_est,
                                 self.lower, self.upper, use=use)
        self.theta_est = est.theta
        return est.theta

    def tick(self, l_target, on_tick=None):
        F = None if self.force is None else self.force(self.t)
        try:
            frame = pl.step(self.plant, self.T_cmd, F_ext=F, n_sub=self.n_sub, motor_lock=self.lock)
        except pl.SimulationDiverged as exc:
            raise ScenarioError(str(exc)) from None
        self.frame = frame
        dl = ct.safety_adjust(self.safety, frame.T_m, frame.C) if self.safety is not None else 0.0
        self.T_cmd = ct.muscle_stiffness_command(frame.l_m, l_target + dl, self.gains)
        self.ms += CONTROL_MS
        self.peak_T = max(self.peak_T, float(np.max(frame.T_m)))
        self.peak_C = max(self.peak_C, float(np.max(frame.C)))
        if self.learner is not None and self.ms >= self.next_learn:
            self.next_learn += LEARN_MS
            try:
                if self.learner.cfg.baseline:
                    self.learner.observe(frame, self.estimate())
                else:
                    self.learner.observe(frame)
            except ln.LearnerHalted as exc:
                raise ScenarioError(f"learner halted: {exc}") from None
        if on_tick is not None:
            on_tick(self)

    def move(self, l_new, duration: float, on_tick=None):
        """Ramp the target lengths to ``l_new`` and hold them for ``duration`` s."""
        n = int(round(duration * 1000 / CONTROL_MS))
        nr = max(1, int(round(self.cfg.cycle.ramp * 1000 / CONTROL_MS)))
        start = self.l_cmd.copy()
        l_new = np.asarray(l_new, dtype=float)
        for k in range(n):
            a = min(1.0, (k + 1) / nr)
            self.tick(start + a * (l_new - start), on_tick)
        self.l_cmd = l_new.copy()
        if self.budget is not None:
            self.budget.check()

    def hold(self, duration: float, on_tick=None):
        self.move(self.l_cmd, duration, on_tick)

    def stage1(self, theta_t, duration, on_tick=None):
        self.move(ct.position_targets(self.image, theta_t, self.gains.T_bias, self.gains), duration, on_tick)

    def stage2(self, theta_t, duration, on_tick=None):
        self.move(ct.position_targets(self.image, theta_t, self.frame.T_m, self.gains), duration, on_tick)

    def cycle(self, theta_t, T_const, on_tick=None) -> tuple[float, float]:
        """The 3-step random-target cycle; returns the joint RMSE after stages 1 and 2."""
        t1, t2, t3 = self.cfg.cycle.stage_times
        self.stage1(theta_t, t1, on_tick)
        e1 = rmse(self.frame.theta, theta_t)
        self.stage2(theta_t, t2, on_tick)
        e2 = rmse(self.frame.theta, theta_t)
        self.end_stage2 = (self.frame, e2)
        self.move(ct.position_targets(self.image, theta_t, T_const, self.gains), t3, on_tick)
        return e1, e2

    def random_target(self, rng) -> tuple[np.ndarray, np.ndarray]:
        theta_t = rng.uniform(self.lower, self.upper)
        T_const = rng.uniform(self.gains.T_bias, self.cfg.safety.T_lim)
        return theta_t, T_const


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds
        self.start = time.monotonic()

    def check(self):
        if time.monotonic() - self.start > self.seconds:
            raise ScenarioError(f"wall-clock budget of {self.seconds:.0f} s exceeded")


@dataclass
class ScenarioResult:
    name: str
    columns: list
    rows: list
    summary: dict

    @property
    def passed(self) -> bool | None:
        return self.summary["passed"]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".10g")


def _check(name, value, op, threshold):
    if value is None:
        return {"name": name, "value": None, "threshold": threshold, "op": op, "passed": None}
    ok = {"<": value < threshold, "<=": value <= threshold, ">": value > threshold,
          ">=": value >= threshold}[op]
    return {"name": name, "value": float(value), "threshold": float(threshold), "op": op, "passed": bool(ok)}


def _summary(cfg: ScenarioConfig, metrics: dict, checks: list) -> dict:
    evaluated = [c["passed"] for c in checks if c["passed"] is not None]
    return {
        "schema": SCHEMA,
        "scenario": cfg.name,
        "seed": int(cfg.seed),
        "duration": float(cfg.duration),
        "metrics": _jsonable(metrics),
        "checks": checks,
        "passed": all(evaluated) if evaluated else None,
    }


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return v


def load_stack(cfg: ScenarioConfig):
    """Plant config, nominal model and initial image named by ``cfg``."""
    plant_cfg = pl.load_plant_config(cfg.plant_path)
    model = load_model(cfg.model_path)
    if cfg.image_path is not None:
        image = bi.load_image(cfg.image_path)
    else:
        image = bi.initial_train(model, plant_cfg.nominal, seed=0)
    if image.n_joints != model.chain.n_joints or image.n_muscles != model.n_muscles:
        raise ConfigError("image does not match the model's joints and muscles", cfg.path)
    return plant_cfg, model, image


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _cycle_len(cfg) -> float:
    return float(sum(cfg.cycle.stage_times))


def _warmup(arm: Arm, cfg: ScenarioConfig, rng) -> list[float]:
    errs = []
    for _ in range(int(cfg.duration // _cycle_len(cfg))):
        errs.append(arm.cycle(*arm.random_target(rng))[1])
    return errs


# ------------------------------------------------------------------ longrun

def run_longrun(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    plant_cfg, model, image = stack or load_stack(cfg)
    arm_seed, target_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    arm = Arm(cfg, plant_cfg, model, image, arm_seed, budget=Budget(cfg.wall_budget))
    rng = np.random.default_rng(target_seed)
    events = {}
    for c, m in cfg.rupture:
        events.setdefault(c, []).append(m)
    rows, hist = [], []
    n_cycles = int(cfg.duration // _cycle_len(cfg))
    for c in range(1, n_cycles + 1):
        for m in events.get(c, []):
            pl.rupture(arm.plant, m)
        arm.reset_peaks()
        theta_t, T_const = arm.random_target(rng)
        _, e2 = arm.cycle(theta_t, T_const)
        frame, _ = arm.end_stage2
        hist.append(e2)
        rows.append((arm.t, c, e2, _est_at(arm, frame), arm.peak_T, arm.peak_C, int(arm.plant.ruptured.sum())))
    h = np.array(hist)
    k = cfg.checks
    metrics = {"cycles": n_cycles, "rmse_target": h}
    first = float(h[:10].mean()) if len(h) >= 10 else None
    nd = int(k["decay_cycles"])
    last = float(h[nd - 10:nd].mean()) if len(h) >= nd else None
    ratio = last / first if first is not None and last is not None else None
    metrics.update(first10=first, last10=last, decay_ratio=ratio, max_C=max(r[5] for r in rows) if rows else None)
    checks = [_check("initial_rmse", first, ">=", k["initial_rmse_min"]),
              _check("decay_ratio", ratio, "<=", k["decay_ratio_max"]),
              _check("max_temperature", metrics["max_C"], "<", cfg.safety.C_burn)]
    if cfg.rupture:
        r = min(c for c, _ in cfg.rupture)
        pre_n, sp_n = int(k["pre_rupture_cycles"]), int(k["spike_cycles"])
        ra, rn = int(k["recovery_after"]), int(k["recovery_cycles"])
        i = r - 1  # index of the first cycle run with the muscle broken
        pre = float(h[max(0, i - pre_n):i].mean()) if i >= 1 and len(h) >= i else None
        spike = float(h[i:i + sp_n].mean()) if len(h) >= i + sp_n else None
        rec = float(h[i + ra:i + ra + rn].mean()) if len(h) >= i + ra + rn else None
        metrics["rupture"] = {
            "cycle": r, "muscle": [m + 1 for c, m in cfg.rupture if c == r], "pre": pre, "spike": spike,
            "recovery": rec,
            "spike_ratio": spike / pre if spike is not None and pre else None,
            "recovery_ratio": rec / pre if rec is not None and pre else None,
            "windows_after": [float(h[j:j + 10].mean()) for j in range(i, len(h) - 9, 10)],
        }
        checks += [_check("rupture_spike_ratio", metrics["rupture"]["spike_ratio"], ">=", k["spike_ratio_min"]),
                   _check("rupture_recovery_ratio", metrics["rupture"]["recovery_ratio"], "<=",
                          k["recovery_ratio_max"])]
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows, _summary(cfg, metrics, checks))


def _est_at(arm: Arm, frame) -> float:
    saved = arm.frame
    arm.frame = frame
    est = arm.estimate()
    arm.frame = saved
    return rmse(frame.theta, est)


# --------------------------------------------------------- compare_learning

def _run_compare_arm(cfg, stack, baseline: bool, budget):
    plant_cfg, model, image = stack
    arm_seed, target_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    arm = Arm(cfg, plant_cfg, model, image, arm_seed, baseline=baseline, budget=budget)
    rng = np.random.default_rng(target_seed)
    cs = cfg.compare
    period = int(round(cs.est_period * 1000))
    rows = []
    state = {"next": period, "phase": 0, "theta_t": np.zeros(model.chain.n_joints)}

    def sample(a: Arm):
        if a.ms < state["next"]:
            return
        state["next"] += period
        est = a.estimate()
        rows.append((a.t, int(baseline), len(rows) + 1, state["phase"], rmse(a.frame.theta, state["theta_t"]),
                     rmse(a.frame.theta, est), a.peak_T, a.peak_C))
        a.reset_peaks()

    cl = _cycle_len(cfg)
    end_ms = int(round(cfg.duration * 1000))
    while arm.ms + cl * 1000 <= min(end_ms, cs.disturb_at * 1000 + 1e-6):
        state["theta_t"], T_const = arm.random_target(rng)
        arm.cycle(state["theta_t"], T_const, sample)
    if arm.ms < end_ms and cs.disturb_time > 0:
        state["phase"] = 1
        t0, F = arm.t, cs.disturb_force.copy()
        arm.force = lambda t: F if t - t0 < cs.disturb_time else None
        arm.hold(min(cs.disturb_time, (end_ms - arm.ms) / 1000), sample)
        arm.force = None
    state["phase"] = 2
    for _ in range(cs.post_changes):
        if arm.ms + cl * 1000 > end_ms:
            break
        state["theta_t"], T_const = arm.random_target(rng)
        arm.cycle(state["theta_t"], T_const, sample)
    return rows


def run_compare_learning(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    stack = stack or load_stack(cfg)
    budget = Budget(cfg.wall_budget)
    rows_full = _run_compare_arm(cfg, stack, False, budget)
    rows_base = _run_compare_arm(cfg, stack, True, budget)
    cs, k = cfg.compare, cfg.checks
    metrics, out = {}, {}
    for label, rows in (("full", rows_full), ("baseline", rows_base)):
        est = np.array([r[5] for r in rows])
        ph = np.array([r[3] for r in rows])
        t = np.array([r[0] for r in rows])
        n = cs.slope_samples
        slope = float(np.polyfit(t[:n], est[:n], 1)[0]) if len(est) >= n else None
        pre = float(est[ph == 0].mean()) if np.any(ph == 0) else None
        post = float(est[ph == 2].max()) if np.any(ph == 2) else None
        out[label] = {"slope": slope, "pre_mean": pre, "post_max": post,
                      "post_ratio": post / pre if post is not None and pre else None}
        metrics[label] = out[label]
    sf, sb = out["full"]["slope"], out["baseline"]["slope"]
    checks = [
        _check("slope_full_minus_baseline", None if sf is None or sb is None else sf - sb, "<", 0.0),
        _check("full_post_disturbance_ratio", out["full"]["post_ratio"], "<=", k["post_ratio_max"]),
    ]
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows_full + rows_base, _summary(cfg, metrics, checks))


# ---------------------------------------------------------------- dumbbell

def run_dumbbell(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    plant_cfg, model, image = stack or load_stack(cfg)
    db = cfg.dumbbell
    plant_cfg = replace(plant_cfg, payload_mass=db.payload_mass)
    arm = Arm(cfg, plant_cfg, model, image, np.random.SeedSequence(cfg.seed), budget=Budget(cfg.wall_budget))
    t1, t2, _ = cfg.cycle.stage_times
    rep_len = t1 + t2 + db.lower_time
    target_h = float(end_effector(arm.plant.true_model, db.lift)[2])
    rows = []
    for rep in range(1, int(cfg.duration // rep_len) + 1):
        arm.reset_peaks()
        arm.stage1(db.lift, t1)
        arm.stage2(db.lift, t2)
        h = float(pl.end_effector_position(arm.plant)[2])
        rows.append((arm.t, rep, rmse(arm.frame.theta, db.lift), rmse(arm.frame.theta, arm.estimate()),
                     arm.peak_T, arm.peak_C, h, target_h))
        arm.stage1(db.rest, db.lower_time)
    err = np.array([abs(r[6] - target_h) for r in rows])
    slope = float(np.polyfit(np.arange(len(err)), err, 1)[0]) if len(err) >= 2 else None
    metrics = {"target_height": target_h, "heights": [r[6] for r in rows], "height_error": err,
               "error_slope": slope}
    checks = [_check("height_error_slope", slope, "<", 0.0),
              _check("last_minus_first_error", float(err[-1] - err[0]) if len(err) >= 2 else None, "<", 0.0)]
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows, _summary(cfg, metrics, checks))


# --------------------------------------------------------------- stiffness

@dataclass
class StiffnessState:
    theta: np.ndarray  # posture where the state was set
    T_before: np.ndarray
    T_search: np.ndarray
    K_before: np.ndarray
    K_target: np.ndarray
    K_search: np.ndarray
    err_before: float
    err_after: float
    E_trace: list


def settle_posture(arm: Arm, theta_t):
    t1, t2, _ = arm.cfg.cycle.stage_times
    arm.stage1(theta_t, t1)
    arm.stage2(theta_t, t2)


def set_stiffness(arm: Arm, theta_t, scale: float, rng) -> StiffnessState:
    """Search tensions for ``scale`` times the current hand stiffness and command them."""
    st = arm.cfg.stiffness
    theta = arm.frame.theta.copy()
    T0 = arm.frame.T_m.copy()
    J = joint_jacobian(arm.model, theta)
    probe = ct.StiffnessProblem(arm.image, theta, J, np.eye(3), T0, st.search.alpha, st.method)
    K0 = probe.K_w(T0)
    K_target = scale * K0
    prob = ct.StiffnessProblem(arm.image, theta, J, K_target, T0, st.search.alpha, st.method)
    res = ct.search_tensions(prob, T0, st.search, arm.gains.T_bias, arm.cfg.safety.T_lim, rng)
    arm.move(ct.position_targets(arm.image, theta_t, res.T, arm.gains), st.apply_time)
    return StiffnessState(theta, T0, res.T, K0, K_target, prob.K_w(res.T), prob.stiffness_error(T0),
                          prob.stiffness_error(res.T), res.E_trace)


def probe_plant(arm: Arm, forces, settle: float) -> np.ndarray:
    """Hand displacement under each force with the motors locked (plant copies)."""
    n = int(round(settle * 1000 / CONTROL_MS))

    def run(F):
        s = arm.plant.copy()
        for _ in range(n):
            pl.step(s, arm.T_cmd, F_ext=F, n_sub=arm.n_sub, motor_lock=True)
        return pl.end_effector_position(s)

    ref = run(None)
    return np.array([run(F) - ref for F in forces])


def _probe_rows(arm, forces, disp, theta_t, prefix=()):
    e_t, e_e = rmse(arm.frame.theta, theta_t), rmse(arm.frame.theta, arm.estimate())
    return [(arm.t, *prefix, i + 1, F[0], F[1], d[0], d[1], e_t, e_e, arm.peak_T, arm.peak_C)
            for i, (F, d) in enumerate(zip(forces, disp))]


def _axes_report(state: StiffnessState, forces, disp, plane=(0, 1)):
    force = float(np.linalg.norm(forces[0]))
    computed, _ = ct.compliance_axes(state.K_search, plane, force)
    measured, _ = ct.fitted_axes(forces, disp, plane)
    rel = np.abs(measured - computed) / computed
    return computed, measured, rel


def run_variable_stiffness(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    plant_cfg, model, image = stack or load_stack(cfg)
    arm_seed, target_seed, search_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    arm = Arm(cfg, plant_cfg, model, image, arm_seed, budget=Budget(cfg.wall_budget))
    warm = _warmup(arm, cfg, np.random.default_rng(target_seed))
    st = cfg.stiffness
    settle_posture(arm, st.posture)
    state = set_stiffness(arm, st.posture, st.scale, np.random.default_rng(search_seed))
    forces = ct.probe_forces(st.n_probes, st.probe_force)
    disp = probe_plant(arm, forces, st.probe_settle)
    computed, measured, rel = _axes_report(state, forces, disp)
    reduction = 1.0 - state.err_after / state.err_before
    trace = np.array(state.E_trace)
    metrics = {"warmup_cycles": len(warm), "warmup_last_rmse": warm[-1] if warm else None,
               "error_before": state.err_before, "error_after": state.err_after, "reduction": reduction,
               "E_trace": trace, "T_before": state.T_before, "T_search": state.T_search,
               "T_measured": arm.frame.T_m, "axes_computed": computed, "axes_measured": measured,
               "axes_rel_error": rel}
    k = cfg.checks
    checks = [_check("stiffness_error_reduction", reduction, ">=", k["error_reduction_min"]),
              _check("axis_rel_error", float(rel.max()), "<=", k["axis_rel_error_max"]),
              _check("E_trace_increase", float(np.max(np.diff(trace), initial=0.0)), "<=", 0.0)]
    rows = _probe_rows(arm, forces, disp, st.posture)
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows, _summary(cfg, metrics, checks))


def run_stiffness_eval(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    plant_cfg, model, image = stack or load_stack(cfg)
    arm_seed, target_seed, search_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    arm = Arm(cfg, plant_cfg, model, image, arm_seed, budget=Budget(cfg.wall_budget))
    warm = _warmup(arm, cfg, np.random.default_rng(target_seed))
    st = cfg.stiffness
    forces = ct.probe_forces(st.n_probes, st.probe_force)
    search_rng = np.random.default_rng(search_seed)
    rows, metrics, checks = [], {"warmup_cycles": len(warm)}, []
    k = cfg.checks
    for code, label, scale in ((0, "low", st.low_scale), (1, "high", st.high_scale)):
        settle_posture(arm, st.posture)
        state = set_stiffness(arm, st.posture, scale, search_rng)
        arm.reset_peaks()
        disp = probe_plant(arm, forces, st.probe_settle)
        computed, measured, rel = _axes_report(state, forces, disp)
        metrics[label] = {"T_search": state.T_search, "axes_computed": computed, "axes_measured": measured,
                          "axes_rel_error": rel, "error_before": state.err_before, "error_after": state.err_after}
        checks.append(_check(f"{label}_axis_rel_error", float(rel.max()), "<=", k["axis_rel_error_max"]))
        rows += _probe_rows(arm, forces, disp, st.posture, (code,))
    checks.append(_check("high_minus_low_major_axis",
                         float(metrics["high"]["axes_measured"][0] - metrics["low"]["axes_measured"][0]), "<", 0.0))
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows, _summary(cfg, metrics, checks))


# ------------------------------------------------------------------ impact

def half_sine(t0: float, peak: float, width: float, direction):
    direction = np.asarray(direction, dtype=float)

    def force(t):
        s = t - t0
        if 0.0 <= s < width:
            return peak * np.sin(np.pi * s / width) * direction
        return None
    return force


def run_impact(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    plant_cfg, model, image = stack or load_stack(cfg)
    arm_seed, target_seed, search_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    base = Arm(cfg, plant_cfg, model, image, arm_seed, budget=Budget(cfg.wall_budget))
    warm = _warmup(base, cfg, np.random.default_rng(target_seed))
    st, im = cfg.stiffness, cfg.impact
    rows, metrics = [], {"warmup_cycles": len(warm)}
    for code, label, scale in ((0, "low", st.low_scale), (1, "high", st.high_scale)):
        arm = copy.deepcopy(base)
        settle_posture(arm, st.posture)
        set_stiffness(arm, st.posture, scale, np.random.default_rng(search_seed))
        theta0 = arm.frame.theta.copy()
        T_start = arm.frame.T_m.copy()
        arm.reset_peaks()
        t_pulse = arm.t + im.before
        pulse = half_sine(t_pulse, im.peak, im.width, im.direction)
        arm.force = pulse
        disp, peak_T = [], 0.0

        def record(a: Arm):
            F = pulse(a.t - CONTROL_MS * 1e-3)
            d = float(np.linalg.norm(a.frame.theta - theta0))
            disp.append(d)
            rows.append((a.t, code, 0.0 if F is None else float(np.linalg.norm(F)), d,
                         rmse(a.frame.theta, st.posture), rmse(a.frame.theta, a.estimate()),
                         float(np.max(a.frame.T_m)), float(np.max(a.frame.C))))

        arm.hold(im.before + im.after, record)
        arm.force = None
        metrics[label] = {"T_start": T_start, "peak_joint_disp": max(disp),
                          "peak_tension": max(r[6] for r in rows if r[1] == code)}
    lo, hi = metrics["low"], metrics["high"]
    checks = [_check("disp_high_minus_low", hi["peak_joint_disp"] - lo["peak_joint_disp"], "<", 0.0),
              _check("tension_low_minus_high", lo["peak_tension"] - hi["peak_tension"], "<", 0.0)]
    return ScenarioResult(cfg.name, COLUMNS[cfg.name], rows, _summary(cfg, metrics, checks))


RUNNERS = {
    "compare_learning": run_compare_learning,
    "longrun": run_longrun,
    "dumbbell": run_dumbbell,
    "variable_stiffness": run_variable_stiffness,
    "stiffness_eval": run_stiffness_eval,
    "impact": run_impact,
}


def run_scenario(cfg: ScenarioConfig, stack=None) -> ScenarioResult:
    return RUNNERS[cfg.name](cfg, stack)


# ------------------------------------------------- stand-alone experiments

def unreachable_hold(cfg: ScenarioConfig, safety_enabled: bool, overshoot=None, duration: float = 60.0,
                     stack=None) -> dict:
    """Command a posture beyond the joint stops and hold it.

    ``overshoot`` (rad per joint) is added past the limits; the default drives
    the elbow pitch past its flexion stop and the shoulder pitch past its upper
    stop.  Returns temperature and tension traces summarized per second.
    """
    plant_cfg, model, image = stack or load_stack(cfg)
    cfg = replace(cfg, safety_enabled=safety_enabled, safety=copy.deepcopy(cfg.safety))
    arm = Arm(cfg, plant_cfg, model, image, np.random.SeedSequence(cfg.seed))
    ch = model.chain
    if overshoot is None:
        overshoot = np.array([0.0, 0.6, 0.0, -0.8, 0.0])
    theta_t = np.clip(np.zeros(ch.n_joints), ch.lower, ch.upper)
    theta_t = np.where(overshoot > 0, ch.upper + overshoot, np.where(overshoot < 0, ch.lower + overshoot, theta_t))
    T_hist, C_hist = [], []

    def rec(a: Arm):
        if a.ms % 1000 == 0:
            T_hist.append(float(np.max(a.frame.T_m)))
            C_hist.append(float(np.max(a.frame.C)))

    arm.move(ct.position_targets(arm.image, theta_t, arm.gains.T_bias, arm.gains), duration, rec)
    T_hist, C_hist = np.array(T_hist), np.array(C_hist)
    tail = T_hist[-5:]
    return {"target": theta_t, "max_C": float(C_hist.max()), "max_T": float(T_hist.max()),
            "final_overshoot": float(max(tail.mean() - cfg.safety.T_lim, 0.0)),
            "T_per_s": T_hist, "C_per_s": C_hist}


def two_stage_errors(arm: Arm, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Joint RMSE at the end of stage 1 and stage 2 for ``n`` random targets."""
    e1, e2 = [], []
    for _ in range(n):
        a, b = arm.cycle(*arm.random_target(rng))
        e1.append(a)
        e2.append(b)
    return np.array(e1), np.array(e2)


def trained_arm(cfg: ScenarioConfig, cycles: int, stack=None) -> Arm:
    """An arm after ``cycles`` random-target learning cycles."""
    plant_cfg, model, image = stack or load_stack(cfg)
    arm_seed, target_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    arm = Arm(cfg, plant_cfg, model, image, arm_seed)
    rng = np.random.default_rng(target_seed)
    for _ in range(cycles):
        arm.cycle(*arm.random_target(rng))
    return arm


# ---------------------------------------------------------------------- CLI

def write_outputs(result: ScenarioResult, out: Path, csv_out: bool, json_out: bool) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if csv_out:
        p = out / f"{result.name}.csv"
        p.write_text(result.csv_text())
        written.append(p)
    if json_out:
        p = out / f"{result.name}.summary.json"
        p.write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tendonarm", description="Tendon-driven arm simulator and scenarios.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario", choices=scenario_names())
    r.add_argument("--config", type=Path, help="scenario config (default: the shipped one)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--duration", type=float, help="override the simulated duration in s")
    r.add_argument("--csv", action="store_true", help="write the metrics CSV")
    r.add_argument("--summary-json", action="store_true", help="write the summary JSON")
    sub.add_parser("list-scenarios", help="print the scenario catalog")
    v = sub.add_parser("validate-config", help="parse and check a scenario config")
    v.add_argument("path", type=Path)
    t = sub.add_parser("train-image", help="fit the initial self-body image to a geometric model")
    t.add_argument("--model", type=Path, default=data_dir() / "arm.model")
    t.add_argument("--plant", type=Path, default=data_dir() / "plant.cfg")
    t.add_argument("--samples", type=int, default=20000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    if args.cmd == "list-scenarios":
        for name, desc in scenario_catalog():
            print(f"{name:20s} {desc}")
        return EXIT_OK
    if args.cmd == "validate-config":
        try:
            cfg = load_config(args.path)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"ok: {cfg.name}")
        return EXIT_OK
    if args.cmd == "train-image":
        if args.seed < 0:
            ap.error("--seed must be non-negative")
        plant_cfg = pl.load_plant_config(args.plant)
        image = bi.initial_train(load_model(args.model), plant_cfg.nominal, args.samples, args.seed)
        bi.save_image(image, args.out)
        print(f"wrote {args.out}")
        return EXIT_OK

    if args.seed is not None and args.seed < 0:
        ap.error("--seed must be a non-negative integer")
    try:
        cfg = load_config(args.config or default_config_path(args.scenario))
        if cfg.name != args.scenario:
            ap.error(f"config is for scenario '{cfg.name}', not '{args.scenario}'")
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.duration is not None:
            cfg = replace(cfg, duration=args.duration)
        result = run_scenario(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    both = not (args.csv or args.summary_json)
    for p in write_outputs(result, args.out, args.csv or both, args.summary_json or both):
        print(f"wrote {p}")
    for c in result.summary["checks"]:
        status = "skip" if c["passed"] is None else ("pass" if c["passed"] else "FAIL")
        val = "n/a" if c["value"] is None else f"{c['value']:.4g}"
        print(f"{status:4s} {c['name']}: {val} {c['op']} {c['threshold']:g}")
    return EXIT_OK if result.passed in (True, None) else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
