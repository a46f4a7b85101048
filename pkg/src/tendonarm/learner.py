"""Online learning of the self-body image from streamed sensor frames.

Each update trains both networks on a minibatch made of

  (a) the newest sample,
  (b) ``N_b`` replayed samples from a bounded FIFO server,
  (c) ``N_c`` constraint samples: the zero-posture anchor for the ideal map,
      and jittered-posture copies of replayed samples for the correction net,
  (d) ``N_d`` self-distillation samples whose targets are the current outputs.

Residual targets are recomputed against the current networks when the batch
is built, so replayed samples never carry stale targets.  A slack tendon's
motor length says nothing about its path, so entries whose tension is below
``slack_tension`` get the current output as target and contribute no gradient.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mlp
from .body_image import SelfBodyImage, compensation, ideal_lengths
from .plant import SensorFrame

DIVERGED_LOSS = 1e6  # mm^2


class LearnerHalted(RuntimeError):
    def __init__(self, msg, snapshot: SelfBodyImage):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass(frozen=True)
class SampleRecord:
    theta: np.ndarray
    T: np.ndarray
    l: np.ndarray
    t: float = 0.0

    @classmethod
    def from_frame(cls, frame: SensorFrame) -> "SampleRecord":
        return cls(frame.theta.copy(), frame.T_m.copy(), frame.l_m.copy(), float(frame.t))


class DataServer:
    """Bounded FIFO of samples with seeded uniform draws (with replacement)."""

    def __init__(self, capacity: int = 10000, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[SampleRecord] = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def push(self, rec: SampleRecord) -> None:
        self._items.append(rec)

    def draw(self, k: int) -> list[SampleRecord]:
        if not self._items or k <= 0:
            return []
        idx = self.rng.integers(0, len(self._items), size=k)
        return [self._items[i] for i in idx]

    def records(self) -> list[SampleRecord]:
        return list(self._items)


@dataclass
class AugmentationParams:
    N_b: int = 10
    N_c: int = 5
    N_d: int = 5
    dtheta_div: float = 0.1  # rad, std of the posture jitter in (c)
    sample_rate: float = 2.0  # Hz
    trigger_dtheta: float = 0.05  # rad
    trigger_dl: float = 2.0  # mm
    slack_tension: float = 1.0  # N

    def __post_init__(self):
        for k in ("N_b", "N_c", "N_d", "dtheta_div", "sample_rate", "trigger_dtheta", "trigger_dl",
                  "slack_tension"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")


def should_sample(prev: SampleRecord | None, cur: SensorFrame, p: AugmentationParams) -> bool:
    if prev is None:
        return True
    if cur.t - prev.t < 1.0 / p.sample_rate - 1e-9:
        return False
    return bool(np.max(np.abs(cur.theta - prev.theta)) > p.trigger_dtheta
                or np.max(np.abs(cur.l_m - prev.l)) > p.trigger_dl)


def extract_samples(frame: SensorFrame | SampleRecord, image: SelfBodyImage):
    """Residual training pairs for the two networks from one measurement.

    Returns ``((theta, l_ideal), (theta, T, l_comp))`` where each target is
    the measured length minus the other network's current contribution.
    """
    if isinstance(frame, SensorFrame):
        theta, T, l = frame.theta, frame.T_m, frame.l_m
    else:
        theta, T, l = frame.theta, frame.T, frame.l
    ijmm_target = l - compensation(image, theta, T)
    mrcm_target = l - ideal_lengths(image, theta)
    return (theta, ijmm_target), (theta, T, mrcm_target)


def build_minibatch(latest: SampleRecord, server: DataServer, image: SelfBodyImage,
                    p: AugmentationParams, rng, lower, upper):
    """Assemble the (ideal, correction) training batches for one update."""
    nj, nm = image.n_joints, image.n_muscles
    replay = server.draw(p.N_b)
    recs = [latest] + replay
    th = np.array([r.theta for r in recs])
    T = np.array([r.T for r in recs])
    l = np.array([r.l for r in recs])
    f, gc = ideal_lengths(image, th), compensation(image, th, T)
    taut = T >= p.slack_tension
    ijmm_x = [th]
    ijmm_y = [np.where(taut, l - gc, f)]
    mrcm_x = [np.hstack([th, T])]
    mrcm_y = [np.where(taut, l - f, gc)]

    # (c) constraints
    ijmm_x.append(np.zeros((p.N_c, nj)))
    ijmm_y.append(np.zeros((p.N_c, nm)))
    cons = server.draw(p.N_c)
    if cons:
        cth = np.array([r.theta for r in cons])
        cT = np.array([r.T for r in cons])
        cl = np.array([r.l for r in cons])
        around = cth + rng.normal(0.0, p.dtheta_div, cth.shape)
        mrcm_x.append(np.hstack([around, cT]))
        mrcm_y.append(np.where(cT >= p.slack_tension, cl - ideal_lengths(image, cth),
                               compensation(image, around, cT)))

    # (d) self-distillation
    dth = rng.uniform(lower, upper, (p.N_d, nj))
    dT = rng.uniform(0.0, image.T_lim, (p.N_d, nm))
    ijmm_x.append(dth)
    ijmm_y.append(ideal_lengths(image, dth))
    mrcm_x.append(np.hstack([dth, dT]))
    mrcm_y.append(compensation(image, dth, dT))

    return (mlp.TrainBatch(np.vstack(ijmm_x), np.vstack(ijmm_y)),
            mlp.TrainBatch(np.vstack(mrcm_x), np.vstack(mrcm_y)))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, net, batch):
        return mlp.train_step(net, batch, self.lr)


def make_optimizer(kind: str, net: mlp.Network, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return mlp.Adam(net, lr=lr)
    raise ValueError(f"unknown optimizer '{kind}'")


def _batch_loss_mm2(net: mlp.Network, batch: mlp.TrainBatch) -> float:
    err = mlp.forward(net, batch.inputs) - batch.targets
    return float(np.mean(err * err))


def online_update(image: SelfBodyImage, batches, opt_ijmm, opt_mrcm) -> tuple[float, float]:
    """One step on each network (in place). Returns the pre-step losses in mm^2.

    On divergence the image is rolled back and LearnerHalted carries the last
    good snapshot.
    """
    snapshot = image.copy()
    bi, bm = batches
    li, lm = _batch_loss_mm2(image.ijmm, bi), _batch_loss_mm2(image.mrcm, bm)
    try:
        opt_ijmm.step(image.ijmm, bi)
        opt_mrcm.step(image.mrcm, bm)
    except mlp.TrainingDiverged as exc:
        image.ijmm, image.mrcm = snapshot.ijmm, snapshot.mrcm
        raise LearnerHalted(str(exc), snapshot) from None
    if not (li < DIVERGED_LOSS and lm < DIVERGED_LOSS):
        image.ijmm, image.mrcm = snapshot.ijmm, snapshot.mrcm
        raise LearnerHalted(f"loss {max(li, lm):.3g} mm^2 exceeds divergence limit", snapshot)
    return li, lm


@dataclass
class LearnerConfig:
    aug: AugmentationParams = field(default_factory=AugmentationParams)
    capacity: int = 10000
    optimizer: str = "adam"
    lr: float = 1e-3
    baseline: bool = False


class OnlineLearner:
    """Learner task: gate incoming frames, keep the server, update the image.

    ``baseline=True`` switches to the degraded scheme used for comparison:
    no server, no augmentation, one-sample updates on every tick that
    alternate between the measured posture and the image's own estimate.
    """

    def __init__(self, image: SelfBodyImage, lower, upper, cfg: LearnerConfig | None = None, seed=0):
        self.cfg = cfg or LearnerConfig()
        self.image = image
        self.lower, self.upper = np.asarray(lower, float), np.asarray(upper, float)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_server, s_aug = ss.spawn(2)
        self.server = DataServer(self.cfg.capacity, s_server)
        self.rng = np.random.default_rng(s_aug)
        self.opt_ijmm = make_optimizer(self.cfg.optimizer, image.ijmm, self.cfg.lr)
        self.opt_mrcm = make_optimizer(self.cfg.optimizer, image.mrcm, self.cfg.lr)
        self.last: SampleRecord | None = None
        self.n_updates = 0
        self.log: list[SampleRecord] = []
        self._flip = False

    def observe(self, frame: SensorFrame, theta_est=None) -> tuple[float, float] | None:
        """Feed one learner-tick frame; returns losses if an update happened."""
        if self.cfg.baseline:
            return self._baseline_update(frame, theta_est)
        if not should_sample(self.last, frame, self.cfg.aug):
            return None
        rec = SampleRecord.from_frame(frame)
        return self.learn(rec)

    def learn(self, rec: SampleRecord) -> tuple[float, float]:
        batches = build_minibatch(rec, self.server, self.image, self.cfg.aug, self.rng, self.lower, self.upper)
        self.server.push(rec)
        self.last = rec
        self.log.append(rec)
        losses = online_update(self.image, batches, self.opt_ijmm, self.opt_mrcm)
        self.n_updates += 1
        return losses

    def _baseline_update(self, frame: SensorFrame, theta_est):
        theta = frame.theta
        if self._flip and theta_est is not None:
            theta = np.asarray(theta_est, dtype=float)
        self._flip = not self._flip
        rec = SampleRecord(theta.copy(), frame.T_m.copy(), frame.l_m.copy(), float(frame.t))
        (ti, yi), (tm, Tm, ym) = extract_samples(rec, self.image)
        taut = Tm >= self.cfg.aug.slack_tension
        yi = np.where(taut, yi, ideal_lengths(self.image, ti))
        ym = np.where(taut, ym, compensation(self.image, tm, Tm))
        batches = (mlp.TrainBatch(ti, yi), mlp.TrainBatch(np.concatenate([tm, Tm]), ym))
        self.last = rec
        self.log.append(rec)
        losses = online_update(self.image, batches, self.opt_ijmm, self.opt_mrcm)
        self.n_updates += 1
        return losses


# ---------------------------------------------------------------- sample log

LOG_HEADER = (["t"] + [f"theta{i}" for i in range(1, 6)] + [f"T{i}" for i in range(1, 11)]
              + [f"l{i}" for i in range(1, 11)])


def write_sample_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in records:
            w.writerow([repr(float(r.t))] + [repr(float(v)) for v in (*r.theta, *r.T, *r.l)])


def read_sample_log(path) -> list[SampleRecord]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected sample-log header")
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(LOG_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(LOG_HEADER)} columns, got {len(row)}")
            v = np.array([float(x) for x in row])
            out.append(SampleRecord(v[1:6], v[6:16], v[16:26], float(v[0])))
    return out


def replay_log(image: SelfBodyImage, records, lower, upper, cfg: LearnerConfig | None = None,
               seed=0) -> SelfBodyImage:
    """Re-run the update sequence of a recorded log on a copy of ``image``."""
    learner = OnlineLearner(image.copy(), lower, upper, cfg, seed)
    for rec in records:
        learner.learn(rec)
    return learner.image
