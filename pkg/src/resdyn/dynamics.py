"""Open-loop dynamic models: per-tick (command, state) -> (accel, heading rate).

Two flavors: a rule-based kinematic bicycle with an affine actuator map
(deadzone + quadratic drag), and a small learned MLP. Both are integrated
tick by tick into a trajectory by rollout().
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, load_checkpoint, parameter, save_checkpoint
from .core import (DEFAULT_DT, ControlCommand, LogRecord, Pose, Trajectory,
                   ValidationError, VehicleState, integrate_step)
from .rng import seeded_rng

DM_INPUT_FIELDS = ("throttle", "brake", "steering", "speed", "acceleration")


@dataclass(frozen=True)
class RuleBasedParams:
    wheelbase: float = 2.85              # m
    max_front_wheel_angle: float = 0.47  # rad at |steering| = 1
    throttle_gain: float = 4.0           # (m/s^2) per command unit
    brake_gain: float = 8.0
    throttle_deadzone: float = 0.02
    brake_deadzone: float = 0.02
    drag_coeff: float = 0.002            # 1/m, quadratic speed drag
                                         # (calibrated to absorb rolling
                                         # resistance near cruise speeds)

    def __post_init__(self):
        if self.wheelbase <= 0:
            raise ValidationError(f"wheelbase {self.wheelbase} must be > 0")
        if self.throttle_gain < 0 or self.brake_gain < 0 or self.drag_coeff < 0:
            raise ValidationError("gains must be >= 0")
        for dz in (self.throttle_deadzone, self.brake_deadzone):
            if not 0.0 <= dz < 1.0:
                raise ValidationError(f"deadzone {dz} outside [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "RuleBasedParams":
        return cls(**d)


class RuleBasedModel:
    """Kinematic bicycle with deadzoned affine actuators and quadratic drag."""

    kind = "rule_based"

    def __init__(self, params: RuleBasedParams | None = None):
        self.params = params or RuleBasedParams()

    def tick(self, cmd: ControlCommand, state: VehicleState) -> tuple[float, float]:
        p = self.params
        accel = (p.throttle_gain * max(0.0, cmd.throttle - p.throttle_deadzone)
                 - p.brake_gain * max(0.0, cmd.brake - p.brake_deadzone)
                 - p.drag_coeff * state.speed * state.speed * np.sign(state.speed))
        heading_rate = (state.speed
                        * math.tan(cmd.steering * p.max_front_wheel_angle)
                        / p.wheelbase)
        return accel, heading_rate


def dm_rb_tick(cmd: ControlCommand, state: VehicleState,
               params: RuleBasedParams) -> tuple[float, float]:
    return RuleBasedModel(params).tick(cmd, state)


class MlpDynamicModel:
    """5 -> 8 (ReLU) -> 2 network over z-scored per-tick features.

    Inputs (throttle, brake, steering, speed, acceleration); outputs
    (acceleration, heading rate), de-normalized.
    """

    kind = "mlp"
    HIDDEN = 8

    def __init__(self, weights: dict[str, np.ndarray],
                 in_mean: np.ndarray, in_std: np.ndarray,
                 out_mean: np.ndarray, out_std: np.ndarray):
        for key, shape in (("w1", (5, self.HIDDEN)), ("b1", (self.HIDDEN,)),
                           ("w2", (self.HIDDEN, 2)), ("b2", (2,))):
            if tuple(np.shape(weights[key])) != shape:
                raise ValidationError(f"{key} has shape {np.shape(weights[key])}, want {shape}")
        if np.any(np.asarray(in_std) <= 0) or np.any(np.asarray(out_std) <= 0):
            raise ValidationError("normalization stds must be positive")
        self.weights = {k: np.asarray(v, dtype=float) for k, v in weights.items()}
        self.in_mean = np.asarray(in_mean, dtype=float)
        self.in_std = np.asarray(in_std, dtype=float)
        self.out_mean = np.asarray(out_mean, dtype=float)
        self.out_std = np.asarray(out_std, dtype=float)

    def tick(self, cmd: ControlCommand, state: VehicleState) -> tuple[float, float]:
        x = np.array([cmd.throttle, cmd.brake, cmd.steering,
                      state.speed, state.acceleration])
        out = self.forward_raw((x - self.in_mean) / self.in_std)
        accel, rate = out * self.out_std + self.out_mean
        return float(accel), float(rate)

    def forward_raw(self, xn: np.ndarray) -> np.ndarray:
        h = np.maximum(xn @ self.weights["w1"] + self.weights["b1"], 0.0)
        return h @ self.weights["w2"] + self.weights["b2"]

    def tick_batch(self, features: np.ndarray) -> np.ndarray:
        xn = (features - self.in_mean) / self.in_std
        h = np.maximum(xn @ self.weights["w1"] + self.weights["b1"], 0.0)
        return (h @ self.weights["w2"] + self.weights["b2"]) * self.out_std + self.out_mean

    def save(self, path) -> None:
        arrays = dict(self.weights)
        arrays.update(in_mean=self.in_mean, in_std=self.in_std,
                      out_mean=self.out_mean, out_std=self.out_std)
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> "MlpDynamicModel":
        a = load_checkpoint(path)
        weights = {k: a[k] for k in ("w1", "b1", "w2", "b2")}
        return cls(weights, a["in_mean"], a["in_std"], a["out_mean"], a["out_std"])


def dm_lb_tick(cmd: ControlCommand, state: VehicleState,
               model: MlpDynamicModel) -> tuple[float, float]:
    return model.tick(cmd, state)


def tick_training_pairs(records: list[LogRecord], dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels) per tick; labels are the effective accel and heading
    rate realized over the next tick, finite-differenced from the log."""
    n = len(records) - 1
    x = np.empty((n, 5))
    y = np.empty((n, 2))
    for i in range(n):
        r, nxt = records[i], records[i + 1]
        x[i] = (r.command.throttle, r.command.brake, r.command.steering,
                r.state.speed, r.state.acceleration)
        dh = nxt.state.heading - r.state.heading
        dh = (dh + math.pi) % (2.0 * math.pi) - math.pi
        y[i] = ((nxt.state.speed - r.state.speed) / dt, dh / dt)
    return x, y


@dataclass
class DmTrainReport:
    epochs_run: int
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf


def train_dm_lb(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                lr: float = 3e-3, epochs: int = 200, batch_size: int = 256,
                patience: int = 10, val_fraction: float = 0.2
                ) -> tuple[MlpDynamicModel, DmTrainReport]:
    """MSE-trained with Adam; early stop when validation plateaus."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(features) == 0:
        raise ValidationError("empty dynamic-model training set")
    rng = seeded_rng(seed, "dm-lb")
    perm = rng.permutation(len(features))
    n_val = max(1, int(round(val_fraction * len(features))))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) == 0:
        tr_idx = val_idx
    in_mean = features[tr_idx].mean(axis=0)
    in_std = np.maximum(features[tr_idx].std(axis=0), 1e-8)
    out_mean = labels[tr_idx].mean(axis=0)
    out_std = np.maximum(labels[tr_idx].std(axis=0), 1e-8)
    xn = (features - in_mean) / in_std
    yn = (labels - out_mean) / out_std

    h = MlpDynamicModel.HIDDEN
    w1 = parameter(rng.normal(0, math.sqrt(2.0 / 5), (5, h)), "w1")
    b1 = parameter(np.zeros(h), "b1")
    w2 = parameter(rng.normal(0, math.sqrt(1.0 / h), (h, 2)), "w2")
    b2 = parameter(np.zeros(2), "b2")
    params = [w1, b1, w2, b2]
    opt = Adam(params, lr=lr)

    def forward(xb: np.ndarray) -> Tensor:
        hidden = ad.relu(ad.affine(Tensor(xb), w1, b1))
        return ad.affine(hidden, w2, b2)

    def mse_on(idx: np.ndarray) -> float:
        pred = forward(xn[idx]).data
        return float(np.mean((pred - yn[idx]) ** 2))

    report = DmTrainReport(epochs_run=0)
    best = {p.name: p.data.copy() for p in params}
    stall = 0
    for epoch in range(epochs):
        order = rng.permutation(len(tr_idx))
        losses = []
        for lo in range(0, len(order), batch_size):
            batch = tr_idx[order[lo:lo + batch_size]]
            opt.zero_grad()
            pred = forward(xn[batch])
            err = ad.sub(pred, Tensor(yn[batch]))
            loss = ad.tmean(ad.mul(err, err))
            backward(loss)
            opt.step()
            losses.append(float(loss.data))
        val = mse_on(val_idx)
        report.train_mse.append(float(np.mean(losses)))
        report.val_mse.append(val)
        report.epochs_run = epoch + 1
        if val < report.best_val_mse - 1e-12:
            report.best_val_mse = val
            report.best_epoch = epoch
            best = {p.name: p.data.copy() for p in params}
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    return MlpDynamicModel(best, in_mean, in_std, out_mean, out_std), report


def rollout(model, start_pose: Pose, start_state: VehicleState,
            commands: list[ControlCommand], dt: float = DEFAULT_DT) -> Trajectory:
    """Open-loop rollout: state fed back from the model's own integration.

    Returns |commands|+1 poses; only the initial measured state enters.
    """
    n = len(commands)
    ts = np.empty(n + 1)
    poses = np.empty((n + 1, 3))
    speeds = np.empty(n + 1)
    pose, speed, accel = start_pose, start_state.speed, start_state.acceleration
    ts[0] = 0.0
    poses[0] = (pose.x, pose.y, pose.heading)
    speeds[0] = speed
    for i, cmd in enumerate(commands):
        state = VehicleState(speed, accel, pose.heading)
        accel, rate = model.tick(cmd, state)
        pose, speed = integrate_step(pose, speed, accel, rate, dt)
        ts[i + 1] = (i + 1) * dt
        poses[i + 1] = (pose.x, pose.y, pose.heading)
        speeds[i + 1] = speed
    return Trajectory(ts, poses, speeds)


def rollout_states(model, start_pose: Pose, start_state: VehicleState,
                   commands: list[ControlCommand], dt: float = DEFAULT_DT
                   ) -> np.ndarray:
    """Rollout returning the per-tick state table the model itself saw:
    rows (speed_i, accel_i, heading_i, x_i, y_i), length |commands|+1.

    Row i holds the state consumed by tick i (accel = output of tick i-1,
    measured state at row 0), mirroring rollout() exactly.
    """
    n = len(commands)
    table = np.empty((n + 1, 5))
    pose, speed, accel = start_pose, start_state.speed, start_state.acceleration
    for i in range(n):
        table[i] = (speed, accel, pose.heading, pose.x, pose.y)
        state = VehicleState(speed, accel, pose.heading)
        accel, rate = model.tick(commands[i], state)
        pose, speed = integrate_step(pose, speed, accel, rate, dt)
    table[n] = (speed, accel, pose.heading, pose.x, pose.y)
    return table
