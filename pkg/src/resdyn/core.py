"""Shared domain types and pose integration.

Everything here is immutable after construction; operations are pure
functions, safe to call from parallel workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DT = 0.01  # 100 Hz control tick

LOG_CSV_FIELDS = ("t", "throttle", "brake", "steering", "speed",
                  "acceleration", "heading", "x", "y")

# both commanded (>0.05 throttle and brake at once) marks a row suspicious
OVERLAP_EPS = 0.05


class ValidationError(ValueError):
    """Input rejected by a precondition or invariant check."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValidationError(f"non-finite angle: {theta!r}")
    if -math.pi < theta <= math.pi:
        return theta
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class ControlCommand:
    throttle: float
    brake: float
    steering: float

    def __post_init__(self):
        if not (math.isfinite(self.throttle) and math.isfinite(self.brake)
                and math.isfinite(self.steering)):
            raise ValidationError("non-finite command field")
        if not 0.0 <= self.throttle <= 1.0:
            raise ValidationError(f"throttle {self.throttle} outside [0, 1]")
        if not 0.0 <= self.brake <= 1.0:
            raise ValidationError(f"brake {self.brake} outside [0, 1]")
        if not -1.0 <= self.steering <= 1.0:
            raise ValidationError(f"steering {self.steering} outside [-1, 1]")

    @property
    def overlapping(self) -> bool:
        """True when throttle and brake are both meaningfully applied."""
        return self.throttle > OVERLAP_EPS and self.brake > OVERLAP_EPS


@dataclass(frozen=True)
class VehicleState:
    speed: float          # m/s, >= 0
    acceleration: float   # m/s^2
    heading: float        # rad, wrapped to (-pi, pi]

    def __post_init__(self):
        if not (math.isfinite(self.speed) and math.isfinite(self.acceleration)
                and math.isfinite(self.heading)):
            raise ValidationError("non-finite state field")
        if self.speed < 0.0:
            raise ValidationError(f"negative speed {self.speed}")
        if not -math.pi < self.heading <= math.pi:
            raise ValidationError(f"heading {self.heading} outside (-pi, pi]")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)
                and math.isfinite(self.heading)):
            raise ValidationError("non-finite pose field")


@dataclass(frozen=True)
class LogRecord:
    timestamp: float
    command: ControlCommand
    state: VehicleState
    pose: Pose


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step timestamped 2-D pose sequence, the unit of all grading."""

    timestamps: np.ndarray          # (n,) seconds, strictly increasing
    poses: np.ndarray               # (n, 3) columns x, y, heading
    speeds: np.ndarray | None = field(default=None)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        ps = np.asarray(self.poses, dtype=float)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", ps)
        if ts.ndim != 1 or ps.ndim != 2 or ps.shape[1] != 3:
            raise ValidationError(f"bad trajectory shapes {ts.shape}, {ps.shape}")
        if len(ts) != len(ps):
            raise ValidationError(f"{len(ts)} timestamps vs {len(ps)} poses")
        if len(ts) == 0:
            raise ValidationError("empty trajectory")
        if not np.all(np.isfinite(ts)) or not np.all(np.isfinite(ps)):
            raise ValidationError("non-finite trajectory entry")
        if len(ts) > 1:
            steps = np.diff(ts)
            if np.any(steps <= 0):
                raise ValidationError("timestamps not strictly increasing")
            if np.max(steps) - np.min(steps) > 1e-9:
                raise ValidationError("timestamp step not constant within 1e-9 s")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def dt(self) -> float:
        if len(self.timestamps) < 2:
            return 0.0
        return float(self.timestamps[1] - self.timestamps[0])

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])


def integrate_step(pose: Pose, speed: float, accel: float,
                   heading_rate: float, dt: float) -> tuple[Pose, float]:
    """One forward-Euler tick: velocity and heading sampled at interval start.

    Speed clamps at zero (no reverse). Returns the new pose and new speed.
    """
    vals = (pose.x, pose.y, pose.heading, speed, accel, heading_rate, dt)
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"non-finite integrate_step input: {vals}")
    if dt <= 0.0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if speed < 0.0:
        raise ValidationError(f"negative speed {speed}")
    new_speed = max(0.0, speed + accel * dt)
    x = pose.x + speed * math.cos(pose.heading) * dt
    y = pose.y + speed * math.sin(pose.heading) * dt
    heading = wrap_angle(pose.heading + heading_rate * dt)
    return Pose(x, y, heading), new_speed


def records_to_trajectory(records: list[LogRecord]) -> Trajectory:
    ts = np.array([r.timestamp for r in records])
    poses = np.array([[r.pose.x, r.pose.y, r.pose.heading] for r in records])
    speeds = np.array([r.state.speed for r in records])
    return Trajectory(ts, poses, speeds)


def log_fields(records: list[LogRecord]) -> dict[str, np.ndarray]:
    """Column view of a record sequence, keyed by the CSV field names."""
    cols = {name: np.empty(len(records)) for name in LOG_CSV_FIELDS}
    for i, r in enumerate(records):
        cols["t"][i] = r.timestamp
        cols["throttle"][i] = r.command.throttle
        cols["brake"][i] = r.command.brake
        cols["steering"][i] = r.command.steering
        cols["speed"][i] = r.state.speed
        cols["acceleration"][i] = r.state.acceleration
        cols["heading"][i] = r.state.heading
        cols["x"][i] = r.pose.x
        cols["y"][i] = r.pose.y
    return cols


def write_log_csv(path, records: list[LogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_CSV_FIELDS)
        for r in records:
            w.writerow([repr(v) for v in (
                r.timestamp, r.command.throttle, r.command.brake,
                r.command.steering, r.state.speed, r.state.acceleration,
                r.state.heading, r.pose.x, r.pose.y)])


def parse_log_row(row: list[str]) -> LogRecord:
    """Parse one CSV row; raises ValidationError on any invariant violation."""
    if len(row) != len(LOG_CSV_FIELDS):
        raise ValidationError(f"expected {len(LOG_CSV_FIELDS)} fields, got {len(row)}")
    t, thr, brk, st, v, a, hd, x, y = (float(c) for c in row)
    return LogRecord(t, ControlCommand(thr, brk, st),
                     VehicleState(v, a, hd), Pose(x, y, hd))


TRAJ_CSV_FIELDS = ("t", "x", "y", "heading", "speed", "sigma_x", "sigma_y")


def write_trajectory_csv(path, traj: Trajectory,
                         sigmas: np.ndarray | None = None) -> None:
    """Rows `t,x,y,heading,speed,sigma_x,sigma_y`; sigma cells empty where
    no correction was made (warm-up ticks)."""
    n = len(traj)
    speeds = traj.speeds if traj.speeds is not None else np.full(n, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_CSV_FIELDS)
        for i in range(n):
            row = [repr(float(traj.timestamps[i])), repr(float(traj.poses[i, 0])),
                   repr(float(traj.poses[i, 1])), repr(float(traj.poses[i, 2])),
                   repr(float(speeds[i]))]
            if sigmas is None or not np.all(np.isfinite(sigmas[i])):
                row += ["", ""]
            else:
                row += [repr(float(sigmas[i, 0])), repr(float(sigmas[i, 1]))]
            w.writerow(row)


def read_trajectory_csv(path) -> tuple[Trajectory, np.ndarray | None]:
    """Returns (trajectory, sigmas or None); sigmas hold NaN where absent."""
    ts, poses, speeds, sigmas = [], [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or [h.strip() for h in header[:4]] != ["t", "x", "y", "heading"]:
            raise ValidationError(f"{path}: expected trajectory header t,x,y,heading,...")
        has_speed = len(header) >= 5 and header[4].strip() == "speed"
        has_sigma = len(header) >= 7 and header[-2].strip() == "sigma_x"
        for ln, row in enumerate(r, start=2):
            if not row:
                continue
            try:
                ts.append(float(row[0]))
                poses.append([float(row[1]), float(row[2]), float(row[3])])
                speeds.append(float(row[4]) if has_speed and row[4] != "" else np.nan)
                if has_sigma:
                    sx = float(row[-2]) if row[-2] != "" else np.nan
                    sy = float(row[-1]) if row[-1] != "" else np.nan
                    sigmas.append([sx, sy])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{ln}: bad trajectory row ({exc})") from exc
    traj = Trajectory(np.array(ts), np.array(poses),
                      np.array(speeds) if has_speed else None)
    return traj, (np.array(sigmas) if has_sigma and sigmas else None)
