"""Path following in the bird's-eye view.

The reference line is fitted to BEV path points by total least squares. The
controller regulates the lateral offset of a look-ahead point placed
``lookahead_d`` ahead of the axle. For the unicycle that point obeys

    d/dt y_p = -v sin(e_theta) + d cos(e_theta) omega

so choosing ``omega = (u + v sin(e_theta)) / (d cos(e_theta))`` makes it a pure
integrator driven by the PD term ``u``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateFit

MIN_DT = 0.01
MIN_SPEED_FACTOR = 0.2


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 1.2
    kd: float = 0.3
    lookahead_d: float = 2.0
    v_nominal: float = 0.8
    v_max: float = 1.0
    omega_max: float = 1.0

    def __post_init__(self):
        if self.kp <= 0 or self.kd < 0 or self.lookahead_d <= 0:
            raise ValueError("need kp > 0, kd >= 0, lookahead_d > 0")
        if self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("velocity limits must be positive")


@dataclass(frozen=True)
class VelocityCommand:
    v: float = 0.0
    omega: float = 0.0

    @classmethod
    def stop(cls) -> "VelocityCommand":
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class BevPath:
    points: np.ndarray
    e_y: float
    e_theta: float
    residual_rms: float
    station: float
    extrapolation: float = 0.0
    confidence: float = 1.0


def fit_line(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Total-least-squares line: (centroid, unit direction with +x, rms residual)."""
    pts = np.asarray(points, dtype=float)
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    if len(s) < 1 or s[0] < 1e-9:
        raise DegenerateFit("points are coincident")
    d = vt[0]
    if d[0] < 0:
        d = -d
    rms = float(s[1] / math.sqrt(len(pts))) if len(s) > 1 else 0.0
    return c, d, rms


def fit_reference(points: np.ndarray, lookahead_d: float, min_points: int = 3,
                  min_span: float = 1.0) -> BevPath:
    """Fit the BEV reference and read off the errors at ``x_forward = lookahead_d``.

    ``e_y`` is the signed lateral offset of the fitted line there (left
    positive) and ``e_theta`` the line's angle relative to the robot heading.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < min_points:
        raise DegenerateFit(f"need {min_points} points, got {len(pts)}")
    if np.ptp(pts[:, 0]) < min_span:
        raise DegenerateFit(f"points span {np.ptp(pts[:, 0]):.2f} m forward, need {min_span}")
    c, d, rms = fit_line(pts)
    if abs(d[0]) < 1e-6:
        raise DegenerateFit("fitted line is perpendicular to the heading")
    e_theta = math.atan2(d[1], d[0])
    e_y = c[1] + (lookahead_d - c[0]) * d[1] / d[0]
    return BevPath(pts, float(e_y), float(e_theta), rms, lookahead_d)


def extend_back_path(points: np.ndarray, lookahead_d: float, min_points: int = 3,
                     min_span: float = 1.0) -> BevPath:
    """Extrapolate a rear-camera path (robot frame, x < 0) to the forward station.

    Confidence decays with the distance from the nearest measured point to the
    look-ahead station, since any heading error grows linearly over it.
    """
    ref = fit_reference(points, lookahead_d, min_points, min_span)
    extrap = float(lookahead_d - np.max(ref.points[:, 0]))
    conf = 1.0 / (1.0 + max(extrap, 0.0) / lookahead_d)
    return BevPath(ref.points, ref.e_y, ref.e_theta, ref.residual_rms, lookahead_d, extrap, conf)


def compute_command(e_y: float, e_theta: float, e_y_prev: float, e_theta_prev: float, dt: float,
                    gains: ControllerGains) -> VelocityCommand:
    """PD on the look-ahead point's lateral offset with feedback linearisation."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dt = max(dt, MIN_DT)
    d = gains.lookahead_d
    c = math.cos(e_theta)
    v = gains.v_nominal * max(c, MIN_SPEED_FACTOR)
    v = max(-gains.v_max, min(gains.v_max, v))
    lat = e_y * c
    lat_prev = e_y_prev * math.cos(e_theta_prev)
    u = gains.kp * lat + gains.kd * (lat - lat_prev) / dt
    omega = (u + v * math.sin(e_theta)) / (d * max(c, MIN_SPEED_FACTOR))
    omega = max(-gains.omega_max, min(gains.omega_max, omega))
    return VelocityCommand(v, omega)


class PathFollower:
    """Stateful wrapper: remembers the previous errors and handles lost detections.

    On a lost detection the last command is held for ``hold_time`` seconds,
    after which the robot stops.
    """

    def __init__(self, gains: ControllerGains = ControllerGains(), hold_time: float = 0.5):
        self.gains = gains
        self.hold_time = hold_time
        self.reset()

    def reset(self):
        self._prev: Optional[tuple[float, float, float]] = None
        self.last_command = VelocityCommand.stop()
        self.lost_since: Optional[float] = None

    def update(self, ref: BevPath, t: float) -> VelocityCommand:
        if self._prev is None:
            e_y_prev, e_th_prev, dt = ref.e_y, ref.e_theta, 1.0
        else:
            e_y_prev, e_th_prev, t_prev = self._prev
            dt = max(t - t_prev, MIN_DT)
        cmd = compute_command(ref.e_y, ref.e_theta, e_y_prev, e_th_prev, dt, self.gains)
        self._prev = (ref.e_y, ref.e_theta, t)
        self.last_command = cmd
        self.lost_since = None
        return cmd

    def lost(self, t: float) -> VelocityCommand:
        if self.lost_since is None:
            self.lost_since = t
        if t - self.lost_since <= self.hold_time:
            return self.last_command
        self._prev = None
        return VelocityCommand.stop()

    def lost_for(self, t: float) -> float:
        return 0.0 if self.lost_since is None else t - self.lost_since
