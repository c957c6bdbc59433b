"""Row tracking / row switching state machine.

Phases cycle 0 -> 1 -> 2 -> 3 -> 4 -> 0 once per lane change:

0  ROW_TRACKING  follow the lane with the front camera until the coarse GPS
                 puts the exit endpoint inside the trigger radius
1  END_APPROACH  follow with the back camera while watching the side depth
                 for the end of the vine row
2  TURN_OUT      in-place turn until the side camera centres the finished lane
3  TRAVERSE      drive across the headland until the side camera centres the
                 next lane
4  TURN_IN       in-place turn until the front camera centres the new lane

Any phase may drop to FAULT; the mission ends in COMPLETED after the last lane.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from statistics import median
from typing import Optional

import numpy as np

from .annotation import Heatmap
from .control import ControllerGains, PathFollower, VelocityCommand, extend_back_path, fit_reference
from .errors import DegenerateFit, EmptyPath, InsufficientDepth, NoPath, StaleGps
from .geometry import CameraModel, WorldPoint, ground_homography, image_path_to_bev, wrap_angle
from .perception import (DepthProfile, detect_row_end, extract_path, path_centering_offset, robust_depth,
                         with_ground_depth)
from .world import VineyardLayout

END_THRESHOLD_M = 12.0


class NavPhase(IntEnum):
    FAULT = -1
    ROW_TRACKING = 0
    END_APPROACH = 1
    TURN_OUT = 2
    TRAVERSE = 3
    TURN_IN = 4
    COMPLETED = 5


NEXT_PHASE = {
    NavPhase.ROW_TRACKING: {NavPhase.END_APPROACH},
    NavPhase.END_APPROACH: {NavPhase.TURN_OUT, NavPhase.COMPLETED},
    NavPhase.TURN_OUT: {NavPhase.TRAVERSE},
    NavPhase.TRAVERSE: {NavPhase.TURN_IN},
    NavPhase.TURN_IN: {NavPhase.ROW_TRACKING},
    NavPhase.FAULT: {NavPhase.ROW_TRACKING},
    NavPhase.COMPLETED: set(),
}


def transition_allowed(a: int, b: int) -> bool:
    if b == NavPhase.FAULT:
        return a != NavPhase.COMPLETED
    return NavPhase(b) in NEXT_PHASE[NavPhase(a)]


@dataclass(frozen=True)
class CoarseGpsFix:
    position: WorldPoint
    accuracy: float
    timestamp: float
    kind: str = "coarse"

    def __post_init__(self):
        if self.accuracy <= 0:
            raise ValueError("accuracy must be positive")


@dataclass(frozen=True)
class MissionPlan:
    """Ordered lanes with their pre-surveyed entry/exit endpoints (ENU)."""

    lanes: tuple
    directions: tuple
    entries: tuple
    exits: tuple
    row_spacing: float
    end_threshold: float = END_THRESHOLD_M

    def __post_init__(self):
        n = len(self.lanes)
        if n == 0 or not (len(self.directions) == len(self.entries) == len(self.exits) == n):
            raise ValueError("lanes, directions and endpoints must have equal, non-zero length")
        for a, b in zip(self.lanes[:-1], self.lanes[1:]):
            if abs(a - b) != 1:
                raise ValueError("consecutive lanes in a plan must be adjacent")

    @classmethod
    def serpentine(cls, layout: VineyardLayout, lanes=None, first_direction: int = 1,
                   end_threshold: float = END_THRESHOLD_M) -> "MissionPlan":
        lanes = tuple(range(layout.n_lanes)) if lanes is None else tuple(lanes)
        dirs, entries, exits = [], [], []
        for k, lane in enumerate(lanes):
            d = first_direction if k % 2 == 0 else -first_direction
            s, e = layout.lane(lane)
            dirs.append(d)
            entries.append(s if d > 0 else e)
            exits.append(e if d > 0 else s)
        return cls(lanes, tuple(dirs), tuple(entries), tuple(exits), layout.row_spacing, end_threshold)

    def __len__(self):
        return len(self.lanes)

    def lane_heading(self, k: int) -> float:
        a, b = self.entries[k], self.exits[k]
        return math.atan2(b.north - a.north, b.east - a.east)

    def turn_direction(self, k: int) -> int:
        """+1 for a left turn from lane ``k`` to lane ``k + 1``, -1 for right."""
        h = self.lane_heading(k)
        a, b = self.exits[k], self.entries[k + 1]
        cross = math.cos(h) * (b.north - a.north) - math.sin(h) * (b.east - a.east)
        return 1 if cross > 0 else -1

    def to_dict(self) -> dict:
        return {
            "lanes": list(self.lanes), "directions": list(self.directions),
            "entries": [[p.east, p.north, p.up] for p in self.entries],
            "exits": [[p.east, p.north, p.up] for p in self.exits],
            "row_spacing": self.row_spacing, "end_threshold": self.end_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MissionPlan":
        return cls(tuple(int(x) for x in d["lanes"]), tuple(int(x) for x in d["directions"]),
                   tuple(WorldPoint(*map(float, p)) for p in d["entries"]),
                   tuple(WorldPoint(*map(float, p)) for p in d["exits"]),
                   float(d["row_spacing"]), float(d.get("end_threshold", END_THRESHOLD_M)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MissionPlan":
        p = Path(path)
        if p.suffix == ".toml":
            from .config import load_toml
            d = load_toml(p)
            d = d.get("plan", d)
        else:
            d = json.loads(p.read_text())
        return cls.from_dict(d)


def check_end_trigger(fix: CoarseGpsFix, plan: MissionPlan, lane_k: int, threshold: Optional[float] = None,
                      now: Optional[float] = None, max_age: float = 2.0) -> bool:
    """Coarse-GPS distance to the lane's exit endpoint is below ``threshold``."""
    if now is not None and now - fix.timestamp > max_age:
        raise StaleGps(f"fix is {now - fix.timestamp:.1f} s old")
    threshold = plan.end_threshold if threshold is None else threshold
    end = plan.exits[lane_k]
    return math.hypot(fix.position.east - end.east, fix.position.north - end.north) < threshold


class EndTrigger:
    """Latches on the first positive check; re-armed only by :meth:`rearm`."""

    def __init__(self, plan: MissionPlan, threshold: Optional[float] = None, max_age: float = 2.0):
        self.plan = plan
        self.threshold = threshold
        self.max_age = max_age
        self.fired = False

    def update(self, fix: CoarseGpsFix, lane_k: int, now: Optional[float] = None) -> bool:
        if not self.fired:
            self.fired = check_end_trigger(fix, self.plan, lane_k, self.threshold, now, self.max_age)
        return self.fired

    def rearm(self):
        self.fired = False


@dataclass(frozen=True)
class NavigatorConfig:
    end_threshold: float = END_THRESHOLD_M
    omega_turn: float = 0.5
    turn_gain: float = 3.0
    min_turn_rate: float = 0.05
    center_band: float = 0.05
    center_window: int = 8
    turn_timeout_factor: float = 1.5
    v_traverse: float = 0.4
    traverse_overrun: float = 2.0
    arm_fraction: float = 0.5
    wrong_row_tolerance: float = 0.4
    row_end_overrun: float = 20.0
    detection_timeout: float = 3.0
    hold_time: float = 0.5
    gps_max_age: float = 2.0
    jump_ratio: float = 1.8
    depth_n_min: int = 20
    baseline_min: int = 5
    max_range: float = 20.0
    min_confidence: float = 0.2
    k_min: int = 40

    @property
    def turn_timeout(self) -> float:
        return self.turn_timeout_factor * (math.pi / 2) / self.omega_turn


@dataclass
class SensorFrame:
    """Latest-wins snapshot of every stream the navigator asked for.

    A heatmap entry of ``None`` means the provider reported the detection as
    invalid for this frame.
    """

    time: float
    heatmaps: dict = field(default_factory=dict)
    depth: Optional[DepthProfile] = None
    gps: Optional[CoarseGpsFix] = None
    odometry: float = 0.0


@dataclass(frozen=True)
class NavEvent:
    time: float
    phase: int
    event: str
    reason: str = ""
    lane: int = -1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepResult:
    command: VelocityCommand
    phase: NavPhase
    events: list


class Navigator:
    def __init__(self, plan: MissionPlan, cameras: dict, gains: ControllerGains = ControllerGains(),
                 config: NavigatorConfig = NavigatorConfig(), start_time: float = 0.0):
        self.plan = plan
        self.cameras: dict[str, CameraModel] = cameras
        self.gains = gains
        self.config = config
        self.homographies = {k: ground_homography(c) for k, c in cameras.items()}
        self.follower = PathFollower(gains, config.hold_time)
        self.trigger = EndTrigger(plan, config.end_threshold, config.gps_max_age)
        self.phase = NavPhase.ROW_TRACKING
        self.lane_k = 0
        self.lanes_completed = 0
        self.events: list[NavEvent] = []
        self._step_events: list[NavEvent] = []
        self._enter_phase(NavPhase.ROW_TRACKING, start_time, 0.0, emit=False)
        self._last_fix_time: Optional[float] = None
        self._stale_reported = False

    # -- stream requirements -------------------------------------------------

    @property
    def turn_dir(self) -> int:
        if self.lane_k + 1 < len(self.plan):
            return self.plan.turn_direction(self.lane_k)
        return 1

    @property
    def side_camera(self) -> str:
        return "left" if self.turn_dir > 0 else "right"

    def required_cameras(self) -> tuple:
        p = self.phase
        if p == NavPhase.ROW_TRACKING or p == NavPhase.TURN_IN:
            return ("front",)
        if p == NavPhase.END_APPROACH:
            return ("back",)
        if p in (NavPhase.TURN_OUT, NavPhase.TRAVERSE):
            return (self.side_camera,)
        return ()

    def depth_camera(self) -> Optional[str]:
        return self.side_camera if self.phase == NavPhase.END_APPROACH else None

    @property
    def active(self) -> bool:
        return self.phase not in (NavPhase.FAULT, NavPhase.COMPLETED)

    # -- bookkeeping -----------------------------------------------------------

    def _event(self, t: float, name: str, reason: str = "") -> NavEvent:
        ev = NavEvent(round(t, 6), int(self.phase), name, reason, int(self.plan.lanes[self.lane_k]))
        self.events.append(ev)
        self._step_events.append(ev)
        return ev

    def _enter_phase(self, phase: NavPhase, t: float, odometry: float, emit: bool = True):
        if emit:
            if not transition_allowed(self.phase, phase):
                raise RuntimeError(f"illegal transition {self.phase!r} -> {phase!r}")
            prev = self.phase
            self.phase = phase
            self._event(t, "PhaseChange", f"{int(prev)}->{int(phase)}")
        else:
            self.phase = phase
        self._phase_t0 = t
        self._phase_odo0 = odometry
        self._offsets: list[float] = []
        self._baseline: list[float] = []
        self._armed = False
        self._loss_reported = False
        self.follower.reset()

    def _fault(self, t: float, odometry: float, reason: str):
        self._event(t, "Fault", reason)
        self._enter_phase(NavPhase.FAULT, t, odometry)

    def resume(self, lane_k: int, t: float, odometry: float = 0.0):
        """Continue row tracking on plan lane ``lane_k`` after an intervention."""
        if self.phase != NavPhase.FAULT:
            raise RuntimeError("resume is only valid from FAULT")
        self._step_events = []
        self.lane_k = lane_k
        self.trigger.rearm()
        self._enter_phase(NavPhase.ROW_TRACKING, t, odometry)
        self._event(t, "Resumed", f"lane {self.plan.lanes[lane_k]}")
        return self._step_events

    # -- perception helpers ------------------------------------------------------

    def _image_path(self, sensors: SensorFrame, cam: str):
        h: Optional[Heatmap] = sensors.heatmaps.get(cam)
        if h is None:
            return None
        try:
            return extract_path(h, self.config.min_confidence, self.config.k_min, cam)
        except NoPath:
            return None

    def _reference(self, sensors: SensorFrame, cam: str):
        path = self._image_path(sensors, cam)
        if path is None:
            return None
        try:
            pts = image_path_to_bev(path, self.homographies[cam], self.config.max_range)
            if cam == "back":
                return extend_back_path(pts, self.gains.lookahead_d)
            return fit_reference(pts, self.gains.lookahead_d)
        except (EmptyPath, DegenerateFit):
            return None

    def _offset(self, sensors: SensorFrame, cam: str) -> Optional[float]:
        path = self._image_path(sensors, cam)
        if path is None:
            return None
        path = with_ground_depth(path, self.homographies[cam])
        return path_centering_offset(path, sensors.heatmaps[cam].width)

    def offset_to_angle(self, offset: float, cam: str, heatmap_width: int, scale: int = 2) -> float:
        f = self.cameras[cam].fx / scale
        return math.atan(offset * (heatmap_width / 2.0) / f)

    def _track(self, sensors: SensorFrame, cam: str) -> VelocityCommand:
        ref = self._reference(sensors, cam)
        t = sensors.time
        if ref is not None:
            return self.follower.update(ref, t)
        cmd = self.follower.lost(t)
        lost = self.follower.lost_for(t)
        if lost > self.config.hold_time and not self._loss_reported:
            self._loss_reported = True
            self._event(t, "DetectionLost", f"{cam} camera")
        if lost > self.config.detection_timeout:
            self._fault(t, sensors.odometry, "DetectionLost")
            return VelocityCommand.stop()
        if lost <= self.config.hold_time:
            self._loss_reported = False
        return cmd

    def _centered(self) -> bool:
        w = self.config.center_window
        return len(self._offsets) >= w and abs(float(np.mean(self._offsets[-w:]))) < self.config.center_band

    def _turn(self, sensors: SensorFrame, cam: str, direction: int) -> tuple[VelocityCommand, bool]:
        """In-place rotation; servo on the centring offset once the lane is in view."""
        cfg = self.config
        off = self._offset(sensors, cam)
        if off is None:
            return VelocityCommand(0.0, direction * cfg.omega_turn), False
        self._offsets.append(off)
        if self._centered():
            return VelocityCommand(0.0, 0.0), True
        ang = self.offset_to_angle(off, cam, sensors.heatmaps[cam].width)
        w = -cfg.turn_gain * ang
        w = math.copysign(min(cfg.omega_turn, max(cfg.min_turn_rate, abs(w))), w)
        return VelocityCommand(0.0, w), False

    # -- main step -----------------------------------------------------------------

    def step(self, sensors: SensorFrame) -> StepResult:
        self._step_events = []
        t = sensors.time
        odo = sensors.odometry
        cfg = self.config
        p = self.phase
        cmd = VelocityCommand.stop()

        if p == NavPhase.ROW_TRACKING:
            cmd = self._track(sensors, "front")
            if self.phase == NavPhase.ROW_TRACKING and sensors.gps is not None:
                try:
                    fired = self.trigger.update(sensors.gps, self.lane_k, now=t)
                    self._stale_reported = False
                except StaleGps as exc:
                    fired = False
                    if not self._stale_reported:
                        self._stale_reported = True
                        self._event(t, "StaleGps", str(exc))
                if fired:
                    self._event(t, "EndTrigger", f"within {self.trigger.threshold or self.plan.end_threshold:g} m")
                    self._enter_phase(NavPhase.END_APPROACH, t, odo)

        elif p == NavPhase.END_APPROACH:
            cmd = self._track(sensors, "back")
            if self.phase == NavPhase.END_APPROACH:
                if self._row_end(sensors):
                    self.lanes_completed += 1
                    self._event(t, "RowEnd", f"side depth jump on {self.side_camera}")
                    if self.lane_k + 1 >= len(self.plan):
                        self._enter_phase(NavPhase.COMPLETED, t, odo)
                        self._event(t, "Completed", f"{self.lanes_completed} lanes")
                        cmd = VelocityCommand.stop()
                    else:
                        self._enter_phase(NavPhase.TURN_OUT, t, odo)
                        cmd = VelocityCommand.stop()
                elif odo - self._phase_odo0 > cfg.row_end_overrun:
                    self._fault(t, odo, "RowEndTimeout")
                    cmd = VelocityCommand.stop()

        elif p in (NavPhase.TURN_OUT, NavPhase.TURN_IN):
            cam = self.side_camera if p == NavPhase.TURN_OUT else "front"
            cmd, done = self._turn(sensors, cam, self.turn_dir)
            if done:
                if p == NavPhase.TURN_OUT:
                    self._enter_phase(NavPhase.TRAVERSE, t, odo)
                else:
                    self.lane_k += 1
                    self.trigger.rearm()
                    self._enter_phase(NavPhase.ROW_TRACKING, t, odo)
                    self._event(t, "RowEntered", f"lane {self.plan.lanes[self.lane_k]}")
            elif t - self._phase_t0 > cfg.turn_timeout:
                self._fault(t, odo, "TurnTimeout")
                cmd = VelocityCommand.stop()

        elif p == NavPhase.TRAVERSE:
            cmd = self._traverse(sensors)

        return StepResult(cmd, self.phase, self._step_events)

    def _row_end(self, sensors: SensorFrame) -> bool:
        cfg = self.config
        prof = sensors.depth
        if prof is None:
            return False
        try:
            level = robust_depth(prof, cfg.depth_n_min)
        except InsufficientDepth:
            return False
        if len(self._baseline) >= cfg.baseline_min:
            base = median(self._baseline)
            if detect_row_end(prof, base, cfg.jump_ratio, cfg.depth_n_min):
                return True
        self._baseline.append(level)
        return False

    def _traverse(self, sensors: SensorFrame) -> VelocityCommand:
        cfg = self.config
        t, odo = sensors.time, sensors.odometry
        travelled = odo - self._phase_odo0
        spacing = self.plan.row_spacing
        if travelled > cfg.traverse_overrun * spacing:
            self._fault(t, odo, "TraverseOverrun")
            return VelocityCommand.stop()
        if not self._armed and travelled >= cfg.arm_fraction * spacing:
            self._armed = True
            self._offsets = []
        v = cfg.v_traverse
        off = self._offset(sensors, self.side_camera)
        if self._armed and off is not None:
            self._offsets.append(off)
            if self._centered():
                lo, hi = (1 - cfg.wrong_row_tolerance) * spacing, (1 + cfg.wrong_row_tolerance) * spacing
                if not lo <= travelled <= hi:
                    self._fault(t, odo, f"WrongRow: travelled {travelled:.2f} m, expected {spacing:.2f} m")
                    return VelocityCommand.stop()
                self._enter_phase(NavPhase.TURN_IN, t, odo)
                return VelocityCommand.stop()
            v = cfg.v_traverse * min(1.0, max(0.25, abs(off) / (4 * cfg.center_band)))
        return VelocityCommand(v, 0.0)
