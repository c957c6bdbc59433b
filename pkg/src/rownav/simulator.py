"""Deterministic kinematic vineyard simulator.

Fixed base step of 1/30 s: perception and control tick every second step
(15 Hz), both GPS receivers every third (10 Hz). All randomness is drawn from
child generators spawned off one seeded generator, so a (config, seed) pair
reproduces a trial bit for bit.

The robot moves on the horizontal projection of the field; the slope only
sets its height, pitch and roll (and so the camera poses).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotation import FrameRecord, Heatmap, heatmap_size, project_path, render_heatmap
from .control import ControllerGains, VelocityCommand
from .errors import DetectionInvalid, NoVisiblePath, SchemaError
from .geometry import CameraModel, WorldPoint, WorldPose, default_cameras, wrap_angle
from .navigator import CoarseGpsFix, MissionPlan, NavEvent, NavigatorConfig, NavPhase, Navigator, SensorFrame
from .perception import DepthProfile, SyntheticHeatmapProvider
from .world import NoiseSpec, RobotState, VineyardLayout

BASE_HZ = 30
PERCEPTION_EVERY = 2
GPS_EVERY = 3
DEPTH_MAX_RANGE = 10.0
DEPTH_RAYS = 64
SCHEMA = "rownav-trajectory v1"
COLUMNS = ("time", "true_e", "true_n", "heading", "v_cmd", "omega_cmd", "phase", "lane",
           "rtk_e", "rtk_n", "coarse_e", "coarse_n")

__all__ = ["VineyardLayout", "RobotState", "NoiseSpec", "integrate", "sample_gps", "sample_side_depth",
           "ScriptEvent", "TrialSettings", "TrialLog", "run_trial"]


def integrate(state: RobotState, cmd: VelocityCommand, dt: float,
              layout: Optional[VineyardLayout] = None) -> RobotState:
    """Exact unicycle step: a circular arc for omega != 0, a line otherwise."""
    if not 0.0 < dt <= 0.2:
        raise ValueError("dt must lie in (0, 0.2]")
    v, w = cmd.v, cmd.omega
    if v == 0.0 and w == 0.0:
        return RobotState(state.pose, 0.0, 0.0, state.time + dt)
    p = state.pose.position
    th = state.pose.heading
    if abs(w) < 1e-12:
        e = p.east + v * dt * math.cos(th)
        n = p.north + v * dt * math.sin(th)
    else:
        e = p.east + v / w * (math.sin(th + w * dt) - math.sin(th))
        n = p.north - v / w * (math.cos(th + w * dt) - math.cos(th))
    th = wrap_angle(th + w * dt)
    if layout is not None:
        pose = layout.surface_pose(e, n, th)
    else:
        pose = WorldPose(WorldPoint(e, n, p.up), th, state.pose.pitch, state.pose.roll)
    return RobotState(pose, v, w, state.time + dt)


def sample_gps(state: RobotState, kind: str, noise: NoiseSpec, rng: np.random.Generator) -> CoarseGpsFix:
    """Position fix with isotropic Gaussian horizontal noise."""
    if kind == "rtk":
        std, acc = noise.rtk_std, max(noise.rtk_std, 0.01)
    elif kind == "coarse":
        std, acc = noise.coarse_std, noise.coarse_accuracy
    else:
        raise ValueError(f"unknown GPS kind {kind!r}")
    p = state.pose.position
    de, dn = rng.normal(0.0, std, 2) if std > 0 else (0.0, 0.0)
    return CoarseGpsFix(WorldPoint(p.east + de, p.north + dn, p.up), acc, state.time, kind)


def _ray_cast(origin: np.ndarray, dirs: np.ndarray, walls: np.ndarray, max_range: float) -> np.ndarray:
    a = walls[:, :2]
    ab = walls[:, 2:] - a
    # solve origin + s*dir = a + u*ab for every (ray, wall) pair
    denom = dirs[:, 0:1] * ab[None, :, 1] - dirs[:, 1:2] * ab[None, :, 0]
    ao = a[None, :, :] - origin[None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ao[..., 0] * ab[None, :, 1] - ao[..., 1] * ab[None, :, 0]) / denom
        u = (ao[..., 0] * dirs[:, 1:2] - ao[..., 1] * dirs[:, 0:1]) / denom
    hit = (np.abs(denom) > 1e-12) & (s > 0) & (u >= 0) & (u <= 1)
    s = np.where(hit, s, np.inf)
    return np.minimum(s.min(axis=1), max_range)


def sample_side_depth(state: RobotState, layout: VineyardLayout, cam: CameraModel, noise: NoiseSpec,
                      rng: Optional[np.random.Generator], n_rays: int = DEPTH_RAYS,
                      max_range: float = DEPTH_MAX_RANGE) -> DepthProfile:
    """Horizontal ray cast from the side camera against the vine rows as walls."""
    cp = cam.world_pose(state.pose)
    origin = np.array([cp.position.east, cp.position.north])
    half = cam.hfov / 2.0
    bearings = np.linspace(-half, half, n_rays)
    ang = cp.heading + bearings
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    depth = _ray_cast(origin, dirs, layout.wall_segments, max_range)
    if rng is not None:
        hit = depth < max_range
        if noise.depth_std > 0:
            jitter = rng.normal(0.0, noise.depth_std, n_rays)
            depth = np.where(hit, np.clip(depth + jitter, 0.05, max_range), depth)
        if noise.dropout_prob > 0:
            drop = rng.random(n_rays) < noise.dropout_prob
            depth = np.where(drop, np.nan, depth)
    return DepthProfile(bearings, depth, cam.name)


@dataclass(frozen=True)
class ScriptEvent:
    """Scripted perturbation active for ``t0 <= t < t1``.

    kinds:
        heading_override    replace the command with (v, omega)
        perception_dropout  blank heatmaps (optionally one camera)
        noise_boost         scale perception noise by ``factor`` (optionally
                            only within ``radius`` of ``center``)
        phantom_row         a spurious row straight along the camera axis
        depth_override      side depth reads ``value`` everywhere
        gps_outage          no coarse GPS fixes

    ``phase`` restricts the event to a navigator phase and ``occurrence`` to
    the n-th (1-based) entry into that phase.
    """

    kind: str
    t0: float = 0.0
    t1: float = math.inf
    phase: Optional[int] = None
    occurrence: Optional[int] = None
    camera: Optional[str] = None
    v: Optional[float] = None
    omega: float = 0.0
    factor: float = 1.0
    value: float = 0.0
    center: Optional[tuple] = None
    radius: float = 0.0

    KINDS = ("heading_override", "perception_dropout", "noise_boost", "phantom_row", "depth_override",
             "gps_outage")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown script kind {self.kind!r}")

    def active(self, t: float, phase: int, occurrences: dict, xy=None, camera: Optional[str] = None) -> bool:
        if not self.t0 <= t < self.t1:
            return False
        if self.phase is not None:
            if phase != self.phase:
                return False
            if self.occurrence is not None and occurrences.get(self.phase, 0) != self.occurrence:
                return False
        if self.camera is not None and camera is not None and camera != self.camera:
            return False
        if self.center is not None and xy is not None:
            if math.hypot(xy[0] - self.center[0], xy[1] - self.center[1]) > self.radius:
                return False
        return True


@dataclass(frozen=True)
class TrialSettings:
    intervene: bool = True
    max_time: Optional[float] = None
    start_offset: float = 0.0
    start_heading_deg: float = 0.0
    start_station: float = 0.0


@dataclass
class TrialLog:
    columns: dict
    events: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.columns["time"])

    @property
    def interventions(self) -> int:
        return sum(1 for e in self.events if e.event == "Intervention")

    @property
    def faults(self) -> list:
        return [e for e in self.events if e.event == "Fault"]

    @property
    def completed(self) -> bool:
        return bool(self.meta.get("completed"))

    def phase_sequence(self) -> list[int]:
        seq = []
        for ph in self.columns["phase"]:
            ph = int(ph)
            if not seq or seq[-1] != ph:
                seq.append(ph)
        return seq

    # -- persistence ----------------------------------------------------------

    def trajectory_csv(self) -> str:
        lines = [f"# {SCHEMA}", ",".join(COLUMNS)]
        cols = [self.columns[c] for c in COLUMNS]
        for row in zip(*cols):
            out = []
            for name, val in zip(COLUMNS, row):
                if name in ("phase", "lane"):
                    out.append(str(int(val)))
                elif isinstance(val, float) and math.isnan(val):
                    out.append("")
                else:
                    out.append(f"{val:.6f}")
            lines.append(",".join(out))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trajectory.csv").write_text(self.trajectory_csv())
        (out / "events.jsonl").write_text("".join(e.to_json() + "\n" for e in self.events))
        (out / "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def read(cls, path) -> "TrialLog":
        """Load from a trial directory or a trajectory CSV (events/meta read if beside it)."""
        p = Path(path)
        traj = p / "trajectory.csv" if p.is_dir() else p
        cols = read_trajectory_csv(traj)
        events = []
        ev_path = traj.parent / "events.jsonl"
        if ev_path.exists():
            for line in ev_path.read_text().splitlines():
                if line.strip():
                    events.append(NavEvent(**json.loads(line)))
        meta_path = traj.parent / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(cols, events, meta)


def read_trajectory_csv(path) -> dict:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {SCHEMA}":
        raise SchemaError(f"{path}: missing '# {SCHEMA}' header")
    if len(lines) < 2:
        raise SchemaError(f"{path}: no column header")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise SchemaError(f"{path}: unexpected columns {header}")
    if not text.endswith("\n"):
        raise SchemaError(f"{path}: truncated (no trailing newline)")
    data = {c: [] for c in COLUMNS}
    for k, row in enumerate(reader, start=3):
        if len(row) != len(COLUMNS):
            raise SchemaError(f"{path}:{k}: expected {len(COLUMNS)} fields, got {len(row)}")
        try:
            for name, val in zip(COLUMNS, row):
                if name in ("phase", "lane"):
                    data[name].append(int(val))
                else:
                    data[name].append(float(val) if val != "" else math.nan)
        except ValueError as exc:
            raise SchemaError(f"{path}:{k}: {exc}") from exc
    return {c: np.array(v, dtype=int if c in ("phase", "lane") else float) for c, v in data.items()}


# ---------------------------------------------------------------------------


def start_state(layout: VineyardLayout, plan: MissionPlan, settings: TrialSettings, lane_k: int = 0) -> RobotState:
    entry = plan.entries[lane_k]
    h = plan.lane_heading(lane_k)
    e = entry.east + settings.start_station * math.cos(h) - settings.start_offset * math.sin(h)
    n = entry.north + settings.start_station * math.sin(h) + settings.start_offset * math.cos(h)
    return RobotState(layout.surface_pose(e, n, h + math.radians(settings.start_heading_deg)))


def _phantom_heatmap(state: RobotState, cam: CameraModel, layout: VineyardLayout) -> Heatmap:
    cp = cam.world_pose(state.pose)
    h = cp.heading
    o = np.array([cp.position.east, cp.position.north])
    pts = np.array([o, o + 30.0 * np.array([math.cos(h), math.sin(h)])])
    line = np.column_stack([pts, layout.height_at(pts[:, 0], pts[:, 1])])
    w, hh = heatmap_size(cam)
    try:
        proj = project_path(FrameRecord("phantom", state.time, cam, cp), line, 20.0)
    except NoVisiblePath:
        return Heatmap.blank(w, hh)
    return render_heatmap(proj, (w, hh))


def run_trial(layout: VineyardLayout, plan: MissionPlan, noise: NoiseSpec = NoiseSpec(),
              gains: ControllerGains = ControllerGains(), script: Sequence[ScriptEvent] = (),
              seed: int = 0, nav_config: NavigatorConfig = NavigatorConfig(),
              settings: TrialSettings = TrialSettings(), cameras: Optional[dict] = None) -> TrialLog:
    """Run one mission from the first lane entry to completion, abort or timeout."""
    cameras = cameras or default_cameras()
    root = np.random.default_rng(seed if noise.seed is None else noise.seed)
    g_coarse, g_rtk, g_depth, *g_cams = root.spawn(3 + len(cameras))
    providers = {name: SyntheticHeatmapProvider(layout, cam, noise, rng=g)
                 for (name, cam), g in zip(sorted(cameras.items()), g_cams)}
    nav = Navigator(plan, cameras, gains, nav_config)
    state = start_state(layout, plan, settings)
    dt = 1.0 / BASE_HZ
    max_time = settings.max_time
    if max_time is None:
        max_time = 2.0 * len(plan) * layout.row_length / gains.v_nominal + 120.0 * len(plan)

    cols = {c: [] for c in COLUMNS}
    events: list[NavEvent] = []
    cmd = VelocityCommand.stop()
    odometry = 0.0
    last_coarse: Optional[CoarseGpsFix] = None
    occurrences = {int(NavPhase.ROW_TRACKING): 1}
    completed = aborted = False
    k = 0
    while True:
        t = k / BASE_HZ
        state = RobotState(state.pose, state.v, state.omega, t)
        xy = (state.pose.position.east, state.pose.position.north)
        phase = int(nav.phase)
        active = [s for s in script if s.active(t, phase, occurrences, xy)]

        rtk = coarse = None
        if k % GPS_EVERY == 0:
            rtk = sample_gps(state, "rtk", noise, g_rtk)
            c = sample_gps(state, "coarse", noise, g_coarse)
            if not any(s.kind == "gps_outage" for s in active):
                coarse = last_coarse = c

        if k % PERCEPTION_EVERY == 0 and nav.active:
            frame = SensorFrame(t, odometry=odometry, gps=last_coarse)
            boost = 1.0
            for s in active:
                if s.kind == "noise_boost":
                    boost *= s.factor
            for name in nav.required_cameras():
                cam_active = [s for s in active if s.camera in (None, name)]
                if any(s.kind == "perception_dropout" for s in cam_active):
                    frame.heatmaps[name] = Heatmap.blank(*heatmap_size(cameras[name]))
                elif any(s.kind == "phantom_row" for s in cam_active):
                    frame.heatmaps[name] = _phantom_heatmap(state, cameras[name], layout)
                else:
                    try:
                        frame.heatmaps[name] = providers[name].heatmap(state, boost=boost)
                    except DetectionInvalid:
                        frame.heatmaps[name] = None
            dcam = nav.depth_camera()
            if dcam is not None:
                prof = sample_side_depth(state, layout, cameras[dcam], noise, g_depth)
                for s in active:
                    if s.kind == "depth_override":
                        prof = DepthProfile(prof.bearings, np.full_like(prof.depths, s.value), prof.camera)
                frame.depth = prof
            res = nav.step(frame)
            cmd = res.command
            events.extend(res.events)
            for ev in res.events:
                if ev.event == "PhaseChange":
                    newp = int(ev.reason.split("->")[1])
                    occurrences[newp] = occurrences.get(newp, 0) + 1
            if nav.phase == NavPhase.COMPLETED:
                completed = True
            elif nav.phase == NavPhase.FAULT:
                fault = res.events[[e.event for e in res.events].index("Fault")]
                if not settings.intervene:
                    aborted = True
                else:
                    state, done, evs = _intervene(nav, fault, state, layout, plan, t, odometry)
                    events.extend(evs)
                    cmd = VelocityCommand.stop()
                    if done:
                        completed = True

        for s in active:
            if s.kind == "heading_override":
                cmd = VelocityCommand(cmd.v if s.v is None else s.v, s.omega)

        lane_idx = plan.lanes[min(nav.lane_k, len(plan) - 1)]
        cols["time"].append(t)
        cols["true_e"].append(state.pose.position.east)
        cols["true_n"].append(state.pose.position.north)
        cols["heading"].append(state.pose.heading)
        cols["v_cmd"].append(cmd.v)
        cols["omega_cmd"].append(cmd.omega)
        cols["phase"].append(int(nav.phase))
        cols["lane"].append(lane_idx)
        cols["rtk_e"].append(rtk.position.east if rtk else math.nan)
        cols["rtk_n"].append(rtk.position.north if rtk else math.nan)
        cols["coarse_e"].append(coarse.position.east if coarse else math.nan)
        cols["coarse_n"].append(coarse.position.north if coarse else math.nan)

        if completed or aborted:
            break
        if t >= max_time:
            events.append(NavEvent(round(t, 6), int(nav.phase), "Timeout", f"{max_time:g} s",
                                   int(lane_idx)))
            aborted = True
            break
        state = integrate(state, cmd, dt, layout)
        odometry += abs(cmd.v) * dt
        k += 1

    columns = {c: np.array(v, dtype=int if c in ("phase", "lane") else float) for c, v in cols.items()}
    meta = {"schema": SCHEMA, "seed": seed, "layout": layout.name, "lanes": len(plan),
            "completed": completed, "aborted": aborted, "lanes_completed": nav.lanes_completed,
            "interventions": sum(1 for e in events if e.event == "Intervention"),
            "faults": sum(1 for e in events if e.event == "Fault"), "duration": round(len(cols["time"]) * dt, 6)}
    return TrialLog(columns, events, meta)


def _intervene(nav: Navigator, fault: NavEvent, state: RobotState, layout: VineyardLayout,
               plan: MissionPlan, t: float, odometry: float):
    """Scripted human override: put the robot where the navigator should have been."""
    evs = [NavEvent(round(t, 6), int(NavPhase.FAULT), "Intervention", fault.reason, fault.lane)]
    k = nav.lane_k
    entry, h = plan.entries[k], plan.lane_heading(k)
    p = state.pose.position
    station = (p.east - entry.east) * math.cos(h) + (p.north - entry.north) * math.sin(h)
    length = math.hypot(plan.exits[k].east - entry.east, plan.exits[k].north - entry.north)
    if fault.phase == NavPhase.ROW_TRACKING and station < length - plan.end_threshold:
        # mid-row: back onto the lane centreline, facing down the lane
        station = max(station, 0.0)
        e, n = entry.east + station * math.cos(h), entry.north + station * math.sin(h)
        new = RobotState(layout.surface_pose(e, n, h), 0.0, 0.0, t)
        evs += nav.resume(k, t, odometry)
        return new, False, evs
    if fault.phase in (NavPhase.ROW_TRACKING, NavPhase.END_APPROACH):
        nav.lanes_completed += 1
    if k + 1 >= len(plan):
        evs.append(NavEvent(round(t, 6), int(NavPhase.FAULT), "Completed", "after intervention", fault.lane))
        return state, True, evs
    entry, h = plan.entries[k + 1], plan.lane_heading(k + 1)
    new = RobotState(layout.surface_pose(entry.east, entry.north, h), 0.0, 0.0, t)
    evs += nav.resume(k + 1, t, odometry)
    return new, False, evs


def record_drive(layout: VineyardLayout, lane: int = 0, n_frames: int = 100, duration: float = 40.0,
                 v: float = 0.8, weave: float = 0.05, weave_period: float = 8.0, noise: NoiseSpec = NoiseSpec.zero(),
                 seed: int = 0, camera: Optional[CameraModel] = None):
    """Manual drive along a lane, recorded the way the annotation pipeline expects.

    Returns (frame stamps at 15 FPS, pose times and robot poses at 10 Hz,
    RTK path polyline, camera). A gentle sinusoidal steering weave stands in
    for the operator's deliberate deviations.
    """
    from .annotation import PathPolyline

    camera = camera or default_cameras()["front"]
    rng = np.random.default_rng(seed)
    s, _ = layout.lane(lane)
    state = RobotState(layout.surface_pose(s.east, s.north, layout.direction))
    dt = 1.0 / BASE_HZ
    frames, times, poses, pts = [], [], [], []
    n_steps = int(round(duration * BASE_HZ))
    for k in range(n_steps + 1):
        t = k / BASE_HZ
        state = RobotState(state.pose, state.v, state.omega, t)
        if k % PERCEPTION_EVERY == 0 and len(frames) < n_frames:
            frames.append((f"frame_{len(frames):05d}", round(t, 6)))
        if k % GPS_EVERY == 0:
            fix = sample_gps(state, "rtk", noise, rng)
            times.append(round(t, 6))
            p = fix.position
            poses.append(WorldPose(p, state.pose.heading, state.pose.pitch, state.pose.roll))
            pts.append([p.east, p.north, float(layout.height_at(p.east, p.north))])
        w = weave * math.sin(2 * math.pi * t / weave_period)
        state = integrate(state, VelocityCommand(v, w), dt, layout)
    path = PathPolyline(np.array(pts), np.array(times))
    return frames, np.array(times), poses, path, camera
