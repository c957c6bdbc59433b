"""Trajectory metrics against the surveyed lane lines.

Positional deviation is the signed distance of an RTK fix to its lane
segment (left of travel positive). Heading deviation is the angle between
consecutive 1 Hz fixes and the lane direction. Samples within the end radius
of the lane's exit endpoint count as *exiting*, within the radius of its
entry endpoint as *entering*, and everything else as *row tracking*. Only
in-row phases (row tracking and end approach) are scored; the headland
manoeuvre has no lane line to deviate from.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import StationarySegment
from .geometry import default_cameras, wrap_angle
from .navigator import MissionPlan, NavPhase
from .perception import camera_heading_error
from .simulator import TrialLog
from .world import VineyardLayout

REGIONS = ("row_tracking", "exiting", "entering")
REGION_TITLES = {"row_tracking": "Row tracking", "exiting": "Exiting", "entering": "Entering"}
STATIONARY_M = 0.05
SCORED_PHASES = (int(NavPhase.ROW_TRACKING), int(NavPhase.END_APPROACH))


def positional_deviation(p, start, end) -> float:
    """Signed distance from ``p`` to segment ``start -> end``; positive on the left."""
    px, py = _xy(p)
    ax, ay = _xy(start)
    bx, by = _xy(end)
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0.0:
        raise ValueError("degenerate segment")
    s = min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    qx, qy = ax + s * dx, ay + s * dy
    dist = math.hypot(px - qx, py - qy)
    side = dx * (py - ay) - dy * (px - ax)
    return dist if side >= 0 else -dist


def positional_deviations(points: np.ndarray, start, end) -> np.ndarray:
    pts = np.asarray(points, dtype=float)[:, :2]
    a = np.asarray(_xy(start), dtype=float)
    d = np.asarray(_xy(end), dtype=float) - a
    rel = pts - a
    s = np.clip(rel @ d / (d @ d), 0.0, 1.0)
    dist = np.hypot(*(rel - s[:, None] * d).T)
    side = d[0] * rel[:, 1] - d[1] * rel[:, 0]
    return np.where(side >= 0, dist, -dist)


def heading_deviation(p0, p1, row_direction: float, min_step: float = STATIONARY_M) -> float:
    """Travel direction p0 -> p1 relative to the row, degrees in [-180, 180]."""
    x0, y0 = _xy(p0)
    x1, y1 = _xy(p1)
    step = math.hypot(x1 - x0, y1 - y0)
    if step < min_step:
        raise StationarySegment(f"moved {step:.3f} m between fixes")
    return math.degrees(wrap_angle(math.atan2(y1 - y0, x1 - x0) - row_direction))


def downsample(times: np.ndarray, hz: float = 1.0) -> np.ndarray:
    """Index of the first sample in every 1/hz bucket."""
    t = np.asarray(times, dtype=float)
    if len(t) == 0:
        return np.zeros(0, dtype=int)
    bucket = np.floor(t * hz + 1e-6).astype(np.int64)
    keep = np.ones(len(t), dtype=bool)
    keep[1:] = bucket[1:] != bucket[:-1]
    return np.nonzero(keep)[0]


def classify_region(p, entry, exit_, radius: float = 12.0) -> str:
    px, py = _xy(p)
    if math.hypot(px - exit_.east, py - exit_.north) <= radius:
        return "exiting"
    if math.hypot(px - entry.east, py - entry.north) <= radius:
        return "entering"
    return "row_tracking"


@dataclass(frozen=True)
class DeviationSample:
    time: float
    positional_dev: float
    heading_dev: float  # NaN where no heading sample applies
    region: str
    lane: int


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float
    max: float
    n: int

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}, {self.max:.{digits}f}"


def describe(values) -> Optional[Stat]:
    """Mean and std of magnitudes plus the signed value of largest magnitude."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return None
    a = np.abs(v)
    return Stat(float(a.mean()), float(a.std()), float(v[np.argmax(a)]), len(v))


@dataclass
class TrialSummary:
    positional: dict
    heading: dict
    intervention_count: int = 0
    lanes_completed: int = 0
    completed: bool = False
    label: str = ""

    def cell(self, metric: str, region: str) -> str:
        st = getattr(self, metric).get(region)
        return "-" if st is None else st.format()

    def as_row(self) -> list[str]:
        return ([self.label, str(self.intervention_count)] + [self.cell("positional", r) for r in REGIONS]
                + [self.cell("heading", r) for r in REGIONS])


TABLE_HEADER = (["trial", "interventions"] + [f"positional {REGION_TITLES[r]} (m)" for r in REGIONS]
                + [f"heading {REGION_TITLES[r]} (deg)" for r in REGIONS])


def render_table(summaries: Sequence[TrialSummary]) -> str:
    rows = [TABLE_HEADER] + [s.as_row() for s in summaries]
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def summary_csv(summaries: Sequence[TrialSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "interventions", "lanes_completed", "completed", "metric", "region",
                "mean", "std", "max", "n"])
    for s in summaries:
        for metric in ("positional", "heading"):
            for r in REGIONS:
                st = getattr(s, metric).get(r)
                if st is None:
                    continue
                w.writerow([s.label, s.intervention_count, s.lanes_completed, int(s.completed), metric, r,
                            f"{st.mean:.6f}", f"{st.std:.6f}", f"{st.max:.6f}", st.n])
    return buf.getvalue()


def _plan_index(lanes: np.ndarray, plan: MissionPlan) -> np.ndarray:
    """Map the logged lane id to the plan position, walking the plan in order."""
    idx = np.empty(len(lanes), dtype=int)
    k = 0
    for i, lane in enumerate(lanes):
        if plan.lanes[k] != lane:
            nxt = [j for j in range(k, len(plan)) if plan.lanes[j] == lane]
            if not nxt:
                nxt = [j for j in range(len(plan)) if plan.lanes[j] == lane]
            if not nxt:
                raise ValueError(f"lane {lane} is not in the plan")
            k = nxt[0]
        idx[i] = k
    return idx


def deviation_samples(log: TrialLog, plan: MissionPlan, downsample_hz: float = 1.0,
                      radius: Optional[float] = None) -> list[DeviationSample]:
    """Per-fix positional samples; heading attached to the 1 Hz subset."""
    radius = plan.end_threshold if radius is None else radius
    c = log.columns
    ok = np.isfinite(c["rtk_e"]) & np.isin(c["phase"], SCORED_PHASES)
    t = c["time"][ok]
    pts = np.column_stack([c["rtk_e"][ok], c["rtk_n"][ok]])
    k_idx = _plan_index(c["lane"][ok], plan)

    pos = np.empty(len(t))
    for k in np.unique(k_idx):
        m = k_idx == k
        pos[m] = positional_deviations(pts[m], plan.entries[k], plan.exits[k])

    head = np.full(len(t), np.nan)
    # heading comes from the full 1 Hz RTK track so gaps never bridge phases
    all_ok = np.isfinite(c["rtk_e"])
    all_t = c["time"][all_ok]
    ds = np.nonzero(all_ok)[0][downsample(all_t, downsample_hz)]
    row_of = {r: i for i, r in enumerate(np.nonzero(ok)[0])}
    period = 1.0 / downsample_hz
    for a, b in zip(ds[:-1], ds[1:]):
        if a not in row_of or b not in row_of:
            continue
        ia, ib = row_of[a], row_of[b]
        if k_idx[ia] != k_idx[ib] or abs((t[ib] - t[ia]) - period) > 0.5 * period:
            continue
        try:
            head[ib] = heading_deviation(pts[ia], pts[ib], plan.lane_heading(k_idx[ib]))
        except StationarySegment:
            pass

    out = []
    for i in range(len(t)):
        k = k_idx[i]
        region = classify_region(pts[i], plan.entries[k], plan.exits[k], radius)
        out.append(DeviationSample(float(t[i]), float(pos[i]), float(head[i]), region, int(plan.lanes[k])))
    return out


def summarize(log: TrialLog, plan: MissionPlan, layout: Optional[VineyardLayout] = None,
              downsample_hz: float = 1.0, radius: Optional[float] = None, label: str = "") -> TrialSummary:
    """Per-region statistics of both deviations; absent regions are omitted."""
    samples = deviation_samples(log, plan, downsample_hz, radius)
    positional, heading = {}, {}
    for r in REGIONS:
        sel = [s for s in samples if s.region == r]
        p = describe([s.positional_dev for s in sel])
        h = describe([s.heading_dev for s in sel])
        if p is not None:
            positional[r] = p
        if h is not None:
            heading[r] = h
    return TrialSummary(positional, heading, log.interventions, int(log.meta.get("lanes_completed", 0)),
                        log.completed, label)


def samples_csv(samples: Sequence[DeviationSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "lane", "region", "positional_dev", "heading_dev"])
    for s in samples:
        w.writerow([f"{s.time:.6f}", s.lane, s.region, f"{s.positional_dev:.6f}",
                    "" if math.isnan(s.heading_dev) else f"{s.heading_dev:.6f}"])
    return buf.getvalue()


@dataclass
class SwitchGeometry:
    """Ground-truth alignment at the end of each in-place turn (degrees)."""

    turn_out: list = field(default_factory=list)  # side camera axis vs lane line
    turn_in: list = field(default_factory=list)   # robot heading vs new lane direction


def switch_geometry(log: TrialLog, plan: MissionPlan, layout: VineyardLayout,
                    cameras: Optional[dict] = None) -> SwitchGeometry:
    cameras = cameras or default_cameras()
    c = log.columns
    ph = c["phase"]
    k_idx = _plan_index(c["lane"], plan)
    out = SwitchGeometry()
    for i in range(1, len(ph)):
        a, b = ph[i - 1], ph[i]
        if a == NavPhase.TURN_OUT and b == NavPhase.TRAVERSE:
            k = k_idx[i]
            side = "left" if plan.turn_direction(k) > 0 else "right"
            pose = layout.surface_pose(c["true_e"][i], c["true_n"][i], c["heading"][i])
            out.turn_out.append(camera_heading_error(layout, cameras[side].world_pose(pose).heading))
        elif a == NavPhase.TURN_IN and b == NavPhase.ROW_TRACKING:
            k = k_idx[i]
            out.turn_in.append(math.degrees(wrap_angle(c["heading"][i] - plan.lane_heading(k))))
    return out


def _xy(p):
    if hasattr(p, "east"):
        return float(p.east), float(p.north)
    return float(p[0]), float(p[1])
