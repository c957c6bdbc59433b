"""World description shared by the simulator and the synthetic perception."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import WorldPoint, WorldPose, euler_zyx, wrap_angle

# Heading bins (deg) and the per-bin average deviation of the trained detector.
HEADING_BIN_EDGES = (-25.0, -15.0, -5.0, 5.0, 15.0, 25.0)
HEADING_BIN_STDS = (2.36, 2.22, 1.10, 1.57, 8.05)

PRESETS = {
    # name: (row length m, slope deg, row azimuth rad)
    "CRT": (120.0, 10.0, 0.0),
    "VG3": (90.0, 10.0, 0.0),
    "RN": (70.0, 0.0, math.pi / 2),
}


@dataclass(frozen=True)
class NoiseSpec:
    rtk_std: float = 0.02
    coarse_std: float = 2.0
    coarse_accuracy: float = 5.0
    heading_bin_stds: tuple = HEADING_BIN_STDS
    lateral_std: float = 0.03
    depth_std: float = 0.05
    dropout_prob: float = 0.02
    seed: Optional[int] = None

    def __post_init__(self):
        stds = (self.rtk_std, self.coarse_std, self.lateral_std, self.depth_std, *self.heading_bin_stds)
        if any(s < 0 for s in stds):
            raise ValueError("noise standard deviations must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if len(self.heading_bin_stds) != len(HEADING_BIN_EDGES) - 1:
            raise ValueError("need one std per heading bin")
        object.__setattr__(self, "heading_bin_stds", tuple(float(s) for s in self.heading_bin_stds))

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(rtk_std=0.0, coarse_std=0.0, heading_bin_stds=(0.0,) * 5,
                   lateral_std=0.0, depth_std=0.0, dropout_prob=0.0)

    def with_seed(self, seed) -> "NoiseSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class RobotState:
    pose: WorldPose
    v: float = 0.0
    omega: float = 0.0
    time: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.pose.position.east, self.pose.position.north])

    @property
    def heading(self) -> float:
        return self.pose.heading


@dataclass(frozen=True)
class VineyardLayout:
    """Vine rows as straight wall segments on a planar (possibly sloped) field.

    The robot drives in the lanes between neighbouring vine rows; lane ``i`` is
    the centreline between ``rows[i]`` and ``rows[i + 1]``.
    """

    rows: tuple
    row_spacing: float
    slope: float = 0.0
    slope_azimuth: float = 0.0
    name: str = "custom"
    robot_width: float = 0.7
    _segments: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = tuple((WorldPoint(*map(float, _xyz(a))), WorldPoint(*map(float, _xyz(b)))) for a, b in self.rows)
        rows = tuple((self._on_surface(a), self._on_surface(b)) for a, b in rows)
        object.__setattr__(self, "rows", rows)
        if len(rows) < 2:
            raise ValueError("need at least two vine rows to form a lane")
        if self.row_spacing <= self.robot_width:
            raise ValueError("row spacing must exceed the robot width")
        dirs = [math.atan2(b.north - a.north, b.east - a.east) for a, b in rows]
        for d in dirs[1:]:
            diff = abs(wrap_angle(d - dirs[0]))
            if min(diff, math.pi - diff) > math.radians(5.0):
                raise ValueError("vine rows must be near-parallel")
        seg = np.array([[a.east, a.north, b.east, b.north] for a, b in rows])
        object.__setattr__(self, "_segments", seg)

    @classmethod
    def preset(cls, name: str, n_lanes: int = 4, spacing: float = 2.7,
               length: Optional[float] = None, slope_deg: Optional[float] = None) -> "VineyardLayout":
        key = name.upper()
        if key not in PRESETS:
            raise KeyError(f"unknown layout preset {name!r}; choose from {sorted(PRESETS)}")
        plen, pslope, az = PRESETS[key]
        length = plen if length is None else length
        slope = math.radians(pslope if slope_deg is None else slope_deg)
        return cls.grid(n_lanes, length, spacing, azimuth=az, slope=slope, name=key)

    @classmethod
    def grid(cls, n_lanes: int, length: float, spacing: float, azimuth: float = 0.0,
             slope: float = 0.0, origin=(0.0, 0.0), name: str = "custom") -> "VineyardLayout":
        d = np.array([math.cos(azimuth), math.sin(azimuth)])
        left = np.array([-d[1], d[0]])
        o = np.asarray(origin, dtype=float)
        rows = []
        for k in range(n_lanes + 1):
            a = o + (k - 0.5) * spacing * left
            rows.append(((a[0], a[1], 0.0), (a[0] + length * d[0], a[1] + length * d[1], 0.0)))
        return cls(tuple(rows), spacing, slope=slope, slope_azimuth=azimuth, name=name)

    @property
    def n_lanes(self) -> int:
        return len(self.rows) - 1

    @property
    def direction(self) -> float:
        a, b = self.rows[0]
        return math.atan2(b.north - a.north, b.east - a.east)

    @property
    def row_length(self) -> float:
        a, b = self.rows[0]
        return math.hypot(b.east - a.east, b.north - a.north)

    @property
    def wall_segments(self) -> np.ndarray:
        """(R, 4) array of (e0, n0, e1, n1) vine-row segments."""
        return self._segments

    def height_at(self, east, north):
        g = math.tan(self.slope)
        return g * (np.asarray(east) * math.cos(self.slope_azimuth) + np.asarray(north) * math.sin(self.slope_azimuth))

    def _on_surface(self, p: WorldPoint) -> WorldPoint:
        return WorldPoint(p.east, p.north, float(self.height_at(p.east, p.north)))

    def lane(self, i: int) -> tuple[WorldPoint, WorldPoint]:
        """Centreline of lane ``i`` as (start, end), following the row direction."""
        (a0, b0), (a1, b1) = self.rows[i], self.rows[i + 1]
        s = self._on_surface(WorldPoint((a0.east + a1.east) / 2, (a0.north + a1.north) / 2))
        e = self._on_surface(WorldPoint((b0.east + b1.east) / 2, (b0.north + b1.north) / 2))
        return s, e

    def lane_lateral_offsets(self, east: float, north: float) -> np.ndarray:
        """Signed left-of-direction offsets of a point from every lane centreline."""
        d = self.direction
        left = np.array([-math.sin(d), math.cos(d)])
        out = []
        for i in range(self.n_lanes):
            s, _ = self.lane(i)
            out.append((east - s.east) * left[0] + (north - s.north) * left[1])
        return np.array(out)

    def surface_pose(self, east: float, north: float, heading: float) -> WorldPose:
        """Pose of a vehicle resting on the field plane with the given heading."""
        g = math.tan(self.slope)
        ca, sa = math.cos(self.slope_azimuth), math.sin(self.slope_azimuth)
        normal = np.array([-g * ca, -g * sa, 1.0])
        normal /= np.linalg.norm(normal)
        ch, sh = math.cos(heading), math.sin(heading)
        fwd = np.array([ch, sh, g * (ch * ca + sh * sa)])
        fwd /= np.linalg.norm(fwd)
        left = np.cross(normal, fwd)
        R = np.column_stack([fwd, left, normal])
        yaw, pitch, roll = euler_zyx(R)
        return WorldPose(WorldPoint(east, north, float(self.height_at(east, north))), yaw, pitch, roll)

    def to_dict(self) -> dict:
        return {"name": self.name, "row_spacing": self.row_spacing, "slope": self.slope,
                "slope_azimuth": self.slope_azimuth,
                "rows": [[[a.east, a.north, a.up], [b.east, b.north, b.up]] for a, b in self.rows]}


def _xyz(p):
    if isinstance(p, WorldPoint):
        return (p.east, p.north, p.up)
    p = tuple(p)
    return p if len(p) == 3 else (p[0], p[1], 0.0)
