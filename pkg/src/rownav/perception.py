"""Heatmap decoding, the provider interface, and side-view depth cues."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .annotation import Heatmap, FrameRecord, heatmap_size, project_path, render_heatmap
from .errors import DetectionInvalid, InsufficientDepth, NoPath, NoVisiblePath
from .geometry import CameraModel, GroundHomography, WorldPoint, wrap_angle
from .world import HEADING_BIN_EDGES, NoiseSpec, RobotState, VineyardLayout

MIN_CONFIDENCE = 0.2
K_MIN = 40
CENTER_BAND = 0.05
JUMP_RATIO = 1.8
N_MIN_DEPTH = 20
VALID_HEADING_DEG = 25.0
CAMERAS = ("front", "back", "left", "right")


@dataclass(frozen=True)
class ImagePath:
    """One (row, col, confidence) entry per covered heatmap row, rows increasing."""

    rows: np.ndarray
    cols: np.ndarray
    confidence: np.ndarray
    source_camera: str = "front"
    scale: int = 2
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.source_camera not in CAMERAS:
            raise ValueError(f"unknown camera {self.source_camera!r}")
        if len(self.rows) > 1 and np.any(np.diff(self.rows) <= 0):
            raise ValueError("rows must be strictly increasing")

    def __len__(self):
        return len(self.rows)


def extract_path(h: Heatmap, min_confidence: float = MIN_CONFIDENCE, k_min: int = K_MIN,
                 source_camera: str = "front") -> ImagePath:
    """Per-row argmax of the heatmap (ties go to the smallest column)."""
    vals = h.values
    cols = np.argmax(vals, axis=1)
    conf = vals[np.arange(vals.shape[0]), cols]
    keep = conf >= min_confidence
    if min_confidence <= 0.0:
        keep &= conf > 0.0
    if keep.sum() < k_min:
        raise NoPath(f"only {int(keep.sum())} rows above confidence {min_confidence}")
    rows = np.nonzero(keep)[0]
    return ImagePath(rows, cols[keep], conf[keep], source_camera, h.scale)


def with_ground_depth(path: ImagePath, hom: GroundHomography) -> ImagePath:
    """Attach the ground range of each entry, measured from the camera."""
    uv = np.column_stack([path.cols * path.scale, path.rows * path.scale]).astype(float)
    xy = hom.to_ground(uv)
    depth = np.hypot(xy[:, 0] - hom.camera_xy[0], xy[:, 1] - hom.camera_xy[1])
    depth = np.where(np.isfinite(depth), depth, 0.0)
    return replace(path, depth=depth)


def path_centering_offset(path: ImagePath, image_width: float) -> float:
    """Signed offset of the (depth-weighted) mean column from the image centre,
    normalised by half the width; positive means right of centre.

    ``image_width`` is in the path's own pixel units (heatmap columns).
    """
    if len(path) == 0:
        raise ValueError("empty path")
    w = path.depth if path.depth is not None and np.sum(path.depth) > 0 else np.ones(len(path))
    mean_col = float(np.sum(w * path.cols) / np.sum(w))
    half = image_width / 2.0
    return float(np.clip((mean_col - half) / half, -1.0, 1.0))


@dataclass(frozen=True)
class DepthProfile:
    bearings: np.ndarray
    depths: np.ndarray  # NaN marks an invalid sample
    camera: str = "left"

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depths) & (self.depths > 0)


def robust_depth(profile: DepthProfile, n_min: int = N_MIN_DEPTH) -> float:
    ok = profile.valid
    if ok.sum() < n_min:
        raise InsufficientDepth(f"{int(ok.sum())} valid depth samples, need {n_min}")
    return float(np.median(profile.depths[ok]))


def detect_row_end(profile: DepthProfile, baseline: float, jump_ratio: float = JUMP_RATIO,
                   n_min: int = N_MIN_DEPTH) -> bool:
    """True once the side view opens up: median depth above ``baseline * jump_ratio``."""
    return robust_depth(profile, n_min) > baseline * jump_ratio


# ---------------------------------------------------------------------------
# providers


@runtime_checkable
class HeatmapProvider(Protocol):
    """Observation in, half-resolution :class:`Heatmap` out.

    Identical observations must give identical heatmaps; stochastic providers
    take an explicit seed. Real-time budget is one frame at 15 FPS.
    """

    camera_id: str
    resolution: tuple[int, int]

    def heatmap(self, observation) -> Heatmap: ...


def heading_bin(error_deg: float) -> int:
    """Index of the detector heading bin; raises DetectionInvalid outside +-25 deg."""
    if abs(error_deg) > VALID_HEADING_DEG:
        raise DetectionInvalid(f"heading {error_deg:.1f} deg outside the detection window",
                               heading_error_deg=error_deg)
    edges = HEADING_BIN_EDGES
    for k in range(len(edges) - 2):
        if error_deg < edges[k + 1]:
            return k
    return len(edges) - 2


def angular_noise_std(error_deg: float, noise: NoiseSpec) -> float:
    return noise.heading_bin_stds[heading_bin(error_deg)]


@dataclass(frozen=True)
class Perturbation:
    heading_error_deg: float
    angle_deg: float
    lateral_m: float
    lane: int


def camera_heading_error(layout: VineyardLayout, cam_heading: float) -> float:
    """Camera axis relative to the row line, folded to (-90, 90] degrees."""
    e = wrap_angle(cam_heading - layout.direction)
    if e > math.pi / 2:
        e -= math.pi
    elif e <= -math.pi / 2:
        e += math.pi
    return math.degrees(e)


def draw_perturbation(layout: VineyardLayout, robot: RobotState, cam: CameraModel, noise: NoiseSpec,
                      rng: np.random.Generator, boost: float = 1.0) -> Perturbation:
    cam_pose = cam.world_pose(robot.pose)
    err = camera_heading_error(layout, cam_pose.heading)
    std = angular_noise_std(err, noise) * boost
    offsets = layout.lane_lateral_offsets(cam_pose.position.east, cam_pose.position.north)
    lane = int(np.argmin(np.abs(offsets)))
    ang = float(rng.normal(0.0, std)) if std > 0 else 0.0
    lat = float(rng.normal(0.0, noise.lateral_std * boost)) if noise.lateral_std > 0 else 0.0
    return Perturbation(err, ang, lat, lane)


def perturbed_lane(layout: VineyardLayout, lane: int, pivot_en, angle_deg: float, lateral_m: float) -> np.ndarray:
    """Lane centreline rotated about ``pivot_en`` and shifted sideways, on the field surface."""
    s, e = layout.lane(lane)
    pts = np.array([[s.east, s.north], [e.east, e.north]])
    if angle_deg or lateral_m:
        a = math.radians(angle_deg)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        pv = np.asarray(pivot_en, dtype=float)
        pts = (pts - pv) @ R.T + pv
        d = pts[1] - pts[0]
        left = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        pts = pts + lateral_m * left
    z = layout.height_at(pts[:, 0], pts[:, 1])
    return np.column_stack([pts, z])


def synthetic_heatmap(world: VineyardLayout, robot: RobotState, cam: CameraModel, noise: NoiseSpec,
                      seed=None, rng: Optional[np.random.Generator] = None, lookahead: float = 20.0,
                      boost: float = 1.0, out: Optional[list] = None) -> Heatmap:
    """Stand-in for the learned detector, driven by ground-truth geometry.

    The centreline of the lane nearest to the camera is perturbed by a
    heading-bin dependent angular error and a lateral error, projected and
    rendered. Raises :class:`DetectionInvalid` when the camera axis is more
    than 25 deg off the row direction. If ``out`` is a list the drawn
    :class:`Perturbation` is appended to it.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    pert = draw_perturbation(world, robot, cam, noise, rng, boost)
    if out is not None:
        out.append(pert)
    cam_pose = cam.world_pose(robot.pose)
    pivot = (cam_pose.position.east, cam_pose.position.north)
    line = perturbed_lane(world, pert.lane, pivot, pert.angle_deg, pert.lateral_m)
    frame = FrameRecord("synthetic", robot.time, cam, cam_pose)
    w, h = heatmap_size(cam)
    try:
        proj = project_path(frame, line, lookahead)
    except NoVisiblePath:
        return Heatmap.blank(w, h)
    return render_heatmap(proj, (w, h))


@dataclass
class SyntheticHeatmapProvider:
    """Geometry-backed provider for one camera stream with its own generator."""

    layout: VineyardLayout
    camera: CameraModel
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: Optional[int] = None
    rng: Optional[np.random.Generator] = None
    lookahead: float = 20.0
    last_perturbation: Optional[Perturbation] = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def camera_id(self) -> str:
        return self.camera.name

    @property
    def resolution(self) -> tuple[int, int]:
        return heatmap_size(self.camera)

    def heatmap(self, observation: RobotState, boost: float = 1.0) -> Heatmap:
        drawn: list = []
        try:
            return synthetic_heatmap(self.layout, observation, self.camera, self.noise, rng=self.rng,
                                     lookahead=self.lookahead, boost=boost, out=drawn)
        finally:
            self.last_perturbation = drawn[0] if drawn else None
