"""Frames, pinhole projection and the ground-plane homography.

Conventions:
    world   east-north-up (ENU), meters
    robot   x-forward, y-left, z-up
    camera  body frame uses the robot convention; the optical frame is
            x-right, y-down, z-forward
    image   u to the right, v downward, pixels

Rotations are composed as ``Rz(heading) @ Ry(pitch) @ Rx(roll)`` and map body
vectors into the parent frame. A positive pitch tips the nose down (right-hand
rule about the left-pointing y axis).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DegenerateView, EmptyPath, NotVisible

EPS_DEPTH = 1e-3

# body (FLU) -> optical (RDF)
BODY_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def rotation_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_zyx` for |pitch| < pi/2."""
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


@dataclass(frozen=True)
class WorldPoint:
    east: float
    north: float
    up: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.east, self.north, self.up)):
            raise ValueError(f"non-finite WorldPoint {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up], dtype=float)

    @classmethod
    def from_array(cls, a) -> "WorldPoint":
        return cls(float(a[0]), float(a[1]), float(a[2]) if len(a) > 2 else 0.0)


@dataclass(frozen=True)
class WorldPose:
    position: WorldPoint
    heading: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))
        if not (-math.pi / 2 < self.pitch < math.pi / 2 and -math.pi / 2 < self.roll < math.pi / 2):
            raise ValueError("pitch and roll must lie in (-pi/2, pi/2)")

    @cached_property
    def rotation(self) -> np.ndarray:
        return rotation_zyx(self.heading, self.pitch, self.roll)

    @cached_property
    def origin(self) -> np.ndarray:
        return self.position.as_array()

    def compose(self, child: "WorldPose") -> "WorldPose":
        """Pose of ``child`` (expressed in this pose's frame) in the parent frame."""
        R = self.rotation @ child.rotation
        t = self.origin + self.rotation @ child.origin
        yaw, pitch, roll = euler_zyx(R)
        return WorldPose(WorldPoint.from_array(t), yaw, pitch, roll)

    def to_dict(self) -> dict:
        p = self.position
        return {"east": p.east, "north": p.north, "up": p.up,
                "heading": self.heading, "pitch": self.pitch, "roll": self.roll}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldPose":
        return cls(WorldPoint(d["east"], d["north"], d.get("up", 0.0)),
                   d.get("heading", 0.0), d.get("pitch", 0.0), d.get("roll", 0.0))


@dataclass(frozen=True)
class Mount:
    """Rigid camera mount: translation in the robot frame plus yaw/pitch/roll."""

    x: float = 0.0
    y: float = 0.0
    z: float = 1.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def pose(self) -> WorldPose:
        return WorldPose(WorldPoint(self.x, self.y, self.z), self.yaw, self.pitch, self.roll)


@dataclass(frozen=True)
class ImagePoint:
    u: float
    v: float


@dataclass(frozen=True)
class GroundPoint:
    x_forward: float
    y_left: float


@dataclass(frozen=True)
class CameraModel:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    mount: Mount = field(default_factory=lambda: Mount(0.3, 0.0, 1.0, 0.0, math.radians(10.0), 0.0))
    name: str = "front"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @cached_property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))

    def world_pose(self, robot_pose: WorldPose) -> WorldPose:
        return robot_pose.compose(self.mount.pose())

    def to_dict(self) -> dict:
        m = self.mount
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "mount": {"x": m.x, "y": m.y, "z": m.z, "yaw": m.yaw, "pitch": m.pitch, "roll": m.roll}}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        d = dict(d)
        mount = Mount(**d.pop("mount", {}))
        return cls(mount=mount, **d)


def default_cameras(height: float = 1.0, pitch_deg: float = 10.0) -> dict[str, CameraModel]:
    """Four-camera rig: front, back, left and right, all pitched down."""
    p = math.radians(pitch_deg)
    mounts = {
        "front": Mount(0.3, 0.0, height, 0.0, p, 0.0),
        "back": Mount(-0.3, 0.0, height, math.pi, p, 0.0),
        "left": Mount(0.0, 0.25, height, math.pi / 2, p, 0.0),
        "right": Mount(0.0, -0.25, height, -math.pi / 2, p, 0.0),
    }
    return {k: CameraModel(mount=m, name=k) for k, m in mounts.items()}


def world_to_optical(camera_pose: WorldPose, pts: np.ndarray) -> np.ndarray:
    """(N, 3) parent-frame points -> (N, 3) optical-frame points."""
    R = BODY_TO_OPTICAL @ camera_pose.rotation.T
    return (np.asarray(pts, dtype=float) - camera_pose.origin) @ R.T


def projection_matrix(cam: CameraModel, camera_pose: WorldPose) -> np.ndarray:
    """The 3x4 matrix ``K [R|t]`` taking homogeneous parent-frame points to pixels."""
    R = BODY_TO_OPTICAL @ camera_pose.rotation.T
    t = -R @ camera_pose.origin
    return cam.K @ np.hstack([R, t[:, None]])


def in_image(cam: CameraModel, u, v):
    return (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def project_point(cam: CameraModel, camera_pose: WorldPose, p: WorldPoint) -> ImagePoint:
    """Pinhole projection of one world point; raises :class:`NotVisible`."""
    x, y, z = world_to_optical(camera_pose, p.as_array()[None, :])[0]
    if z <= EPS_DEPTH:
        raise NotVisible(f"depth {z:.4f} m at or behind the camera plane")
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not in_image(cam, u, v):
        raise NotVisible(f"({u:.1f}, {v:.1f}) outside the image")
    return ImagePoint(float(u), float(v))


def project_points(cam: CameraModel, camera_pose: WorldPose, pts: np.ndarray):
    """Vectorised projection without visibility filtering. Returns (uv, depth)."""
    q = world_to_optical(camera_pose, pts)
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([cam.fx * q[:, 0] / z + cam.cx, cam.fy * q[:, 1] / z + cam.cy])
    return uv, z


@dataclass(frozen=True)
class GroundHomography:
    """Plane-induced homography between pixels and the local ground plane z=0.

    ``ground_to_image`` maps homogeneous (x_forward, y_left, 1) to pixels and
    ``image_to_ground`` is its inverse. The camera centre used to build it is
    kept for range computations.
    """

    ground_to_image: np.ndarray
    image_to_ground: np.ndarray
    camera_xy: tuple[float, float]

    def to_ground(self, uv: np.ndarray, max_range: Optional[float] = None) -> np.ndarray:
        """Map (N, 2) pixels to (N, 2) ground points; NaN rows where the pixel
        ray misses the ground ahead or lands beyond ``max_range``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        h = np.column_stack([uv, np.ones(len(uv))]) @ self.image_to_ground.T
        w = h[:, 2]
        out = np.full((len(uv), 2), np.nan)
        ok = w > 1e-12
        out[ok] = h[ok, :2] / w[ok, None]
        if max_range is not None:
            far = np.hypot(out[:, 0], out[:, 1]) > max_range
            out[far] = np.nan
        return out

    def to_image(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        h = np.column_stack([xy, np.ones(len(xy))]) @ self.ground_to_image.T
        return h[:, :2] / h[:, 2:3]


def ground_homography(cam: CameraModel, camera_pose: Optional[WorldPose] = None,
                      max_condition: float = 1e12) -> GroundHomography:
    """Homography for a flat ground plane from intrinsics and the camera pose.

    ``camera_pose`` is expressed in the robot-local ground frame (z=0 is the
    ground under the robot); it defaults to the camera mount.
    """
    if camera_pose is None:
        camera_pose = cam.mount.pose()
    P = projection_matrix(cam, camera_pose)
    H = P[:, [0, 1, 3]]
    if camera_pose.origin[2] <= 0:
        raise DegenerateView("camera must be above the ground plane")
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > max_condition:
        raise DegenerateView(f"plane-induced homography is singular (cond={cond:.3g})")
    # homogeneous weight of inv(H) @ (u, v, 1) equals 1/depth, so pixels whose
    # ray meets the ground in front of the camera come out positive
    Hinv = np.linalg.inv(H)
    return GroundHomography(H, Hinv, (float(camera_pose.origin[0]), float(camera_pose.origin[1])))


def image_path_to_bev(path, hom: GroundHomography, max_range: float) -> np.ndarray:
    """Map an extracted image path into robot-local ground points.

    Returns an (N, 2) array of (x_forward, y_left) ordered by increasing
    |x_forward|. Points beyond ``max_range`` (or above the horizon) are
    dropped; raises :class:`EmptyPath` when nothing survives.
    """
    uv = np.column_stack([path.cols * path.scale, path.rows * path.scale]).astype(float)
    xy = hom.to_ground(uv, max_range=max_range)
    xy = xy[np.isfinite(xy[:, 0])]
    if len(xy) == 0:
        raise EmptyPath("no path point maps onto the ground within range")
    return xy[np.argsort(np.abs(xy[:, 0]), kind="stable")]
