"""Automatic ground-truth heatmaps from a recorded RTK path.

Every recorded frame gets the RTK track projected into it (pinhole model,
full camera pose from the GNSS-IMU), and a Gaussian ridge of fixed width is
rendered around the projected track at half the image resolution.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ClockSkew, NoVisiblePath
from .geometry import CameraModel, WorldPoint, WorldPose, wrap_angle, world_to_optical

SIGMA_PX = 15.0
LOOKAHEAD_M = 20.0
NEAR_CLIP = 0.01


@dataclass(frozen=True)
class PathPolyline:
    points: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        ts = np.asarray(self.timestamps, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ValueError("points must be (N, 2) or (N, 3)")
        if pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        if len(pts) < 2:
            raise ValueError("a path needs at least two points")
        if ts.shape != (len(pts),) or np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "timestamps", ts)

    @classmethod
    def straight(cls, start: WorldPoint, end: WorldPoint, n: int = 2, t0: float = 0.0, dt: float = 0.1):
        pts = np.linspace(start.as_array(), end.as_array(), n)
        return cls(pts, t0 + dt * np.arange(n))


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    timestamp: float
    camera: CameraModel
    camera_pose: WorldPose


@dataclass
class ProjectedPath:
    """Densified projection of a world path, full image resolution, near to far."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    image_size: tuple[int, int]

    def __len__(self):
        return len(self.u)

    @property
    def uv(self) -> np.ndarray:
        return np.column_stack([self.u, self.v])

    def column_at_rows(self, v_rows: np.ndarray) -> np.ndarray:
        """Interpolated path column at each image row; NaN where not covered."""
        out = np.full(len(v_rows), np.nan)
        for k in range(len(self.u) - 1):
            v0, v1 = self.v[k], self.v[k + 1]
            lo, hi = min(v0, v1), max(v0, v1)
            m = (v_rows >= lo) & (v_rows <= hi) & np.isnan(out)
            if not m.any():
                continue
            if hi - lo < 1e-12:
                out[m] = self.u[k]
            else:
                t = (v_rows[m] - v0) / (v1 - v0)
                out[m] = self.u[k] + t * (self.u[k + 1] - self.u[k])
        return out


@dataclass
class Heatmap:
    """Half-resolution path-preference map; ``values[i, j]`` sits at full-res
    pixel (u, v) = (scale * j, scale * i)."""

    values: np.ndarray
    scale: int = 2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("heatmap must be 2-D")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, scale: int = 2) -> "Heatmap":
        return cls(np.zeros((height, width)), scale)


def heatmap_size(cam: CameraModel) -> tuple[int, int]:
    return math.ceil(cam.width / 2), math.ceil(cam.height / 2)


def _frustum_planes(cam: CameraModel, lookahead: float) -> np.ndarray:
    # rows (a, b, c, d): a*x + b*y + c*z + d >= 0 in the optical frame
    W, H = cam.width - 1e-6, cam.height - 1e-6
    return np.array([
        [0.0, 0.0, 1.0, -NEAR_CLIP],
        [0.0, 0.0, -1.0, lookahead],
        [cam.fx, 0.0, cam.cx, 0.0],
        [-cam.fx, 0.0, W - cam.cx, 0.0],
        [0.0, cam.fy, cam.cy, 0.0],
        [0.0, -cam.fy, H - cam.cy, 0.0],
    ])


def _clip_segment(p0, p1, planes):
    t0, t1 = 0.0, 1.0
    f0 = planes[:, :3] @ p0 + planes[:, 3]
    f1 = planes[:, :3] @ p1 + planes[:, 3]
    for a, b in zip(f0, f1):
        if a < 0 and b < 0:
            return None
        if a < 0:
            t0 = max(t0, a / (a - b))
        elif b < 0:
            t1 = min(t1, a / (a - b))
    if t0 > t1:
        return None
    d = p1 - p0
    return p0 + t0 * d, p0 + t1 * d


def project_path(frame: FrameRecord, path: PathPolyline | np.ndarray, lookahead: float = LOOKAHEAD_M,
                 spacing_px: float = 1.0) -> ProjectedPath:
    """Project the world path into ``frame`` and densify it in the image.

    Segments are clipped to the view frustum and to optical depth
    ``lookahead`` before projection, so only the visible stretch ahead of the
    camera survives. Consecutive output points are at most ``spacing_px``
    apart; depth is interpolated perspective-correctly (1/z linear in pixels).
    """
    cam = frame.camera
    pts = path.points if isinstance(path, PathPolyline) else np.asarray(path, dtype=float)
    q = world_to_optical(frame.camera_pose, pts)
    planes = _frustum_planes(cam, lookahead)
    us, vs, zs = [], [], []
    last = None
    for k in range(len(q) - 1):
        clipped = _clip_segment(q[k], q[k + 1], planes)
        if clipped is None:
            continue
        a, b = clipped
        ua, va = cam.fx * a[0] / a[2] + cam.cx, cam.fy * a[1] / a[2] + cam.cy
        ub, vb = cam.fx * b[0] / b[2] + cam.cx, cam.fy * b[1] / b[2] + cam.cy
        n = max(1, math.ceil(math.hypot(ub - ua, vb - va) / spacing_px))
        s = np.linspace(0.0, 1.0, n + 1)
        u = ua + s * (ub - ua)
        v = va + s * (vb - va)
        z = 1.0 / ((1.0 - s) / a[2] + s / b[2])
        if last is not None and abs(last[0] - u[0]) < 1e-9 and abs(last[1] - v[0]) < 1e-9:
            u, v, z = u[1:], v[1:], z[1:]
        if len(u):
            us.append(u)
            vs.append(v)
            zs.append(z)
            last = (u[-1], v[-1])
    if not us:
        raise NoVisiblePath("no part of the path projects into the image")
    u, v, z = np.concatenate(us), np.concatenate(vs), np.concatenate(zs)
    if z[0] > z[-1]:
        u, v, z = u[::-1], v[::-1], z[::-1]
    return ProjectedPath(u, v, z, (cam.width, cam.height))


def _polyline_vertices(u: np.ndarray, v: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Drop interior points that are collinear with their neighbours."""
    pts = np.column_stack([u, v])
    if len(pts) <= 2:
        return pts
    d = np.diff(pts, axis=0)
    norm = np.hypot(d[:, 0], d[:, 1])
    keep_seg = norm > 1e-12
    pts = np.vstack([pts[0], pts[1:][keep_seg]])
    if len(pts) <= 2:
        return pts
    d = np.diff(pts, axis=0)
    d /= np.hypot(d[:, 0], d[:, 1])[:, None]
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    dot = np.sum(d[:-1] * d[1:], axis=1)
    corner = (np.abs(cross) > tol) | (dot < 0)
    return np.vstack([pts[0], pts[1:-1][corner], pts[-1]])


def render_heatmap(image_path: ProjectedPath, out_size: Optional[tuple[int, int]] = None,
                   sigma: float = SIGMA_PX, truncate: Optional[float] = 5.0, scale: int = 2) -> Heatmap:
    """Gaussian ridge around a projected path.

    ``values[i, j] = exp(-d**2 / (2 sigma**2))`` where ``d`` is the distance,
    in full-resolution pixels, from (scale*j, scale*i) to the path polyline.
    Overlapping contributions combine by max (the nearest point wins), so the
    peak is exactly 1 on the path. Pixels farther than ``truncate * sigma``
    are set to 0; the default 5 sigma is below the 16-bit storage quantum.
    """
    if len(image_path) == 0:
        raise ValueError("cannot render an empty path")
    W, H = image_path.image_size
    w, h = out_size if out_size is not None else (math.ceil(W / scale), math.ceil(H / scale))
    verts = _polyline_vertices(image_path.u, image_path.v)
    if len(verts) == 1:
        verts = np.vstack([verts, verts])
    radius = math.inf if truncate is None else truncate * sigma
    d2 = np.full((h, w), np.inf)
    box = [h, 0, w, 0]  # union of touched windows: i0, i1, j0, j1
    for a, b in zip(verts[:-1], verts[1:]):
        if math.isinf(radius):
            j0, j1, i0, i1 = 0, w, 0, h
        else:
            j0 = max(0, math.floor((min(a[0], b[0]) - radius) / scale))
            j1 = min(w, math.ceil((max(a[0], b[0]) + radius) / scale) + 1)
            i0 = max(0, math.floor((min(a[1], b[1]) - radius) / scale))
            i1 = min(h, math.ceil((max(a[1], b[1]) + radius) / scale) + 1)
            if j0 >= j1 or i0 >= i1:
                continue
        box = [min(box[0], i0), max(box[1], i1), min(box[2], j0), max(box[3], j1)]
        X = scale * np.arange(j0, j1, dtype=float)[None, :]
        Y = scale * np.arange(i0, i1, dtype=float)[:, None]
        ab = b - a
        L2 = ab @ ab
        if L2 > 0:
            t = np.clip(((X - a[0]) * ab[0] + (Y - a[1]) * ab[1]) / L2, 0.0, 1.0)
        else:
            t = 0.0
        dx = X - (a[0] + t * ab[0])
        dy = Y - (a[1] + t * ab[1])
        np.minimum(d2[i0:i1, j0:j1], dx * dx + dy * dy, out=d2[i0:i1, j0:j1])
    values = np.zeros((h, w))
    i0, i1, j0, j1 = box
    if i0 < i1 and j0 < j1:
        sub = d2[i0:i1, j0:j1]
        vals = np.exp(sub * (-0.5 / (sigma * sigma)))
        if not math.isinf(radius):
            vals[sub > radius * radius] = 0.0
        values[i0:i1, j0:j1] = vals
    return Heatmap(values, scale)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class AnnotationConfig:
    lookahead: float = LOOKAHEAD_M
    sigma: float = SIGMA_PX
    truncate: Optional[float] = 5.0


@dataclass
class ManifestRecord:
    frame_id: str
    pose: dict
    camera: dict
    heatmap_file: Optional[str] = None
    skip_reason: Optional[str] = None

    def to_json(self) -> str:
        d = {"frame_id": self.frame_id, "pose": self.pose, "camera": self.camera,
             "heatmap_file": self.heatmap_file}
        if self.skip_reason is not None:
            d["skip_reason"] = self.skip_reason
        return json.dumps(d, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    heatmaps: dict[str, Heatmap] = field(default_factory=dict)
    config: AnnotationConfig = field(default_factory=AnnotationConfig)

    @property
    def annotated(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.skip_reason is None]

    @property
    def skipped(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.skip_reason is not None]


def interpolate_pose(t: float, times: np.ndarray, poses: Sequence[WorldPose]) -> WorldPose:
    """Linear pose interpolation between bracketing GNSS-IMU samples."""
    k = int(np.searchsorted(times, t, side="right")) - 1
    k = min(max(k, 0), len(times) - 2)
    t0, t1 = times[k], times[k + 1]
    s = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    a, b = poses[k], poses[k + 1]
    pos = (1 - s) * a.origin + s * b.origin

    def lerp_angle(x, y):
        return x + s * wrap_angle(y - x)

    return WorldPose(WorldPoint.from_array(pos), lerp_angle(a.heading, b.heading),
                     lerp_angle(a.pitch, b.pitch), lerp_angle(a.roll, b.roll))


def associate_poses(frame_stamps: Sequence[tuple[str, float]], pose_times: Sequence[float],
                    robot_poses: Sequence[WorldPose], camera: CameraModel) -> list[FrameRecord]:
    """Attach an interpolated camera pose to every (frame_id, timestamp)."""
    times = np.asarray(pose_times, dtype=float)
    out = []
    for fid, t in frame_stamps:
        if not times[0] <= t <= times[-1]:
            raise ClockSkew(f"frame {fid} at t={t:.3f}s is outside the pose log "
                            f"[{times[0]:.3f}, {times[-1]:.3f}]", frame_id=fid)
        robot = interpolate_pose(t, times, robot_poses)
        out.append(FrameRecord(str(fid), float(t), camera, camera.world_pose(robot)))
    return out


def build_dataset(frames: Sequence[FrameRecord], path: PathPolyline,
                  config: AnnotationConfig = AnnotationConfig()) -> DatasetManifest:
    """One heatmap per frame that sees the path; the rest go to the skip list.

    Raises :class:`ClockSkew` for a frame whose timestamp is not bracketed by
    the path's timestamps.
    """
    t0, t1 = path.timestamps[0], path.timestamps[-1]
    manifest = DatasetManifest(config=config)
    for fr in sorted(frames, key=lambda f: f.frame_id):
        if not t0 <= fr.timestamp <= t1:
            raise ClockSkew(f"frame {fr.frame_id} at t={fr.timestamp:.3f}s is outside the path "
                            f"span [{t0:.3f}, {t1:.3f}]", frame_id=fr.frame_id)
        rec = ManifestRecord(fr.frame_id, fr.camera_pose.to_dict(), fr.camera.to_dict())
        try:
            proj = project_path(fr, path, config.lookahead)
        except NoVisiblePath as exc:
            rec.skip_reason = f"NoVisiblePath: {exc}"
            manifest.records.append(rec)
            continue
        manifest.heatmaps[fr.frame_id] = render_heatmap(proj, sigma=config.sigma, truncate=config.truncate)
        rec.heatmap_file = f"heatmaps/{fr.frame_id}.png"
        manifest.records.append(rec)
    return manifest


def save_heatmap_png(h: Heatmap, path) -> None:
    from PIL import Image

    data = np.round(h.values * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def load_heatmap_png(path, scale: int = 2) -> Heatmap:
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im).astype(np.float64)
    return Heatmap(data / 65535.0, scale)


def write_dataset(manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    for rec in manifest.annotated:
        save_heatmap_png(manifest.heatmaps[rec.frame_id], out / rec.heatmap_file)
    with open(out / "manifest.jsonl", "w") as f:
        for rec in manifest.records:
            f.write(rec.to_json() + "\n")
    meta = {"sigma": manifest.config.sigma, "lookahead": manifest.config.lookahead,
            "truncate": manifest.config.truncate, "annotated": len(manifest.annotated),
            "skipped": len(manifest.skipped), "heatmap_encoding": "png16:round(65535*h)"}
    with open(out / "metadata.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return out / "manifest.jsonl"


# ---------------------------------------------------------------------------
# recorded-log files
#
#   <log>/frames.csv   frame_id,timestamp
#   <log>/poses.csv    time,east,north,up,heading,pitch,roll   (GNSS-IMU, robot body)
#   <log>/camera.json  CameraModel.to_dict()
#   <path>.csv         time,east,north,up                      (RTK track)

POSE_COLUMNS = ("time", "east", "north", "up", "heading", "pitch", "roll")


def _read_csv(path, columns: Sequence[str]) -> list[list[str]]:
    import csv

    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != tuple(columns):
        raise ValueError(f"{path}: expected header {','.join(columns)}")
    return rows[1:]


def write_recording(out_dir, frame_stamps: Sequence[tuple[str, float]], pose_times: Sequence[float],
                    poses: Sequence[WorldPose], camera: CameraModel) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["frame_id,timestamp"] + [f"{fid},{t:.6f}" for fid, t in frame_stamps]
    (out / "frames.csv").write_text("\n".join(lines) + "\n")
    lines = [",".join(POSE_COLUMNS)]
    for t, p in zip(pose_times, poses):
        q = p.position
        lines.append(",".join(f"{x:.6f}" for x in (t, q.east, q.north, q.up, p.heading, p.pitch, p.roll)))
    (out / "poses.csv").write_text("\n".join(lines) + "\n")
    (out / "camera.json").write_text(json.dumps(camera.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def read_recording(log_dir) -> tuple[list, np.ndarray, list, CameraModel]:
    """(frame stamps, pose times, robot poses, camera) from a recorded log directory."""
    d = Path(log_dir)
    frames = [(r[0], float(r[1])) for r in _read_csv(d / "frames.csv", ("frame_id", "timestamp"))]
    rows = np.array(_read_csv(d / "poses.csv", POSE_COLUMNS), dtype=float).reshape(-1, len(POSE_COLUMNS))
    poses = [WorldPose(WorldPoint(*r[1:4]), r[4], r[5], r[6]) for r in rows]
    camera = CameraModel.from_dict(json.loads((d / "camera.json").read_text()))
    return frames, rows[:, 0], poses, camera


def write_path_csv(path: PathPolyline, out) -> None:
    lines = ["time,east,north,up"]
    for t, p in zip(path.timestamps, path.points):
        lines.append(f"{t:.6f},{p[0]:.6f},{p[1]:.6f},{p[2]:.6f}")
    Path(out).write_text("\n".join(lines) + "\n")


def read_path_csv(path) -> PathPolyline:
    rows = np.array(_read_csv(path, ("time", "east", "north", "up")), dtype=float).reshape(-1, 4)
    return PathPolyline(rows[:, 1:], rows[:, 0])
