import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rownav.annotation import (AnnotationConfig, FrameRecord, Heatmap, PathPolyline, ProjectedPath, associate_poses,
                               build_dataset, heatmap_size, load_heatmap_png, project_path, read_path_csv,
                               read_recording, render_heatmap, save_heatmap_png, write_dataset, write_path_csv,
                               write_recording)
from rownav.errors import ClockSkew, NoVisiblePath
from rownav.geometry import BODY_TO_OPTICAL, CameraModel, Mount, WorldPoint, WorldPose
from rownav.perception import extract_path
from rownav.simulator import record_drive

CAM = CameraModel()


def frame_at(e=0.0, n=0.0, heading=0.0, pitch=0.0, roll=0.0, cam=CAM, t=0.0):
    robot = WorldPose(WorldPoint(e, n, 0.0), heading, pitch, roll)
    return FrameRecord("f", t, cam, cam.world_pose(robot))


def straight(length=120.0, y=0.0, n=2):
    pts = np.column_stack([np.linspace(0, length, n), np.full(n, y), np.zeros(n)])
    return PathPolyline(pts, np.arange(n, dtype=float))


def test_dead_ahead_path_projects_through_cx():
    pp = project_path(frame_at(), straight())
    assert np.allclose(pp.u, CAM.cx, atol=1e-9)
    # converges upward toward the horizon as depth grows
    assert np.all(np.diff(pp.depth) > 0)
    assert np.all(np.diff(pp.v) < 0)


def test_path_behind_is_not_visible():
    pts = np.array([[-50.0, 0, 0], [-1.0, 0, 0]])
    with pytest.raises(NoVisiblePath):
        project_path(frame_at(), PathPolyline(pts, [0.0, 1.0]))


def test_far_end_approaches_vanishing_point():
    # lane line 0.3 m to the side, robot yawed 3 deg; 120 m lookahead
    heading = math.radians(3.0)
    fr = frame_at(heading=heading)
    pp = project_path(fr, straight(y=0.3), lookahead=120.0)
    d_opt = BODY_TO_OPTICAL @ fr.camera_pose.rotation.T @ np.array([1.0, 0.0, 0.0])
    vp = CAM.K @ d_opt
    assert abs(pp.u[-1] - vp[0] / vp[2]) < 2.0


def test_projection_is_densified_and_ordered():
    pp = project_path(frame_at(n=0.4, heading=0.1), straight(n=7))
    step = np.hypot(np.diff(pp.u), np.diff(pp.v))
    assert step.max() <= 1.0 + 1e-9
    assert np.all(np.diff(pp.depth) >= 0)
    assert pp.depth.max() <= 20.0 + 1e-9


def test_depth_is_perspective_correct():
    level = CameraModel(mount=Mount(0.0, 0.0, 1.0, 0.0, 0.0, 0.0))
    pp = project_path(frame_at(cam=level), straight())
    # ground point at optical depth z is seen at v = cy + fy * h / z (camera 1 m up, no pitch)
    z_expected = level.fy * 1.0 / (pp.v - level.cy)
    assert np.allclose(pp.depth, z_expected, rtol=1e-9)


def vertical_path(u0, v0=0.0, v1=479.0):
    v = np.linspace(v0, v1, 200)
    return ProjectedPath(np.full_like(v, u0), v, np.linspace(1, 20, 200), (640, 480))


def test_peak_value_on_path():
    h = render_heatmap(vertical_path(200.0))
    assert h.values[:, 100].min() == 1.0
    assert h.values.max() == 1.0


def test_gaussian_value_one_sigma_away():
    # heatmap column 100 sits at full-res u = 200, the path is 15 px to its right
    h = render_heatmap(vertical_path(215.0))
    assert h.values[120, 100] == pytest.approx(math.exp(-0.5), abs=1e-9)
    assert h.values[120, 110] == pytest.approx(math.exp(-0.5 * (5 / 15) ** 2), abs=1e-12)


def test_overlapping_contributions_never_exceed_one():
    v = np.linspace(0, 479, 300)
    u = np.concatenate([np.full(150, 300.0), np.full(150, 304.0)])
    h = render_heatmap(ProjectedPath(u, v, np.ones(300), (640, 480)))
    assert h.values.max() <= 1.0
    assert h.values[100, 151] == pytest.approx(math.exp(-0.5 * (2 / 15) ** 2))


def test_truncated_kernel_matches_full_kernel_to_storage_precision():
    pp = project_path(frame_at(n=0.3, heading=0.05), straight())
    a = render_heatmap(pp).values
    b = render_heatmap(pp, truncate=None).values
    assert np.abs(a - b).max() < 0.5 / 65535


def test_heatmap_size_is_half_resolution():
    assert heatmap_size(CAM) == (320, 240)
    odd = CameraModel(width=641, height=481, cx=320, cy=240)
    assert heatmap_size(odd) == (321, 241)
    assert render_heatmap(vertical_path(100.0)).values.shape == (240, 320)


@given(st.integers(-20, 20), st.integers(-20, 20))
def test_render_translation_equivariant(du, dv):
    v = np.linspace(150.0, 330.0, 200)
    u = 300.0 + 0.4 * (v - 150.0)
    base = render_heatmap(ProjectedPath(u, v, np.ones(200), (640, 480))).values
    moved = render_heatmap(ProjectedPath(u + 2 * du, v + 2 * dv, np.ones(200), (640, 480))).values
    # compare the interior where neither map touches the border
    i0, i1, j0, j1 = 30, 210, 30, 290
    assert np.allclose(moved[i0:i1, j0:j1], base[i0 - dv:i1 - dv, j0 - du:j1 - du], atol=1e-12)


@given(st.floats(-1.0, 1.0), st.floats(-0.35, 0.35), st.floats(-0.2, 0.2), st.floats(-0.05, 0.05))
def test_argmax_recovers_projected_column(lat, yaw, pitch, roll):
    fr = frame_at(n=lat, heading=yaw, pitch=pitch, roll=roll)
    try:
        pp = project_path(fr, straight(y=0.0))
    except NoVisiblePath:
        return
    h = render_heatmap(pp)
    rows = np.arange(h.height)
    truth = pp.column_at_rows(2.0 * rows) / 2.0
    covered = np.isfinite(truth)
    if covered.sum() < 2:
        return
    cols = np.argmax(h.values, axis=1)
    assert np.abs(cols[covered] - truth[covered]).max() <= 1.0


def test_extract_path_agrees_with_render():
    pp = project_path(frame_at(n=0.2, heading=0.05), straight())
    h = render_heatmap(pp)
    path = extract_path(h)
    truth = pp.column_at_rows(2.0 * path.rows) / 2.0
    ok = np.isfinite(truth)
    assert ok.sum() > 40
    assert np.abs(path.cols[ok] - truth[ok]).max() <= 1.0


def test_png_round_trip_is_lossless(tmp_path):
    h = render_heatmap(project_path(frame_at(n=0.1), straight()))
    save_heatmap_png(h, tmp_path / "h.png")
    back = load_heatmap_png(tmp_path / "h.png")
    assert np.array_equal(np.round(back.values * 65535), np.round(h.values * 65535))
    assert np.abs(back.values - h.values).max() <= 0.5 / 65535 + 1e-15


def test_heatmap_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        Heatmap(np.full((4, 4), 1.5))


def test_polyline_validation():
    with pytest.raises(ValueError):
        PathPolyline(np.zeros((1, 3)), [0.0])
    with pytest.raises(ValueError):
        PathPolyline(np.zeros((2, 3)), [1.0, 1.0])


@pytest.fixture(scope="module")
def drive(crt):
    return record_drive(crt)


def test_dataset_from_simulated_drive(drive):
    frames, times, poses, path, cam = drive
    records = associate_poses(frames, times, poses, cam)
    m = build_dataset(records, path)
    assert len(m.annotated) == 100
    assert m.skipped == []


def test_dataset_facing_away_is_all_skipped(drive):
    # the track mirrored behind the start point: every frame faces away from it
    frames, times, poses, path, cam = drive
    start = path.points[0]
    behind = path.points.copy()
    behind[:, :2] = 2 * start[:2] - behind[:, :2]
    m = build_dataset(associate_poses(frames, times, poses, cam), PathPolyline(behind, path.timestamps))
    assert m.annotated == []
    assert len(m.skipped) == 100
    assert all(r.skip_reason.startswith("NoVisiblePath") for r in m.skipped)


def test_frame_past_path_end_is_clock_skew(drive):
    frames, times, poses, path, cam = drive
    recs = associate_poses(frames, times, poses, cam)
    late = FrameRecord("late", float(path.timestamps[-1]) + 0.5, cam, recs[0].camera_pose)
    with pytest.raises(ClockSkew) as exc:
        build_dataset(recs[:3] + [late], path)
    assert exc.value.frame_id == "late"
    with pytest.raises(ClockSkew):
        associate_poses([("x", float(times[-1]) + 1.0)], times, poses, cam)


def test_dataset_is_deterministic_and_persisted(drive, tmp_path):
    frames, times, poses, path, cam = drive
    recs = associate_poses(frames[:5], times, poses, cam)
    write_dataset(build_dataset(recs, path, AnnotationConfig(sigma=12.0)), tmp_path / "a")
    write_dataset(build_dataset(list(reversed(recs)), path, AnnotationConfig(sigma=12.0)), tmp_path / "b")
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    lines = [json.loads(x) for x in a.decode().splitlines()]
    assert [r["frame_id"] for r in lines] == sorted(r["frame_id"] for r in lines)
    assert set(lines[0]) >= {"frame_id", "pose", "camera", "heatmap_file"}
    assert (tmp_path / "a" / lines[0]["heatmap_file"]).read_bytes() == \
        (tmp_path / "b" / lines[0]["heatmap_file"]).read_bytes()
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert meta["sigma"] == 12.0


def test_recording_files_round_trip(drive, tmp_path):
    frames, times, poses, path, cam = drive
    write_recording(tmp_path / "log", frames, times, poses, cam)
    write_path_csv(path, tmp_path / "path.csv")
    f2, t2, p2, c2 = read_recording(tmp_path / "log")
    assert [x[0] for x in f2] == [x[0] for x in frames]
    assert np.allclose(t2, times)
    assert c2 == cam
    assert abs(p2[10].heading - poses[10].heading) < 1e-6
    assert np.allclose(read_path_csv(tmp_path / "path.csv").points, path.points, atol=1e-6)
