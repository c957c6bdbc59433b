import json
import shutil
from pathlib import Path

from rownav.annotation import read_path_csv, write_path_csv, PathPolyline
from rownav.cli import EXIT_EMPTY, EXIT_FAULT, EXIT_INPUT, EXIT_OK, build_parser, main

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "tests" / "data"
SHORT = ROOT / "configs" / "short.toml"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- annotate ---------------------------------------------------------------------------


def test_annotate_fixture(tmp_path, capsys):
    code, out, _ = run(["annotate", "--log", DATA / "drive", "--path", DATA / "drive_path.csv",
                        "--out", tmp_path / "ds"], capsys)
    assert code == EXIT_OK
    assert "annotated 100 frames, skipped 0" in out
    lines = (tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 100
    assert len(list((tmp_path / "ds").rglob("*.png"))) == 100
    assert json.loads((tmp_path / "ds" / "metadata.json").read_text())["sigma"] == 15.0


def test_annotate_sigma_flag(tmp_path, capsys):
    code, _, _ = run(["annotate", "--log", DATA / "drive", "--path", DATA / "drive_path.csv",
                      "--out", tmp_path / "ds", "--sigma", "12"], capsys)
    assert code == EXIT_OK
    assert json.loads((tmp_path / "ds" / "metadata.json").read_text())["sigma"] == 12.0


def test_annotate_missing_path_file(tmp_path, capsys):
    code, _, err = run(["annotate", "--log", DATA / "drive", "--path", tmp_path / "nope.csv",
                        "--out", tmp_path / "ds"], capsys)
    assert code == EXIT_INPUT
    assert "nope.csv" in err


def test_annotate_clock_skew(tmp_path, capsys):
    path = read_path_csv(DATA / "drive_path.csv")
    keep = path.timestamps <= 3.0  # the frames run to 6.6 s
    write_path_csv(PathPolyline(path.points[keep], path.timestamps[keep]), tmp_path / "short.csv")
    code, _, err = run(["annotate", "--log", DATA / "drive", "--path", tmp_path / "short.csv",
                        "--out", tmp_path / "ds"], capsys)
    assert code == EXIT_INPUT
    assert "clock skew" in err


def test_annotate_nothing_visible(tmp_path, capsys):
    path = read_path_csv(DATA / "drive_path.csv")
    pts = path.points.copy()
    pts[:, :2] = 2 * pts[0, :2] - pts[:, :2]  # mirror the path behind the start
    write_path_csv(PathPolyline(pts, path.timestamps), tmp_path / "behind.csv")
    code, out, _ = run(["annotate", "--log", DATA / "drive", "--path", tmp_path / "behind.csv",
                        "--out", tmp_path / "ds"], capsys)
    assert code == EXIT_EMPTY
    assert "annotated 0 frames, skipped 100" in out


# -- simulate / sweep -------------------------------------------------------------------------


def test_simulate_is_reproducible(tmp_path, capsys):
    c1, out1, _ = run(["simulate", "--config", SHORT, "--out", tmp_path / "a"], capsys)
    c2, out2, _ = run(["simulate", "--config", SHORT, "--out", tmp_path / "b"], capsys)
    assert c1 == c2 == EXIT_OK
    sha = [line.split("sha=")[1] for line in (out1 + out2).splitlines() if "sha=" in line]
    assert len(sha) == 2 and sha[0] == sha[1]
    for f in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert (tmp_path / "a" / "config.toml").read_text() == SHORT.read_text()
    meta = json.loads((tmp_path / "a" / "trial_01" / "meta.json").read_text())
    assert meta["seed"] == 7 and meta["completed"] and meta["lanes_completed"] == 2


def test_seed_flag_overrides_config(tmp_path, capsys):
    run(["simulate", "--config", SHORT, "--out", tmp_path / "a"], capsys)
    run(["simulate", "--config", SHORT, "--seed", "8", "--out", tmp_path / "b"], capsys)
    assert json.loads((tmp_path / "b" / "trial_01" / "meta.json").read_text())["seed"] == 8
    assert (tmp_path / "a" / "trial_01" / "trajectory.csv").read_bytes() != \
        (tmp_path / "b" / "trial_01" / "trajectory.csv").read_bytes()


def test_replications_write_one_log_each(tmp_path, capsys):
    code, out, _ = run(["simulate", "--config", SHORT, "--replications", "2", "--out", tmp_path], capsys)
    assert code == EXIT_OK
    for r in (1, 2):
        d = tmp_path / f"trial_{r:02d}"
        assert {p.name for p in d.iterdir()} == {"trajectory.csv", "events.jsonl", "meta.json", "deviations.csv"}
    table = (tmp_path / "table.txt").read_text().splitlines()
    assert [line.split()[0] for line in table[2:]] == ["trial1", "trial2"]
    seeds = [json.loads((tmp_path / f"trial_{r:02d}" / "meta.json").read_text())["seed"] for r in (1, 2)]
    assert seeds == [7, 8]


def test_simulate_requires_a_seed(tmp_path, capsys):
    cfg = tmp_path / "noseed.toml"
    cfg.write_text('[layout]\npreset = "RN"\nn_lanes = 2\nlength = 40.0\n')
    code, _, err = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_INPUT
    assert "seed" in err


def test_bad_config_is_an_input_error(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('seed = 1\n[gains]\nkp = 1.0\nki = 0.1\n')
    code, _, err = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_INPUT
    assert "ki" in err


def test_strict_exits_on_fault(tmp_path, capsys):
    cfg = tmp_path / "wrong_row.toml"
    cfg.write_text(SHORT.read_text() + '\n[noise]\nrtk_std = 0.0\n\n[[script]]\nkind = "phantom_row"\nphase = 3\n')
    code, out, _ = run(["simulate", "--config", cfg, "--strict", "--out", tmp_path / "s"], capsys)
    assert code == EXIT_FAULT
    events = (tmp_path / "s" / "trial_01" / "events.jsonl").read_text()
    assert "WrongRow" in events and "Intervention" not in events
    code, _, _ = run(["simulate", "--config", cfg, "--out", tmp_path / "n"], capsys)
    assert code == EXIT_OK


def test_sweep(tmp_path, capsys):
    code, out, _ = run(["sweep", "--config", SHORT, "--seeds", "2", "--out", tmp_path], capsys)
    assert code == EXIT_OK
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("seed,completed,interventions")
    assert [r.split(",")[0] for r in rows[1:]] == ["7", "8"]
    assert "2/2 runs completed without intervention" in out


def test_nothing_written_outside_out(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run(["simulate", "--config", SHORT, "--out", "o"], capsys)
    run(["evaluate", "--log", "o/trial_01", "--out", "o/eval"], capsys)
    assert [p.name for p in tmp_path.iterdir()] == ["o"]


# -- evaluate ------------------------------------------------------------------------------


def test_evaluate_fixture(tmp_path, capsys):
    code, out, _ = run(["evaluate", "--log", DATA / "trial", "--plan", DATA / "plan.json",
                        "--out", tmp_path, "--label", "fixture"], capsys)
    assert code == EXIT_OK
    header = out.splitlines()[0]
    for title in ("Row tracking", "Exiting", "Entering"):
        assert header.count(title) == 2
    assert out.splitlines()[2].startswith("fixture")
    assert "±" in out
    assert {p.name for p in tmp_path.iterdir()} == {"summary.csv", "table.txt", "deviations.csv"}


def test_evaluate_finds_plan_beside_log(tmp_path, capsys):
    shutil.copytree(DATA / "trial", tmp_path / "trial")
    shutil.copy(DATA / "plan.json", tmp_path / "plan.json")
    code, _, _ = run(["evaluate", "--log", tmp_path / "trial" / "trajectory.csv"], capsys)
    assert code == EXIT_OK
    (tmp_path / "plan.json").unlink()
    code, _, err = run(["evaluate", "--log", tmp_path / "trial"], capsys)
    assert code == EXIT_INPUT and "plan" in err


def test_evaluate_truncated_csv(tmp_path, capsys):
    text = (DATA / "trial" / "trajectory.csv").read_text()
    (tmp_path / "trajectory.csv").write_text(text[: len(text) // 2])
    code, _, err = run(["evaluate", "--log", tmp_path / "trajectory.csv", "--plan", DATA / "plan.json"], capsys)
    assert code == EXIT_INPUT
    assert "bad log" in err


def test_evaluate_defaults():
    args = build_parser().parse_args(["evaluate", "--log", "x"])
    assert args.downsample_hz == 1.0
    args = build_parser().parse_args(["annotate", "--log", "x", "--path", "y", "--out", "z"])
    assert args.sigma == 15.0
