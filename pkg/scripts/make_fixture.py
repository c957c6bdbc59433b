"""Regenerate the bundled test fixtures under tests/data/.

drive/        a 100-frame recording (frames.csv, poses.csv, camera.json)
drive_path.csv  the RTK path recorded on the same drive
trial/        a short simulated mission (trajectory.csv, events.jsonl, meta.json)
plan.json     the mission plan of that trial
"""
import argparse
import shutil
from pathlib import Path

from rownav.annotation import write_path_csv, write_recording
from rownav.navigator import MissionPlan
from rownav.simulator import record_drive, run_trial
from rownav.world import NoiseSpec, VineyardLayout

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"


def main(out: Path = DATA) -> None:
    out.mkdir(parents=True, exist_ok=True)
    crt = VineyardLayout.preset("CRT")
    frames, times, poses, path, cam = record_drive(crt, lane=1, n_frames=100, duration=40.0,
                                                   noise=NoiseSpec(rtk_std=0.02), seed=0)
    if (out / "drive").exists():
        shutil.rmtree(out / "drive")
    write_recording(out / "drive", frames, times, poses, cam)
    write_path_csv(path, out / "drive_path.csv")

    layout = VineyardLayout.preset("RN", n_lanes=2, length=30.0)
    plan = MissionPlan.serpentine(layout)
    log = run_trial(layout, plan, NoiseSpec(), seed=0)
    if (out / "trial").exists():
        shutil.rmtree(out / "trial")
    log.write(out / "trial")
    plan.save(out / "plan.json")
    print(f"wrote fixtures to {out} (trial completed={log.completed}, rows={len(log)})")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=DATA)
    main(ap.parse_args().out)
