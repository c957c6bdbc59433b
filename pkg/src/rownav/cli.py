"""Command-line entry point: ``rownav {annotate,simulate,evaluate,sweep}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .annotation import AnnotationConfig, associate_poses, build_dataset, read_path_csv, read_recording, write_dataset
from .config import TrialConfig
from .errors import ClockSkew, SchemaError
from .evaluation import deviation_samples, render_table, samples_csv, summarize, summary_csv, switch_geometry
from .navigator import MissionPlan
from .simulator import TrialLog, TrialSettings, run_trial

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_FAULT = 4


def _err(msg: str) -> None:
    print(f"rownav: {msg}", file=sys.stderr)


# -- annotate --------------------------------------------------------------------


def cmd_annotate(args) -> int:
    try:
        frames, pose_times, poses, camera = read_recording(args.log)
        path = read_path_csv(args.path)
    except (OSError, ValueError) as exc:
        _err(f"cannot read inputs: {exc}")
        return EXIT_INPUT
    cfg = AnnotationConfig(lookahead=args.lookahead, sigma=args.sigma)
    try:
        records = associate_poses(frames, pose_times, poses, camera)
        manifest = build_dataset(records, path, cfg)
    except ClockSkew as exc:
        _err(f"clock skew: {exc}")
        return EXIT_INPUT
    write_dataset(manifest, args.out)
    for rec in manifest.skipped:
        print(f"skipped {rec.frame_id}: {rec.skip_reason}")
    print(f"annotated {len(manifest.annotated)} frames, skipped {len(manifest.skipped)}")
    return EXIT_OK if manifest.annotated else EXIT_EMPTY


# -- simulate / sweep ----------------------------------------------------------------


def _load_config(args) -> TrialConfig:
    if args.config:
        return TrialConfig.load(args.config)
    return TrialConfig.preset(args.preset)


def _run_one(cfg: TrialConfig, seed: int, strict: bool):
    settings = replace(cfg.settings, intervene=False) if strict else cfg.settings
    t0 = time.perf_counter()
    log = run_trial(cfg.layout, cfg.plan, cfg.noise, cfg.gains, cfg.script, seed, cfg.navigator, settings)
    return log, time.perf_counter() - t0


def _run_many(cfg: TrialConfig, seeds: Sequence[int], strict: bool, workers: int):
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_one, [cfg] * len(seeds), seeds, [strict] * len(seeds)))
    return [_run_one(cfg, s, strict) for s in seeds]


def _prepare_out(cfg: TrialConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.text)
    cfg.plan.save(out / "plan.json")
    (out / "layout.json").write_text(json.dumps(cfg.layout.to_dict(), indent=2, sort_keys=True) + "\n")


def _seed(args, cfg: TrialConfig) -> Optional[int]:
    return args.seed if args.seed is not None else cfg.seed


def cmd_simulate(args) -> int:
    try:
        cfg = _load_config(args)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"bad config: {exc}")
        return EXIT_INPUT
    seed = _seed(args, cfg)
    if seed is None:
        _err("a seed is required (--seed or `seed` in the config)")
        return EXIT_INPUT
    out = Path(args.out)
    _prepare_out(cfg, out)
    seeds = [seed + r for r in range(args.replications)]
    summaries, status = [], EXIT_OK
    for r, (s, (log, wall)) in enumerate(zip(seeds, _run_many(cfg, seeds, args.strict, args.workers)), start=1):
        trial_dir = log.write(out / f"trial_{r:02d}")
        label = f"trial{r}"
        summaries.append(summarize(log, cfg.plan, cfg.layout, label=label))
        (trial_dir / "deviations.csv").write_text(samples_csv(deviation_samples(log, cfg.plan)))
        digest = hashlib.sha256((trial_dir / "trajectory.csv").read_bytes()).hexdigest()[:12]
        print(f"{label} seed={s} lanes={log.meta['lanes_completed']}/{len(cfg.plan)} "
              f"interventions={log.interventions} completed={log.completed} wall={wall:.1f}s sha={digest}")
        if args.strict and log.faults:
            status = EXIT_FAULT
    (out / "summary.csv").write_text(summary_csv(summaries))
    table = render_table(summaries)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return status


def cmd_sweep(args) -> int:
    try:
        cfg = _load_config(args)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"bad config: {exc}")
        return EXIT_INPUT
    start = _seed(args, cfg) or 0
    seeds = list(range(start, start + args.seeds))
    out = Path(args.out)
    _prepare_out(cfg, out)
    summaries, rows = [], ["seed,completed,interventions,rt_mean,rt_max,turn_out_max,turn_in_max"]
    clean = 0
    for s, (log, wall) in zip(seeds, _run_many(cfg, seeds, False, args.workers)):
        summ = summarize(log, cfg.plan, cfg.layout, label=f"seed{s}")
        summaries.append(summ)
        geo = switch_geometry(log, cfg.plan, cfg.layout)
        rt = summ.positional.get("row_tracking")
        t_out = max((abs(x) for x in geo.turn_out), default=0.0)
        t_in = max((abs(x) for x in geo.turn_in), default=0.0)
        clean += int(log.completed and log.interventions == 0)
        rows.append(f"{s},{int(log.completed)},{log.interventions},{rt.mean if rt else float('nan'):.6f},"
                    f"{rt.max if rt else float('nan'):.6f},{t_out:.6f},{t_in:.6f}")
        print(f"seed={s} completed={log.completed} interventions={log.interventions} wall={wall:.1f}s")
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    (out / "summary.csv").write_text(summary_csv(summaries))
    table = render_table(summaries)
    (out / "table.txt").write_text(table)
    print(table, end="")
    print(f"{clean}/{len(seeds)} runs completed without intervention")
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    log_path = Path(args.log)
    try:
        log = TrialLog.read(log_path)
    except (SchemaError, OSError) as exc:
        _err(f"bad log: {exc}")
        return EXIT_INPUT
    plan_path = Path(args.plan) if args.plan else None
    if plan_path is None:
        base = log_path if log_path.is_dir() else log_path.parent
        for cand in (base / "plan.json", base.parent / "plan.json"):
            if cand.exists():
                plan_path = cand
                break
    if plan_path is None:
        _err("no mission plan given (--plan) and none found beside the log")
        return EXIT_INPUT
    try:
        plan = MissionPlan.load(plan_path)
        summ = summarize(log, plan, downsample_hz=args.downsample_hz, radius=args.radius,
                         label=args.label or log_path.stem)
        samples = deviation_samples(log, plan, args.downsample_hz, args.radius)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"cannot evaluate: {exc}")
        return EXIT_INPUT
    table = render_table([summ])
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary_csv([summ]))
        (out / "table.txt").write_text(table)
        (out / "deviations.csv").write_text(samples_csv(samples))
    return EXIT_OK


# ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rownav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("annotate", help="render ground-truth heatmaps for a recorded log")
    a.add_argument("--log", required=True, help="directory with frames.csv, poses.csv, camera.json")
    a.add_argument("--path", required=True, help="RTK path CSV (time,east,north,up)")
    a.add_argument("--out", required=True)
    a.add_argument("--lookahead", type=float, default=AnnotationConfig.lookahead)
    a.add_argument("--sigma", type=float, default=AnnotationConfig.sigma)
    a.set_defaults(func=cmd_annotate)

    for name, helptext in (("simulate", "run simulated trials"), ("sweep", "seed sweep with envelope report")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="trial TOML")
        s.add_argument("--preset", default="CRT", help="layout preset when no config is given")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True)
        s.add_argument("--workers", type=int, default=1)
        if name == "simulate":
            s.add_argument("--replications", type=int, default=1)
            s.add_argument("--strict", action="store_true", help="no scripted interventions; exit 4 on a fault")
            s.set_defaults(func=cmd_simulate)
        else:
            s.add_argument("--seeds", type=int, default=20)
            s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("evaluate", help="deviation table for a trial log")
    e.add_argument("--log", required=True, help="trial directory or trajectory.csv")
    e.add_argument("--plan", help="plan.json or TOML; defaults to one beside the log")
    e.add_argument("--out")
    e.add_argument("--downsample-hz", type=float, default=1.0)
    e.add_argument("--radius", type=float, help="end-region radius; defaults to the plan's")
    e.add_argument("--label")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
