"""Command-line entry point: ``flowmodes <command> [flags]``.

Every command is a batch job that writes files under ``--out`` and is fully
determined by its flags, config files and ``--seed``. Failures exit with a
nonzero code and print a one-line JSON error record to stderr:

    2  configuration (bad flags, unreadable or invalid JSON, bad geometry)
    3  numerical (non-finite guidance, diverging training)
    4  I/O (missing or corrupt files, unwritable output)
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .diffusion import GuidanceError, GuidedSamplerConfig, NoiseSchedule, write_telemetry
from .discovery import ModeSet, StoppingRule, baseline_fps, baseline_random, compute_metrics, discover_modes
from .energies import GuidanceConfig
from .flowio import FlowFormatError, write_flow
from .gradcheck import run_gradcheck
from .priors import BankError, MixtureDenoiser, SceneSpec, build_motion_bank
from .prompting import DragArrow, export_arrows, mode_to_arrows, retrieve_mode

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def _load_scene(path):
    if path is None:
        return build_motion_bank()
    try:
        return SceneSpec.load(path)
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid scene {path}: {exc}") from exc


def _load_guidance(path):
    if path is None:
        return GuidanceConfig()
    try:
        return GuidanceConfig.from_json(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid guidance config {path}: {exc}") from exc


def _guidance(args):
    cfg = _load_guidance(args.guidance)
    if getattr(args, "no_energy", None):
        cfg = cfg.without(*args.no_energy)
    return cfg


def _schedule(args):
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    return NoiseSchedule.cosine(args.steps)


def _sampler(args, sched):
    if not 0 <= args.guided_steps <= sched.T:
        raise ConfigError(f"--guided-steps must lie in [0, {sched.T}]")
    return GuidedSamplerConfig(guided_steps=args.guided_steps, guidance_scale=args.gamma,
                               through_denoiser=not args.detach_denoiser, seed=args.seed,
                               shift_mean=args.shift_mean)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load_modes(args):
    path = Path(args.manifest)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return ModeSet.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid manifest {path}: {exc}") from exc


def cmd_dataset_gen(args):
    scene = _load_scene(args.scene)
    out = _out(args)
    (out / "scene.json").write_text(scene.to_json() + "\n")
    files = []
    for label, mu in zip(scene.labels, scene.means):
        name = f"mean_{label}.mmff"
        write_flow(mu, out / name)
        files.append({"label": label, "file": name})
    _write_json(out / "dataset.json", {"schema_version": 1, "means": files,
                                       "mask": scene.mask.astype(int).tolist()})
    print(f"wrote {len(files)} mean flows to {out}")


def _render_modes(modes, mask, out, stride, frame):
    from .render import render_color, render_trajectories, save_png

    paths = render_trajectories(modes, mask, stride, out_dir=out)
    for i, x in enumerate(modes):
        k = x.shape[0] - 1 if frame is None else frame
        path = out / f"color_{i:02d}.png"
        save_png(render_color(x, k), path)
        paths.append(str(path))
    return paths


def cmd_discover(args):
    scene = _load_scene(args.scene)
    cfg = _guidance(args)
    sched = _schedule(args)
    gcfg = _sampler(args, sched)
    rho = float("inf") if args.rho is None else args.rho
    rule = StoppingRule(rho=rho, max_modes=args.max_modes)
    out = _out(args)
    telemetry = []
    ms = discover_modes(MixtureDenoiser(scene.prior(), sched), scene.mask, cfg, gcfg, sched, scene.shape,
                        rule, args.seed, telemetry)
    ms.save(out, extra={"seed": args.seed, "rho": None if rho == float("inf") else rho,
                        "max_modes": args.max_modes, "guidance": cfg.to_dict(),
                        "sampler": {"T": sched.T, "guided_steps": gcfg.guided_steps,
                                    "gamma": gcfg.guidance_scale,
                                    "through_denoiser": gcfg.through_denoiser,
                                    "shift_mean": gcfg.shift_mean}})
    records = [dict(step, sample=s["sample"], seed=s["seed"]) for s in telemetry for step in s["steps"]]
    write_telemetry(records, out / "telemetry.jsonl")
    if ms.modes and not args.no_render:
        _render_modes(ms.modes, scene.mask, out, args.stride, None)
    print(f"accepted {len(ms)} modes from {ms.n_samples} samples ({ms.stop_reason})")


def cmd_baseline(args):
    scene = _load_scene(args.scene)
    cfg = _guidance(args)
    sched = _schedule(args)
    den = MixtureDenoiser(scene.prior(), sched)
    out = _out(args)
    if args.kind == "random":
        ms = baseline_random(den, scene.mask, args.n, args.seed, sched, scene.shape, cfg)
    else:
        if args.pool_size < args.n:
            raise ConfigError("--pool-size must be >= --n")
        ms = baseline_fps(den, scene.mask, args.n, args.pool_size, args.seed, sched, scene.shape, cfg)
    ms.save(out, extra={"seed": args.seed, "baseline": args.kind})
    print(f"wrote {len(ms)} {args.kind} baseline modes to {out}")


def cmd_eval(args):
    from .render import report_figure, save_png_figure

    ms = _load_modes(args)
    scene = _load_scene(args.scene)
    cfg = _load_guidance(args.guidance)
    report = compute_metrics(ms, scene.mask, cfg, scene if args.scene else None)
    out = _out(args)
    _write_json(out / "metrics.json", report.to_dict())
    with open(out / "metrics.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["mode", "E_d", "E_d_cross", "E_c", "E_o", "label"])
        for i, pm in enumerate(report.per_mode):
            writer.writerow([i, repr(pm["E_d"]), repr(pm["E_d_cross"]), repr(pm["E_c"]), repr(pm["E_o"]),
                             pm.get("label", "")])
        for key in ("E_d", "E_d_cross", "E_c", "E_o", "E_f", "E"):
            writer.writerow([f"mean_{key}", repr(getattr(report, key)), "", "", "", ""])
    save_png_figure(report_figure(report), out / "metrics.png")
    sys.stdout.write(report.table())


def cmd_render(args):
    ms = _load_modes(args)
    if not ms.modes:
        raise ConfigError("manifest has no modes to render")
    scene = _load_scene(args.scene)
    if args.frame is not None and not 0 <= args.frame < ms.modes[0].shape[0]:
        raise ConfigError(f"--frame {args.frame} out of range")
    paths = _render_modes(ms.modes, scene.mask, _out(args), args.stride, args.frame)
    print(f"wrote {len(paths)} files")


def _parse_arrow(text):
    try:
        return DragArrow.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_arrows(args):
    ms = _load_modes(args)
    out = _out(args)
    if args.action == "retrieve":
        if not args.arrow:
            raise ConfigError("arrows retrieve needs --arrow r1,c1:r2,c2")
        try:
            hit = retrieve_mode(ms.modes, _parse_arrow(args.arrow))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        record = {"mode": hit.mode, "frame": hit.frame, "distance": hit.distance}
        _write_json(out / "retrieval.json", record)
        print(json.dumps(record, sort_keys=True))
        return
    scene = _load_scene(args.scene)
    mode, frame = args.mode, args.frame
    if args.arrow:
        hit = retrieve_mode(ms.modes, _parse_arrow(args.arrow))
        mode = hit.mode if mode is None else mode
        frame = hit.frame if frame is None else frame
    mode = 0 if mode is None else mode
    if not 0 <= mode < len(ms.modes):
        raise ConfigError(f"--mode {mode} out of range")
    x = ms.modes[mode]
    frame = x.shape[0] - 1 if frame is None else frame
    try:
        arrows = mode_to_arrows(x, scene.mask, frame, args.n, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    export_arrows(arrows, out / "arrows.json")
    print(f"wrote {len(arrows)} arrows for mode {mode} frame {frame}")


def cmd_gradcheck(args):
    res = run_gradcheck(args.trials, args.seed, _guidance(args))
    line = res.summary()
    if args.out:
        out = _out(args)
        _write_json(out / "gradcheck.json", {"trials": res.trials, "passed": res.passed,
                                             "worst": res.worst, "tol": res.tol})
    print(line)
    if not res.ok:
        raise FloatingPointError(line)


def build_parser():
    p = argparse.ArgumentParser(prog="flowmodes", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sampler=False, out=True):
        sp.add_argument("--scene", help="scene JSON (default: four translations on a 32x32 grid)")
        sp.add_argument("--guidance", help="guidance config JSON")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--no-energy", action="append", choices=list("cods"), default=[],
                        help="switch off one energy term (repeatable)")
        if out:
            sp.add_argument("--out", required=True)
        if sampler:
            sp.add_argument("--steps", type=int, default=25)

    sp = sub.add_parser("dataset-gen", help="write a scene's mean flows as MMFF files")
    sp.add_argument("--scene")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dataset_gen)

    sp = sub.add_parser("discover", help="guided mode discovery")
    common(sp, sampler=True)
    sp.add_argument("--guided-steps", type=int, default=20)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--rho", type=float, default=5.0, help="discard threshold (default 5; inf keeps every sample)")
    sp.add_argument("--max-modes", type=int, default=6)
    sp.add_argument("--detach-denoiser", action="store_true")
    sp.add_argument("--shift-mean", action="store_true",
                    help="form the step mean from the shifted point as well")
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--no-render", action="store_true")
    sp.set_defaults(func=cmd_discover)

    sp = sub.add_parser("baseline", help="unguided Random-Noise or FPS-Noise samples")
    sp.add_argument("kind", choices=["random", "fps"])
    common(sp, sampler=True)
    sp.add_argument("--n", type=int, default=6)
    sp.add_argument("--pool-size", type=int, default=64)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("eval", help="set metrics for a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scene")
    sp.add_argument("--guidance")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="colour-wheel PNGs and trajectory SVGs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--frame", type=int)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("arrows", help="drag-arrow retrieval and extraction")
    sp.add_argument("action", choices=["retrieve", "extract"])
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scene")
    sp.add_argument("--arrow", help="r1,c1:r2,c2 (1-based)")
    sp.add_argument("--mode", type=int)
    sp.add_argument("--frame", type=int)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_arrows)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the energy gradient")
    common(sp, out=False)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _fail(code, exc):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rho", None) is not None and np.isinf(args.rho):
        args.rho = None
    try:
        args.func(args)
    except (ConfigError, BankError, json.JSONDecodeError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (GuidanceError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (FlowFormatError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
