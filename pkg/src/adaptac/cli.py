"""Command-line entry point: ``adaptac <command> [options]``.

Commands
--------
gen-demos   roll the scripted expert and write a demonstration dataset
train       fit a policy on a dataset, writing a checkpoint and a loss log
eval        roll a trained policy, writing a JSON report and attention traces
ablate      train and evaluate every fusion mode with shared seeds
attn-trace  summarise attention traces per task phase

Settings come from built-in defaults, then ``--config FILE`` (flat
``key = value`` lines), then ``--set key=value`` overrides, then the
dedicated flags.  The resolved settings are written as ``config.txt`` next to
every command's outputs; passing that file back with ``--config`` reproduces
the run.

Exit codes: 0 success, 1 usage error, 2 output path not writable,
3 dataset schema mismatch, 4 missing checkpoint, 5 missing traces.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import config as config_io
from .numerics.checkpoint import CheckpointError
from .policy import MODES, AdapTacPolicy, PolicyConfig
from .simenv.dataset import DEMO_NOISE, DatasetError, generate_demos, read_dataset, write_dataset
from .simenv.evaluate import evaluate, write_report
from .simenv.world import SimConfig
from .traces import load_traces, phase_summary, write_summary_csv

EXIT_OK, EXIT_USAGE, EXIT_UNWRITABLE, EXIT_SCHEMA, EXIT_NO_CHECKPOINT, EXIT_NO_TRACES = 0, 1, 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "count": 30,
    "episodes": 10,
    "modes": MODES,
    "demo_noise_xy": DEMO_NOISE[0],
    "demo_noise_joint": DEMO_NOISE[1],
    **PolicyConfig().to_dict(),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise CliError(EXIT_USAGE, f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = config_io.parse_value(value)
    return out


def resolve(args, extra: dict | None = None) -> dict:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = config_io.load_config(args.config)
        except OSError as exc:
            raise CliError(EXIT_USAGE, f"cannot read config {args.config}: {exc}") from exc
        except config_io.ConfigError as exc:
            raise CliError(EXIT_USAGE, f"{args.config}: {exc}") from exc
    cfg = config_io.merge(DEFAULTS, file_cfg, _overrides(args.set), {"seed": args.seed}, extra or {})
    unknown = sorted(set(cfg) - set(DEFAULTS) - {"dataset", "checkpoint", "traces"})
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown config keys: {', '.join(unknown)}")
    return cfg


def policy_config(cfg: dict, mode: str | None = None) -> PolicyConfig:
    values = dict(cfg)
    if mode is not None:
        values["mode"] = mode
    try:
        return PolicyConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid policy settings: {exc}") from exc


def prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_UNWRITABLE, f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_config(out: Path, cfg: dict) -> None:
    config_io.save_config(out / "config.txt", cfg)


def _load_dataset(path):
    if path is None:
        raise CliError(EXIT_USAGE, "no dataset given (use --dataset or a 'dataset' config key)")
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_USAGE, f"dataset not found: {path}") from exc
    except DatasetError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc


def _load_policy(path) -> AdapTacPolicy:
    if path is None or not Path(path).is_file():
        raise CliError(EXIT_NO_CHECKPOINT, f"checkpoint not found: {path}")
    try:
        return AdapTacPolicy.load(path)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise CliError(EXIT_NO_CHECKPOINT, f"unusable checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_gen_demos(args) -> int:
    cfg = resolve(args, {"count": args.count})
    out = prepare_out(args.out)
    noise = (float(cfg["demo_noise_xy"]), float(cfg["demo_noise_joint"]))
    if min(noise) < 0:
        raise CliError(EXIT_USAGE, "demonstration noise must be non-negative")
    ds, stats = generate_demos(int(cfg["count"]), int(cfg["seed"]), SimConfig(), h=int(cfg["h"]), n=int(cfg["n"]),
                               noise=noise)
    write_dataset(out / "demos.adpd", ds)
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_config(out, cfg)
    print(f"expert success rate {stats['expert_success_rate']:.3f} over {stats['attempts']} episodes")
    print(f"wrote {stats['trajectories']} trajectories, {stats['steps']} steps "
          f"(length {stats['min_length']}-{stats['max_length']}, mean {stats['mean_length']:.1f}) "
          f"to {out / 'demos.adpd'}")
    return EXIT_OK


def _train(cfg: dict, pcfg: PolicyConfig, ds, out: Path, resume=None) -> AdapTacPolicy:
    if resume is not None:
        pol = _load_policy(resume)
        if pol.config_.to_dict() != {**pcfg.to_dict(), "train_steps": pol.config_.train_steps}:
            raise CliError(EXIT_USAGE, "resume checkpoint was trained with different policy settings")
        pol.config_ = pcfg
        pol.config = pcfg
    else:
        pol = AdapTacPolicy(pcfg, random_state=int(cfg["seed"]))
    log = out / "train_log.csv"
    if resume is not None and not log.exists():
        log.write_text("step,L,L_pi,L_ffp,alpha_tac\n", encoding="utf-8")
    pol.fit(ds, log_path=log, checkpoint_path=out / "policy.adpt")
    return pol


def cmd_train(args) -> int:
    cfg = resolve(args, {"dataset": args.dataset, "train_steps": args.steps})
    out = prepare_out(args.out)
    ds = _load_dataset(cfg.get("dataset"))
    pcfg = policy_config(cfg)
    pol = _train(cfg, pcfg, ds, out, args.resume)
    _write_config(out, cfg)
    last = pol.log_[-1] if pol.log_ else None
    if last:
        print(f"step {last[0]}: L={last[1]:.5f} L_pi={last[2]:.5f} L_ffp={last[3]:.5f}")
    print(f"checkpoint written to {out / 'policy.adpt'}")
    return EXIT_OK


def _eval(pol: AdapTacPolicy, cfg: dict, out: Path) -> dict:
    report = evaluate(pol, int(cfg["episodes"]), int(cfg["seed"]), SimConfig(),
                      exec_horizon=pol.config_.exec_horizon, trace_dir=out / "traces")
    for ep in report["episodes"]:
        ep["trace"] = os.path.relpath(ep["trace"], out)
    report["mode"] = pol.config_.mode
    write_report(out / "report.json", report)
    return report


def cmd_eval(args) -> int:
    cfg = resolve(args, {"checkpoint": args.checkpoint, "episodes": args.episodes})
    pol = _load_policy(cfg.get("checkpoint"))
    out = prepare_out(args.out)
    report = _eval(pol, cfg, out)
    _write_config(out, cfg)
    print(f"mode {report['mode']}: SR={report['success_rate']:.3f} AEL={report['average_episode_length']:.1f} "
          f"over {len(report['episodes'])} episodes")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve(args, {"dataset": args.dataset, "episodes": args.episodes,
                         "modes": tuple(args.modes) if args.modes else None})
    out = prepare_out(args.out)
    ds = _load_dataset(cfg.get("dataset"))
    modes = tuple(cfg["modes"])
    for m in modes:
        if m not in MODES:
            raise CliError(EXIT_USAGE, f"unknown mode {m!r}")
    rows = []
    for m in modes:
        sub = prepare_out(out / m)
        pol = _train(cfg, policy_config(cfg, m), ds, sub)
        report = _eval(pol, cfg, sub)
        summary = phase_summary(load_traces(sub / "traces"))
        rows.append({"mode": m, "success_rate": report["success_rate"],
                     "average_episode_length": report["average_episode_length"],
                     "mean_alpha_tac": summary["overall_alpha_tac"],
                     "reach_to_contact_delta": summary["reach_to_contact_delta"]})
        print(f"{m:8s} SR={report['success_rate']:.3f} AEL={report['average_episode_length']:.1f}")
    with open(out / "ablation.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"modes": rows, "episodes": int(cfg["episodes"]), "seed": int(cfg["seed"])}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mode", "success_rate", "average_episode_length"))
        for r in rows:
            w.writerow((r["mode"], repr(r["success_rate"]), repr(r["average_episode_length"])))
    _write_config(out, cfg)
    return EXIT_OK


def cmd_attn_trace(args) -> int:
    cfg = resolve(args, {"traces": args.traces})
    tdir = cfg.get("traces")
    if tdir is None or not Path(tdir).is_dir() or not any(Path(tdir).glob("*.csv")):
        raise CliError(EXIT_NO_TRACES, f"no trace CSV files found in {tdir}")
    try:
        traces = load_traces(tdir)
    except (ValueError, IndexError) as exc:
        raise CliError(EXIT_NO_TRACES, f"unreadable traces in {tdir}: {exc}") from exc
    summary = phase_summary(traces)
    out = prepare_out(args.out)
    with open(out / "attention_summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_summary_csv(out / "attention_by_phase.csv", summary)
    _write_config(out, cfg)
    if not summary["mean_alpha_tac"]:
        print("traces carry no attention weights (policy without fusion)")
    for phase, mean in summary["mean_alpha_tac"].items():
        print(f"{phase:8s} n={summary['counts'][phase]:5d} mean alpha_tac={mean:.3f}")
    if summary["reach_to_flip_delta"] is not None:
        print(f"REACH->FLIP delta {summary['reach_to_flip_delta']:+.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    p = _Parser(prog="adaptac", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", parents=[common], help="record expert demonstrations")
    g.add_argument("--count", type=int, help="number of successful trajectories (default 30)")
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--dataset", help="demo dataset file")
    t.add_argument("--steps", type=int, help="total optimisation steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="policy checkpoint")
    e.add_argument("--episodes", type=int, help="number of episodes (default 10)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate every mode")
    a.add_argument("--dataset", help="demo dataset file")
    a.add_argument("--episodes", type=int, help="episodes per mode")
    a.add_argument("--modes", nargs="+", help=f"subset of {', '.join(MODES)}")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("attn-trace", parents=[common], help="per-phase attention summary")
    r.add_argument("--traces", help="directory of trace CSV files")
    r.set_defaults(func=cmd_attn_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"adaptac: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
