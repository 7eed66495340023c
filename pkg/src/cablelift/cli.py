"""``cablelift`` command line: train, eval, ablate, inspect, export.

Exit codes: 0 success, 2 configuration problem, 3 runtime failure, 4 file
input/output problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

log = logging.getLogger("cablelift")


def version_string() -> str:
    from . import __version__

    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--threads", type=int, help="BLAS threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cablelift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    _common(p)
    p.add_argument("--iterations", type=int, help="stop after this many iterations")

    p = sub.add_parser("eval", help="run an evaluation scenario on a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--scenario", help="YAML scenario file")
    p.add_argument("--kind", help="scenario kind (default setpoint_step)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="scenario field, repeatable")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("ablate", help="train and compare the variants of one ablation")
    _common(p)
    p.add_argument("kind", help="action_space | observation_space | history_length | critic")
    p.add_argument("--variants", nargs="+", help="subset of variants to run")
    p.add_argument("--eval-repeats", type=int, default=10)

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("checkpoint")

    p = sub.add_parser("export", help="collect the CSVs of a run directory into one bundle")
    p.add_argument("run_dir")
    p.add_argument("--out", help="bundle directory (default RUN_DIR/export)")
    return parser


def _set_threads(n) -> None:
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)


def _load_config(args):
    from . import config

    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config and not Path(args.config).is_file():
        # a wrong --config is a configuration mistake, not an IO fault
        raise config.ConfigError(f"config file not found: {args.config}")
    return config.load(args.config, overrides)


def _write_manifest(out: Path, cfg, args, extra=None) -> None:
    from . import config

    out.mkdir(parents=True, exist_ok=True)
    config.dump(cfg, out / "config.yaml")
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": version_string(),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands
def cmd_train(args) -> int:
    from .marl import Trainer

    cfg = _load_config(args)
    out = Path(args.out or "runs/train")
    _write_manifest(out, cfg, args)
    trainer = Trainer(cfg, out)
    trainer.train(iterations=args.iterations)
    print(f"trained {trainer.env_steps} env steps; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _scenario(args):
    import yaml

    from . import config
    from .eval import Scenario

    data = {}
    if args.scenario:
        path = Path(args.scenario)
        if not path.exists():
            raise FileNotFoundError(f"scenario file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
    if args.kind:
        data["kind"] = args.kind
    if args.seed is not None:
        data["seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise config.ConfigError(f"scenario setting {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        data[k.strip()] = yaml.safe_load(v)
    try:
        return Scenario.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise config.ConfigError(str(exc)) from exc


def cmd_eval(args) -> int:
    from dataclasses import asdict

    from . import eval as ev
    from .marl import MappoAgent

    sc = _scenario(args)
    agent = MappoAgent.load(args.checkpoint)
    if args.override:
        raise ev.ConfigMismatch("eval runs the checkpoint's own configuration; use --set for scenario fields")
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    metrics, rows = ev.run_scenario(agent, sc)
    ev.write_rows(out / "metrics.csv", ev.metrics_rows(metrics, sc.kind))
    ev.write_rows(out / "timeseries.csv", rows)
    manifest = {
        "command": "eval",
        "argv": sys.argv[1:],
        "version": version_string(),
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "checkpoint_config_hash": agent.extra_meta.get("config_hash"),
        "scenario": asdict(sc),
        "reference_nmpc": ev.NMPC_REFERENCE,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if not args.no_plot:
        from .plotting import plot_timeseries

        plot_timeseries(rows, out / "timeseries.png")
    for i, m in enumerate(metrics):
        print(
            f"[{i}] pos_rmse {m.pos_rmse:.3f} m  att_rmse {m.att_rmse:.2f} deg  "
            f"time_to_target {m.time_to_target:.2f} s{'' if m.reached else ' (not reached)'}  "
            f"final {m.final_pos_error:.3f} m / {m.final_att_error:.2f} deg"
            + ("  TERMINATED" if m.terminated else "")
        )
    return EXIT_OK


def cmd_ablate(args) -> int:
    import yaml

    from .eval import ABLATIONS, ablation_suite

    cfg = _load_config(args)
    if args.kind not in ABLATIONS:
        from .config import ConfigError

        raise ConfigError(f"unknown ablation {args.kind!r}; choose from {sorted(ABLATIONS)}")
    variants = [yaml.safe_load(v) for v in args.variants] if args.variants else None
    out = Path(args.out or f"runs/ablate_{args.kind}")
    _write_manifest(out, cfg, args, {"ablation": args.kind, "variants": variants})
    rows = ablation_suite(args.kind, cfg, out, eval_repeats=args.eval_repeats, variants=variants)
    for r in rows:
        print(
            f"{r['variant']}: final reward {r['final_mean_reward']:.3f}, "
            f"hover {r['hover_successes']}/{r['hover_trials']}"
        )
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .marl import MappoAgent

    agent = MappoAgent.load(args.checkpoint)
    meta = agent.extra_meta
    cfg = agent.cfg
    print(f"checkpoint      {args.checkpoint}")
    print(f"config hash     {meta.get('config_hash')}")
    print(f"agents          {agent.n_agents}")
    print(f"action space    {cfg.env.action_space} (dim {agent.act_dim})")
    print(f"observation     {cfg.env.observation}, history {cfg.env.history}, dim {agent.obs_dim}")
    print(f"critic          {agent.critic_kind}, input dim {agent.critic_dim}")
    print(f"actor layers    {agent.actor.net.sizes}")
    print(f"critic layers   {agent.critic.sizes}")
    print(f"actor std       {[round(float(s), 4) for s in __import__('numpy').exp(agent.actor.clamped_log_std())]}")
    for name, sc in (("obs", agent.obs_scaler), ("critic input", agent.critic_scaler), ("value", agent.value_scaler)):
        print(
            f"scaler {name:<12} count {sc.count:.0f}, |mean| max {abs(sc.mean).max():.3g}, "
            f"var range [{sc.var.min():.3g}, {sc.var.max():.3g}]"
        )
    if "env_steps" in meta:
        print(f"trained steps   {meta['env_steps']} ({meta.get('iteration')} iterations)")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_export(args) -> int:
    from . import eval as ev
    from .plotting import plot_training

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out = Path(args.out) if args.out else run_dir / "export"

    def found(name):
        return sorted(p for p in run_dir.rglob(name) if out not in p.parents)

    training, evals = {}, []
    for p in found("metrics.csv"):
        rows = _read_csv(p)
        if rows and "iteration" in rows[0]:
            training[p.parent] = rows
        else:
            evals.append(p)
    evals += found("eval_metrics.csv")
    comparisons = found("comparison.csv")
    if not (training or evals or comparisons):
        print(f"nothing to export in {run_dir}", file=sys.stderr)
        return EXIT_IO
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if training:
        summary = []
        for d, rows in training.items():
            label = str(d.relative_to(run_dir)) if d != run_dir else run_dir.name
            hist = [{"mean_episode_reward": float(r["mean_episode_reward"])} for r in rows]
            seen = [h["mean_episode_reward"] for h in hist if not math.isnan(h["mean_episode_reward"])]
            summary.append(
                {
                    "run": label,
                    "iterations": len(rows),
                    "env_steps": rows[-1]["env_steps"] if rows else 0,
                    "first_mean_reward": seen[0] if seen else float("nan"),
                    "final_mean_reward": ev.final_mean_reward(hist),
                }
            )
        ev.write_rows(out / "training_summary.csv", summary)
        plot_training({s["run"]: training[d] for s, d in zip(summary, training)}, out / "training_curves.png")
        written += ["training_summary.csv", "training_curves.png"]
    if evals:
        rows = []
        for p in evals:
            for r in _read_csv(p):
                rows.append({"source": str(p.relative_to(run_dir)), **r})
        ev.write_rows(out / "eval_summary.csv", rows)
        written.append("eval_summary.csv")
    if comparisons:
        rows = [r for p in comparisons for r in _read_csv(p)]
        ev.write_rows(out / "ablations.csv", rows)
        written.append("ablations.csv")
    print(f"exported {', '.join(written)} to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "inspect": cmd_inspect, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    _set_threads(getattr(args, "threads", None))

    from .config import ConfigError
    from .eval import ConfigMismatch
    from .nn import CheckpointError
    from .physics import SimulationDiverged

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SimulationDiverged, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
