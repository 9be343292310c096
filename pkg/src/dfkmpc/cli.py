"""Command line entry point.

Every subcommand reads an optional TOML config, applies ``--seed`` and
writes under ``--out``. Identified models are cached in ``<out>/models``
and reused when the stored config digest matches.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, dump_config, load_config
from .edmd import EdmdModel
from .experiments import CONTROLLERS, build_edmd, build_representation, collect, run_experiment_a, run_experiment_b
from .koopman_id import KoopmanRepresentation
from .traffic_sim import Trajectory

log = logging.getLogger("dfkmpc")


def _digest(cfg: Config) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def _cached(out: Path, name: str, cfg: Config, build, loader):
    path, meta = out / "models" / f"{name}.npz", out / "models" / f"{name}.json"
    if path.is_file() and meta.is_file() and json.loads(meta.read_text()).get("config") == _digest(cfg):
        log.info("reusing %s", path)
        return loader(path)
    obj = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    obj.save(path)
    meta.write_text(json.dumps({"config": _digest(cfg), "seed": cfg.seed}, sort_keys=True) + "\n")
    return obj


def _representation(cfg: Config, out: Path) -> KoopmanRepresentation:
    def build():
        data_path = out / "data.csv"
        data = Trajectory.from_csv(data_path, cfg["dt"]) if data_path.is_file() else None
        return build_representation(cfg, data)
    return _cached(out, "representation", cfg, build, KoopmanRepresentation.load)


def _edmd(cfg: Config, out: Path) -> EdmdModel:
    return _cached(out, "edmd", cfg, lambda: build_edmd(cfg), EdmdModel.load)


def _report(reports, out: Path) -> int:
    failed = [r for r in reports if r.failed_step is not None]
    for r in reports:
        metric = r.wave_ratio if r.wave_ratio is not None else r.realized_cost
        print(f"{r.scenario:16s} {r.controller:6s} {metric if metric is not None else 'failed'}")
    for r in failed:
        print(f"error: {r.controller} failed at step {r.failed_step}; diagnostics in "
              f"{out / 'runs' / f'{r.scenario}_{r.controller}' / 'diagnostics.csv'}", file=sys.stderr)
    return 1 if failed else 0


def _models(args, cfg, out, controllers):
    rep = _representation(cfg, out) if "dfk" in controllers else None
    edmd = _edmd(cfg, out) if "edmdk" in controllers else None
    return rep, edmd


def cmd_collect(args, cfg, out):
    path = out / "data.csv"
    collect(cfg).to_csv(path)
    print(path)
    return 0


def cmd_build_rep(args, cfg, out):
    rep = _representation(cfg, out)
    print(f"iterations={rep.iterations} converged={rep.converged} rel_change={rep.final_rel_change:.3e}")
    return 0


def cmd_edmd_fit(args, cfg, out):
    model = _edmd(cfg, out)
    print(f"n_z={model.n_z}")
    return 0


def cmd_exp_a(args, cfg, out):
    controllers = (args.controller,) if args.controller else CONTROLLERS
    rep, edmd = _models(args, cfg, out, controllers)
    return _report(run_experiment_a(cfg, out, controllers, rep, edmd), out)


def cmd_exp_b(args, cfg, out):
    controllers = (args.controller,) if args.controller else ("dfk", "edmdk")
    if "hdv" in controllers:
        raise ConfigError("experiment B compares the predictive controllers only")
    rep, edmd = _models(args, cfg, out, controllers)
    return _report(run_experiment_b(cfg, out, controllers, rep, edmd), out)


def cmd_simulate(args, cfg, out):
    controller = args.controller or "hdv"
    rep, edmd = _models(args, cfg, out, (controller,))
    return _report(run_experiment_a(cfg, out, (controller,), rep, edmd), out)


COMMANDS = {
    "collect": (cmd_collect, "simulate the offline excitation record"),
    "build-rep": (cmd_build_rep, "identify the dictionary-free representation"),
    "edmd-fit": (cmd_edmd_fit, "fit the EDMD baseline model"),
    "exp-a": (cmd_exp_a, "wave mitigation under a sine disturbance"),
    "exp-b": (cmd_exp_b, "velocity tracking on synthetic profiles"),
    "simulate": (cmd_simulate, "one closed-loop run of the disturbance scenario"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfkmpc", description="Data-driven Koopman predictive control of a CAV platoon.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--controller", choices=CONTROLLERS)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else Config()
        if args.seed is not None:
            if args.seed < 0:
                parser.error("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command][0](args, cfg, args.out)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
