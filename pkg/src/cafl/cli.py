"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor

from .config import ScenarioConfig
from .errors import BoundPreconditionError, ConfigError, InfeasibleGeometry
from .harness import expand_grid, parse_grid, run_scenario, write_result

log = logging.getLogger("cafl")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SELFTEST = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafl", description="Coherence-aware over-the-air federated learning simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, action="append", help="seed to run (repeatable; overrides the config)")
    common.add_argument("--out-dir", default="results")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", parents=[common], help="run one scenario")
    r.add_argument("config")
    s = sub.add_parser("sweep", parents=[common], help="run a grid of scenarios")
    s.add_argument("config")
    s.add_argument("--grid", required=True, help='e.g. "scheme=baseline,additive;pilot_fraction=0.2,0.4"')
    b = sub.add_parser("bounds", parents=[common], help="run with measured error constants and bound curves")
    b.add_argument("config")
    sub.add_parser("selftest", help="quick end-to-end checks")
    return p


def _load(args) -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.load(args.config)
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {args.config}") from None
    if args.seed:
        cfg = cfg.replace(seeds=list(args.seed))
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _run_one(cfg, args, sid=None):
    res = run_scenario(cfg, threads=args.threads, scenario_id=sid)
    path = write_result(res, args.out_dir, args.format)
    log.info("wrote %s", path)
    return res, path


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cmd == "selftest":
            from .selftest import run_selftest
            return EXIT_OK if run_selftest() else EXIT_SELFTEST
        cfg = _load(args)
        if args.cmd == "run":
            _, path = _run_one(cfg, args)
            print(path)
        elif args.cmd == "bounds":
            cfg = cfg.replace(**{"bounds.enabled": True})
            res, path = _run_one(cfg, args)
            c = res.constants
            print(path)
            print(f"sigma_g2={c.sigma_g2:.6g} sigma_ul2={c.sigma_ul2:.6g} sigma_dl2={c.sigma_dl2:.6g} "
                  f"B={c.B:.6g} Xi={c.Xi:.6g} D2={c.D2:.6g}")
            for k, ok in res.bound_checks().items():
                print(f"{k}: {'holds' if ok else 'VIOLATED'}")
        else:
            points = expand_grid(cfg, parse_grid(args.grid))
            inner = argparse.Namespace(**{**vars(args), "threads": 1})
            with ThreadPoolExecutor(max_workers=args.threads) as ex:
                paths = list(ex.map(lambda pt: _run_one(pt[1], inner, pt[0])[1], points))
            print("\n".join(paths))
    except InfeasibleGeometry as e:
        print(f"infeasible geometry: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, BoundPreconditionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
