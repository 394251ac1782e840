"""Command-line entry points: batch simulation, OC recomputation, live service.

Exit codes: 0 success, 1 runtime defect, 2 invalid configuration or input.
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import sys

from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .scenarios import ScenarioFormatError, load_scenario
from .simulate import (
    ResultsParseError,
    oc_from_rows,
    operating_characteristics,
    render_oc_document,
    replicate,
    result_to_row,
    rows_from_csv,
    rows_to_csv,
    true_surface_table,
)

ENV_OUT = "DOSECOMBO_OUT"
ENV_WORKERS = "DOSECOMBO_WORKERS"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dosecombo",
                                     description="Dose-combination trial engine")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="replicate trials against a scenario truth")
    sim.add_argument("--config", required=True, help="run configuration (YAML)")
    sim.add_argument("--trials", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--workers", type=int, default=None)

    oc = sub.add_parser("oc", help="recompute operating characteristics from a results table")
    oc.add_argument("--results", required=True)
    oc.add_argument("--scenario", required=True)

    srv = sub.add_parser("serve", help="start the live trial-conduct service")
    srv.add_argument("--config", required=True, help="design configuration (YAML)")
    srv.add_argument("--port", type=int, default=8410)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--sessions-dir", default="sessions")
    return parser


def _resolved_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    out = args.out or os.environ.get(ENV_OUT) or cfg.out_dir
    workers = args.workers if args.workers is not None else \
        int(os.environ.get(ENV_WORKERS, cfg.workers))
    trials = args.trials if args.trials is not None else cfg.trials
    seed = args.seed if args.seed is not None else cfg.seed
    if trials < 1 or workers < 1:
        raise ConfigError("trials and workers must be >= 1")
    return RunConfig(design=cfg.design, scenario_path=cfg.scenario_path,
                     trials=trials, seed=seed, out_dir=out, workers=workers)


def cmd_simulate(args) -> int:
    try:
        cfg = _resolved_run_config(args)
        scenario = load_scenario(cfg.scenario_path)
    except (ConfigError, ScenarioFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config_used.yaml")

    results = replicate(scenario, cfg.design, cfg.trials, cfg.seed, workers=cfg.workers)
    rows = [result_to_row(r) for r in results]
    (out / "results.csv").write_text(rows_to_csv(rows))
    with open(out / "events.jsonl", "w") as fh:
        for r in results:
            for event in r.events:
                fh.write(json.dumps({"trial": r.trial, **event}, sort_keys=True) + "\n")
    oc = oc_from_rows(rows, scenario.tradeoff.theta_T)
    (out / "oc.txt").write_text(render_oc_document(oc, scenario))
    (out / "true_surface.csv").write_text(true_surface_table(scenario))
    print(f"wrote {cfg.trials} trials to {out}")
    return 0


def cmd_oc(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        rows = rows_from_csv(pathlib.Path(args.results).read_text())
    except (ScenarioFormatError, ResultsParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    oc = oc_from_rows(rows, scenario.tradeoff.theta_T)
    sys.stdout.write(render_oc_document(oc, scenario))
    return 0


def cmd_serve(args) -> int:
    import socket

    import uvicorn

    from .config import design_from_dict
    from .service import create_app

    try:
        import yaml
        with open(args.config) as fh:
            doc = yaml.safe_load(fh)
        design = design_from_dict(doc)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((args.host, args.port))
    except OSError:
        print(f"error: port {args.port} is not available", file=sys.stderr)
        return 2
    finally:
        probe.close()

    app = create_app(sessions_dir=args.sessions_dir, default_design=design)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"simulate": cmd_simulate, "oc": cmd_oc, "serve": cmd_serve}
    try:
        return handlers[args.command](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime defect, not a usage error
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
