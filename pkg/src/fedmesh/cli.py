"""Command-line entry point: ``fedmesh [--config FILE] [--key VALUE ...]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from fedmesh.config import CONFIG_KEYS, FIELD_TYPES, ExperimentConfig, build_config, load_config_file
from fedmesh.protocol import ConfigError

log = logging.getLogger("fedmesh")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EPILOG = """\
outputs (under --out):
  round_log.csv      one row per completed round, header always written:
                       round, client_0_loss .. client_{K-1}_loss, aggregate_loss,
                       accuracy, precision, recall, f1, wall_time_ms
                     client losses are final-epoch mean training losses; an empty
                     cell means that client was dropped from the round. metrics are
                     for the new global model on the held-out set (pneumonia = positive).
  services.jsonl     one latency-ledger entry per service call
  final_report.json  final metrics, config echo, t_pre/t_inter/t_f summaries

modes:
  local   whole federation in one process over the simulated network
  serve   cloud server on --listen; runs once --clients clients have joined
  join    one edge client (--client-id) connecting to --connect

every config-file key can be overridden by the flag of the same name
(underscores become dashes). FEDMESH_LOG={error,info,debug} sets verbosity.
"""

# flags with their own short help; everything else gets a generic line
HELP = {
    "config": "JSON file with flat config keys",
    "mode": "local | serve | join",
    "clients": "number of clients K",
    "rounds": "communication rounds R",
    "epochs": "local epochs per round E",
    "lr": "Adam learning rate",
    "batch": "mini-batch size",
    "seed": "experiment seed",
    "data": "'synthetic' or an image folder with NORMAL/ and PNEUMONIA/",
    "listen": "HOST:PORT the server binds (serve mode)",
    "connect": "HOST:PORT of the server (join mode)",
    "client_id": "this client's id (join mode)",
    "out": "output directory (created if absent)",
}


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedmesh",
        description="Federated transfer learning over simulated or socket transports.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument("--config", metavar="PATH", help=HELP["config"])
    defaults = ExperimentConfig()
    for key in CONFIG_KEYS:
        default = getattr(defaults, key)
        text = HELP.get(key, key.replace("_", " "))
        kwargs = {"dest": key, "help": f"{text} (default: {default})"}
        if FIELD_TYPES[key] == "bool":
            kwargs["action"] = argparse.BooleanOptionalAction
        else:
            kwargs["metavar"] = key.upper()
            if key == "mode":
                kwargs["choices"] = ("local", "serve", "join")
        parser.add_argument(_flag(key), **kwargs)
    return parser


def configure_logging():
    name = os.environ.get("FEDMESH_LOG", "warning").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def parse_config(argv=None):
    args = vars(build_parser().parse_args(argv))
    path = args.pop("config", None)
    file_values = load_config_file(path) if path else {}
    return build_config(file_values, args)


def main(argv=None):
    configure_logging()
    try:
        cfg = parse_config(argv)
        cfg.validate_paths()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fedmesh: error: {exc}", file=sys.stderr)
        return 2

    from fedmesh import runner

    if cfg.mode == "serve":
        result = runner.serve(cfg, on_listening=lambda h, p: print(f"listening on {h}:{p}", flush=True))
    elif cfg.mode == "join":
        return runner.join(cfg)
    else:
        result = runner.run_experiment(cfg)
    if result.exit_code == 0:
        metrics = result.report.get("final_metrics", {})
        print(f"done: {len(result.history)} rounds, accuracy={metrics.get('accuracy')}, f1={metrics.get('f1')}, "
              f"artifacts in {result.out_dir}")
    else:
        print(f"fedmesh: {result.error}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
