"""``harmonizer`` command line.

Exit status: 0 on success, 2 for a missing prerequisite artifact, a bad config
or a locked workspace, 1 when a stage fails internally.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .artifacts import MissingArtifact

logger = logging.getLogger("harmonizer")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--workspace", help="artifact directory (overrides [workspace] path)")
    common.add_argument("--input", help="source corpus file")
    common.add_argument("--source-kind", choices=["nih_json", "sdoh_csv", "generic_tabular"])
    common.add_argument("--ground-truth-column")
    common.add_argument("--explode-designations", action="store_true", default=None,
                        help="one record per designation instead of one per CDE")
    common.add_argument("--provider", choices=["local", "remote"])
    common.add_argument("--labeler-provider", choices=["local", "remote"])
    common.add_argument("--binary", action="store_true", default=None, help="also write embeddings.bin")
    common.add_argument("--seed", type=int)
    common.add_argument("--min-cluster-size", type=int)
    common.add_argument("--min-samples", type=int)
    common.add_argument("--grid", help="comma-separated min_cluster_size values")
    common.add_argument("--include-noise-as-cluster", action="store_true", default=None)
    common.add_argument("--dump-tree", action="store_true", default=None)
    common.add_argument("--noise-as-class", action="store_true", default=None)
    common.add_argument("--save-model", action="store_true", default=None)
    common.add_argument("--n-jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="harmonizer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    demo = sub.add_parser("init-demo", help="write the bundled demo corpus and a config into a directory")
    demo.add_argument("directory")
    return parser


def _overrides(args) -> dict:
    keys = [
        "workspace", "input", "source_kind", "ground_truth_column", "explode_designations",
        "provider", "labeler_provider", "binary", "seed", "min_cluster_size", "min_samples", "grid",
        "include_noise_as_cluster", "dump_tree", "noise_as_class", "save_model", "n_jobs",
    ]
    return {k: getattr(args, k, None) for k in keys}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "init-demo":
        path = pipeline.init_demo(args.directory)
        print(f"init-demo: wrote {path} and demo_corpus.csv")
        return 0

    try:
        cfg = pipeline.load_config(args.config, _overrides(args))
    except pipeline.ConfigError as exc:
        print(f"harmonizer: config error: {exc}", file=sys.stderr)
        return 2

    from filelock import Timeout

    stages = pipeline.RUN_ORDER if args.command == "run" else (args.command,)
    try:
        with cfg.ws.lock():
            for stage in stages:
                try:
                    print(pipeline.STAGES[stage](cfg), flush=True)
                except (MissingArtifact, pipeline.ConfigError):
                    raise
                except Exception as exc:  # noqa: BLE001 - reported with the stage name
                    logger.debug("stage failure", exc_info=True)
                    print(f"harmonizer: {stage} failed: {exc}", file=sys.stderr)
                    return 1
    except Timeout:
        print(f"harmonizer: workspace {cfg.workspace} is locked by another command", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"harmonizer: {exc}", file=sys.stderr)
        return 2
    except pipeline.ConfigError as exc:
        print(f"harmonizer: config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
