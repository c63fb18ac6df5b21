"""Command-line driver for the build pipeline and the serving daemon.

Exit codes: 0 success, 2 a predecessor stage has not been run, 3 bad or
missing input data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .graph import ManifestError
from .medial import MedialFormatError
from .pipeline import STAGES, DataError, Pipeline, PipelineConfig, PreconditionError

EXIT_OK, EXIT_PRECONDITION, EXIT_DATA = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="layercache", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("-c", "--config", default="config.json")
        sp.add_argument("--backbone")
        sp.add_argument("--data")
        sp.add_argument("--artifacts")
        sp.add_argument("--tolerance", type=float)
        sp.add_argument("--skip-last-k", type=int, dest="skip_last_k")
        sp.add_argument("--split-seed", type=int, dest="split_seed")
        sp.add_argument("--seed", type=int, help="training seed")
        sp.add_argument("--warm-start", action="store_const", const=True, dest="warm_start",
                        help="retrain from the previous cache weights instead of from scratch")
        return sp

    stage("candidates", "list candidate layers of the backbone")
    stage("collect", "build medial datasets from unlabeled inputs")
    stage("search", "search cache architectures per candidate layer")
    stage("train-caches", "train the selected cache architectures")
    stage("calibrate", "fit temperatures and assign confidence thresholds")
    stage("optimize", "pick the best subset of caches")
    stage("evaluate", "evaluate the cache-enabled model on the labeled test split")
    sp = stage("serve", "serve the cache-enabled model over the framed TCP protocol")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int)
    stage("report", "show retrain-trigger state")
    stage("all", "run every build stage in order")

    mk = sub.add_parser("make-toy", help="write a toy backbone, data set and config")
    mk.add_argument("folder")
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--noise", type=float, default=2.0)
    return p


def _config(args) -> PipelineConfig:
    overrides = {k: getattr(args, k) for k in ("backbone", "data", "artifacts", "tolerance",
                                               "skip_last_k", "split_seed", "warm_start")}
    cfg = PipelineConfig.load(args.config, **overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-toy":
        from .toy import write_toy_project
        info = write_toy_project(args.folder, seed=args.seed, noise=args.noise)
        print(f"wrote {args.folder}; backbone accuracy on traffic {info['backbone_accuracy']:.4f}")
        return EXIT_OK
    try:
        cfg = _config(args)
        pipe = Pipeline(cfg)
        if args.command == "serve":
            from .serving import serve
            model = pipe.cache_enabled_model("serve")
            print(f"serving on {args.host}:{args.port or cfg.port}", flush=True)
            serve(model, args.host, args.port or cfg.port, report=pipe.report)
            return EXIT_OK
        if args.command == "report":
            print(json.dumps(pipe.report(), indent=1))
            return EXIT_OK
        stages = STAGES if args.command == "all" else (args.command,)
        for s in stages:
            result = pipe.run(s)
            _summarize(s, result)
    except PreconditionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (DataError, ManifestError, MedialFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _summarize(stage, result):
    if stage == "candidates":
        for c in result:
            print(f"{c.ordinal}: {c.name} tap {c.tap_shape} cumulative {c.cumulative_flops} "
                  f"fallback {c.fallback_flops}")
    elif stage == "collect":
        print(f"collected {len(next(iter(result.values())))} samples for {len(result)} layers")
    elif stage == "search":
        for layer in result["layers"]:
            sel = [r["architecture"] for r in layer["architectures"] if r["selected"]]
            print(f"{layer['layer']}: {sel[0] if sel else 'discarded'} "
                  f"({len(layer['architectures'])} trained)")
    elif stage == "train-caches":
        for c in result:
            print(f"{c.layer}: val accuracy {c.metrics['val_accuracy']:.4f}, C1 {c.c1}")
    elif stage == "calibrate":
        for c in result:
            th = "disabled" if not c.enabled else f"{c.threshold:.2f}"
            print(f"{c.layer}: temperature {c.temperature:.4f}, threshold {th}")
    elif stage == "optimize":
        print(f"enabled caches {list(result.subset)} score {result.score}")
    elif stage == "evaluate":
        print(result.to_text())


if __name__ == "__main__":
    sys.exit(main())
