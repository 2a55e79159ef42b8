"""Command-line entry point: gen-data, train, eval, gradcheck, report.

Exit codes are part of the interface::

    0 success   1 check failure   2 config/usage   3 I/O   4 numeric   5 version
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERSION = range(6)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    env = os.environ.get("TRAJSSL_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"TRAJSSL_JOBS must be an integer, got {env!r}", EXIT_CONFIG)
    return 1


def _load_config(path):
    from trajssl.config import ConfigError, RunConfig
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO)


def _load_manifest(path):
    from trajssl.data.manifest import Manifest
    try:
        return Manifest.load(path)
    except OSError as exc:
        raise CliError(f"cannot read manifest {path}: {exc}", EXIT_IO)
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid manifest {path}: {exc}", EXIT_CONFIG)


def _split_list(text: str, valid: tuple, what: str) -> list:
    items = list(valid) if text == "all" else [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in valid]
    if bad or not items:
        raise CliError(f"unknown {what} {', '.join(bad) or '(empty)'}; valid: {', '.join(valid)}", EXIT_CONFIG)
    return items


def cmd_gen_data(args) -> int:
    from trajssl.data.dataset import ImageSource, dump_images
    from trajssl.data.manifest import build_manifest
    from trajssl.pipeline.runs import write_if_changed

    cfg = _load_config(args.config)
    try:
        manifest = build_manifest(cfg.dataset, cfg.seed)
    except ValueError as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "manifest.json")
    changed = write_if_changed(path, manifest.to_json().encode())
    write_if_changed(os.path.join(args.out, "config.json"), cfg.dumps().encode())
    print(f"{'wrote' if changed else 'unchanged'} {path}")
    if args.dump_images:
        n = dump_images(ImageSource(manifest, cache=False), os.path.join(args.out, "images"))
        print(f"dumped {n} images")
    return EXIT_OK


def cmd_train(args) -> int:
    from trajssl.pipeline.runs import write_run
    from trajssl.pipeline.train import TrainingDiverged, train_ssl

    cfg = _load_config(args.config)
    if args.lam is not None:
        if args.lam < 0:
            raise CliError("--lambda must be non-negative", EXIT_CONFIG)
        cfg = cfg.with_lambda(args.lam)
    manifest = _load_manifest(args.manifest)

    def progress(epoch, result):
        if args.verbose:
            e, sem, traj, total = result.epoch_table()[-1]
            print(f"epoch {e}: sem {sem:.4f} traj {traj:.4f} total {total:.4f}", file=sys.stderr)

    try:
        result = train_ssl(cfg.train, manifest, cfg.model, progress=progress)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    write_run(args.out, result.model, cfg.to_dict(), result.epoch_table(), cfg.train.lam)
    print(f"wrote run to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from trajssl.config import RunConfig
    from trajssl.nn.checkpoint import CheckpointVersionError
    from trajssl.pipeline.evaluate import LAYERS, SCENARIOS, Evaluator
    from trajssl.pipeline.metrics import dump_embeddings, write_metrics
    from trajssl.pipeline.runs import load_model

    scenarios = _split_list(args.scenarios, SCENARIOS, "scenario")
    layers = _split_list(args.layers, LAYERS, "layer")
    try:
        model, echo = load_model(args.checkpoint)
    except CheckpointVersionError as exc:
        raise CliError(f"{args.checkpoint}: {exc}", EXIT_VERSION)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}", EXIT_IO)
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid checkpoint {args.checkpoint}: {exc}", EXIT_CONFIG)
    run_cfg = _load_config(args.config) if args.config else RunConfig.from_dict(echo["run"])
    manifest = _load_manifest(args.manifest)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    evaluator = Evaluator(model, manifest, run_cfg.eval, seed=run_cfg.seed, jobs=_jobs(args))
    records = []
    for kind in scenarios:
        for layer in layers:
            rec = evaluator.run(kind, layer)
            records.append(rec)
            print(f"{kind:20s} {layer:17s} {rec.accuracy:.4f} ({rec.correct}/{rec.n_eval})")
    write_metrics(out, records, timings=args.timings)
    if args.dump_embeddings:
        from trajssl.pipeline.evaluate import SCENARIO_DATA
        for kind in scenarios:
            domain, pose_set = SCENARIO_DATA[kind]
            for split in ("train", "test"):
                views = evaluator.views(domain, split, pose_set)
                for layer in layers:
                    prefix = os.path.join(out, "embeddings", f"{domain}_{pose_set}_{split}_{layer}")
                    os.makedirs(os.path.dirname(prefix), exist_ok=True)
                    dump_embeddings(prefix, evaluator.reps(domain, split, pose_set, layer), views.index.tolist(),
                                    {"domain": domain, "pose_set": pose_set, "split": split, "layer": layer})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from trajssl.nn.gradcheck import run_all

    results = run_all(trials=args.trials)
    width = max(len(r.name) for r in results)
    print(f"{'subgraph'.ljust(width)}  trials  max_rel_error  tol     status")
    for r in results:
        print(f"{r.name.ljust(width)}  {r.trials:6d}  {r.max_rel_error:13.3e}  {r.tol:.0e}  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_report(args) -> int:
    from trajssl.pipeline.metrics import merge_runs, read_metrics, report_csv, report_text
    from trajssl.pipeline.runs import read_run_info

    runs = []
    for d in args.run_dirs:
        try:
            records = read_metrics(d)
        except FileNotFoundError:
            raise CliError(f"no metrics in {d}; run `trajssl eval` first", EXIT_CONFIG)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CliError(f"unreadable metrics in {d}: {exc}", EXIT_CONFIG)
        try:
            info = read_run_info(d)
            label, seed = info["label"], info["seed"]
        except (OSError, KeyError, json.JSONDecodeError):
            label, seed = os.path.basename(os.path.normpath(d)), records[0].seed if records else 0
        runs.append((label, seed, records))
    rows, warnings = merge_runs(runs)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    text = report_text(rows)
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w") as fh:
            fh.write(report_csv(rows))
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajssl", description="Train and probe trajectory-regularized self-supervised encoders.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the dataset manifest (and optionally dump images)")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.add_argument("--dump-images", action="store_true", help="write every in-domain view as a P5 graymap")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("config")
    t.add_argument("manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--lambda", dest="lam", type=float, default=None, help="trajectory loss weight")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--out", default=None, help="defaults to the checkpoint's directory")
    e.add_argument("--config", default=None, help="override the config echoed in the checkpoint")
    e.add_argument("--scenarios", default="all")
    e.add_argument("--layers", default="feature")
    e.add_argument("--jobs", type=int, default=None)
    e.add_argument("--timings", action="store_true", help="fill wall_time_s in the CSV (breaks byte-identity)")
    e.add_argument("--dump-embeddings", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    c.add_argument("--trials", type=int, default=100)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="compare metrics across run directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
