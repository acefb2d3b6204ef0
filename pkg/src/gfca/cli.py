"""Command-line entry point: ``gfca {train,synth,gradcheck,report,export-embeddings}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli

from . import gradcheck as gc
from .adapt import encoder_forward
from .config import ExperimentConfig, apply_overrides, from_tree, load_config
from .datasets import (DomainDataset, FewShotProtocol, SyntheticDomainConfig, load_features,
                       make_few_shot_split, save_features, synthesize_domain_pair)
from .errors import ConfigError, GFCAError, TrainingAborted
from .evaluation import MetricsReport, cross_task_average, export_embeddings
from .trainer import evaluate_state, fit, json_log_writer, load_state, save_state, synthetic_eval_batch

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
LOG_FILE = "train_log.jsonl"
CHECKPOINT = "checkpoint.gfck"
RESOLVED = "resolved_config.toml"


# ---------------------------------------------------------------- experiment plumbing

def _with_class_count(ds: DomainDataset, c: int, tag: str) -> DomainDataset:
    return DomainDataset(ds.features, ds.labels, c, tag)


def prepare_data(cfg: ExperimentConfig):
    """Return ``(source, target, protocol, task)`` for a resolved config."""
    if cfg.synthetic is not None:
        pair = synthesize_domain_pair(cfg.synthetic)
        source, target, task = pair.source, pair.target, "synthetic"
    else:
        source = load_features(cfg.data.source, cfg.data.format, domain_tag="source")
        target = load_features(cfg.data.target, cfg.data.format, domain_tag="target")
        if source.dim != target.dim:
            raise ConfigError("data", f"source has {source.dim} features, target {target.dim}")
        c = max(source.class_count, target.class_count)
        source = _with_class_count(source, c, "source")
        target = _with_class_count(target, c, "target")
        task = f"{Path(cfg.data.source).stem}->{Path(cfg.data.target).stem}"
    protocol = None
    if cfg.protocol.few_shot_classes:
        seed = cfg.train.seed if cfg.protocol.seed is None else cfg.protocol.seed
        try:
            protocol = FewShotProtocol.from_few_shot(list(cfg.protocol.few_shot_classes),
                                                     source.class_count, cfg.protocol.shots, seed)
        except GFCAError as exc:
            raise ConfigError("protocol", str(exc)) from None
    return source, target, protocol, task


def _split(source, protocol):
    if protocol is None:
        return source, source.subset([])
    return make_few_shot_split(source, protocol)


def _finish_report(report: MetricsReport, task: str) -> MetricsReport:
    return replace(report, task=task)


def report_from_checkpoint(cfg: ExperimentConfig, checkpoint) -> MetricsReport:
    """Rebuild the MetricsReport of a finished run from its checkpoint."""
    source, target, protocol, task = prepare_data(cfg)
    train, heldout = _split(source, protocol)
    prot = protocol or FewShotProtocol((), tuple(range(source.class_count)), 1, cfg.train.seed)
    state = load_state(cfg.train, prot, checkpoint)
    target._require_labels()
    return _finish_report(evaluate_state(state, train, heldout, target.features, target.labels), task)


def cmd_train(cfg: ExperimentConfig, out=None) -> MetricsReport:
    out = out or sys.stdout
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED).write_text(cfg.to_toml(), encoding="utf-8")
    source, target, protocol, task = prepare_data(cfg)
    target._require_labels()
    with (out_dir / LOG_FILE).open("w", encoding="utf-8") as log:
        try:
            res = fit(cfg.train, source, target.unlabeled(), protocol, json_log_writer(log))
        except TrainingAborted as exc:
            diag = out_dir / "abort.json"
            diag.write_text(json.dumps({"message": str(exc), "step": exc.step, "losses": exc.losses},
                                       sort_keys=True, indent=2), encoding="utf-8")
            raise TrainingAborted(f"{exc} (diagnostics in {diag})", exc.step, exc.losses) from None
    save_state(res.state, out_dir / CHECKPOINT)
    report = _finish_report(evaluate_state(res.state, res.train, res.heldout, target.features,
                                           target.labels), task)
    if "json" in cfg.formats:
        (out_dir / REPORT_JSON).write_text(report.to_json(), encoding="utf-8")
    if "csv" in cfg.formats:
        (out_dir / REPORT_CSV).write_text(report.to_csv(), encoding="utf-8")
    fs = report.few_shot_accuracy
    print(f"{cfg.train.mode} seed={cfg.train.seed}: overall {report.overall_accuracy:.2f}"
          + (f", few-shot {fs:.2f}" if fs is not None else "") + f" -> {out_dir}", file=out)
    return report


def cmd_synth(config: SyntheticDomainConfig, out_dir, out=None) -> dict:
    """Write source/target in both formats plus ``truth.json``."""
    out = out or sys.stdout
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pair = synthesize_domain_pair(config)
    paths = {}
    for name, ds in (("source", pair.source), ("target", pair.target)):
        for suffix in ("csv", "gfcf"):
            p = out_dir / f"{name}.{suffix}"
            save_features(ds, p)
            paths[f"{name}.{suffix}"] = str(p)
    truth = {k: np.asarray(v).tolist() for k, v in pair.truth._asdict().items()}
    truth["config"] = {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in config.__dict__.items()}
    (out_dir / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=2), encoding="utf-8")
    print(f"wrote {pair.source.n} source and {pair.target.n} target rows to {out_dir}", file=out)
    return paths


def cmd_gradcheck(scope="all", seed=0, count=25, fault=False, out=None) -> bool:
    out = out or sys.stdout
    results = gc.run_suite(scope, range(seed, seed + count), fault=fault)
    print(gc.format_results(results), file=out)
    return all(r.passed for r in results)


# ---------------------------------------------------------------- report aggregation

def _load_report(path: Path) -> MetricsReport:
    if path.is_dir():
        path = path / REPORT_JSON
    try:
        return MetricsReport.from_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise GFCAError(f"{path}: {exc.strerror}") from None
    except (ValueError, TypeError) as exc:
        raise GFCAError(f"{path}: not a metrics report ({exc})") from None


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    return mean, std


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Table-shaped summary: per mode, per task few-shot accuracy plus averages.

    Seeds of one (mode, task) pair are pooled as mean and sample standard
    deviation; the Avg columns apply :func:`cross_task_average` to the task
    means.
    """
    if not reports:
        raise GFCAError("no reports to aggregate")
    ref = reports[0]
    for r in reports[1:]:
        if (sorted(r.few_shot_classes), r.shots_per_class, r.class_count) != \
                (sorted(ref.few_shot_classes), ref.shots_per_class, ref.class_count):
            raise GFCAError(f"inconsistent class protocol: {r.mode}/{r.task} seed {r.seed} uses "
                            f"few-shot {r.few_shot_classes} x{r.shots_per_class} of {r.class_count}, "
                            f"expected {ref.few_shot_classes} x{ref.shots_per_class} of {ref.class_count}")
    tasks = sorted({r.task for r in reports})
    modes = list(dict.fromkeys(r.mode for r in reports))
    table = {"tasks": tasks, "rows": []}
    for m in modes:
        row = {"mode": m, "cells": {}, "avg": {}}
        means = {"few_shot_accuracy": [], "normal_accuracy": [], "overall_accuracy": []}
        for t in tasks:
            runs = [r for r in reports if r.mode == m and r.task == t]
            if not runs:
                row["cells"][t] = (None, None, 0)
                continue
            for key in means:
                mu, _ = _stats([getattr(r, key) for r in runs])
                if mu is not None:
                    means[key].append(mu)
            mu, sd = _stats([r.few_shot_accuracy for r in runs])
            row["cells"][t] = (mu, sd, len(runs))
        for key, label in (("few_shot_accuracy", "Avg_l"), ("normal_accuracy", "Avg_n"),
                           ("overall_accuracy", "Avg")):
            row["avg"][label] = cross_task_average(means[key]) if means[key] else None
        table["rows"].append(row)
    return table


def _cell(mu, sd):
    if mu is None:
        return "-"
    return f"{mu:.1f}" if sd is None else f"{mu:.1f} ± {sd:.1f}"


def format_table(table: dict, fmt: str = "markdown") -> str:
    head = ["mode"] + table["tasks"] + ["Avg_l", "Avg_n", "Avg"]
    body = []
    for row in table["rows"]:
        cells = [_cell(mu, sd) for (mu, sd, _) in (row["cells"][t] for t in table["tasks"])]
        avgs = ["-" if row["avg"][k] is None else f"{row['avg'][k]:.1f}" for k in ("Avg_l", "Avg_n", "Avg")]
        body.append([row["mode"]] + cells + avgs)
    if fmt == "csv":
        import csv
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        w.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def cmd_report(paths, fmt="markdown", out=None) -> str:
    out = out or sys.stdout
    text = format_table(aggregate_reports([_load_report(Path(p)) for p in paths]), fmt)
    out.write(text)
    return text


def cmd_export_embeddings(run_dir, path, out=None) -> Path:
    out = out or sys.stdout
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / RESOLVED)
    source, target, protocol, _ = prepare_data(cfg)
    train, heldout = _split(source, protocol)
    prot = protocol or FewShotProtocol((), tuple(range(source.class_count)), 1, cfg.train.seed)
    state = load_state(cfg.train, prot, run_dir / CHECKPOINT)
    sets = {"real-train": (train.features, train.labels),
            "real-heldout": (heldout.features, heldout.labels)}
    if cfg.train.uses_gan:
        fb = synthetic_eval_batch(state)
        sets["synthetic"] = (fb.features, fb.labels)
    sets["target"] = (target.features, target.labels)
    written = export_embeddings(lambda x: encoder_forward(state.encoder, x), path, sets)
    print(f"wrote embeddings to {written}", file=out)
    return written


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment and write its report")
    t.add_argument("--config", help="TOML experiment file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (bare keys go to [train])")

    s = sub.add_parser("synth", help="write a synthetic source/target pair")
    s.add_argument("--config", help="TOML file; only its [synthetic] section is used")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a synthetic option, e.g. noise_std=0.4")
    s.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--scope", default="all", choices=gc.SCOPES)
    g.add_argument("--seed", type=int, default=0, help="first instance seed")
    g.add_argument("--count", type=int, default=25, help="number of seeds per loss")
    g.add_argument("--inject-fault", action="store_true",
                   help="corrupt one analytic gradient entry per instance (must fail)")

    r = sub.add_parser("report", help="aggregate run directories into a table")
    r.add_argument("runs", nargs="+", help="run directories or report JSON files")
    r.add_argument("--format", default="markdown", choices=("markdown", "csv"))
    r.add_argument("--out", help="write the table here instead of stdout")

    e = sub.add_parser("export-embeddings", help="encode a run's datasets to CSV")
    e.add_argument("run", help="run directory written by train")
    e.add_argument("--out", required=True, help="CSV path")
    return p


def _synth_config(args) -> SyntheticDomainConfig:
    tree: dict = {}
    if args.config:
        try:
            tree = tomli.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError("config", str(exc)) from None
        tree = {"synthetic": tree.get("synthetic", {})}
    apply_overrides(tree, [f"synthetic.{kv}" if "." not in kv.split("=", 1)[0] else kv
                           for kv in args.set])
    tree.setdefault("synthetic", {})
    tree["output"] = {"dir": args.out}
    return from_tree(tree).synthetic


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(load_config(args.config, args.set))
        elif args.command == "synth":
            cmd_synth(_synth_config(args), args.out)
        elif args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(args.scope, args.seed, args.count, args.inject_fault) \
                else EXIT_RUNTIME
        elif args.command == "report":
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    cmd_report(args.runs, args.format, fh)
            else:
                cmd_report(args.runs, args.format)
        elif args.command == "export-embeddings":
            cmd_export_embeddings(args.run, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GFCAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
