"""``zclassifier`` command line: train, eval, ood, analyze, sweep.

Every run is fully described by one JSON config; flags only pick paths.
Exit status is 0 on success, 1 for configuration problems and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, load_config
from .ood import write_report, write_scores
from .trainer import evaluate, load_checkpoint, save_checkpoint

log = logging.getLogger("zclassifier")

CHECKPOINT_NAME = "model.zclf"


def _out_dir(cfg) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoints(cfg, given) -> list[Path]:
    return [Path(p) for p in given] if given else [Path(cfg.output_dir) / CHECKPOINT_NAME]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    task = pl.load_task(cfg)
    out = _out_dir(cfg)
    model, records = pl.train_model(cfg, task, history_path=out / "history.csv")
    save_checkpoint(model, out / CHECKPOINT_NAME)
    report = evaluate(model, task.test)
    pl.write_json(report.to_dict(), out / "class_report.json")
    print(f"{pl.model_name(model)}: {len(records)} epochs, test accuracy {report.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    for path in _checkpoints(cfg, args.checkpoint):
        model = load_checkpoint(path)
        report = evaluate(model, pl.task_for_model(cfg, model).test)
        name = pl.model_name(model)
        pl.write_json(report.to_dict(), out / "class_report.json")
        print(f"{name}: accuracy {report.accuracy:.4f}")
        for c, (p, r) in enumerate(zip(report.precision, report.recall)):
            print(f"  class {c}: precision {p:.4f} recall {r:.4f} support {report.support[c]}")
    return 0


def cmd_ood(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    rows = []
    for path in _checkpoints(cfg, args.checkpoint):
        model = load_checkpoint(path)
        name = pl.model_name(model)
        for source, metrics, scores in pl.evaluate_ood(cfg, model, pl.task_for_model(cfg, model)):
            rows.append((name, source, metrics))
            write_scores(scores, out / f"scores_{name}_{source}.csv", out_domain=source)
            print(f"{name} vs {source}: auroc {metrics.auroc:.4f} aupr {metrics.aupr:.4f} "
                  f"fpr95 {metrics.fpr_at_95tpr:.4f}")
    write_report(rows, out / "ood_report.csv")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    models = [load_checkpoint(p) for p in _checkpoints(cfg, args.checkpoint)]
    report = pl.run_analysis(cfg, models, out)
    for entry in report["frobenius"]:
        print(f"||cov({entry['a']}) - cov({entry['b']})||_F = {entry['covariance']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    models = [load_checkpoint(p) for p in _checkpoints(cfg, args.checkpoint)]
    results = pl.run_sweep(cfg, models)
    pl.write_sweep(results, out / "sweep.csv")
    for res in results:
        print(res.model + ": " + " ".join(f"{s:.2f}:{a:.3f}" for s, a in zip(res.stds, res.accuracies)))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ood": cmd_ood, "analyze": cmd_analyze,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zclassifier", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run config")
        if name != "train":
            p.add_argument("--checkpoint", action="append",
                           help=f"checkpoint path (repeatable); default <output_dir>/{CHECKPOINT_NAME}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, pl.HeadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
