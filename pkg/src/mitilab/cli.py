"""Command-line front end.

Usage::

    mitilab <command> [--config PATH] [--seed N] [--out DIR] [--wiring NAME]

Commands: ``collapse-study``, ``train``, ``eval``, ``gradcheck``, ``gen-data``.
Every command writes only inside the output directory, and re-running with
the same config and seed rewrites the same bytes.

Exit codes: 0 success, 1 configuration or input error, 2 numeric divergence
or a failed gradient check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .attention import WiringMode
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import ConfigError, RunConfig, load_config
from .data import AnnotationError, generate_dataset, load_annotations, save_annotations
from .detr import check_params, count_parameters
from .gradcheck import run_gradchecks
from .metrics import AP_COLUMNS
from .rank_probe import CSV_HEADER
from .study import anchor_gap_trials, run_trial, study_summary, summarize_trial
from .tensor import NumericError
from .train import TrainingDiverged, evaluate, train, write_metrics_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

#: eval scenes get ids far from the training ids and their own seed stream
EVAL_ID_OFFSET = 1_000_000


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(value):
    """JSON-friendly copy: numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "item"):
        return value.item()
    return value


def _datasets(cfg: RunConfig):
    """Training and evaluation scenes: annotation files if configured, else generated."""
    v = cfg.values
    try:
        if v["train_annotations"]:
            train_scenes = load_annotations(v["train_annotations"])
        else:
            train_scenes = generate_dataset(v["train_scenes"], v["max_objects"], v["num_classes"], v["seed"])
        if v["eval_annotations"]:
            eval_scenes = load_annotations(v["eval_annotations"])
        elif v["eval_scenes"] > 0:
            eval_scenes = generate_dataset(v["eval_scenes"], v["max_objects"], v["num_classes"],
                                           v["seed"] + 1, first_id=EVAL_ID_OFFSET)
        else:
            eval_scenes = []
    except (AnnotationError, OSError) as exc:
        raise _Fail(EXIT_CONFIG, f"dataset error: {exc}") from None
    return train_scenes, eval_scenes


def _ap_table(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AP_COLUMNS)
    w.writerow([repr(float(summary[k])) for k in AP_COLUMNS])
    return buf.getvalue()


def _format_row(summary: dict) -> str:
    head = " ".join(f"{k:>7}" for k in AP_COLUMNS)
    vals = " ".join(f"{summary[k]:7.4f}" for k in AP_COLUMNS)
    return f"{head}\n{vals}"


# ---------------------------------------------------------------------------
# commands


def cmd_collapse_study(cfg: RunConfig, out: Path) -> int:
    settings = cfg.collapse
    base = cfg["seed"]
    summaries = {}
    for mode in cfg.wirings:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("seed",) + CSV_HEADER + ("underflow",))
        trials, errors = [], []
        for k in range(settings.seeds):
            seed = base + k
            try:
                report = run_trial(settings, seed, mode)
            except NumericError as exc:
                errors.append({"seed": seed, "error": str(exc)})
                continue
            for r in report.rows:
                w.writerow([seed, r.layer] + [repr(float(getattr(r, c))) for c in CSV_HEADER[1:]]
                           + [int(r.underflow)])
            trials.append(summarize_trial(seed, report))
        (out / f"collapse_{mode}.csv").write_text(buf.getvalue())
        summary = study_summary(settings, mode, trials)
        summary["numeric_errors"] = errors
        summaries[str(mode)] = summary
        print(f"{mode}: collapse {summary['collapse_rate']}, bound {summary['bound_san_rate']}/"
              f"{summary['bound_mlp_rate']}, exponent mean {summary['exponent_mean']}")
    doc = {"settings": {k: getattr(settings, k) for k in settings.__dataclass_fields__}, "wirings": summaries}
    if settings.depth >= 1:
        gaps = anchor_gap_trials(settings, settings.seeds)
        doc["anchor_gap"] = {"trials": len(gaps), "holds_rate": sum(g.holds for g in gaps) / len(gaps)}
    (out / "summary.json").write_text(_json(_plain(doc)))
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    model_cfg, tcfg = cfg.model, cfg.training
    train_scenes, eval_scenes = _datasets(cfg)
    try:
        result = train(model_cfg, train_scenes, eval_scenes, tcfg, seed=cfg["seed"],
                       on_epoch=lambda m: print(f"epoch {m.epoch}: loss {m.loss:.4f} "
                                                f"test_error {m.test_error:.4f} AR {m.avg_recall:.4f}",
                                                flush=True))
    except TrainingDiverged as exc:
        raise _Fail(EXIT_NUMERIC, str(exc)) from None
    except ValueError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    write_metrics_csv(out / "metrics.csv", result.metrics)
    save_tensors(out / "model.ckpt", result.params)
    (out / "config.txt").write_text(cfg.to_text())
    print(f"{count_parameters(result.params)} parameters; wrote {out / 'metrics.csv'}, {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model_cfg = cfg.model
    path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"
    try:
        params = load_tensors(path)
        check_params(model_cfg, params)
    except OSError as exc:
        raise _Fail(EXIT_CONFIG, f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (CheckpointError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"checkpoint {path}: {exc}") from None
    _, eval_scenes = _datasets(cfg)
    if not eval_scenes:
        raise _Fail(EXIT_CONFIG, "no evaluation scenes (eval_scenes = 0 and no eval_annotations)")
    try:
        summary = evaluate(params, model_cfg, eval_scenes, full=True)
    except NumericError as exc:
        raise _Fail(EXIT_NUMERIC, str(exc)) from None
    (out / "ap_table.csv").write_text(_ap_table(summary))
    print(_format_row(summary))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    tol = cfg["gradcheck_tol"]
    results = run_gradchecks(step=cfg["gradcheck_step"], tol=tol, seed=cfg["seed"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name", "max_rel_err", "passed"))
    for r in results:
        w.writerow([r.name, repr(float(r.max_rel_err)), int(r.passed)])
    (out / "gradcheck.csv").write_text(buf.getvalue())
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name}: max rel err {float(r.max_rel_err):.3e} > {tol:g}", file=sys.stderr)
    worst = max(float(r.max_rel_err) for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; worst rel err {worst:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    train_scenes, eval_scenes = _datasets(cfg)
    n_classes = cfg["num_classes"]
    save_annotations(train_scenes, out / "train.json", n_classes)
    save_annotations(eval_scenes, out / "eval.json", n_classes)
    print(f"wrote {len(train_scenes)} training and {len(eval_scenes)} evaluation scenes to {out}")
    return EXIT_OK


COMMANDS = {
    "collapse-study": cmd_collapse_study,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitilab", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--wiring", help="PureSAN, SanMlp, StandardSkip or MitiResidual")
    return parser


def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.wiring is not None:
        try:
            mode = WiringMode.parse(args.wiring)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        key = "probe_wirings" if args.command == "collapse-study" else "wiring"
        overrides[key] = str(mode)
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = _resolve(args)
        out = cfg.out
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise _Fail(EXIT_CONFIG, f"cannot create output directory {out}: {exc.strerror}") from None
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
