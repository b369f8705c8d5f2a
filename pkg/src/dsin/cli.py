"""Command-line entry points: synth, train, eval, predict, report.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import plotting
from .config import RunConfigError, format_config, provenance_dict, read_config_file, resolve
from .data import (
    ManifestError,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_manifest,
    make_folds,
    save_manifest,
    split_by_subjects,
)
from .evaluation import au_correlation_matrix, f1_frame, f1_sweep, tune_thresholds
from .model import DSINModel, model_config_for
from .mrf import GenerationError
from .patchnet import ConstructionError
from .tensor import DimensionError
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    staged_train,
)

log = logging.getLogger("dsin")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
OUTPUT_ROOT_ENV = "DSIN_OUTPUT_ROOT"
CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.bin"
FOLDS_NAME = "folds.tsv"


class UsageError(Exception):
    """Raised for configuration problems; mapped to exit code 2."""


# helpers ---------------------------------------------------------------------
def _out_dir(value: str) -> Path:
    p = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _num(v) -> str:
    return repr(float(v))


def _matrix_tsv(rows, header) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(c) if isinstance(c, str) else _num(c) for c in row) for row in rows]
    return "\n".join(lines) + "\n"


def _stage_epochs(text) -> dict:
    if isinstance(text, dict):
        return text
    out = {}
    for item in str(text).replace(" ", "").split(","):
        if item:
            k, _, v = item.partition(":")
            out[int(k)] = int(v)
    return out


def _load_data(path: str):
    try:
        return load_manifest(path)
    except (OSError, ManifestError) as exc:
        raise OSError(f"cannot load dataset {path}: {exc}") from exc


def _names(ds) -> list:
    return [f"AU{j}" for j in range(ds.n_labels)]


def _subject_split(ds, subjects) -> tuple:
    """(selected, rest); an empty subject list selects nothing."""
    return split_by_subjects(ds, list(subjects))


# synth -----------------------------------------------------------------------
def cmd_synth(cfg: dict) -> int:
    N = cfg["n_labels"]
    ratios = cfg["positive_ratio"]
    if len(ratios) == 1:
        ratios = ratios * N
    try:
        spec = SyntheticSpec.from_pairs(
            N,
            cfg["correlations"],
            ratios,
            glyph_noise=cfg["glyph_noise"],
            glyph_contrast=cfg["glyph_contrast"],
            subjects=cfg["subjects"],
            samples_per_subject=cfg["samples_per_subject"],
            face_size=cfg["face_size"],
            patch_size=cfg["patch_size"],
            channels=cfg["channels"],
            include_face=cfg["include_face"],
            burn_in=cfg["burn_in"],
            seed=cfg["seed"],
        )
        ds = generate_synthetic_dataset(spec)
    except (ValueError, GenerationError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(cfg["out"])
    save_manifest(ds, out)
    _write(out / CONFIG_NAME, format_config("synth", cfg))
    log.info("wrote %d samples, P=%d streams to %s", len(ds), ds.n_streams, out)
    return EXIT_OK


# train -----------------------------------------------------------------------
def _fold_plan(ds, cfg: dict) -> list:
    """[(fold index, test subjects, val subjects)] honouring ``fold_only``."""
    k = cfg["folds"]
    n_subj = len(set(ds.subjects))
    if k < 2 or k > n_subj:
        raise UsageError(f"folds={k} needs 2 <= folds <= number of subjects ({n_subj})")
    folds = make_folds(ds, k, cfg["seed"])
    plan = []
    for f, fold in enumerate(folds):
        if cfg["fold_only"] >= 0 and f != cfg["fold_only"]:
            continue
        rest = sorted(set(ds.subjects) - set(fold.subjects))
        nv = cfg["val_subjects"]
        if nv < 1 or nv >= len(rest):
            raise UsageError(f"val_subjects={nv} leaves no training subjects in fold {f}")
        plan.append((f, sorted(fold.subjects), rest[:nv]))
    if not plan:
        raise UsageError(f"fold_only={cfg['fold_only']} selects no fold (folds={k})")
    return plan


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            stages=cfg["stages"],
            w1=cfg["w1"],
            w2=cfg["w2"],
            w3=cfg["w3"],
            r=cfg["r"],
            T=cfg["T"],
            lr=cfg["lr"],
            batch_size=cfg["batch_size"],
            max_epochs=cfg["max_epochs"],
            stage_epochs=_stage_epochs(cfg["stage_epochs"]),
            patience=cfg["patience"],
            min_delta=cfg["min_delta"],
            seed=cfg["seed"],
            balancing=cfg["balancing"],
            freeze_conv=cfg["freeze_conv"],
            correction=cfg["correction_factors"],
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _initial_model(ds, cfg: dict) -> DSINModel:
    if cfg["init_checkpoint"]:
        try:
            ck = load_checkpoint(cfg["init_checkpoint"], expected_n_labels=ds.n_labels)
        except CheckpointError as exc:
            if "labels, expected" in str(exc):
                raise UsageError(str(exc)) from exc
            raise OSError(str(exc)) from exc
        if [tuple(g) for g in ck.model.config.geometry] != list(ds.geometry):
            raise UsageError("init_checkpoint stream geometry does not match the dataset")
        return ck.model
    try:
        mc = model_config_for(
            ds,
            channels=cfg["conv_channels"],
            extra_channels=cfg["extra_channels"],
            hidden=cfg["fc_hidden"],
            fusion_hidden=cfg["fusion_hidden"],
            include_self=cfg["include_self"],
            T=cfg["T"],
            correction=cfg["correction_factors"],
            seed=cfg["seed"],
        )
        return DSINModel(mc)
    except ConstructionError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    ds = _load_data(cfg["data"])
    tcfg = _train_config(cfg)
    plan = _fold_plan(ds, cfg)
    out = _out_dir(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write(out / CONFIG_NAME, format_config("train", cfg))
    fold_lines = ["fold\trole\tsubjects"]
    for f, test_s, val_s in plan:
        fold_lines.append(f"{f}\ttest\t{','.join(test_s)}")
        fold_lines.append(f"{f}\tval\t{','.join(val_s)}")
    _write(out / FOLDS_NAME, "\n".join(fold_lines) + "\n")

    for f, test_s, val_s in plan:
        _, rest = _subject_split(ds, test_s)
        val, train = _subject_split(rest, val_s)
        model = _initial_model(ds, cfg)
        log.info("fold %d: train %d, val %d, test %d samples", f, len(train), len(val), len(ds) - len(rest))
        try:
            res = staged_train(model, train, val, tcfg)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        fdir = out / f"fold{f}"
        fdir.mkdir(parents=True, exist_ok=True)
        meta = {
            "fold": f,
            "test_subjects": test_s,
            "val_subjects": val_s,
            "run_config": provenance_dict("train", cfg),
        }
        last_stage = tcfg.stages[-1] if tcfg.stages else 0
        save_checkpoint(fdir / CHECKPOINT_NAME, res.model, res.optimizer, tcfg, last_stage, meta)
        for hist in res.history:
            _write(fdir / f"history_{hist.label}.tsv", hist.to_tsv())
        summary = ["label\tstage\tstream\tbest_epoch\tepochs_run"]
        for hist in res.history:
            stream = "" if hist.stream is None else str(hist.stream)
            summary.append(f"{hist.label}\t{hist.stage}\t{stream}\t{hist.best_epoch}\t{len(hist.rows) - 1}")
        _write(fdir / "history_summary.tsv", "\n".join(summary) + "\n")
    return EXIT_OK


# eval / predict --------------------------------------------------------------
def _load_for(path, ds):
    try:
        ck = load_checkpoint(path, expected_n_labels=ds.n_labels)
    except CheckpointError as exc:
        if "labels, expected" in str(exc):
            raise UsageError(str(exc)) from exc
        raise OSError(str(exc)) from exc
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if [tuple(g) for g in ck.model.config.geometry] != list(ds.geometry):
        raise UsageError(f"checkpoint {path}: stream geometry {ck.model.config.geometry} does not match dataset {ds.geometry}")
    return ck


def _head_scores(pred: dict, stream_names) -> dict:
    heads = {name: pred["p"][i] for i, name in enumerate(stream_names)}
    heads["fusion"] = pred["f"]
    heads["si"] = pred["y_hat"]
    return heads


def _evaluate_checkpoint(ck, ds, out: Path, cfg: dict) -> dict:
    """Write per-head reports for one checkpoint; returns {head: macro F1}."""
    meta = ck.header.get("meta", {})
    test_s = [s for s in meta.get("test_subjects", []) if s in set(ds.subjects)]
    val_s = [s for s in meta.get("val_subjects", []) if s in set(ds.subjects)]
    test = _subject_split(ds, test_s)[0] if test_s else ds
    val = _subject_split(ds, val_s)[0] if val_s else test
    T = None if cfg["T"] < 0 else cfg["T"]
    model = ck.model
    names = _names(ds)
    grid = cfg["grid"]
    pred = model.predict(test.streams, T=T)
    heads = _head_scores(pred, ds.stream_names)
    summary = {}
    rows = []
    for head, scores in heads.items():
        rep = f1_frame(scores, test.labels, 0.5, names)
        _write(out / f"report_{head}.tsv", rep.to_tsv())
        _write_json(out / f"report_{head}.json", rep.to_dict())
        sweep = f1_sweep(scores, test.labels, grid)
        _write(out / f"sweep_{head}.tsv", _matrix_tsv([[g, *r] for g, r in zip(grid, sweep)], ["tau", *names]))
        summary[head] = rep.macro_f1
        rows.append([head, rep.macro_f1])
    if cfg["tune_thresholds"]:
        vpred = model.predict(val.streams, T=T)
        vheads = _head_scores(vpred, ds.stream_names)
        vrows = []
        for head in ("fusion", "si"):
            taus = tune_thresholds(vheads[head], val.labels, grid)
            base = f1_frame(vheads[head], val.labels, 0.5, names)
            tuned_val = f1_frame(vheads[head], val.labels, taus, names)
            rep = f1_frame(heads[head], test.labels, taus, names)
            _write(out / f"report_{head}_tuned.tsv", rep.to_tsv())
            _write_json(out / f"report_{head}_tuned.json", rep.to_dict())
            vrows.append([head, base.macro_f1, tuned_val.macro_f1])
            summary[f"{head}_tuned"] = rep.macro_f1
            rows.append([f"{head}_tuned", rep.macro_f1])
        _write(out / "validation_tuning.tsv", _matrix_tsv(vrows, ["head", "macro_f1_tau05", "macro_f1_tuned"]))
    _write(out / "summary.tsv", _matrix_tsv(rows, ["head", "macro_f1"]))
    corr_true = au_correlation_matrix(test.labels) if len(test) > 1 else np.eye(ds.n_labels)
    corr_pred = au_correlation_matrix((pred["y_hat"] >= 0.5).astype(np.uint8)) if len(test) > 1 else np.eye(ds.n_labels)
    _write(out / "correlation_labels.tsv", _matrix_tsv([[n, *r] for n, r in zip(names, corr_true)], ["", *names]))
    _write(out / "correlation_si.tsv", _matrix_tsv([[n, *r] for n, r in zip(names, corr_pred)], ["", *names]))
    if cfg["trace"]:
        _write(out / "trace.tsv", _trace_tsv(pred, names))
    return summary


def _trace_tsv(pred: dict, names) -> str:
    """One row per iteration: chi summary plus per-class means of m, m_bar, chi and y_hat over samples."""
    rows = []
    for t in range(len(pred["chi"])):
        chi = pred["chi"][t]
        cells = [str(t + 1), float(chi.mean()), float(chi.std())]
        for key in ("m", "m_bar", "chi", "y_steps"):
            cells += list(pred[key][t].mean(axis=0))
        rows.append(cells)
    header = ["t", "chi_mean", "chi_std"]
    for key in ("m", "m_bar", "chi", "y_hat"):
        header += [f"{key}_{n}" for n in names]
    return _matrix_tsv(rows, header)


def _fold_checkpoints(run: Path) -> list:
    found = sorted(run.glob(f"fold*/{CHECKPOINT_NAME}"), key=lambda p: int(p.parent.name[4:]))
    if not found:
        raise OSError(f"no fold checkpoints under {run}")
    return found


def cmd_eval(cfg: dict) -> int:
    ds = _load_data(cfg["data"])
    out = _out_dir(cfg["out"])
    if bool(cfg["run"]) == bool(cfg["checkpoint"]):
        raise UsageError("give exactly one of 'run' or 'checkpoint'")
    out.mkdir(parents=True, exist_ok=True)
    _write(out / CONFIG_NAME, format_config("eval", cfg))
    if cfg["checkpoint"]:
        _evaluate_checkpoint(_load_for(cfg["checkpoint"], ds), ds, out, cfg)
        return EXIT_OK
    per_fold = {}
    for path in _fold_checkpoints(Path(cfg["run"])):
        name = path.parent.name
        per_fold[name] = _evaluate_checkpoint(_load_for(path, ds), ds, out / name, cfg)
    heads = list(next(iter(per_fold.values())))
    rows = [[h, *[per_fold[f][h] for f in per_fold], float(np.mean([per_fold[f][h] for f in per_fold]))] for h in heads]
    _write(out / "summary.tsv", _matrix_tsv(rows, ["head", *per_fold, "mean"]))
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    ds = _load_data(cfg["data"])
    ck = _load_for(cfg["checkpoint"], ds)
    out = _out_dir(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write(out / CONFIG_NAME, format_config("predict", cfg))
    T = None if cfg["T"] < 0 else cfg["T"]
    pred = ck.model.predict(ds.streams, T=T)
    names = _names(ds)
    header = ["id", "subject", *[f"f_{n}" for n in names], *[f"si_{n}" for n in names]]
    lines = ["\t".join(header)]
    for i, sid in enumerate(ds.ids):
        vals = [*pred["f"][i], *pred["y_hat"][i]]
        lines.append("\t".join([sid, ds.subjects[i], *(_num(v) for v in vals)]))
    _write(out / "predictions.tsv", "\n".join(lines) + "\n")
    if cfg["trace"]:
        _write(out / "trace.tsv", _trace_tsv(pred, names))
    return EXIT_OK


# report ----------------------------------------------------------------------
def cmd_report(cfg: dict) -> int:
    run = Path(cfg["run"])
    if not run.is_dir():
        raise OSError(f"run directory not found: {run}")
    out = _out_dir(cfg["out"]) if cfg["out"] else run / "figures"
    out.mkdir(parents=True, exist_ok=True)
    _write(out / CONFIG_NAME, format_config("report", cfg))
    written = plotting.render_run(run, out, cfg["format"])
    index = ["kind\tsource\tfile"] + [f"{k}\t{src}\t{dst}" for k, src, dst in written]
    _write(out / "figures.tsv", "\n".join(index) + "\n")
    if not plotting.available():
        log.warning("matplotlib not available; wrote plot data index only")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "report": cmd_report}


# argument parsing ------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsin", description="Patch-based multi-label detection with structure inference.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any configuration key")
        p.add_argument("--out")
        return p

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--seed", type=int)

    t = common(sub.add_parser("train", help="staged training per fold"))
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--T", type=int, dest="T")
    t.add_argument("--r", type=float, dest="r")
    t.add_argument("--stages")
    t.add_argument("--no-balancing", dest="balancing", action="store_const", const=False)
    t.add_argument("--no-correction-factors", dest="correction_factors", action="store_const", const=False)
    t.add_argument("--freeze-conv", dest="freeze_conv", action="store_const", const=True)

    e = common(sub.add_parser("eval", help="per-head F1 reports"))
    e.add_argument("--data")
    e.add_argument("--run")
    e.add_argument("--checkpoint")
    e.add_argument("--T", type=int, dest="T")
    e.add_argument("--tune-thresholds", dest="tune_thresholds", action="store_const", const=True)
    e.add_argument("--trace", action="store_const", const=True)

    p = common(sub.add_parser("predict", help="per-sample probabilities"))
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--trace", action="store_const", const=True)

    r = common(sub.add_parser("report", help="render plot-data files to figures"))
    r.add_argument("--run")
    r.add_argument("--format")
    return ap


_NOT_KEYS = {"command", "config", "set", "verbose"}


def _overrides(ns: argparse.Namespace) -> dict:
    out = {k: v for k, v in vars(ns).items() if k not in _NOT_KEYS and v is not None}
    for item in ns.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise RunConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    # flags arrive typed; hand them to the schema parser as text
    return {k: (v if isinstance(v, str) else _as_text(v)) for k, v in out.items()}


def _as_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def main(argv: Optional[list] = None) -> int:
    ns = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve(ns.command, file_values, _overrides(ns))
        return COMMANDS[ns.command](cfg)
    except (RunConfigError, UsageError, DimensionError) as exc:
        print(f"dsin {ns.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"dsin {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
