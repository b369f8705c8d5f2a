"""Flat ``key = value`` run configuration with typed, per-command key sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional


class RunConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _pairs(text) -> dict:
    """``0-1:0.8, 2-3:-0.6`` -> {(0, 1): 0.8, (2, 3): -0.6}."""
    if isinstance(text, dict):
        return text
    out = {}
    for item in str(text).replace(" ", "").split(","):
        if not item:
            continue
        edge, _, value = item.partition(":")
        i, _, j = edge.partition("-")
        out[(int(i), int(j))] = float(value)
    return out


def _format_pairs(pairs: dict) -> str:
    return ",".join(f"{i}-{j}:{v!r}" for (i, j), v in sorted(pairs.items()))


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any = None
    required: bool = False
    path: bool = False  # excluded from provenance hashes
    fmt: Optional[Callable[[Any], str]] = None

    def format(self, value) -> str:
        if self.fmt is not None:
            return self.fmt(value)
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (tuple, list)):
            return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)


_SYNTH = {
    "out": Key(str, required=True, path=True),
    "n_labels": Key(int, required=True),
    "correlations": Key(_pairs, default={}, fmt=_format_pairs),
    "positive_ratio": Key(_floats, default=(0.3,)),
    "glyph_noise": Key(float, 0.1),
    "glyph_contrast": Key(float, 0.3),
    "subjects": Key(int, 6),
    "samples_per_subject": Key(int, 100),
    "face_size": Key(int, 224),
    "patch_size": Key(int, 56),
    "channels": Key(int, 3),
    "include_face": Key(_bool, True),
    "burn_in": Key(int, 100),
    "seed": Key(int, 0),
}

_MODEL = {
    "conv_channels": Key(_ints, (32, 64, 96, 128)),
    "extra_channels": Key(_ints, (16, 24)),
    "fc_hidden": Key(int, 256),
    "fusion_hidden": Key(int, 64),
    "include_self": Key(_bool, True),
}

_TRAIN = {
    "data": Key(str, required=True, path=True),
    "out": Key(str, required=True, path=True),
    "folds": Key(int, 3),
    "fold_only": Key(int, -1),
    "val_subjects": Key(int, 1),
    "stages": Key(_ints, (1, 2, 3, 4, 5)),
    "w1": Key(float, 0.25),
    "w2": Key(float, 0.25),
    "w3": Key(float, 0.5),
    "r": Key(float, 5e-3),
    "T": Key(int, 10),
    "lr": Key(float, 1e-3),
    "batch_size": Key(int, 64),
    "max_epochs": Key(int, 200),
    "stage_epochs": Key(str, ""),  # e.g. 1:40,4:150
    "patience": Key(int, 10),
    "min_delta": Key(float, 1e-5),
    "seed": Key(int, 0),
    "balancing": Key(_bool, True),
    "freeze_conv": Key(_bool, False),
    "correction_factors": Key(_bool, True),
    "init_checkpoint": Key(str, "", path=True),
    **_MODEL,
}

_EVAL = {
    "data": Key(str, required=True, path=True),
    "run": Key(str, "", path=True),
    "checkpoint": Key(str, "", path=True),
    "out": Key(str, required=True, path=True),
    "tune_thresholds": Key(_bool, False),
    "grid": Key(_floats, tuple(round(0.05 * k, 2) for k in range(1, 20))),
    "T": Key(int, -1),
    "trace": Key(_bool, False),
}

_PREDICT = {
    "data": Key(str, required=True, path=True),
    "checkpoint": Key(str, required=True, path=True),
    "out": Key(str, required=True, path=True),
    "T": Key(int, -1),
    "trace": Key(_bool, False),
}

_REPORT = {
    "run": Key(str, required=True, path=True),
    "out": Key(str, "", path=True),
    "format": Key(str, "png"),
}

SCHEMAS = {"synth": _SYNTH, "train": _TRAIN, "eval": _EVAL, "predict": _PREDICT, "report": _REPORT}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RunConfigError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def resolve(command: str, file_values: dict, overrides: dict) -> dict:
    """Merge file values with flag overrides, reject unknown keys, type-check, fill defaults."""
    schema = SCHEMAS[command]
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise RunConfigError(f"unknown configuration key(s) for '{command}': {', '.join(unknown)}")
    out = {}
    for key, spec in schema.items():
        if key in merged:
            try:
                out[key] = spec.parse(merged[key]) if isinstance(merged[key], str) or spec.parse in (_pairs,) else merged[key]
            except (TypeError, ValueError) as exc:
                raise RunConfigError(f"invalid value for '{key}': {merged[key]!r} ({exc})") from None
        elif spec.required:
            raise RunConfigError(f"missing required configuration key '{key}'")
        else:
            out[key] = spec.default
    return out


def format_config(command: str, values: dict, include_paths: bool = True) -> str:
    schema = SCHEMAS[command]
    lines = [f"# resolved configuration for '{command}'"]
    for key in sorted(values):
        if not include_paths and schema[key].path:
            continue
        lines.append(f"{key} = {schema[key].format(values[key])}")
    return "\n".join(lines) + "\n"


def provenance_dict(command: str, values: dict) -> dict:
    schema = SCHEMAS[command]
    return {k: schema[k].format(v) for k, v in sorted(values.items()) if not schema[k].path}
