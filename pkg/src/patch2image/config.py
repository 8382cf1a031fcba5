"""Subcommand configuration: JSON files, flag overrides, strict keys.

Precedence is defaults < config file < command-line flags. Unknown keys
are rejected (with a closest-match hint) rather than ignored, so a typo
cannot silently fall back to a default. The resolved mapping is archived
next to each run's outputs as ``config.resolved.json``.

If the environment variable PATCH2IMAGE_OUT is set, every relative
output path is created under it.
"""

from __future__ import annotations

import difflib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

_REQUIRED = object()


@dataclass(frozen=True)
class Field:
    kind: object                 # int, float, str, bool, or ('list', elem)
    default: object = _REQUIRED
    help: str = ""

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


def _f(kind, default=_REQUIRED, help=""):
    return Field(kind, default, help)


SCHEMAS: dict[str, dict[str, Field]] = {
    "gen-data": {
        "domain": _f(str, help="'source' or 'target'"),
        "patients": _f(int, help="number of synthetic patients"),
        "out": _f(str, help="corpus directory to create"),
        "seed": _f(int, 0),
        "malignant_frac": _f(float, 0.25),
        "benign_frac": _f(float, 0.25),
    },
    "split": {
        "data": _f(str, help="corpus directory (holds manifest.csv)"),
        "out": _f(str, help="directory for the split manifests"),
        "seed": _f(int, 0),
    },
    "sample-patches": {
        "data": _f(str, help="corpus directory"),
        "splits": _f(str, help="directory written by `split`"),
        "subset": _f(str, "train"),
        "out": _f(str, help="output .npz path"),
        "per_roi": _f(int, 10),
        "patch_size": _f(int, 64),
        "min_overlap": _f(float, 0.9),
        "jitter": _f(int, 8),
        "max_tries": _f(int, 200),
        "seed": _f(int, 0),
    },
    "train-patch": {
        "backbone": _f(str, "mini-resnet", "'mini-resnet' or 'mini-vgg'"),
        "stages": _f(str, None, "block spec string; empty for the default"),
        "stem_width": _f(int, 12),
        "train_patches": _f(str, help="training .npz from sample-patches"),
        "val_patches": _f(str, help="validation .npz"),
        "splits": _f(str, help="split directory (for the pixel mean)"),
        "out": _f(str, help="run directory"),
        "seed": _f(int, 0),
        "batch_size": _f(int, 32),
        "schedule_scale": _f(float, 1.0),
        "dtype": _f(str, "float32", "'float32' or 'float64'"),
        "resume": _f(str, None, "checkpoint to resume from"),
    },
    "convert": {
        "checkpoint": _f(str, help="patch-classifier checkpoint"),
        "out": _f(str, help="run directory"),
        "variant": _f(str, "allconv"),
        "top_spec": _f(str, None),
        "image_size": _f(int, None, "needed by the fixed-size fc top"),
        "check_size": _f(int, 96, "equivalence-check image size; 0 skips"),
        "tol": _f(float, 1e-9),
        "seed": _f(int, 0),
    },
    "train-image": {
        "checkpoint": _f(str, help="converted image-network checkpoint"),
        "data": _f(str, help="corpus directory"),
        "splits": _f(str, help="split directory"),
        "subset_train": _f(str, "train"),
        "subset_val": _f(str, "val"),
        "out": _f(str, help="run directory"),
        "seed": _f(int, 0),
        "batch_size": _f(int, 2),
        "schedule_scale": _f(float, 1.0),
        "resume": _f(str, None),
    },
    "eval": {
        "checkpoints": _f(("list", str), help="one or more image networks"),
        "data": _f(str, help="corpus directory"),
        "splits": _f(str, help="split directory"),
        "subset": _f(str, "test"),
        "out": _f(str, help="report directory"),
        "augment": _f(bool, True, "average the four mirror passes"),
        "batch_size": _f(int, 8),
    },
    "heatmap": {
        "checkpoint": _f(str, help="convolutionalized patch network"),
        "data": _f(str, help="corpus directory"),
        "splits": _f(str, help="split directory (for the pixel mean)"),
        "image_id": _f(str, help="manifest image id"),
        "out": _f(str, help="output directory"),
    },
    "transfer": {
        "checkpoint": _f(str, help="source-trained image network"),
        "data": _f(str, help="target corpus directory"),
        "splits": _f(str, help="target split directory"),
        "out": _f(str, help="run directory"),
        "fractions": _f(("list", float), [0.1, 0.2, 0.4, 0.7, 1.0]),
        "schedule_scale": _f(float, 1.0),
        "seed": _f(int, 0),
        "batch_size": _f(int, 2),
    },
    "report": {
        "runs": _f(("list", str), help="run directories with summary.json"),
        "out": _f(str, help="combined report directory"),
    },
}


def parse_value(field: Field, raw: str):
    """Parse a flag string into the field's type."""
    kind = field.kind
    if isinstance(kind, tuple):  # comma-separated list
        elem = kind[1]
        if raw.strip() == "":
            return []
        return [_parse_scalar(elem, part.strip()) for part in raw.split(",")]
    return _parse_scalar(kind, raw)


def _parse_scalar(kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    return raw


def _check_type(name: str, field: Field, value):
    if value is None and not field.required:
        return None
    kind = field.kind
    if isinstance(kind, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {type(value).__name__}")
        return [_check_scalar(f"{name}[{i}]", kind[1], v) for i, v in enumerate(value)]
    return _check_scalar(name, kind, value)


def _check_scalar(name, kind, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def resolve_config(command: str, file_path=None, overrides: dict | None = None) -> dict:
    """Merge defaults, a JSON file, and flag overrides under a strict schema."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    merged = {k: (None if f.required else f.default) for k, f in schema.items()}

    def absorb(mapping: dict, origin: str):
        for key, value in mapping.items():
            if key not in schema:
                hint = difflib.get_close_matches(key, schema, n=1)
                extra = f"; did you mean {hint[0]!r}?" if hint else ""
                raise ConfigError(f"{origin}: unknown key {key!r}{extra}")
            merged[key] = _check_type(key, schema[key], value)

    if file_path is not None:
        path = Path(file_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        absorb(loaded, str(path))
    if overrides:
        absorb(overrides, "command line")

    missing = [k for k, f in schema.items() if f.required and merged[k] is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {missing}")
    return merged


def out_root() -> Path:
    return Path(os.environ.get("PATCH2IMAGE_OUT", "."))


def resolve_out(path) -> Path:
    """Relative output paths land under PATCH2IMAGE_OUT (default: cwd)."""
    p = Path(path)
    return p if p.is_absolute() else out_root() / p


def archive_config(resolved: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.resolved.json"
    target.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return target
