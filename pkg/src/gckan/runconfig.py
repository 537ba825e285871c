"""Run configuration: YAML file, environment overrides and validation.

A run file has these sections (every key optional unless noted)::

    seed: 0
    out: runs/lorenz          # output directory, overridable with --out
    workers: 1
    dataset:
      kind: lorenz96          # required: lorenz96 | var | files
      name: lorenz-p10-T1000  # label used in reports
      replicates: 5           # generators: independent datasets, seeds seed, seed+1, ...
      params: {p: 10, forcing: 10, T: 1000}      # generator parameters
      paths: [a.csv, b.csv]   # files: one independent dataset per file
      truth: [truth.csv]      # files: one truth for all, or one per path
      format: csv             # files: csv | csv-replicate-column
      replicate_length: 21    # files: cut each file into blocks of this length
      replicate_column: subject
    model: {lag: 5, hidden: [32], grid_size: 5, order: 3, grid_range: [-3, 3], base_fn: silu}
    train: {lam: 0.05, gamma: 0.05, learning_rate: 0.001, max_epochs: 2000,
            batch_size: full, early_stop_patience: 100, group_norm_epsilon: 1.0e-8,
            penalty_scope: edge}
    sweep: {enabled: true, lambdas: [0.01, 0.05, 0.1], gammas: [0.01, 0.05, 0.1],
            holdout: 0.1, criterion: total}
    fusion: {enabled: true, theta: 0.05, transpose_reversed: false}
    eval: {include_diagonal: true}

Any key can be overridden from the environment as
``GCKAN_<SECTION>__<KEY>`` (``GCKAN_SEED`` for top-level keys), for
example ``GCKAN_TRAIN__LAM=0.1``.  Values are parsed as YAML scalars.
Precedence: defaults < file < environment < command-line flags.
"""
from __future__ import annotations

import dataclasses

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .datagen import Lorenz96Config, VarConfig
from .evalmetrics import EvalSpec
from .fusion import FusionConfig
from .granger import ModelConfig
from .trainer import PENALTY_SCOPES, TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_run_config", "resolve_config", "ENV_PREFIX", "DEFAULTS"]

ENV_PREFIX = "GCKAN_"


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "gckan-out",
    "workers": 1,
    "dataset": {"replicates": 1, "params": {}, "format": "csv"},
    "model": {"lag": 5, "hidden": [32], "grid_size": 5, "order": 3, "grid_range": [-3.0, 3.0], "base_fn": "silu"},
    "train": {
        "lam": 0.05,
        "gamma": 0.05,
        "learning_rate": 1e-3,
        "max_epochs": 2000,
        "batch_size": "full",
        "early_stop_patience": 100,
        "group_norm_epsilon": 1e-8,
        "penalty_scope": "edge",
    },
    "sweep": {
        "enabled": True,
        "lambdas": [0.01, 0.05, 0.1],
        "gammas": [0.01, 0.05, 0.1],
        "holdout": 0.1,
        "criterion": "total",
    },
    "fusion": {"enabled": True, "theta": 0.05, "transpose_reversed": False},
    "eval": {"include_diagonal": True},
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}
_paths = {"type": "array", "items": {"type": "string"}, "minItems": 1}


def _section(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _section(
    {
        "seed": {"type": "integer"},
        "out": {"type": "string", "minLength": 1},
        "workers": _pos_int,
        "dataset": _section(
            {
                "kind": {"enum": ["lorenz96", "var", "files"]},
                "name": {"type": "string"},
                "replicates": _pos_int,
                "params": {"type": "object"},
                "paths": _paths,
                "truth": _paths,
                "format": {"enum": ["csv", "csv-replicate-column"]},
                "replicate_length": {"type": ["integer", "null"], "minimum": 2},
                "replicate_column": {"type": ["string", "null"]},
            },
            required=("kind",),
        ),
        "model": _section(
            {
                "lag": _pos_int,
                "hidden": {"type": "array", "items": _pos_int, "minItems": 1},
                "grid_size": _pos_int,
                "order": {"type": "integer", "minimum": 0},
                "grid_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "base_fn": {"enum": ["silu", "identity"]},
            }
        ),
        "train": _section(
            {
                "lam": _nonneg,
                "gamma": _nonneg,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "max_epochs": _pos_int,
                "batch_size": {"anyOf": [_pos_int, {"const": "full"}]},
                "early_stop_patience": {"type": "integer", "minimum": 0},
                "group_norm_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "penalty_scope": {"enum": list(PENALTY_SCOPES)},
            }
        ),
        "sweep": _section(
            {
                "enabled": {"type": "boolean"},
                "lambdas": {"type": "array", "items": _nonneg, "minItems": 1},
                "gammas": {"type": "array", "items": _nonneg, "minItems": 1},
                "holdout": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "criterion": {"enum": ["total", "predict"]},
            }
        ),
        "fusion": _section(
            {"enabled": {"type": "boolean"}, "theta": _nonneg, "transpose_reversed": {"type": "boolean"}}
        ),
        "eval": _section({"include_diagonal": {"type": "boolean"}}),
    },
    required=("dataset",),
)

_GENERATORS = {"lorenz96": Lorenz96Config, "var": VarConfig}


def _location(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    """Nested override dict from ``GCKAN_SECTION__KEY`` variables."""
    over: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX):].split("__")]
        if not all(path):
            raise ConfigError(f"malformed override variable {name}")
        try:
            value = yaml.safe_load(environ[name])
        except yaml.YAMLError as exc:
            raise ConfigError(f"{name}: cannot parse value: {exc}") from None
        node = over
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name} conflicts with another override")
        node[path[-1]] = value
    return over


def resolve_config(raw: Mapping, environ: Mapping[str, str] | None = None, cli: Mapping | None = None) -> dict:
    """Merge defaults, file contents, environment and CLI overrides, then validate."""
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>: config must be a mapping of sections")
    merged = _deep_merge(DEFAULTS, raw)
    merged = _deep_merge(merged, env_overrides(environ if environ is not None else os.environ))
    merged = _deep_merge(merged, cli or {})
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(merged), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        if err.validator == "required":
            missing = err.message.split("'")[1]
            loc = _location(err)
            field = missing if loc == "<root>" else f"{loc}.{missing}"
            raise ConfigError(f"missing required field: {field}")
        if err.validator == "additionalProperties":
            raise ConfigError(f"{_location(err)}: {err.message}")
        raise ConfigError(f"{_location(err)}: {err.message}")
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings with typed sub-configs."""

    raw: dict
    seed: int
    out: Path
    workers: int
    dataset: dict
    generator: Lorenz96Config | VarConfig | None
    lag: int
    model: ModelConfig
    train: TrainConfig
    sweep: dict
    fusion_enabled: bool
    fusion: FusionConfig
    eval_spec: EvalSpec

    @property
    def dataset_name(self) -> str:
        return self.dataset.get("name") or self.dataset["kind"]

    def generator_for(self, replicate: int):
        """Generator config of independent replicate ``replicate`` (seed = seed + replicate)."""
        from dataclasses import replace

        return replace(self.generator, seed=self.seed + replicate)


def build_run_config(resolved: dict) -> RunConfig:
    ds = resolved["dataset"]
    kind = ds["kind"]
    generator = None
    if kind in _GENERATORS:
        for key in ("paths", "truth"):
            if key in ds:
                raise ConfigError(f"dataset.{key}: only valid for kind 'files'")
        cls = _GENERATORS[kind]
        fields = {f.name.lower(): f.name for f in dataclasses.fields(cls)}
        # env overrides arrive lower-cased, so match field names case-insensitively
        params = {fields.get(k.lower(), k): v for k, v in (ds.get("params") or {}).items()}
        if "seed" in params:
            raise ConfigError("dataset.params.seed: use the top-level seed")
        try:
            generator = cls(**params, seed=resolved["seed"])
        except TypeError as exc:
            raise ConfigError(f"dataset.params: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"dataset.params: {exc}") from None
    else:
        if "paths" not in ds:
            raise ConfigError("missing required field: dataset.paths")
        truth = ds.get("truth")
        if truth is not None and len(truth) not in (1, len(ds["paths"])):
            raise ConfigError("dataset.truth: give one truth file or one per path")
        if ds.get("params"):
            raise ConfigError("dataset.params: only valid for generator kinds")
    m = resolved["model"]
    t = resolved["train"]
    f = resolved["fusion"]
    try:
        model = ModelConfig(
            hidden=tuple(m["hidden"]),
            grid_size=m["grid_size"],
            order=m["order"],
            grid_range=tuple(m["grid_range"]),
            base_fn=m["base_fn"],
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        train = TrainConfig(**t, seed=resolved["seed"])
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    return RunConfig(
        raw=resolved,
        seed=resolved["seed"],
        out=Path(resolved["out"]),
        workers=resolved["workers"],
        dataset=ds,
        generator=generator,
        lag=m["lag"],
        model=model,
        train=train,
        sweep=resolved["sweep"],
        fusion_enabled=f["enabled"],
        fusion=FusionConfig(theta=f["theta"], transpose_reversed=f["transpose_reversed"]),
        eval_spec=EvalSpec(include_diagonal=resolved["eval"]["include_diagonal"],
                           convention="all-entries" if resolved["eval"]["include_diagonal"] else "off-diagonal"),
    )


def load_run_config(path, environ: Mapping[str, str] | None = None, cli: Mapping | None = None) -> RunConfig:
    """Read, merge and validate a YAML run file.

    Relative dataset paths are resolved against the config file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{where}") from None
    raw = raw or {}
    if isinstance(raw, Mapping) and isinstance(raw.get("dataset"), Mapping):
        ds = dict(raw["dataset"])
        for key in ("paths", "truth"):
            if isinstance(ds.get(key), list):
                ds[key] = [
                    str(path.parent / p) if isinstance(p, str) and not Path(p).is_absolute() else p
                    for p in ds[key]
                ]
        raw = {**raw, "dataset": ds}
    return build_run_config(resolve_config(raw, environ, cli))
