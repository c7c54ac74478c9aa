"""JSON configuration files for stages and whole networks.

Three document shapes are accepted:

* ``{"variant": "faster_vit_2"}``, optionally with ``width_div`` and
  ``input_size``: a registered network;
* an object with a ``stages`` array: a custom network (:class:`VariantSpec`);
* anything else: a single HAT stage (:class:`HatStageConfig`). Only ``H``,
  ``k`` and ``d`` are required. ``L`` defaults to 4, ``eps`` to 1e-5, and
  ``heads`` to 8 when it divides ``d`` (the late-stage head count of the
  smaller variants), else the largest divisor of ``d`` below 8.

Unknown keys are rejected by name; geometry violations raise
:class:`ConfigError` whose ``constraint`` names the broken invariant.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError
from .hat import HatStageConfig
from .model import StageSpec, VariantSpec, get_variant

_STAGE_REQUIRED = ("H", "k", "d")
_INT_FIELDS = {"H", "k", "d", "L", "heads", "depth", "c", "bias_hidden", "dim", "window",
               "in_chans", "num_classes", "input_size", "width_div"}
_FLOAT_FIELDS = {"eps", "layerscale_init"}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r} (allowed: {sorted(allowed)})",
                              f"unknown_key:{key}")


def _check_types(doc: dict, where: str) -> None:
    for key, v in doc.items():
        ok = True
        if v is None and key in ("c", "heads"):
            ok = True
        elif key in _INT_FIELDS:
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif key in _FLOAT_FIELDS:
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif key.startswith("use_") or key in ("ct_conv_residual", "abs_bias_per_block",
                                               "drop_ct_single_window"):
            ok = isinstance(v, bool)
        if not ok:
            raise ConfigError(f"{where}: key {key!r} has invalid value {v!r}", f"type:{key}")


def default_heads(d: int) -> int:
    return max(h for h in range(1, 9) if d % h == 0)


def stage_from_dict(doc: dict) -> HatStageConfig:
    _check_keys(doc, _fields(HatStageConfig), "stage config")
    missing = [k for k in _STAGE_REQUIRED if k not in doc]
    if missing:
        raise ConfigError(f"stage config: missing required key(s) {missing}",
                          f"missing_key:{missing[0]}")
    _check_types(doc, "stage config")
    doc = dict(doc)
    doc.setdefault("heads", default_heads(doc["d"]) if doc["d"] > 0 else 1)
    return HatStageConfig(**doc)


def variant_from_dict(doc: dict) -> VariantSpec:
    if "variant" in doc:
        _check_keys(doc, {"variant", "width_div", "input_size"}, "variant reference")
        _check_types(doc, "variant reference")
        spec = get_variant(doc["variant"])
        if "input_size" in doc:
            spec = dataclasses.replace(spec, input_size=doc["input_size"])
        div = doc.get("width_div", 1)
        if div < 1:
            raise ConfigError(f"width_div={div} must be >= 1", "width_div_positive")
        return spec.scaled(div)
    _check_keys(doc, _fields(VariantSpec), "network config")
    _check_types(doc, "network config")
    doc = dict(doc)
    for req in ("name", "stem_dims", "stages"):
        if req not in doc:
            raise ConfigError(f"network config: missing required key {req!r}",
                              f"missing_key:{req}")
    stages = []
    for i, st in enumerate(doc["stages"]):
        if not isinstance(st, dict):
            raise ConfigError(f"stages[{i}] must be an object", "type:stages")
        _check_keys(st, _fields(StageSpec), f"stages[{i}]")
        _check_types(st, f"stages[{i}]")
        stages.append(StageSpec(**st))
    doc["stages"] = tuple(stages)
    doc["stem_dims"] = tuple(doc["stem_dims"])
    if "stem_strides" in doc:
        doc["stem_strides"] = tuple(doc["stem_strides"])
    return VariantSpec(**doc)


def config_from_dict(doc) -> VariantSpec | HatStageConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object", "type:document")
    if "variant" in doc or "stages" in doc:
        return variant_from_dict(doc)
    return stage_from_dict(doc)


def load_config(path) -> VariantSpec | HatStageConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})", "json_syntax") from None
    return config_from_dict(doc)


def config_to_dict(cfg: VariantSpec | HatStageConfig) -> dict:
    return dataclasses.asdict(cfg)
