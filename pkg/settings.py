#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Run configuration loading
Flat dotted key = value files, SHDL_* environment overrides, CLI overrides and presets
"""

import logging
import os
import re
import typing
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ValidationError as PydanticValidationError

from data_models import PipelineConfig
from errors import ConfigError

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent.absolute() / 'configs'
ENV_PREFIX = 'SHDL_'

# short key -> (section, field, list index or None)
ALIASES: Dict[str, Tuple[str, str, Optional[int]]] = {
    'scatter.j_r1': ('scatter', 'scales', 0),
    'scatter.j_r2': ('scatter', 'scales', 1),
    'scatter.factor_r1': ('scatter', 'resolution_factors', 0),
    'scatter.factor_r2': ('scatter', 'resolution_factors', 1),
    'scatter.k_l1': ('scatter', 'log_params_l1', None),
    'scatter.k_l2': ('scatter', 'log_params_l2', None),
    'pca.s': ('pca', 'filter_sizes', None),
    'pca.k_l3': ('pca', 'k_l3', None),
    'pca.k_l4': ('pca', 'k_l4', None),
    'ols.budget': ('ols', 'budget_per_class', None),
    'svm.c': ('svm', 'c', None),
    'svm.gamma': ('svm', 'gamma', None),
}

_DICT_ITEM = re.compile(r'^\s*-?\d+\s*:\s*[-+0-9.eE]+\s*$')


def parse_value(text: str) -> Any:
    """Scalar, comma list or 'a:b' dict from the right-hand side of a config line"""
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in '"\'':
        return text[1:-1]
    lowered = text.lower()
    if lowered in ('', 'none', 'null'):
        return None
    if lowered in ('true', 'yes', 'on'):
        return True
    if lowered in ('false', 'no', 'off'):
        return False
    items = [item.strip() for item in text.split(',')]
    if all(_DICT_ITEM.match(item) for item in items):
        return {int(k): _scalar(v) for k, v in (item.split(':', 1) for item in items)}
    if len(items) > 1:
        return [_scalar(item) for item in items if item]
    return _scalar(text)


def _scalar(text: str) -> Any:
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """key -> raw value text; later lines win"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    entries: Dict[str, str] = {}
    for number, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path.name}:{number}: expected 'key = value', got '{line}'")
        key, value = line.split('=', 1)
        entries[key.strip().lower()] = value.strip()
    logger.debug(f"Read {len(entries)} settings from {path}")
    return entries


def resolve_preset(name_or_path: str) -> Path:
    """Bare names resolve to the shipped presets in configs/"""
    path = Path(name_or_path)
    if path.exists():
        return path
    preset = PRESET_DIR / f"{name_or_path}.conf"
    if preset.exists():
        return preset
    raise ConfigError(f"unknown config '{name_or_path}' (presets: "
                      f"{', '.join(sorted(p.stem for p in PRESET_DIR.glob('*.conf')))})")


def env_overrides(environ: Mapping[str, str]) -> Dict[str, str]:
    """SHDL_<SECTION>__<KEY>, SHDL_SEED, SHDL_THREADS and SHDL_CIFAR_DIR"""
    entries: Dict[str, str] = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if '__' in name:
            section, field = name.split('__', 1)
            entries[f"{section}.{field}"] = value
        elif name in ('seed', 'threads'):
            entries[name] = value
    if environ.get('SHDL_CIFAR_DIR'):
        entries.setdefault('data.cifar_dir', environ['SHDL_CIFAR_DIR'])
    return entries


def _is_list_field(model: type, field: str) -> bool:
    info = model.model_fields.get(field)
    return info is not None and typing.get_origin(info.annotation) in (list, List)


def _section_model(section: str) -> Optional[type]:
    info = PipelineConfig.model_fields.get(section)
    if info is None:
        return None
    annotation = info.annotation
    return annotation if isinstance(annotation, type) and issubclass(annotation, BaseModel) else None


def _apply(tree: Dict[str, Any], key: str, raw: str) -> None:
    value = parse_value(raw)
    if key in ALIASES:
        section, field, index = ALIASES[key]
    elif '.' in key:
        section, field = key.split('.', 1)
        index = None
    else:
        tree[key] = value
        return

    model = _section_model(section)
    if model is None:
        raise ConfigError(f"unknown config section '{section}' in '{key}'")
    if field not in model.model_fields:
        raise ConfigError(f"unknown config key '{key}'")
    target = tree.setdefault(section, {})
    if index is not None:
        current = list(target.get(field, model.model_fields[field].get_default(call_default_factory=True)))
        while len(current) <= index:
            current.append(current[-1])
        current[index] = value
        target[field] = current
    elif _is_list_field(model, field) and not isinstance(value, list):
        target[field] = [] if value is None else [value]
    else:
        target[field] = value


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                seed: Optional[int] = None, threads: Optional[int] = None,
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """
    Resolve the run configuration; later sources win:
    preset file < environment < --set key=value < dedicated flags
    """
    environ = os.environ if environ is None else environ
    entries: Dict[str, str] = {}
    if path is not None:
        entries.update(read_config_file(resolve_preset(str(path))))
    entries.update(env_overrides(environ))
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split('=', 1)
        entries[key.strip().lower()] = value.strip()
    if seed is not None:
        entries['seed'] = str(seed)
    if threads is not None:
        entries['threads'] = str(threads)

    tree: Dict[str, Any] = {}
    for key, raw in entries.items():
        _apply(tree, key, raw)
    if tree.get('seed') is None:
        raise ConfigError("a seed is mandatory (set 'seed' in the config, SHDL_SEED or --seed)")

    try:
        config = PipelineConfig.model_validate(tree)
    except PydanticValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid configuration: {problems}")
    logger.debug(f"Configuration resolved with seed {config.seed}")
    return config


def _format(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, dict):
        return ', '.join(f"{k}:{_format(v)}" for k, v in sorted(value.items()))
    if isinstance(value, (list, tuple)):
        return ', '.join(_format(v) for v in value)
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    """Flat dotted text that load_config reads back to an equal config"""
    lines = [f"seed = {config.seed}", f"threads = {config.threads}", f"ablation = {_format(config.ablation)}"]
    for section in ('scatter', 'pca', 'ols', 'svm', 'cv', 'data', 'sweep'):
        lines.append("")
        lines.append(f"# {section}")
        for field, value in getattr(config, section).model_dump().items():
            lines.append(f"{section}.{field} = {_format(value)}")
    return "\n".join(lines) + "\n"
