"""Layered configuration: built-in defaults < TOML file < command-line flags."""

from __future__ import annotations

import copy
import sys
from collections.abc import Mapping
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .disentangle import DetectionConfig
from .pipeline import PipelineConfig
from .topic import TopicConfig

DEFAULTS: dict = {
    "seed": 0,
    "detection": {
        "threshold": 1e9,
        "max_len": 20,
        "join_separator": "\n",
        "conditional": False,
        "speaker_prefix": False,
    },
    "lm": {"scorer": "ngram", "model": None, "order": 2, "k": 0.5},
    "remote": {"endpoint": None, "model": None, "timeout_ms": 30_000, "max_retries": 2},
    "topic": {"method": "tfidf_nmf", "k_terms": 4, "max_iter": 200, "tol": 1e-4, "seed": 0},
    "priority": {"weights": None, "alpha": 0.01},
    "generation": {"last_n": 5, "max_tokens": 128, "temperature": 0.7},
    "interleave": {"min_group": 1, "max_group": 5},
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, object] | None = None) -> dict:
    """Effective configuration.

    ``overrides`` uses dotted keys (``"detection.threshold"``); ``None``
    values mean "flag not given" and are ignored.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "rb") as fh:
            file_cfg = tomllib.load(fh)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{path}: unknown config section(s) {sorted(unknown)}")
        cfg = _merge(cfg, file_cfg)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return cfg


def detection_config(cfg: Mapping) -> DetectionConfig:
    d = cfg["detection"]
    return DetectionConfig(
        threshold=float(d["threshold"]),
        max_len=int(d["max_len"]),
        join_separator=str(d["join_separator"]),
        conditional=bool(d["conditional"]),
        speaker_prefix=bool(d["speaker_prefix"]),
    )


def topic_config(cfg: Mapping) -> TopicConfig:
    t = cfg["topic"]
    return TopicConfig(
        method=t["method"],
        k_terms=int(t["k_terms"]),
        max_iter=int(t["max_iter"]),
        tol=float(t["tol"]),
        seed=int(t["seed"]),
        stop_words=frozenset(t.get("stop_words", ())),
    )


def pipeline_config(cfg: Mapping) -> PipelineConfig:
    g = cfg["generation"]
    return PipelineConfig(
        detection=detection_config(cfg),
        topic=topic_config(cfg),
        alpha=float(cfg["priority"]["alpha"]),
        last_n=int(g["last_n"]),
        max_tokens=int(g["max_tokens"]),
        temperature=float(g["temperature"]),
    )
