"""Run configuration files and the reproducibility manifest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .trainer import ConfigError, TrainConfig

OUT_ROOT_ENV = "MULTINAV_OUT_ROOT"

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_REQUIRED = ("worlds_dir", "corpus_dir", "out_dir")


def _type_ok(name: str, value) -> bool:
    if name == "seeds":
        return isinstance(value, list) and all(isinstance(v, int) for v in value)
    if name == "model":
        return isinstance(value, dict)
    if name in ("steps", "batch_size", "max_episode_len", "eval_interval",
                "eval_max_episodes"):
        return isinstance(value, int) and not isinstance(value, bool)
    if name in ("clone_fraction", "grl_lambda", "learning_rate", "grad_clip",
                "mix_ratio", "gamma", "success_radius"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def config_from_dict(data: dict) -> TrainConfig:
    """Build a validated TrainConfig; errors list every offending key."""
    bad = []
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        bad.append(f"unknown keys {unknown}")
    for name in _REQUIRED:
        if not data.get(name):
            bad.append(f"missing required key {name!r}")
    for name, value in data.items():
        if name in _FIELD_TYPES and not _type_ok(name, value):
            bad.append(f"bad type for {name!r}: {value!r}")
    if bad:
        raise ConfigError("invalid config: " + "; ".join(bad))
    cfg = TrainConfig(**data)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        cfg.out_dir = str(Path(root) / cfg.out_dir)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(data)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def tree_hashes(root) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): _sha256(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


def build_manifest(cfg: TrainConfig, artifacts: list[str]) -> dict:
    config_dict = config_to_dict(cfg)
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return {
        "version": __version__,
        "artifact_version": hashlib.sha256(blob).hexdigest()[:12],
        "config": config_dict,
        "world_hashes": tree_hashes(cfg.worlds_dir),
        "corpus_hashes": tree_hashes(cfg.corpus_dir),
        "seeds": list(cfg.seeds),
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "artifacts": sorted(artifacts),
    }


def write_manifest(run_dir, cfg: TrainConfig) -> Path:
    """Manifest referencing every artifact currently in the run directory."""
    run_dir = Path(run_dir)
    artifacts = [str(p.relative_to(run_dir)) for p in sorted(run_dir.rglob("*"))
                 if p.is_file() and p.name != "manifest.json"]
    manifest = build_manifest(cfg, artifacts)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
