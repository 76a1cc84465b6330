"""Layered pipeline configuration: flags > environment > TOML file > defaults.

Secrets are never stored: the config carries the *names* of the auth
environment variables, and backends read the values at call time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import toml

from .errors import ConfigurationError

_ENV_PREFIX = "MIRAGE_"


@dataclass(frozen=True)
class PipelineConfig:
    # backend endpoints and the env vars holding their tokens
    proposer_endpoint: str = ""
    proposer_auth_env: str = "MIRAGE_VLM_TOKEN"
    generator_endpoint: str = ""
    generator_auth_env: str = "MIRAGE_GEN_TOKEN"
    embedder_model: str = "openai/clip-vit-base-patch32"
    # proposal / generation protocol
    reference_images: int = 5
    defect_count: int = 10
    per_defect: int = 50
    # orchestration
    max_workers: int = 4
    max_retries: int = 3
    backoff_base: float = 1.0
    rate_per_sec: float = 0.0  # 0 = unlimited
    # mask creation
    semantic_backend: str = "mock"
    semantic_layer: str = "fusion-last"
    structural_backend: str = "mock"
    structural_layers: tuple = ("pyramid-1", "pyramid-2", "pyramid-3")
    threshold_candidates: int = 256
    # reproducibility and output
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("proposer_auth_env", "generator_auth_env"):
            value = getattr(self, name)
            if value and not value.isidentifier():
                raise ConfigurationError(
                    f"{name} must name an environment variable, got {value!r}")


def _coerce(current, raw):
    if isinstance(current, bool):
        return str(raw).lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(raw)
        return tuple(s.strip() for s in str(raw).split(",") if s.strip())
    return raw


def load_config(path=None, env=None, overrides=None):
    """Assemble the effective config with flags > env > file precedence."""
    env = os.environ if env is None else env
    cfg = PipelineConfig()

    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            data = toml.loads(p.read_text())
        except toml.TomlDecodeError as exc:
            raise ConfigurationError(f"cannot parse {p}: {exc}") from exc
        known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys in {p}: {sorted(unknown)}")
        cfg = replace(cfg, **{k: _coerce(known[k], v) for k, v in data.items()})

    env_updates = {}
    for f in fields(cfg):
        key = _ENV_PREFIX + f.name.upper()
        if key in env:
            env_updates[f.name] = _coerce(getattr(cfg, f.name), env[key])
    if env_updates:
        cfg = replace(cfg, **env_updates)

    if overrides:
        clean = {k: v for k, v in overrides.items() if v is not None}
        if clean:
            cfg = replace(cfg, **clean)
    return cfg
