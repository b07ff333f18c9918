"""Runtime configuration: defaults, key=value config files, environment
variables and CLI flags, merged with precedence flags > env > file."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

ENV_DSN = "QUITE_DSN"
ENV_ENDPOINT = "QUITE_LLM_ENDPOINT"
ENV_KEY = "QUITE_LLM_KEY"


@dataclass(frozen=True)
class QuiteConfig:
    # FSM / agents
    max_iterations: int = 2          # Reasoning-entry budget per run
    k_max_repairs: int = 3
    verify_budget_seconds: float = 60.0
    verify_iteration_cap: int = 5
    retrieval_k: int = 3
    slice_cap_chars: int = 4000
    discount_factor: float = 1.0     # recorded constant; no value iteration runs

    # LLM
    temperature: float = 0.0
    max_output_tokens: int = 4096
    llm_timeout_seconds: float = 60.0
    llm_max_retries: int = 2
    endpoint: str = ""
    reasoning_model: str = "reasoning-default"
    general_model: str = "general-default"

    # Measurement
    warmups: int = 1
    runs: int = 3
    latency_cap_seconds: float = 300.0
    improvement_threshold: float = 0.10

    # Retrieval / hints
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    no_materialize_rows_threshold: float = 1000.0
    inject_hints: bool = True


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key = value file; '#' starts a comment, blank lines ignored,
    values may be quoted."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        value = value.strip().strip('"').strip("'")
        values[key.strip().lower()] = value
    return values


def _coerce(value: Any, target_type: type) -> Any:
    if target_type is bool:
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return str(value)


def resolve_config(
    file_path: Optional[str | Path] = None,
    env: Optional[Mapping[str, str]] = None,
    flags: Optional[Mapping[str, Any]] = None,
) -> QuiteConfig:
    """Build a config with precedence flags > environment > file > defaults.

    Environment keys use the QUITE_ prefix (QUITE_MAX_ITERATIONS and so
    on); QUITE_LLM_ENDPOINT maps to `endpoint`.
    """
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    known = {f.name: f.type for f in fields(QuiteConfig)}

    if file_path:
        for key, value in parse_config_file(file_path).items():
            if key in known:
                merged[key] = value

    for name in known:
        env_key = f"QUITE_{name.upper()}"
        if env_key in env:
            merged[name] = env[env_key]
    if ENV_ENDPOINT in env and "endpoint" not in merged:
        merged["endpoint"] = env[ENV_ENDPOINT]

    if flags:
        for key, value in flags.items():
            if key in known and value is not None:
                merged[key] = value

    defaults = QuiteConfig()
    kwargs = {}
    for f in fields(QuiteConfig):
        if f.name in merged:
            kwargs[f.name] = _coerce(merged[f.name], type(getattr(defaults, f.name)))
    return dataclasses.replace(defaults, **kwargs)


def resolve_dsn(flag_value: Optional[str], env: Optional[Mapping[str, str]] = None) -> Optional[str]:
    env = os.environ if env is None else env
    return flag_value or env.get(ENV_DSN)
