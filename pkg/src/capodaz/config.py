"""Service/CLI configuration: flat key-value files, env overrides, typed validation.

Precedence: CLI flags > CAPODAZ_* environment variables > config file > defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "CAPODAZ_"


class ConfigError(Exception):
    pass


class ConfigParse(ConfigError):
    pass


class ConfigInvalid(ConfigError):
    pass


class Role(Enum):
    RESOURCE_SERVER = "resource-server"
    PROXY_RESOURCE_SERVER = "proxy-resource-server"
    AUTHORIZATION_SERVER = "authorization-server"
    COMBINED = "combined"


@dataclass
class ServiceConfig:
    listen_address: str = "127.0.0.1:8080"
    role: Role = Role.COMBINED
    upstream: str | None = None
    policy_path: str | None = None
    issuer_key_path: str | None = None
    clients_path: str | None = None
    resources_path: str | None = None
    token_default_ttl: int = 3600
    request_timeout: float = 10.0
    purge_interval: float = 60.0
    registrar_log_path: str | None = None
    proxy_allow_paths: tuple[str, ...] = ()
    proxy_max_body: int = 65536
    proxy_source_cap: int = 64
    proxy_required_headers: tuple[str, ...] = ()
    subscription_clients: tuple[str, ...] = ("*",)
    payment_clients: tuple[str, ...] = ("*",)
    platform_clients: tuple[str, ...] = ("*",)

    def validate(self) -> None:
        host, _, port = self.listen_address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigInvalid(f"listen_address: {self.listen_address!r} is not host:port")
        if self.role is Role.PROXY_RESOURCE_SERVER and not self.upstream:
            raise ConfigInvalid("upstream: required when role is proxy-resource-server")
        if self.token_default_ttl <= 0:
            raise ConfigInvalid("token_default_ttl: must be positive")
        if self.request_timeout <= 0:
            raise ConfigInvalid("request_timeout: must be positive")
        if self.proxy_max_body <= 0:
            raise ConfigInvalid("proxy_max_body: must be positive")
        if self.proxy_source_cap <= 0:
            raise ConfigInvalid("proxy_source_cap: must be positive")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "ServiceConfig":
        known = {f.name: f for f in fields(cls)}
        values: dict[str, Any] = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigInvalid(f"{key}: unknown configuration key")
            values[key] = _coerce(key, raw, cls())
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_mapping(self) -> dict[str, str]:
        """String rendering of every non-None field, in declaration order."""
        out: dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, Role):
                out[f.name] = value.value
            elif isinstance(value, tuple):
                out[f.name] = ",".join(value)
            else:
                out[f.name] = str(value)
        return out


def _coerce(key: str, raw: str, defaults: ServiceConfig) -> Any:
    default = getattr(defaults, key)
    try:
        if key == "role":
            return Role(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r} ({exc})") from exc


def parse_config_file(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    result: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigParse(f"line {lineno}: expected `key = value`, got {raw!r}")
        result[key.strip()] = value.strip()
    return result


def render_config(cfg: ServiceConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in cfg.to_mapping().items())


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> ServiceConfig:
    """Merge defaults, config file, environment and explicit overrides."""
    merged: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigParse(f"cannot read config file {path}: {exc}") from exc
        merged.update(parse_config_file(text))
    env = os.environ if env is None else env
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            merged[key[len(ENV_PREFIX):].lower()] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    return ServiceConfig.from_mapping(merged)
