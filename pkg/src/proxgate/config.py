"""Service configuration: JSON file plus ``PROXGATE_*`` environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfig
from .protocol import PolicyConfig
from .registry import parse_secret_hex
from .rssi import DEFAULT_THRESHOLD_M, PathLossParams

ENV_PREFIX = "PROXGATE_"


@dataclass(frozen=True)
class ServiceConfig:
    registry_secret_hex: str
    listen: str = "127.0.0.1:8080"
    database: str = "proxgate.db"
    model_path: str | None = None
    active_model_id: str | None = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    path_loss: PathLossParams = field(default_factory=PathLossParams)
    tau_m: float = DEFAULT_THRESHOLD_M
    seed: int = 0

    def __post_init__(self):
        parse_secret_hex(self.registry_secret_hex)
        if not self.tau_m > 0:
            raise InvalidConfig("tau_m must be positive")
        self.host_port()

    @property
    def secret(self) -> bytes:
        return parse_secret_hex(self.registry_secret_hex)

    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.listen.rpartition(":")
        if not sep or not port.isdigit():
            raise InvalidConfig(f"listen must be host:port, got {self.listen!r}")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        data = dict(data)
        try:
            if "policy" in data:
                data["policy"] = PolicyConfig.from_dict(data["policy"])
            if "path_loss" in data:
                data["path_loss"] = PathLossParams(**data["path_loss"])
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(f"bad config: {exc}") from exc


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServiceConfig:
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    overrides = {
        "REGISTRY_SECRET_HEX": ("registry_secret_hex", str),
        "LISTEN": ("listen", str),
        "DATABASE": ("database", str),
        "MODEL_PATH": ("model_path", str),
        "ACTIVE_MODEL_ID": ("active_model_id", str),
        "TAU_M": ("tau_m", float),
        "SEED": ("seed", int),
    }
    for suffix, (key, conv) in overrides.items():
        value = env.get(ENV_PREFIX + suffix)
        if value is not None:
            try:
                data[key] = conv(value)
            except ValueError as exc:
                raise InvalidConfig(f"{ENV_PREFIX + suffix}: {exc}") from exc
    if "registry_secret_hex" not in data:
        raise InvalidConfig("registry_secret_hex missing (config key or PROXGATE_REGISTRY_SECRET_HEX)")
    return ServiceConfig.from_dict(data)
