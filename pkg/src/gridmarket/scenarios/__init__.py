"""Bundled example networks."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..network import NetworkConfig, load_config


def names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def path(name: str) -> Path:
    return Path(str(resources.files(__name__).joinpath(f"{name}.json")))


def load(name: str) -> NetworkConfig:
    return load_config(resources.files(__name__).joinpath(f"{name}.json").read_text())
