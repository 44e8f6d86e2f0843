"""Run configuration: file loading, flag merging, and resolved snapshots.

One config file (TOML or JSON) with per-subcommand sections; command-line
flags override the file, the file overrides built-in defaults. Every run
writes the resolved configuration beside its outputs so results stay
attributable.
"""

from __future__ import annotations

import json

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

DEFAULT_SEED = 0
DEFAULT_WORKERS = 4
DEFAULT_OUT_DIR = "emofuse-out"

REGISTRY_CHOICES = ("mock", "http")


class ConfigError(Exception):
    """Configuration that cannot be loaded or resolved."""


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with path.open("rb") as handle:
                return tomllib.load(handle)
        if suffix == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from None
    raise ConfigError(f"unsupported config format {suffix!r} (use .toml or .json)")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    config_path: Optional[Path] = None
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS
    registry: str = "mock"
    out_dir: Path = Path(DEFAULT_OUT_DIR)
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.registry not in REGISTRY_CHOICES:
            raise ConfigError(
                f"registry must be one of {REGISTRY_CHOICES}, got {self.registry!r}"
            )
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def section(self, name: str) -> dict:
        value = self.sections.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        return value

    def to_json(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config_path": str(self.config_path) if self.config_path else None,
            "seed": self.seed,
            "workers": self.workers,
            "registry": self.registry,
            "out_dir": str(self.out_dir),
            "sections": self.sections,
        }


def resolve_run_config(subcommand: str, args) -> RunConfig:
    """Merge defaults, the config file's [run] table, and CLI flags.

    ``args`` attributes that are None were not passed on the command line.
    """
    sections = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        sections = load_config_file(config_path)
        if not isinstance(sections, dict):
            raise ConfigError("top-level config must be a table")
    run_section = sections.get("run", {})
    if not isinstance(run_section, dict):
        raise ConfigError("config section [run] must be a table")

    def pick(flag_name, file_key, default):
        flag = getattr(args, flag_name, None)
        if flag is not None:
            return flag
        return run_section.get(file_key, default)

    return RunConfig(
        subcommand=subcommand,
        config_path=Path(config_path) if config_path else None,
        seed=int(pick("seed", "seed", DEFAULT_SEED)),
        workers=int(pick("workers", "workers", DEFAULT_WORKERS)),
        registry=str(pick("registry", "registry", "mock")),
        out_dir=Path(pick("out", "out_dir", DEFAULT_OUT_DIR)),
        sections=sections,
    )


def write_config_snapshot(run: RunConfig, extras: Optional[dict] = None) -> Path:
    """Write the resolved configuration beside the run's outputs."""
    run.out_dir.mkdir(parents=True, exist_ok=True)
    payload = run.to_json()
    if extras:
        payload["resolved"] = extras
    path = run.out_dir / "resolved-config.json"
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path
