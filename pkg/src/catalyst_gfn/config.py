"""Run configuration: one JSON document with a block per pipeline stage."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .bulk import ENERGY_WINDOW
from .env import EnvConfig, EnvError
from .gflownet import TrainerConfig
from .proxy import RewardConfig

PROXY_COMMAND_ENV = "CATALYST_GFN_PROXY_COMMAND"
PROXY_KINDS = ("tabular", "external")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists messages prefixed by field path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RelaxationConfig:
    window: float = 1.0  # A either side of the starting lattice parameter
    threshold: float = ENERGY_WINDOW  # eV/atom above the composition minimum
    n_layers: int = 4
    min_thickness: float = 8.0  # A
    cutoff: float = 6.0  # graph edge cutoff, A
    energy_table: str | None = None  # path; packaged table when None

    def validate(self, prefix: str = "relaxation") -> list:
        errors = []
        for name in ("window", "cutoff"):
            v = getattr(self, name)
            if not _is_number(v) or not v > 0:
                errors.append(f"{prefix}.{name}: must be positive (got {v!r})")
        for name in ("threshold", "min_thickness"):
            v = getattr(self, name)
            if not _is_number(v) or v < 0:
                errors.append(f"{prefix}.{name}: must be non-negative (got {v!r})")
        if not isinstance(self.n_layers, int) or isinstance(self.n_layers, bool) or self.n_layers < 1:
            errors.append(f"{prefix}.n_layers: must be a positive integer (got {self.n_layers!r})")
        if self.energy_table is not None and not os.path.isfile(self.energy_table):
            errors.append(f"{prefix}.energy_table: file not found ({self.energy_table})")
        return errors


@dataclass
class ProxyConfig:
    kind: str = "tabular"
    command: str | None = None  # external only; overridden by $CATALYST_GFN_PROXY_COMMAND
    table: str | None = None  # tabular only; packaged table when None
    timeout: float = 30.0

    def resolved_command(self) -> str | None:
        return os.environ.get(PROXY_COMMAND_ENV) or self.command

    def validate(self, prefix: str = "proxy") -> list:
        errors = []
        if self.kind not in PROXY_KINDS:
            errors.append(f"{prefix}.kind: must be one of {', '.join(PROXY_KINDS)} (got {self.kind!r})")
        if self.kind == "external" and not self.resolved_command():
            errors.append(f"{prefix}.command: required for an external proxy (or set ${PROXY_COMMAND_ENV})")
        if self.table is not None and not os.path.isfile(self.table):
            errors.append(f"{prefix}.table: file not found ({self.table})")
        if not _is_number(self.timeout) or not self.timeout > 0:
            errors.append(f"{prefix}.timeout: must be positive (got {self.timeout!r})")
        return errors


@dataclass
class RunConfig:
    search_space: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    relaxation: RelaxationConfig = field(default_factory=RelaxationConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    out_dir: str = "runs/default"
    seed: int = 0  # master seed; training uses it directly, sampling derives from it

    def validate(self) -> list:
        errors = []
        errors += self.trainer.validate("trainer")
        errors += self.reward.validate("reward")
        errors += self.relaxation.validate("relaxation")
        errors += self.proxy.validate("proxy")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            errors.append(f"seed: must be a non-negative integer (got {self.seed!r})")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            errors.append(f"out_dir: must be a non-empty path (got {self.out_dir!r})")
        return errors

    def trainer_config(self) -> TrainerConfig:
        """Trainer block with the master seed applied."""
        return TrainerConfig(**{**asdict(self.trainer), "seed": self.seed})

    def to_json(self) -> dict:
        return {
            "search_space": self.search_space.to_json(),
            "trainer": asdict(self.trainer),
            "reward": asdict(self.reward),
            "relaxation": asdict(self.relaxation),
            "proxy": asdict(self.proxy),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        """Parse and validate; every problem is reported at once with its field path."""
        if not isinstance(obj, dict):
            raise ConfigError(["<root>: expected a JSON object"])
        errors = []
        known = {f.name for f in fields(cls)}
        errors += [f"{k}: unknown field" for k in obj if k not in known]
        kw = {}
        for name, klass in (
            ("trainer", TrainerConfig),
            ("reward", RewardConfig),
            ("relaxation", RelaxationConfig),
            ("proxy", ProxyConfig),
        ):
            if name in obj:
                block, block_errors = _build_block(name, klass, obj[name])
                errors += block_errors
                if block is not None:
                    kw[name] = block
        if "search_space" in obj:
            block = obj["search_space"]
            allowed = {f.name for f in fields(EnvConfig)}
            if not isinstance(block, dict):
                errors.append("search_space: expected an object")
            else:
                bad = [k for k in block if k not in allowed]
                errors += [f"search_space.{k}: unknown field" for k in bad]
                if not bad:
                    try:
                        kw["search_space"] = EnvConfig.from_json(block)
                    except (EnvError, TypeError, ValueError) as exc:
                        errors.append(f"search_space: {exc}")
        for name in ("out_dir", "seed"):
            if name in obj:
                kw[name] = obj[name]
        if errors:
            raise ConfigError(errors)
        cfg = cls(**kw)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _build_block(name: str, klass, block):
    if not isinstance(block, dict):
        return None, [f"{name}: expected an object"]
    allowed = {f.name for f in fields(klass)}
    bad = [f"{name}.{k}: unknown field" for k in block if k not in allowed]
    if bad:
        return None, bad
    return klass(**block), []


def load_config(path=None, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None) and apply CLI overrides."""
    obj = {}
    if path is not None:
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"<file>: cannot read {path}: {exc.strerror}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: {path} is not valid JSON ({exc})"]) from exc
    if isinstance(obj, dict):
        obj = dict(obj)
        if seed is not None:
            obj["seed"] = seed
        if out_dir is not None:
            obj["out_dir"] = out_dir
    return RunConfig.from_json(obj)
