"""Run configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import MixtureSpec, PartitionSpec
from .errors import ConfigurationError

METHODS = ("fedmate", "fedavg_ft", "local_only")


@dataclass(frozen=True)
class RunConfig:
    # protocol
    rounds: int = 150
    num_clients: int = 20
    fraction: float = 1.0
    local_epochs: int = 5
    batch_size: int = 32
    local_lr: float = 0.05
    server_lr: float = 0.01
    finetune_steps: int = 5
    lambda_e: float = 0.8
    lambda_c: float = 0.6
    cft_x: float = 1.0
    # architecture
    input_dim: int = 16
    hidden_dims: tuple = (64,)
    feature_dim: int = 32
    num_classes: int = 10
    # data
    n_per_class: int = 100
    test_per_class: int = 100
    cluster_spread: float = 1.0
    cluster_radius: Optional[float] = None
    partition: str = "skew"
    skew: int = 30
    dominant_classes: int = 2
    classes_per_client: int = 3
    # run
    method: str = "fedmate"
    seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("local_lr", "server_lr", "cft_x"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.fraction <= 1:
            raise ConfigurationError("fraction must be in (0, 1]")
        if self.lambda_e < 0 or self.lambda_c < 0:
            raise ConfigurationError("lambda_e and lambda_c must be nonnegative")
        if self.rounds < 0 or self.local_epochs < 0 or self.num_clients < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds/epochs must be >= 0, clients and batch size >= 1")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def mixture(self) -> MixtureSpec:
        return MixtureSpec(
            num_classes=self.num_classes, dim=self.input_dim, n_per_class=self.n_per_class,
            spread=self.cluster_spread, radius=self.cluster_radius, seed=self.seed,
        )

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            mode=self.partition, num_clients=self.num_clients, skew=self.skew,
            dominant_classes=self.dominant_classes, classes_per_client=self.classes_per_client,
            seed=self.seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name == "hidden_dims":
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if name in ("cluster_radius", "out_dir"):
            if raw.lower() in ("", "none"):
                return None
            return float(raw) if name == "cluster_radius" else raw
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    base = base or RunConfig()
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(RunConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _parse_value(key, value, fields[key])
    return base.replace(**changes)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "hidden_dims":
            v = ",".join(map(str, v))
        lines.append(f"{f.name}={'none' if v is None else v}")
    return "\n".join(lines) + "\n"
