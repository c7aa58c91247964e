"""``key = value`` run configuration with dotted section keys."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .data import SyntheticTaskSpec
from .model import PRESETS, NsaConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    task: str = "global-centroid-offset"
    n: int = 256
    clusters: int = 2
    noise_sigma: float = 0.1
    seed: int = 0
    radius: float = 0.2
    box: float = 1.0
    train_count: int = 200
    val_count: int = 20
    val_seed: int = 1
    path: str = ""
    format: str = "epcd"

    def spec(self, validation: bool = False) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            task=self.task,
            n=self.n,
            clusters=self.clusters,
            noise_sigma=self.noise_sigma,
            seed=self.val_seed if validation else self.seed,
            radius=self.radius,
            box=self.box,
        )


@dataclass(frozen=True)
class BenchConfig:
    sizes: str = "1024,2048,4096,8192,16384"
    repeats: int = 3
    throughput_steps: int = 10
    target_node: int = 0
    dense: bool = True

    @property
    def size_list(self) -> list[int]:
        return [int(s) for s in self.sizes.split(",") if s.strip()]


@dataclass(frozen=True)
class RunConfig:
    model: NsaConfig = field(default_factory=NsaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_text(self) -> str:
        lines = []
        for section in ("model", "train", "data", "bench"):
            obj = getattr(self, section)
            for f in fields(obj):
                value = getattr(obj, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{section}.{f.name} = {value}")
        return "\n".join(lines) + "\n"


SECTIONS = ("model", "train", "data", "bench")


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply(config: RunConfig, pairs: Iterable[tuple[str, str]]) -> RunConfig:
    """Apply dotted ``section.key`` assignments; ``model.preset`` goes first."""
    pairs = list(pairs)
    for key, value in pairs:
        if key == "model.preset":
            if value not in PRESETS:
                raise ConfigError(f"unknown preset {value!r}; choose from {sorted(PRESETS)}")
            config = replace(config, model=replace(config.model, **PRESETS[value]))
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in pairs:
        if key == "model.preset":
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown key {key!r}")
        obj = getattr(config, section)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"unknown key {key!r}")
        updates[section][name] = _convert(value, getattr(obj, name), key)
    try:
        return replace(config, **{s: replace(getattr(config, s), **u) for s, u in updates.items() if u})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    config = RunConfig()
    pairs = []
    if path is not None:
        pairs += parse_lines(Path(path).read_text().splitlines(), str(path))
    pairs += parse_lines(overrides, "--set")
    return apply(config, pairs)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(
        config,
        model=replace(config.model, seed=seed),
        train=replace(config.train, seed=seed),
        data=replace(config.data, seed=seed),
    )


__all__ = [
    "BenchConfig",
    "ConfigError",
    "DataConfig",
    "RunConfig",
    "apply",
    "load",
    "parse_lines",
    "with_seed",
]
