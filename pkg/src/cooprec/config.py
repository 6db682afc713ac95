"""Run configuration: one TOML file, with CLI flags layered on top.

Layout::

    seed = 7
    mode = "pull"
    out = "runs/demo"

    [data]
    interactions = "logs.csv"   # raw CSV, partitioned on load
    split = "runs/split"        # or a directory written by ``partition``

    [partition]                 # PartitionConfig fields
    t_device = 1512057600
    t_test = 1512230400

    [train]                     # TrainConfig fields
    global_epochs = 10
    [train.lasso]
    target_sparsity = 0.9

    [synthetic]                 # SyntheticConfig fields
    users = 200

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from cooprec.data import PartitionConfig
from cooprec.experiments import TrainConfig
from cooprec.model import Mode
from cooprec.sparsity import LassoConfig
from cooprec.synthetic import T_DEVICE, T_TEST, SyntheticConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    mode: Mode = Mode.PULL
    out: Path | None = None
    interactions: Path | None = None
    split: Path | None = None
    partition: PartitionConfig = field(default_factory=lambda: PartitionConfig(T_DEVICE, T_TEST))
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def check_paths(self):
        for name in ("interactions", "split"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise ConfigError(f"{name} path does not exist: {p}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode.value,
            "interactions": None if self.interactions is None else str(self.interactions),
            "split": None if self.split is None else str(self.split),
            "partition": asdict(self.partition),
            "train": self.train.to_dict(),
            "synthetic": asdict(self.synthetic),
        }


def _build(cls, table: dict, where: str, base=None):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return replace(base, **table) if base is not None else cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent)


def config_from_dict(raw: dict[str, Any], root: Path = Path(".")) -> RunConfig:
    raw = dict(raw)
    unknown = sorted(set(raw) - {"seed", "mode", "out", "data", "partition", "train", "synthetic"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    if "mode" in raw:
        cfg.mode = _mode(raw["mode"])
    if "out" in raw:
        cfg.out = root / raw["out"]
    data = dict(raw.get("data", {}))
    for key in list(data):
        if key not in ("interactions", "split"):
            raise ConfigError(f"unknown key in [data]: {key}")
        setattr(cfg, key, root / data[key])
    if "partition" in raw:
        table = {"t_device": T_DEVICE, "t_test": T_TEST, **raw["partition"]}
        cfg.partition = _build(PartitionConfig, table, "partition")
    if "train" in raw:
        cfg.train = _build(TrainConfig, raw["train"], "train")
    cfg.train = replace(cfg.train, mode=cfg.mode)
    if "synthetic" in raw:
        cfg.synthetic = _build(SyntheticConfig, raw["synthetic"], "synthetic")
    return cfg


def _mode(value) -> Mode:
    try:
        return Mode(value)
    except ValueError:
        raise ConfigError(f"mode must be 'pull' or 'push', got {value!r}") from None


def apply_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Layer CLI flag values (None = not given) over a loaded config."""
    if flags.get("seed") is not None:
        cfg.seed = flags["seed"]
    if flags.get("mode") is not None:
        cfg.mode = _mode(flags["mode"])
    if flags.get("out") is not None:
        cfg.out = Path(flags["out"])
    for key in ("interactions", "split"):
        if flags.get(key) is not None:
            setattr(cfg, key, Path(flags[key]))
    part = {k: flags[k] for k in ("t_device", "t_test") if flags.get(k) is not None}
    if part:
        cfg.partition = _build(PartitionConfig, part, "partition", base=cfg.partition)
    train = {"mode": cfg.mode}
    if flags.get("sparsity") is not None:
        train["model_sparsity"] = flags["sparsity"]
    if flags.get("embedding_sparsity") is not None:
        lasso = cfg.train.lasso
        train["lasso"] = LassoConfig(lasso.gamma, lasso.lambda_lasso, flags["embedding_sparsity"] or None)
    if "candidate_proportion" in flags and flags["candidate_proportion"] is not None:
        q = flags["candidate_proportion"]
        train["candidate_proportion"] = None if q >= 1.0 else q
    cfg.train = _build(TrainConfig, train, "train", base=cfg.train)
    syn = {k: flags[k] for k in ("users", "items") if flags.get(k) is not None}
    if syn:
        cfg.synthetic = _build(SyntheticConfig, syn, "synthetic", base=cfg.synthetic)
    return cfg
