"""JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthSpec, TimeSeriesDataset, load_csv, synth_generate
from .evaluation import DEFAULT_K
from .model import ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    pass


def _build(cls, d, where: str):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


@dataclass
class ColumnRoles:
    timestamp: str = "timestamp"
    target: str = "y"
    hist_exog: list[str] = field(default_factory=list)
    futr_exog: list[str] = field(default_factory=list)
    static: list[str] = field(default_factory=list)


@dataclass
class DataSection:
    csv: str | None = None
    synth: dict | None = None
    columns: dict | None = None
    calendar: bool = True
    split_ratios: list[float] = field(default_factory=lambda: [0.7, 0.1])
    split_indices: list[int] | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.synth is None):
            raise ValueError("exactly one of 'csv' or 'synth' must be given")
        self.columns = _build(ColumnRoles, self.columns, "data.columns")
        if self.synth is not None:
            try:
                SynthSpec.from_dict(self.synth)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"data.synth: {exc}") from None
        if len(self.split_ratios) != 2 or not all(0 < r < 1 for r in self.split_ratios) or sum(self.split_ratios) >= 1:
            raise ValueError("split_ratios must be two fractions summing below 1")
        if self.split_indices is not None and len(self.split_indices) != 2:
            raise ValueError("split_indices must be [train_end, valid_end]")


@dataclass
class ModelSection:
    input_size: int = 168
    h: int = 24
    patch_len: int = 24
    hidden_size: int = 32
    n_heads: int = 4
    n_enc: int = 1
    ff_size: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        for k in ("input_size", "h", "patch_len", "hidden_size", "n_heads", "n_enc"):
            if not isinstance(getattr(self, k), int) or getattr(self, k) < 1:
                raise ValueError(f"{k} must be a positive integer")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainingSection:
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 1
    windows_batch_size: int = 64
    seed: int = 0
    grad_clip: float | None = None
    train_stride: int = 1

    def __post_init__(self):
        TrainConfig(**{k: v for k, v in asdict(self).items() if k != "train_stride"})
        if self.train_stride < 1:
            raise ValueError("train_stride must be >= 1")


@dataclass
class AopcrSection:
    K: list[float] = field(default_factory=lambda: list(DEFAULT_K))
    n_seeds: int = 5

    def __post_init__(self):
        if any(not 0 < k < 100 for k in self.K) or self.n_seeds < 1:
            raise ValueError("K entries must lie in (0, 100) and n_seeds >= 1")


@dataclass
class RunConfig:
    data: DataSection
    model: ModelSection
    training: TrainingSection
    aopcr: AopcrSection
    output_dir: str = "runs/default"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        allowed = {"data", "model", "training", "aopcr", "output_dir"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        if "data" not in d:
            raise ConfigError("config needs a 'data' section")
        return cls(
            data=_build(DataSection, d["data"], "data"),
            model=_build(ModelSection, d.get("model"), "model"),
            training=_build(TrainingSection, d.get("training"), "training"),
            aopcr=_build(AopcrSection, d.get("aopcr"), "aopcr"),
            output_dir=str(d.get("output_dir", "runs/default")),
            base_dir=Path(base_dir),
        )

    def to_dict(self) -> dict:
        out = {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "training": asdict(self.training),
            "aopcr": asdict(self.aopcr),
            "output_dir": self.output_dir,
        }
        return out

    @property
    def run_dir(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else self.base_dir / p

    def synth_spec(self, seed: int | None = None) -> SynthSpec:
        d = dict(self.data.synth or {})
        d.setdefault("calendar", self.data.calendar)
        d.setdefault("split_ratios", self.data.split_ratios)
        if seed is not None:
            d["seed"] = seed
        return SynthSpec.from_dict(d)

    def load_dataset(self) -> TimeSeriesDataset:
        if self.data.synth is not None:
            ds = synth_generate(self.synth_spec())
        else:
            path = Path(self.data.csv)
            if not path.is_absolute():
                path = self.base_dir / path
            c = self.data.columns
            ds = load_csv(
                path, target=c.target, hist_exog=c.hist_exog, futr_exog=c.futr_exog, static=c.static,
                timestamp=c.timestamp, calendar=self.data.calendar, split_ratios=tuple(self.data.split_ratios),
            )
        if self.data.split_indices is not None:
            ds = ds.with_split(*self.data.split_indices)
        return ds

    def model_config(self, ds: TimeSeriesDataset) -> ModelConfig:
        m = self.model
        return ModelConfig(
            input_size=m.input_size, h=m.h, patch_len=m.patch_len, hidden_size=m.hidden_size,
            n_heads=m.n_heads, n_enc=m.n_enc, ff_size=m.ff_size, dropout=m.dropout,
            n_hist_exog=ds.n_hist, n_futr_exog=ds.n_futr, n_stat_exog=ds.n_stat,
            variable_names=ds.variable_names,
        )

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            lr=t.lr, max_epochs=t.max_epochs, patience=t.patience, batch_size=t.batch_size,
            windows_batch_size=t.windows_batch_size, seed=t.seed, grad_clip=t.grad_clip,
        )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw, base_dir=path.parent)
