"""Time series containers, CSV IO, windowing, patch layout and patching."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "CALENDAR_FEATURES",
    "DataError",
    "FrequencyError",
    "PatchEntry",
    "PatchLayout",
    "SchemaError",
    "SynthSpec",
    "TimeSeriesDataset",
    "WindowBatch",
    "WindowSample",
    "build_layout",
    "calendar_features",
    "load_csv",
    "make_windows",
    "patchify",
    "patchify_batch",
    "stack_windows",
    "synth_generate",
    "unpatchify",
    "write_csv",
]

CALENDAR_FEATURES = ("month", "week_day", "hour")
KINDS = ("target", "hist_exog", "futr_exog")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FrequencyError(DataError):
    """Timestamps are not strictly increasing at a uniform spacing."""


class SchemaError(DataError):
    """Column roles do not match the CSV header."""


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Target series plus aligned exogenous channels.

    ``timestamps`` are float epoch seconds (UTC). ``hist_exog`` and
    ``futr_exog`` have shape ``(n_vars, T)``. ``split`` holds the
    ``(train_end, valid_end)`` indices of a chronological split.
    """

    timestamps: np.ndarray
    target: np.ndarray
    hist_exog: np.ndarray
    futr_exog: np.ndarray
    stat_exog: np.ndarray
    split: tuple[int, int]
    target_name: str = "y"
    hist_names: tuple[str, ...] = ()
    futr_names: tuple[str, ...] = ()
    stat_names: tuple[str, ...] = ()

    def __post_init__(self):
        T = len(self.target)
        if self.hist_exog.shape != (len(self.hist_names), T):
            raise DataError(f"hist_exog shape {self.hist_exog.shape} != {(len(self.hist_names), T)}")
        if self.futr_exog.shape != (len(self.futr_names), T):
            raise DataError(f"futr_exog shape {self.futr_exog.shape} != {(len(self.futr_names), T)}")
        if self.stat_exog.shape != (len(self.stat_names),):
            raise DataError(f"stat_exog shape {self.stat_exog.shape} != {(len(self.stat_names),)}")
        if len(self.timestamps) != T:
            raise DataError("timestamps and target differ in length")
        _check_uniform(self.timestamps)
        train_end, valid_end = self.split
        if not 0 < train_end < valid_end <= T:
            raise DataError(f"split {self.split} violates 0 < train_end < valid_end <= {T}")
        for name, arr in (("target", self.target), ("hist_exog", self.hist_exog), ("futr_exog", self.futr_exog)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"missing or non-finite values in {name}")

    def __len__(self) -> int:
        return len(self.target)

    @property
    def n_hist(self) -> int:
        return len(self.hist_names)

    @property
    def n_futr(self) -> int:
        return len(self.futr_names)

    @property
    def n_stat(self) -> int:
        return len(self.stat_names)

    @property
    def variable_names(self) -> tuple[str, ...]:
        return (self.target_name, *self.hist_names, *self.futr_names)

    @property
    def freq_seconds(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 else 0.0

    def subset_bounds(self, subset: str) -> tuple[int, int]:
        train_end, valid_end = self.split
        bounds = {"train": (0, train_end), "valid": (train_end, valid_end), "test": (valid_end, len(self))}
        if subset not in bounds:
            raise ValueError(f"unknown subset {subset!r}")
        return bounds[subset]

    def with_split(self, train_end: int, valid_end: int) -> "TimeSeriesDataset":
        return TimeSeriesDataset(
            self.timestamps, self.target, self.hist_exog, self.futr_exog, self.stat_exog,
            (int(train_end), int(valid_end)), self.target_name, self.hist_names,
            self.futr_names, self.stat_names,
        )

    def variable_means(self, subset: str = "test") -> np.ndarray:
        """Per-variable mean over a subset, in layout variable order."""
        lo, hi = self.subset_bounds(subset)
        rows = [self.target[lo:hi][None], self.hist_exog[:, lo:hi], self.futr_exog[:, lo:hi]]
        return np.concatenate(rows, axis=0).mean(axis=1)


def ratio_split(T: int, train: float = 0.7, valid: float = 0.1) -> tuple[int, int]:
    train_end = int(round(T * train))
    valid_end = int(round(T * (train + valid)))
    return train_end, valid_end


def _check_uniform(ts: np.ndarray) -> None:
    if len(ts) < 2:
        return
    d = np.diff(ts)
    if d[0] <= 0 or np.any(d != d[0]):
        bad = int(np.flatnonzero(d != d[0])[0]) + 1 if np.any(d != d[0]) else 1
        raise FrequencyError(f"timestamps not uniformly spaced (first irregular step at row {bad})")


def _parse_timestamp(s: str) -> float:
    s = s.strip()
    try:
        return float(s)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"unparseable timestamp {s!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _format_timestamp(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def calendar_features(timestamps: np.ndarray) -> np.ndarray:
    """Month (1-12), weekday (0-6, Monday=0) and hour (0-23) as float rows."""
    rows = np.empty((3, len(timestamps)))
    for i, t in enumerate(timestamps):
        dt = datetime.fromtimestamp(float(t), tz=timezone.utc)
        rows[:, i] = (dt.month, dt.weekday(), dt.hour)
    return rows


def load_csv(
    path: str | Path,
    target: str,
    hist_exog: Sequence[str] = (),
    futr_exog: Sequence[str] = (),
    static: Sequence[str] = (),
    timestamp: str = "timestamp",
    calendar: bool = False,
    split: tuple[int, int] | None = None,
    split_ratios: tuple[float, float] = (0.7, 0.1),
) -> TimeSeriesDataset:
    """Read a CSV whose columns are assigned roles by name.

    Static columns must hold a single repeated value. With ``calendar=True``
    month, weekday and hour are appended as future-known channels.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    col = {h: i for i, h in enumerate(header)}
    for name in (timestamp, target, *hist_exog, *futr_exog, *static):
        if name not in col:
            raise SchemaError(f"column {name!r} not found in {path} (have {header})")
    for r_i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: row {r_i + 2} has {len(r)} fields, expected {len(header)}")

    def column(name):
        out = np.empty(len(rows))
        for r_i, r in enumerate(rows):
            cell = r[col[name]].strip()
            if cell == "" or cell.lower() in ("nan", "na", "null"):
                raise DataError(f"missing value in column {name!r} at row {r_i + 2}")
            try:
                out[r_i] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value {cell!r} in column {name!r} at row {r_i + 2}") from None
        return out

    ts = np.array([_parse_timestamp(r[col[timestamp]]) for r in rows])
    _check_uniform(ts)
    y = column(target)
    hist = np.array([column(c) for c in hist_exog]).reshape(len(hist_exog), len(rows))
    futr_list = [column(c) for c in futr_exog]
    futr_names = list(futr_exog)
    if calendar:
        futr_list.extend(calendar_features(ts))
        futr_names.extend(CALENDAR_FEATURES)
    futr = np.array(futr_list).reshape(len(futr_names), len(rows))
    stat = []
    for c in static:
        v = column(c)
        if np.any(v != v[0]):
            raise DataError(f"static column {c!r} is not constant")
        stat.append(v[0])
    if split is None:
        split = ratio_split(len(rows), *split_ratios)
    return TimeSeriesDataset(
        timestamps=ts, target=y, hist_exog=hist, futr_exog=futr,
        stat_exog=np.array(stat, dtype=np.float64), split=tuple(int(s) for s in split),
        target_name=target, hist_names=tuple(hist_exog), futr_names=tuple(futr_names),
        stat_names=tuple(static),
    )


def write_csv(ds: TimeSeriesDataset, path: str | Path, exclude_calendar: bool = True) -> None:
    """Write ``ds`` in the format ``load_csv`` reads; floats use ``repr`` so values round-trip."""
    futr_idx = [
        i for i, n in enumerate(ds.futr_names) if not (exclude_calendar and n in CALENDAR_FEATURES)
    ]
    header = ["timestamp", ds.target_name, *ds.hist_names, *(ds.futr_names[i] for i in futr_idx), *ds.stat_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(len(ds)):
            row = [_format_timestamp(ds.timestamps[t]), repr(float(ds.target[t]))]
            row += [repr(float(v)) for v in ds.hist_exog[:, t]]
            row += [repr(float(ds.futr_exog[i, t])) for i in futr_idx]
            row += [repr(float(v)) for v in ds.stat_exog]
            w.writerow(row)


@dataclass(frozen=True)
class WindowSample:
    """One forecasting instance; ``origin`` is the index of the last observed step."""

    y_hist: np.ndarray  # (L,)
    x_hist: np.ndarray  # (D_hist, L)
    x_futr: np.ndarray  # (D_futr, L + H)
    x_stat: np.ndarray  # (D_stat,)
    y_future: np.ndarray  # (H,)
    origin: int


@dataclass(frozen=True)
class WindowBatch:
    """Windows stacked along a leading batch axis."""

    y_hist: np.ndarray  # (B, L)
    x_hist: np.ndarray  # (B, D_hist, L)
    x_futr: np.ndarray  # (B, D_futr, L + H)
    x_stat: np.ndarray  # (B, D_stat)
    y_future: np.ndarray  # (B, H)
    origins: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.y_hist)

    def select(self, idx) -> "WindowBatch":
        return WindowBatch(
            self.y_hist[idx], self.x_hist[idx], self.x_futr[idx],
            self.x_stat[idx], self.y_future[idx], self.origins[idx],
        )

    def sample(self, i: int) -> WindowSample:
        return WindowSample(
            self.y_hist[i], self.x_hist[i], self.x_futr[i], self.x_stat[i],
            self.y_future[i], int(self.origins[i]),
        )


def stack_windows(samples: Sequence[WindowSample]) -> WindowBatch:
    if len(samples) == 0:
        raise DataError("cannot stack an empty window list")
    return WindowBatch(
        y_hist=np.stack([s.y_hist for s in samples]),
        x_hist=np.stack([s.x_hist for s in samples]),
        x_futr=np.stack([s.x_futr for s in samples]),
        x_stat=np.stack([s.x_stat for s in samples]),
        y_future=np.stack([s.y_future for s in samples]),
        origins=np.array([s.origin for s in samples], dtype=np.int64),
    )


def window_at(ds: TimeSeriesDataset, origin: int, L: int, H: int) -> WindowSample:
    if origin - L + 1 < 0 or origin + H >= len(ds):
        raise DataError(f"origin {origin} needs indices [{origin - L + 1}, {origin + H}] outside [0, {len(ds) - 1}]")
    lo, hi = origin - L + 1, origin + 1
    return WindowSample(
        y_hist=ds.target[lo:hi].copy(),
        x_hist=ds.hist_exog[:, lo:hi].copy(),
        x_futr=ds.futr_exog[:, lo:hi + H].copy(),
        x_stat=ds.stat_exog.copy(),
        y_future=ds.target[hi:hi + H].copy(),
        origin=int(origin),
    )


def window_origins(ds: TimeSeriesDataset, L: int, H: int, stride: int, subset: str) -> list[int]:
    """Forecast origins whose horizon lies inside ``subset`` and lookback inside the data."""
    if L < 1 or H < 1 or stride < 1:
        raise ValueError("L, H and stride must be >= 1")
    lo, hi = ds.subset_bounds(subset)
    if hi - lo < H:
        warnings.warn(f"{subset} region has {hi - lo} steps, fewer than H={H}; no windows", RuntimeWarning)
        return []
    origins = []
    for first in range(lo, hi - H + 1, stride):
        o = first - 1
        if o - L + 1 >= 0:
            origins.append(o)
    return origins


def make_windows(
    ds: TimeSeriesDataset, L: int, H: int, stride: int | None = None, subset: str = "train"
) -> list[WindowSample]:
    """Slide windows over a subset; stride defaults to 1 for train and H otherwise."""
    if stride is None:
        stride = 1 if subset == "train" else H
    return [window_at(ds, o, L, H) for o in window_origins(ds, L, H, stride, subset)]


@dataclass(frozen=True)
class PatchEntry:
    variable: str
    var_index: int  # row in the (target, hist..., futr...) variable order
    kind: str
    slot: int  # positional slot: [0, N_hist) lookback, [N_hist, N_hist + N_futr) horizon
    time_range: tuple[int, int]  # real (unpadded) positions on the [0, L + H) window axis
    flat_index: int


@dataclass(frozen=True)
class PatchLayout:
    P: int
    L: int
    H: int
    n_hist: int
    n_futr: int
    pad_hist: int
    pad_futr: int
    entries: tuple[PatchEntry, ...]
    variables: tuple[str, ...]
    kinds: tuple[str, ...]
    gather_var: np.ndarray = field(repr=False, compare=False)  # (N_patch,)
    gather_time: np.ndarray = field(repr=False, compare=False)  # (N_patch, P); -1 on padding
    slots: np.ndarray = field(repr=False, compare=False)  # (N_patch,)

    @property
    def n_patch(self) -> int:
        return len(self.entries)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def d_hist(self) -> int:
        return self.kinds.count("hist_exog")

    @property
    def d_futr(self) -> int:
        return self.kinds.count("futr_exog")

    @property
    def pad_mask(self) -> np.ndarray:
        return (self.gather_time >= 0).astype(np.float64)

    def kind_block(self, kind: str) -> slice:
        idx = [e.flat_index for e in self.entries if e.kind == kind]
        return slice(idx[0], idx[-1] + 1) if idx else slice(0, 0)

    def patches_of(self, variable: str) -> list[int]:
        return [e.flat_index for e in self.entries if e.variable == variable]

    def dims(self) -> dict:
        return {"L": self.L, "H": self.H, "P": self.P, "D_hist": self.d_hist,
                "D_futr": self.d_futr, "N_patch": self.n_patch}


def build_layout(
    L: int,
    H: int,
    P: int,
    D_hist: int = 0,
    D_futr: int = 0,
    names: Sequence[str] | None = None,
) -> PatchLayout:
    """Enumerate patches: target slots, then each hist_exog, then each futr_exog.

    Lookback padding is prepended, horizon padding appended. ``names`` gives
    the ``1 + D_hist + D_futr`` variable names in that order.
    """
    if P < 1 or L < 1 or H < 1:
        raise ValueError("L, H and P must be >= 1")
    n_hist, n_futr = math.ceil(L / P), math.ceil(H / P)
    pad_hist, pad_futr = n_hist * P - L, n_futr * P - H
    kinds = ("target",) + ("hist_exog",) * D_hist + ("futr_exog",) * D_futr
    if names is None:
        names = ["y"] + [f"hist_{i}" for i in range(D_hist)] + [f"futr_{i}" for i in range(D_futr)]
    names = tuple(names)
    if len(names) != len(kinds) or len(set(names)) != len(names):
        raise ValueError(f"need {len(kinds)} distinct variable names, got {names}")

    entries, g_var, g_time, slots = [], [], [], []
    for v, (name, kind) in enumerate(zip(names, kinds)):
        n_slots = n_hist + (n_futr if kind == "futr_exog" else 0)
        for s in range(n_slots):
            if s < n_hist:
                start = s * P - pad_hist
            else:
                start = L + (s - n_hist) * P
            pos = np.arange(start, start + P)
            limit = L + H if kind == "futr_exog" else L
            valid = (pos >= 0) & (pos < limit)
            real = pos[valid]
            entries.append(PatchEntry(name, v, kind, s, (int(real[0]), int(real[-1]) + 1), len(entries)))
            g_var.append(v)
            g_time.append(np.where(valid, pos, -1))
            slots.append(s)
    return PatchLayout(
        P=P, L=L, H=H, n_hist=n_hist, n_futr=n_futr, pad_hist=pad_hist, pad_futr=pad_futr,
        entries=tuple(entries), variables=names, kinds=kinds,
        gather_var=np.array(g_var, dtype=np.intp),
        gather_time=np.array(g_time, dtype=np.intp).reshape(len(entries), P),
        slots=np.array(slots, dtype=np.intp),
    )


def series_matrix(y_hist, x_hist, x_futr, L: int, H: int) -> np.ndarray:
    """Stack variables into ``(..., V, L + H)``; target/hist rows are zero past L."""
    y_hist = np.asarray(y_hist, dtype=np.float64)
    batch = y_hist.shape[:-1]
    D_hist, D_futr = x_hist.shape[-2], x_futr.shape[-2]
    S = np.zeros(batch + (1 + D_hist + D_futr, L + H))
    S[..., 0, :L] = y_hist
    S[..., 1:1 + D_hist, :L] = x_hist
    S[..., 1 + D_hist:, :] = x_futr
    return S


def _check_sample_dims(y_hist, x_hist, x_futr, layout: PatchLayout) -> None:
    L, H = layout.L, layout.H
    if y_hist.shape[-1] != L or x_hist.shape[-2:] != (layout.d_hist, L) or x_futr.shape[-2:] != (layout.d_futr, L + H):
        raise DataError(
            f"window dims y_hist {y_hist.shape}, x_hist {x_hist.shape}, x_futr {x_futr.shape} "
            f"do not match layout (L={L}, H={H}, D_hist={layout.d_hist}, D_futr={layout.d_futr})"
        )


def gather_patches(S: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Patch matrix ``(..., N_patch, P)`` from a series matrix; padding is zero."""
    t = np.where(layout.gather_time >= 0, layout.gather_time, 0)
    out = S[..., layout.gather_var[:, None], t]
    return out * layout.pad_mask


def patchify(sample: WindowSample, layout: PatchLayout) -> np.ndarray:
    _check_sample_dims(sample.y_hist, sample.x_hist, sample.x_futr, layout)
    S = series_matrix(sample.y_hist, sample.x_hist, sample.x_futr, layout.L, layout.H)
    return gather_patches(S, layout)


def patchify_batch(batch: WindowBatch, layout: PatchLayout) -> np.ndarray:
    _check_sample_dims(batch.y_hist, batch.x_hist, batch.x_futr, layout)
    S = series_matrix(batch.y_hist, batch.x_hist, batch.x_futr, layout.L, layout.H)
    return gather_patches(S, layout)


def unpatchify(patches: np.ndarray, layout: PatchLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``patchify`` with padding trimmed: ``(y_hist, x_hist, x_futr)``."""
    L, H = layout.L, layout.H
    S = np.zeros((layout.n_vars, L + H))
    valid = layout.gather_time >= 0
    rows = np.broadcast_to(layout.gather_var[:, None], valid.shape)
    S[rows[valid], layout.gather_time[valid]] = patches[valid]
    D_hist = layout.d_hist
    return S[0, :L].copy(), S[1:1 + D_hist, :L].copy(), S[1 + D_hist:, :].copy()


# --- synthetic data ---------------------------------------------------------

WEEKDAY_PROFILE = np.array([0.6, 0.4, 0.3, 0.2, 0.0, -0.7, -0.8])


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a seasonal series driven by future-known exogenous channels.

    ``y_t = daily_amp*sin(2 pi t/24) + weekly_amp*weekday(t)
    + sum_j coupling_j*exog_j(t + lags_j) + noise``. Each exog channel is an
    AR(1) process with coefficient ``exog_ar`` and unit stationary variance.
    """

    length: int = 4032
    daily_amp: float = 1.0
    weekly_amp: float = 1.0
    coupling: tuple[float, ...] = (1.0, 0.5)
    lags: tuple[int, ...] | None = None
    noise: float = 0.1
    exog_ar: float = 0.5
    level: float = 0.0
    seed: int = 0
    start: str = "2020-01-06T00:00:00"
    calendar: bool = True
    split_ratios: tuple[float, float] = (0.7, 0.1)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("coupling", "lags", "split_ratios"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def synth_generate(spec: SynthSpec = SynthSpec()) -> TimeSeriesDataset:
    rng = np.random.default_rng(spec.seed)
    n_exog = len(spec.coupling)
    lags = spec.lags if spec.lags is not None else (0,) * n_exog
    if len(lags) != n_exog:
        raise ValueError("lags and coupling differ in length")
    T = spec.length
    max_lag = max((abs(x) for x in lags), default=0)
    span = T + 2 * max_lag
    innov_scale = math.sqrt(1.0 - spec.exog_ar ** 2)
    raw = np.zeros((n_exog, span))
    for j in range(n_exog):
        e = rng.standard_normal(span)
        x = np.empty(span)
        x[0] = e[0]
        for t in range(1, span):
            x[t] = spec.exog_ar * x[t - 1] + innov_scale * e[t]
        raw[j] = x
    t = np.arange(T)
    exog = raw[:, max_lag:max_lag + T]
    y = spec.level + spec.daily_amp * np.sin(2 * np.pi * (t % 24) / 24) + spec.weekly_amp * WEEKDAY_PROFILE[(t // 24) % 7]
    for j, (c, lag) in enumerate(zip(spec.coupling, lags)):
        y = y + c * raw[j, max_lag + lag:max_lag + lag + T]
    if spec.noise > 0:
        y = y + spec.noise * rng.standard_normal(T)
    ts = _parse_timestamp(spec.start) + 3600.0 * t
    names = [f"exog_{j + 1}" for j in range(n_exog)]
    futr = exog
    if spec.calendar:
        futr = np.concatenate([exog, calendar_features(ts)], axis=0)
        names += list(CALENDAR_FEATURES)
    return TimeSeriesDataset(
        timestamps=ts.astype(np.float64), target=y, hist_exog=np.zeros((0, T)),
        futr_exog=futr.reshape(len(names), T), stat_exog=np.zeros(0),
        split=ratio_split(T, *spec.split_ratios), target_name="y", futr_names=tuple(names),
    )
