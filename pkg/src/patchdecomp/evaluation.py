"""Accuracy metrics and the AOPCR comprehensiveness harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PatchLayout, WindowBatch, WindowSample, series_matrix, stack_windows
from .explain import local_explain
from .model import ModelParams, forward
from .train import predict_batched

__all__ = [
    "AopcrConfig",
    "AopcrResult",
    "DEFAULT_K",
    "aopcr",
    "compare_strategies",
    "metrics",
    "n_removed",
    "remove_patches",
    "write_aopcr_csv",
]

DEFAULT_K = (5.0, 7.5, 10.0, 12.5, 15.0)


def metrics(predictions, targets) -> dict[str, float]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} are not aligned")
    err = p - t
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err)))}


def seasonal_naive(windows: WindowBatch, season: int = 24) -> np.ndarray:
    """Repeat the value observed ``season`` steps before each horizon step."""
    L = windows.y_hist.shape[1]
    H = windows.y_future.shape[1]
    if season > L:
        raise ValueError("season longer than the lookback")
    idx = np.arange(H) % season + (L - season)
    return windows.y_hist[:, idx]


def _removal_mask(layout: PatchLayout, patch_ids) -> np.ndarray:
    """Boolean ``(V, L + H)`` mask of real time points covered by ``patch_ids``."""
    mask = np.zeros((layout.n_vars, layout.L + layout.H), dtype=bool)
    for j in patch_ids:
        j = int(j)
        if not 0 <= j < layout.n_patch:
            raise IndexError(f"patch id {j} outside [0, {layout.n_patch})")
        t = layout.gather_time[j]
        mask[layout.gather_var[j], t[t >= 0]] = True
    return mask


def _split_series(S: np.ndarray, layout: PatchLayout):
    L, Dh = layout.L, layout.d_hist
    return S[..., 0, :L], S[..., 1:1 + Dh, :L], S[..., 1 + Dh:, :]


def remove_patches(
    sample: WindowSample, layout: PatchLayout, patch_ids, means: np.ndarray
) -> WindowSample:
    """Overwrite the real points of the listed patches with per-variable means.

    Padding, ``y_future``, ``x_stat`` and the origin are never touched.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (layout.n_vars,):
        raise ValueError(f"need one mean per variable ({layout.n_vars}), got shape {means.shape}")
    mask = _removal_mask(layout, patch_ids)
    if not mask.any():
        return sample
    S = series_matrix(sample.y_hist, sample.x_hist, sample.x_futr, layout.L, layout.H)
    S = np.where(mask, means[:, None], S)
    y_hist, x_hist, x_futr = _split_series(S, layout)
    return WindowSample(y_hist.copy(), x_hist.copy(), x_futr.copy(), sample.x_stat, sample.y_future, sample.origin)


def remove_patches_batch(batch: WindowBatch, layout: PatchLayout, patch_ids: np.ndarray, means: np.ndarray) -> WindowBatch:
    """Vectorised ``remove_patches``; ``patch_ids`` is ``(B, m)``."""
    B = len(batch)
    masks = np.zeros((B, layout.n_vars, layout.L + layout.H), dtype=bool)
    for b in range(B):
        masks[b] = _removal_mask(layout, patch_ids[b])
    S = series_matrix(batch.y_hist, batch.x_hist, batch.x_futr, layout.L, layout.H)
    S = np.where(masks, np.asarray(means)[None, :, None], S)
    y_hist, x_hist, x_futr = _split_series(S, layout)
    return WindowBatch(y_hist.copy(), x_hist.copy(), x_futr.copy(), batch.x_stat, batch.y_future, batch.origins)


@dataclass(frozen=True)
class AopcrConfig:
    K: tuple[float, ...] = DEFAULT_K
    strategy: str = "guided"
    seed: int = 0
    n_remove: int | None = None  # overrides the k-derived count when set

    def __post_init__(self):
        if self.strategy not in ("guided", "random"):
            raise ValueError(f"strategy must be 'guided' or 'random', got {self.strategy!r}")
        if any(not 0.0 < k < 100.0 for k in self.K):
            raise ValueError("every k must lie in (0, 100)")


@dataclass
class AopcrResult:
    strategy: str
    K: tuple[float, ...]
    scores: np.ndarray  # per k
    std: np.ndarray = field(default=None)  # per k, over seeds
    n_windows: int = 0
    n_seeds: int = 1

    def __post_init__(self):
        if self.std is None:
            self.std = np.zeros_like(self.scores)

    def rows(self) -> list[dict]:
        return [
            {"strategy": self.strategy, "k": k, "score": float(s), "std": float(d), "T": self.n_windows, "n_seeds": self.n_seeds}
            for k, s, d in zip(self.K, self.scores, self.std)
        ]


def n_removed(k: float, n_patch: int) -> int:
    """``max(1, round_half_up(k / 100 * n_patch))``."""
    return max(1, int(np.floor(k / 100.0 * n_patch + 0.5)))


def guided_ranking(params: ModelParams, batch: WindowBatch, layout: PatchLayout) -> np.ndarray:
    """Per-window patch ids ordered by local importance, ``(B, N_patch)``."""
    dec = forward(batch, layout, params, want_decomposition=True).decomposition
    return np.stack([local_explain(dec.window(i), layout).ranking() for i in range(len(batch))])


def aopcr(
    params: ModelParams,
    windows: Sequence[WindowSample] | WindowBatch,
    layout: PatchLayout,
    config: AopcrConfig,
    means: np.ndarray,
    ranking: np.ndarray | None = None,
) -> AopcrResult:
    """``score_k = sum_t sum_h |F(x_t)_h - F(x_t \\ k)_h| / (T * H)``.

    Guided removal drops the ``m`` patches with the largest local importance;
    random removal drops ``m`` patches drawn without replacement.
    """
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))
    T, H, Np = len(batch), layout.H, layout.n_patch
    if T == 0:
        raise ValueError("aopcr needs at least one window")
    base = predict_batched(params, batch, layout)
    if config.strategy == "guided" and ranking is None:
        ranking = guided_ranking(params, batch, layout)
    rng = np.random.default_rng(config.seed)
    scores = []
    for k in config.K:
        m = config.n_remove if config.n_remove is not None else n_removed(k, Np)
        if m == 0:
            scores.append(0.0)
            continue
        if config.strategy == "guided":
            ids = ranking[:, :m]
        else:
            ids = np.stack([rng.choice(Np, size=m, replace=False) for _ in range(T)])
        perturbed = remove_patches_batch(batch, layout, ids, means)
        diff = np.abs(predict_batched(params, perturbed, layout) - base)
        scores.append(float(diff.sum() / (T * H)))
    return AopcrResult(config.strategy, tuple(config.K), np.array(scores), n_windows=T)


def compare_strategies(
    params: ModelParams,
    windows,
    layout: PatchLayout,
    means: np.ndarray,
    K: Sequence[float] = DEFAULT_K,
    n_seeds: int = 5,
    seed: int = 0,
) -> list[AopcrResult]:
    """Guided once, random averaged over ``n_seeds`` seeds (population std)."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))
    guided = aopcr(params, batch, layout, AopcrConfig(tuple(K), "guided"), means)
    runs = np.stack([
        aopcr(params, batch, layout, AopcrConfig(tuple(K), "random", seed=seed + s), means).scores
        for s in range(n_seeds)
    ])
    random = AopcrResult("random", tuple(K), runs.mean(axis=0), runs.std(axis=0), len(batch), n_seeds)
    return [guided, random]


def write_aopcr_csv(results: Sequence[AopcrResult], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["strategy", "k", "score", "std", "T", "n_seeds"], lineterminator="\n")
        w.writeheader()
        for r in results:
            for row in r.rows():
                w.writerow({**row, "score": repr(row["score"]), "std": repr(row["std"])})
    return path
