"""scikit-learn style wrapper around the functional model and trainer."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset, check_positive_int, check_windows
from .data import TimeSeriesDataset, WindowBatch, make_windows, stack_windows, window_at
from .evaluation import DEFAULT_K, compare_strategies, metrics
from .explain import GlobalExplanation, LocalExplanation, global_explain, local_explain
from .model import Decomposition, ModelConfig, forward
from .train import TrainConfig, load_checkpoint, predict_batched, save_checkpoint, train


class PatchDecompForecaster(BaseEstimator):
    """Patch-based forecaster whose predictions split exactly over input patches.

    ``fit`` takes a :class:`TimeSeriesDataset` and uses its chronological
    train/valid split. Prediction methods take a dataset plus either a
    ``subset`` name or explicit forecast ``origins``.

    Parameters
    ----------
    input_size, h, patch_len : int
        Lookback length, horizon and patch length.
    hidden_size, n_heads, n_enc, ff_size : int
        Latent width, attention heads, residual MLP blocks and their inner width
        (``2 * hidden_size`` when None).
    dropout : float
        Dropout inside the encoder blocks during training.
    learning_rate, max_epochs, patience, windows_batch_size, grad_clip
        Optimisation settings (Adam, early stopping on validation MAE).
    train_stride : int
        Step between consecutive training windows.
    random_state : int
        Seed for initialisation, shuffling and dropout.
    """

    def __init__(
        self,
        input_size: int = 168,
        h: int = 24,
        patch_len: int = 24,
        hidden_size: int = 32,
        n_heads: int = 4,
        n_enc: int = 1,
        ff_size: int | None = None,
        dropout: float = 0.0,
        learning_rate: float = 1e-3,
        max_epochs: int = 200,
        patience: int = 10,
        windows_batch_size: int = 64,
        grad_clip: float | None = None,
        train_stride: int = 1,
        random_state: int = 0,
    ):
        self.input_size = input_size
        self.h = h
        self.patch_len = patch_len
        self.hidden_size = hidden_size
        self.n_heads = n_heads
        self.n_enc = n_enc
        self.ff_size = ff_size
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.windows_batch_size = windows_batch_size
        self.grad_clip = grad_clip
        self.train_stride = train_stride
        self.random_state = random_state

    def _model_config(self, X: TimeSeriesDataset) -> ModelConfig:
        return ModelConfig(
            input_size=check_positive_int(self.input_size, "input_size"),
            h=check_positive_int(self.h, "h"),
            patch_len=check_positive_int(self.patch_len, "patch_len"),
            hidden_size=self.hidden_size, n_heads=self.n_heads, n_enc=self.n_enc,
            ff_size=self.ff_size, dropout=self.dropout,
            n_hist_exog=X.n_hist, n_futr_exog=X.n_futr, n_stat_exog=X.n_stat,
            variable_names=X.variable_names,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.learning_rate, max_epochs=self.max_epochs, patience=self.patience,
            windows_batch_size=self.windows_batch_size, seed=self.random_state, grad_clip=self.grad_clip,
        )

    def fit(self, X: TimeSeriesDataset, y=None):
        X = check_dataset(X)
        check_positive_int(self.train_stride, "train_stride")
        config = self._model_config(X)
        L, H = config.input_size, config.h
        train_w = make_windows(X, L, H, stride=self.train_stride, subset="train")
        valid_w = make_windows(X, L, H, stride=1, subset="valid")
        if not train_w or not valid_w:
            raise ValueError(f"not enough data for windows: {len(train_w)} train, {len(valid_w)} valid")
        self.params_, self.report_ = train(config, train_w, valid_w, self._train_config())
        self.layout_ = self.params_.layout
        self.variable_names_ = X.variable_names
        return self

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "PatchDecompForecaster":
        params, tc, _ = load_checkpoint(path)
        c = params.config
        est = cls(
            input_size=c.input_size, h=c.h, patch_len=c.patch_len, hidden_size=c.hidden_size,
            n_heads=c.n_heads, n_enc=c.n_enc, ff_size=c.ff_size, dropout=c.dropout,
        )
        if tc is not None:
            est.set_params(learning_rate=tc.lr, max_epochs=tc.max_epochs, patience=tc.patience,
                           windows_batch_size=tc.windows_batch_size, grad_clip=tc.grad_clip, random_state=tc.seed)
        est.params_ = params
        est.layout_ = params.layout
        est.variable_names_ = params.layout.variables
        return est

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, path, self._train_config())

    def windows(self, X: TimeSeriesDataset, subset: str = "test", origins=None, stride: int | None = None) -> WindowBatch:
        check_is_fitted(self, "params_")
        X = check_dataset(X, self.variable_names_)
        L, H = self.layout_.L, self.layout_.H
        if origins is not None:
            ws = [window_at(X, int(o), L, H) for o in origins]
        else:
            ws = make_windows(X, L, H, stride=stride if stride is not None else H, subset=subset)
        if not ws:
            raise ValueError(f"no complete windows in {subset!r}")
        check_windows(ws, L, H)
        return stack_windows(ws)

    def predict(self, X: TimeSeriesDataset, subset: str = "test", origins=None, stride: int | None = None) -> np.ndarray:
        """Forecasts ``(n_windows, h)`` in original units."""
        batch = self.windows(X, subset, origins, stride)
        return predict_batched(self.params_, batch, self.layout_)

    def decompose(self, X: TimeSeriesDataset, subset: str = "test", origins=None, stride: int | None = None) -> Decomposition:
        batch = self.windows(X, subset, origins, stride)
        return forward(batch, self.layout_, self.params_, want_decomposition=True).decomposition

    def explain_local(self, X: TimeSeriesDataset, subset: str = "test", origins=None) -> list[LocalExplanation]:
        dec = self.decompose(X, subset, origins)
        return [local_explain(dec.window(i), self.layout_) for i in range(len(dec))]

    def explain_global(self, X: TimeSeriesDataset, subset: str = "test") -> GlobalExplanation:
        return global_explain(self.explain_local(X, subset))

    def evaluate(self, X: TimeSeriesDataset, subset: str = "test") -> dict[str, float]:
        batch = self.windows(X, subset)
        return metrics(predict_batched(self.params_, batch, self.layout_), batch.y_future)

    def score(self, X: TimeSeriesDataset, y=None, subset: str = "test") -> float:
        """Negative MAE, so that larger is better."""
        return -self.evaluate(X, subset)["mae"]

    def aopcr(self, X: TimeSeriesDataset, K=None, n_seeds: int = 5, subset: str = "test"):
        batch = self.windows(X, subset)
        return compare_strategies(self.params_, batch, self.layout_, X.variable_means(subset),
                                  K or DEFAULT_K, n_seeds)
