from __future__ import annotations

import numpy as np
import pytest

from patchdecomp.data import WindowBatch, build_layout
from patchdecomp.model import ModelConfig, init_params


def random_model(
    rng: np.random.Generator,
    L: int = 8,
    H: int = 4,
    P: int = 4,
    D: int = 8,
    heads: int = 2,
    n_enc: int = 1,
    D_hist: int = 1,
    D_futr: int = 1,
    D_stat: int = 0,
    scale: float = 0.5,
    dropout: float = 0.0,
):
    """Model with every parameter (w_bias, RevIN affine included) drawn at random."""
    cfg = ModelConfig(
        input_size=L, h=H, patch_len=P, hidden_size=D, n_heads=heads, n_enc=n_enc,
        n_hist_exog=D_hist, n_futr_exog=D_futr, n_stat_exog=D_stat, dropout=dropout,
    )
    params = init_params(cfg, rng)
    for name, t in params.items():
        if name == "revin_gamma":
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        else:
            t.data[...] = scale * rng.standard_normal(t.shape)
    return cfg, params, cfg.layout()


def random_batch(rng: np.random.Generator, layout, B: int = 3, D_stat: int = 0, scale: float = 2.0) -> WindowBatch:
    L, H = layout.L, layout.H
    return WindowBatch(
        y_hist=rng.uniform(-scale, scale, (B, L)) + rng.uniform(-5, 5, (B, 1)),
        x_hist=rng.uniform(-scale, scale, (B, layout.d_hist, L)),
        x_futr=rng.uniform(-scale, scale, (B, layout.d_futr, L + H)),
        x_stat=rng.uniform(-1, 1, (B, D_stat)),
        y_future=rng.uniform(-scale, scale, (B, H)),
        origins=np.arange(L - 1, L - 1 + B, dtype=np.int64),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_layout():
    return build_layout(8, 4, 4, 1, 1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
