"""PatchDecomp network: RevIN, patch encoder, decomposable attention decoder.

All internals are batched: tensors carry a leading window axis ``B``.
Shapes used below: ``Np`` input patches, ``Nf`` output patches, ``D``
latent width, ``P`` patch length, ``V`` variables.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import PatchLayout, WindowBatch, WindowSample, build_layout, gather_patches, series_matrix, stack_windows
from .numerics import Tensor

__all__ = [
    "ConfigurationError",
    "Decomposition",
    "ForecastOutput",
    "ModelConfig",
    "ModelParams",
    "RevInState",
    "decode_decomposed",
    "decode_dense",
    "encode",
    "encode_targets",
    "forward",
    "init_params",
    "project_and_denorm",
    "revin_denormalize",
    "revin_normalize",
]


class ConfigurationError(ValueError):
    """Parameters, layout and inputs disagree on a dimension."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    h: int
    patch_len: int
    hidden_size: int = 32
    n_heads: int = 4
    n_enc: int = 1
    ff_size: int | None = None
    dropout: float = 0.0
    n_hist_exog: int = 0
    n_futr_exog: int = 0
    n_stat_exog: int = 0
    variable_names: tuple[str, ...] | None = None
    revin_eps: float = 1e-5

    def __post_init__(self):
        for name in ("input_size", "h", "patch_len", "hidden_size", "n_heads", "n_enc"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hidden_size % self.n_heads:
            raise ConfigurationError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.variable_names is not None:
            object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def d_ff(self) -> int:
        return self.ff_size or 2 * self.hidden_size

    @property
    def d_head(self) -> int:
        return self.hidden_size // self.n_heads

    def layout(self) -> PatchLayout:
        return build_layout(
            self.input_size, self.h, self.patch_len, self.n_hist_exog, self.n_futr_exog, self.variable_names
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["variable_names"] is not None:
            d["variable_names"] = list(d["variable_names"])
        return d


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    lay = config.layout()
    D, P, F = config.hidden_size, config.patch_len, config.d_ff
    V = 1 + config.n_hist_exog + config.n_futr_exog
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["revin_gamma"] = (V,)
    shapes["revin_beta"] = (V,)
    for kind, n in (("target", 1), ("hist_exog", config.n_hist_exog), ("futr_exog", config.n_futr_exog)):
        if n:
            shapes[f"embed_{kind}_w"] = (P, D)
            shapes[f"embed_{kind}_b"] = (D,)
    shapes["pos"] = (lay.n_hist + lay.n_futr, D)
    if config.n_stat_exog:
        shapes["stat_w"] = (config.n_stat_exog, D)
    for i in range(config.n_enc):
        shapes[f"enc{i}_w1"] = (D, F)
        shapes[f"enc{i}_b1"] = (F,)
        shapes[f"enc{i}_w2"] = (F, D)
        shapes[f"enc{i}_b2"] = (D,)
    for p in "qkvo":
        shapes[f"attn_w{p}"] = (D, D)
        shapes[f"attn_b{p}"] = (D,)
    shapes["w_bias"] = (lay.n_patch, D)
    shapes["head_w"] = (D, P)
    shapes["head_b"] = (P,)
    return shapes


def _fan_in(name: str, shapes) -> int:
    """Input width of a linear map; a bias uses its weight's fan-in."""
    tail = name.rsplit("_", 1)[-1]
    if tail.startswith("b"):
        i = name.rfind("b")
        return shapes[name[:i] + "w" + name[i + 1:]][0]
    return shapes[name][0]


class ModelParams:
    """Named learnable tensors plus the config that fixes their shapes."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ConfigurationError(f"parameter names {list(tensors)} != expected {list(expected)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigurationError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors
        self._layout: PatchLayout | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def layout(self) -> PatchLayout:
        if self._layout is None:
            self._layout = self.config.layout()
        return self._layout

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.tensors.items())

    def load_state(self, state) -> None:
        for k, t in self.tensors.items():
            if state[k].shape != t.shape:
                raise ConfigurationError(f"state {k} shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, OrderedDict((k, Tensor(t.data, requires_grad=True)) for k, t in self.tensors.items())
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(config: ModelConfig, rng: np.random.Generator | int | None = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) linear maps, N(0, 0.02) position table,
    zero ``w_bias``, RevIN affine at identity."""
    rng = np.random.default_rng(rng)
    shapes = param_shapes(config)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in shapes.items():
        if name == "revin_gamma":
            data = np.ones(shape)
        elif name in ("revin_beta", "w_bias"):
            data = np.zeros(shape)
        elif name == "pos":
            data = rng.normal(0.0, 0.02, size=shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


# --- reversible instance normalization ------------------------------------


@dataclass
class RevInState:
    """Per-window, per-variable lookback statistics plus the affine terms."""

    mean: np.ndarray  # (..., V)
    std: np.ndarray  # (..., V)
    gamma: np.ndarray  # (V,)
    beta: np.ndarray  # (V,)
    eps: float = 1e-5


def lookback_stats(S: np.ndarray, L: int, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std over the first ``L`` steps.

    A std below ``eps`` is replaced by 1 so a flat lookback only gets centred.
    """
    look = S[..., :L]
    mean = look.mean(axis=-1)
    std = look.std(axis=-1)
    std = np.where(std < eps, 1.0, std)
    return mean, std


def revin_normalize(
    sample: WindowSample,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
    eps: float = 1e-5,
) -> tuple[WindowSample, RevInState]:
    """Standardise every variable with its own lookback statistics, then apply
    ``gamma * z + beta``. Future-known channels reuse their lookback stats over
    the horizon. ``y_future`` stays in original units."""
    L = sample.y_hist.shape[-1]
    if L < 2:
        raise ValueError("RevIN needs a lookback of at least 2 steps")
    H = sample.x_futr.shape[-1] - L
    S = series_matrix(sample.y_hist, sample.x_hist, sample.x_futr, L, H)
    V = S.shape[-2]
    gamma = np.ones(V) if gamma is None else np.asarray(gamma, dtype=np.float64)
    beta = np.zeros(V) if beta is None else np.asarray(beta, dtype=np.float64)
    mean, std = lookback_stats(S, L, eps)
    Z = (S - mean[..., None]) / std[..., None] * gamma[:, None] + beta[:, None]
    Dh = sample.x_hist.shape[-2]
    normed = WindowSample(
        y_hist=Z[..., 0, :L], x_hist=Z[..., 1:1 + Dh, :L], x_futr=Z[..., 1 + Dh:, :],
        x_stat=sample.x_stat, y_future=sample.y_future, origin=sample.origin,
    )
    return normed, RevInState(mean, std, gamma, beta, eps)


def revin_denormalize(values: np.ndarray, state: RevInState, var: int = 0) -> np.ndarray:
    """Map normalized values of variable ``var`` back to original units."""
    mean = np.asarray(state.mean)[..., var]
    std = np.asarray(state.std)[..., var]
    if np.ndim(mean):
        mean, std = mean[..., None], std[..., None]
    return (values - state.beta[var]) / state.gamma[var] * std + mean


# --- network ---------------------------------------------------------------


def _as_batch(x: WindowSample | WindowBatch) -> tuple[WindowBatch, bool]:
    if isinstance(x, WindowBatch):
        return x, True
    if isinstance(x, WindowSample):
        return stack_windows([x]), False
    if isinstance(x, (list, tuple)):
        return stack_windows(list(x)), True
    raise TypeError(f"expected WindowSample or WindowBatch, got {type(x).__name__}")


def _check_layout(layout: PatchLayout, params: ModelParams) -> None:
    if params["w_bias"].shape[0] != layout.n_patch:
        raise ConfigurationError(
            f"layout has {layout.n_patch} patches but w_bias has {params['w_bias'].shape[0]} rows"
        )
    cfg = params.config
    if (layout.L, layout.H, layout.P, layout.d_hist, layout.d_futr) != (
        cfg.input_size, cfg.h, cfg.patch_len, cfg.n_hist_exog, cfg.n_futr_exog
    ):
        raise ConfigurationError(f"layout {layout.dims()} does not match model config")


def _stat_embedding(x_stat: np.ndarray, params: ModelParams, batch: int) -> Tensor:
    D = params.config.hidden_size
    if "stat_w" not in params:
        return Tensor(np.zeros((batch, 1, D)))
    x_stat = np.asarray(x_stat, dtype=np.float64).reshape(batch, -1)
    return (Tensor(x_stat) @ params["stat_w"]).reshape(batch, 1, D)


def _encoder(h: Tensor, params: ModelParams, training: bool, rng) -> Tensor:
    cfg = params.config
    for i in range(cfg.n_enc):
        inner = nx.relu(h @ params[f"enc{i}_w1"] + params[f"enc{i}_b1"])
        inner = inner @ params[f"enc{i}_w2"] + params[f"enc{i}_b2"]
        h = h + nx.dropout(inner, cfg.dropout, rng, training)
    return h


def normalized_patches(batch: WindowBatch, layout: PatchLayout, params: ModelParams) -> tuple[Tensor, RevInState]:
    """Patch tensor ``(B, Np, P)`` after RevIN, with zero padding kept at zero."""
    S = series_matrix(batch.y_hist, batch.x_hist, batch.x_futr, layout.L, layout.H)
    eps = params.config.revin_eps
    mean, std = lookback_stats(S, layout.L, eps)
    Z = gather_patches((S - mean[..., None]) / std[..., None], layout)
    gamma = nx.take(params["revin_gamma"], layout.gather_var).reshape(layout.n_patch, 1)
    beta = nx.take(params["revin_beta"], layout.gather_var).reshape(layout.n_patch, 1)
    patches = Tensor(Z) * gamma + beta * layout.pad_mask
    state = RevInState(mean, std, params["revin_gamma"].data.copy(), params["revin_beta"].data.copy(), eps)
    return patches, state


def encode(
    patches, layout: PatchLayout, x_stat, params: ModelParams, training: bool = False, rng=None
) -> Tensor:
    """Latent vector per input patch, ``(B, Np, D)``; patches are encoded independently."""
    _check_layout(layout, params)
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.ndim == 2:
        patches = patches.reshape(1, *patches.shape)
    B = patches.shape[0]
    if patches.shape[1:] != (layout.n_patch, layout.P):
        raise ConfigurationError(f"patch tensor {patches.shape} does not match layout ({layout.n_patch}, {layout.P})")
    pieces = []
    for kind in ("target", "hist_exog", "futr_exog"):
        block = layout.kind_block(kind)
        if block.stop > block.start:
            pieces.append(patches[:, block] @ params[f"embed_{kind}_w"] + params[f"embed_{kind}_b"])
    z_patch = nx.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    z_pos = nx.take(params["pos"], layout.slots, axis=0)
    h = z_patch + z_pos + _stat_embedding(x_stat, params, B)
    return _encoder(h, params, training, rng)


def encode_targets(layout: PatchLayout, x_stat, params: ModelParams, training: bool = False, rng=None) -> Tensor:
    """Query latents for the output patches, ``(B, Nf, D)``; no patch content enters."""
    x_stat = np.asarray(x_stat, dtype=np.float64)
    B = 1 if x_stat.ndim < 2 else x_stat.shape[0]
    z_pos = params["pos"][layout.n_hist:layout.n_hist + layout.n_futr]
    return _encoder(z_pos + _stat_embedding(x_stat, params, B), params, training, rng)


def _heads(x: Tensor, w: Tensor, b: Tensor, n_heads: int) -> Tensor:
    B, N, D = x.shape
    return (x @ w + b).reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def attention_weights(z_tgt: Tensor, z_src: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    q = _heads(z_tgt, params["attn_wq"], params["attn_bq"], cfg.n_heads)
    k = _heads(z_src, params["attn_wk"], params["attn_bk"], cfg.n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(cfg.d_head))
    return nx.softmax(scores, axis=-1)


def decode_decomposed(
    z_tgt: Tensor, z_src: Tensor, params: ModelParams, alpha: np.ndarray | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Attention kept separate along the input-patch axis.

    Returns ``(z_pred, per_patch, alpha)`` with ``per_patch`` of shape
    ``(B, Nf, Np, D)`` and ``z_pred = per_patch.sum(axis=2) + b_o``.
    ``alpha`` may be supplied to hold the attention weights fixed.
    """
    cfg = params.config
    B, Np, D = z_src.shape
    if params["w_bias"].shape[0] != Np:
        raise ConfigurationError(f"z_src has {Np} rows but w_bias has {params['w_bias'].shape[0]}")
    if z_tgt.shape[-1] != D or D != cfg.hidden_size:
        raise ConfigurationError(f"latent widths disagree: z_tgt {z_tgt.shape}, z_src {z_src.shape}")
    Nf = z_tgt.shape[1]
    H_, dh = cfg.n_heads, cfg.d_head
    a = attention_weights(z_tgt, z_src, params) if alpha is None else Tensor(alpha)
    if z_tgt.shape[0] != B:
        a = a * np.ones((B, 1, 1, 1))
    v = _heads(z_src, params["attn_wv"], params["attn_bv"], H_)  # (B, h, Np, dh)
    # (B, h, Nf, Np, 1) * (B, h, 1, Np, dh)
    contrib = a.reshape(B, H_, Nf, Np, 1) * v.reshape(B, H_, 1, Np, dh)
    contrib = contrib.transpose(0, 2, 3, 1, 4).reshape(B, Nf, Np, D)
    per_patch = contrib @ params["attn_wo"] + (z_src * params["w_bias"]).reshape(B, 1, Np, D)
    z_pred = per_patch.sum(axis=2) + params["attn_bo"]
    return z_pred, per_patch, a


def decode_dense(z_tgt: Tensor, z_src: Tensor, params: ModelParams) -> Tensor:
    """Standard matmul attention plus the summed bias path; reference for ``decode_decomposed``."""
    cfg = params.config
    B, Np, D = z_src.shape
    a = attention_weights(z_tgt, z_src, params)
    v = _heads(z_src, params["attn_wv"], params["attn_bv"], cfg.n_heads)
    mha = (a @ v).transpose(0, 2, 1, 3)
    mha = mha.reshape(B, mha.shape[1], D) @ params["attn_wo"] + params["attn_bo"]
    bias = (z_src * params["w_bias"]).sum(axis=1, keepdims=True)
    return mha + bias


@dataclass
class Decomposition:
    """Per-patch contributions in target units.

    ``contributions[..., h, j]`` is patch ``j``'s share of step ``h``;
    ``baseline + contributions.sum(-1) == prediction``. Arrays may carry a
    leading window axis.
    """

    contributions: np.ndarray
    baseline: np.ndarray
    prediction: np.ndarray
    origin: np.ndarray | int | None = None

    def __len__(self) -> int:
        return 1 if self.prediction.ndim == 1 else self.prediction.shape[0]

    def window(self, i: int) -> "Decomposition":
        if self.prediction.ndim == 1:
            return self
        origin = None if self.origin is None else int(np.asarray(self.origin)[i])
        return Decomposition(self.contributions[i], self.baseline[i], self.prediction[i], origin)

    def residual(self) -> float:
        """Largest ``|baseline + sum(c) - prediction| / (1 + |prediction|)``."""
        r = np.abs(self.baseline + self.contributions.sum(axis=-1) - self.prediction)
        return float(np.max(r / (1.0 + np.abs(self.prediction))))


@dataclass
class ForecastOutput:
    y_hat: np.ndarray
    decomposition: Decomposition | None = None
    alpha: np.ndarray | None = field(default=None, repr=False)


def project_and_denorm(
    z_pred: Tensor,
    per_patch: Tensor,
    layout: PatchLayout,
    revin: RevInState,
    params: ModelParams,
    want_decomposition: bool = True,
) -> tuple[Tensor, Decomposition | None]:
    """Output head, padding trim and RevIN inversion for the target.

    Returns the prediction tensor ``(B, H)`` and, if asked, the exact
    per-patch split of it.
    """
    B = z_pred.shape[0]
    H, Nf, P = layout.H, layout.n_futr, layout.P
    out = (z_pred @ params["head_w"] + params["head_b"]).reshape(B, Nf * P)[:, :H]
    gamma, beta = params["revin_gamma"][0], params["revin_beta"][0]
    mu = np.asarray(revin.mean)[..., 0].reshape(B, 1)
    sigma = np.asarray(revin.std)[..., 0].reshape(B, 1)
    y_hat = (out - beta) / gamma * sigma + mu
    if not want_decomposition:
        return y_hat, None
    scale = sigma / gamma.data  # (B, 1)
    c = per_patch.data @ params["head_w"].data  # (B, Nf, Np, P)
    c = np.transpose(c, (0, 2, 1, 3)).reshape(B, -1, Nf * P)[:, :, :H]
    contributions = np.transpose(c, (0, 2, 1)) * scale[:, :, None]
    const = params["attn_bo"].data @ params["head_w"].data + params["head_b"].data
    const = np.tile(const, Nf)[:H]
    baseline = scale * (const - beta.data) + mu
    return y_hat, Decomposition(contributions, baseline, y_hat.data.copy())


def predict_tensor(
    batch: WindowBatch,
    layout: PatchLayout,
    params: ModelParams,
    training: bool = False,
    rng=None,
    want_decomposition: bool = False,
    alpha: np.ndarray | None = None,
) -> tuple[Tensor, Decomposition | None, Tensor]:
    """Graph-building forward pass; returns ``(y_hat, decomposition, alpha)``."""
    _check_layout(layout, params)
    patches, revin = normalized_patches(batch, layout, params)
    z_src = encode(patches, layout, batch.x_stat, params, training, rng)
    z_tgt = encode_targets(layout, batch.x_stat, params, training, rng)
    z_pred, per_patch, a = decode_decomposed(z_tgt, z_src, params, alpha)
    y_hat, dec = project_and_denorm(z_pred, per_patch, layout, revin, params, want_decomposition)
    if dec is not None:
        dec.origin = batch.origins.copy()
    return y_hat, dec, a


def forward(
    sample: WindowSample | WindowBatch,
    layout: PatchLayout,
    params: ModelParams,
    mode: str = "eval",
    want_decomposition: bool = False,
    rng=None,
    alpha: np.ndarray | None = None,
) -> ForecastOutput:
    """Predict the horizon for one window or a batch of windows.

    ``mode="train"`` enables dropout (``rng`` required when dropout > 0);
    eval mode is deterministic and records no graph.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch, batched = _as_batch(sample)
    with nx.no_grad():
        y_hat, dec, a = predict_tensor(batch, layout, params, mode == "train", rng, want_decomposition, alpha)
    y = y_hat.data
    if not batched:
        y = y[0]
        dec = dec.window(0) if dec is not None else None
    return ForecastOutput(y_hat=y.copy(), decomposition=dec, alpha=a.data if batched else a.data[0])
