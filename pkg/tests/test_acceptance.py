"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line that pytest prints in an
"acceptance criteria" section at the end of the run.
"""

import json
import time
from itertools import combinations

import numpy as np
import pytest

from patchdecomp import cli
from patchdecomp import numerics as nx
from patchdecomp.data import SynthSpec, WindowSample, make_windows, stack_windows, synth_generate
from patchdecomp.estimator import PatchDecompForecaster
from patchdecomp.evaluation import DEFAULT_K, AopcrConfig, aopcr, remove_patches_batch, seasonal_naive
from patchdecomp.model import (
    ModelConfig,
    decode_decomposed,
    decode_dense,
    encode,
    encode_targets,
    forward,
    normalized_patches,
    predict_tensor,
    revin_denormalize,
    revin_normalize,
)
from patchdecomp.train import TrainConfig, mae_loss, predict_batched, train

from conftest import ACCEPTANCE_LINES, random_batch, random_model

SEEDS = range(5)
FULL = dict(input_size=168, h=24, patch_len=24, hidden_size=32, n_heads=4, max_epochs=20, patience=5)


def check(n, title, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}: {detail}")
    assert ok, detail


def grid_draw(r):
    L = int(r.choice([8, 24, 168]))
    H, P = (int(v) for v in r.choice([4, 24], size=2))
    D, heads = int(r.choice([8, 32])), int(r.choice([2, 4]))
    n_stat = int(r.integers(0, 2))
    cfg, params, lay = random_model(r, L=L, H=H, P=P, D=D, heads=heads, D_hist=int(r.integers(0, 3)),
                                    D_futr=int(r.integers(0, 3)), D_stat=n_stat)
    return params, lay, random_batch(r, lay, 1, D_stat=n_stat)


def test_01_decomposition_exactness():
    r = np.random.default_rng(101)
    start, worst = time.perf_counter(), 0.0
    for _ in range(1000):
        params, lay, batch = grid_draw(r)
        worst = max(worst, forward(batch, lay, params, want_decomposition=True).decomposition.residual())
    secs = time.perf_counter() - start
    check(1, "decomposition exactness", worst <= 1e-6 and secs < 60,
          f"max relative residual {worst:.2e} (<= 1e-6) over 1000 draws in {secs:.1f}s (< 60s)")


def test_02_dense_attention_equivalence():
    r = np.random.default_rng(202)
    start, worst = time.perf_counter(), 0.0
    with nx.no_grad():
        for _ in range(1000):
            params, lay, batch = grid_draw(r)
            patches, _ = normalized_patches(batch, lay, params)
            z_src = encode(patches, lay, batch.x_stat, params)
            z_tgt = encode_targets(lay, batch.x_stat, params)
            z_pred, _, _ = decode_decomposed(z_tgt, z_src, params)
            worst = max(worst, float(np.max(np.abs(z_pred.data - decode_dense(z_tgt, z_src, params).data))))
    secs = time.perf_counter() - start
    check(2, "dense attention equivalence", worst <= 1e-9 and secs < 30,
          f"max abs difference {worst:.2e} (<= 1e-9) over 1000 draws in {secs:.1f}s (< 30s)")


def test_03_gradient_correctness():
    r = np.random.default_rng(303)
    cfg, params, lay = random_model(r, L=8, H=4, P=4, D=8, heads=2, D_stat=1)
    batch = random_batch(r, lay, 2, D_stat=1)

    def loss():
        y, _, _ = predict_tensor(batch, lay, params)
        return mae_loss(y, batch.y_future)

    start = time.perf_counter()
    worst = nx.gradcheck(loss, list(params), step=1e-5, rtol=1e-4, atol=1e-7)
    secs = time.perf_counter() - start
    check(3, "gradient correctness", worst <= 1.0 and secs < 120,
          f"worst error / tolerance {worst:.2e} (<= 1, rtol 1e-4) over {len(list(params))} tensors in {secs:.1f}s")


def test_04_revin_round_trip():
    r = np.random.default_rng(404)
    worst = 0.0
    series = [r.normal(size=L) * r.uniform(0.1, 100) + r.uniform(-50, 50) for L in (2, 8, 168) for _ in range(50)]
    series += [np.full(24, c) for c in (0.0, 3.0, -1e4)]
    for y in series:
        L = len(y)
        s = WindowSample(y, np.zeros((0, L)), np.zeros((0, L + 1)), np.zeros(0), np.zeros(1), L - 1)
        normed, state = revin_normalize(s, r.uniform(0.5, 2.0, 1), r.normal(size=1))
        worst = max(worst, float(np.max(np.abs(revin_denormalize(normed.y_hist, state) - y))))
    check(4, "RevIN round trip", worst <= 1e-9,
          f"max abs error {worst:.2e} (<= 1e-9) on {len(series)} series including 3 constant ones")


# --- statistical criteria on trained models -----------------------------------------

_cache = {}


def learning_run(seed):
    if seed not in _cache:
        ds = synth_generate(SynthSpec(seed=seed))
        start = time.perf_counter()
        est = PatchDecompForecaster(**FULL, random_state=seed).fit(ds)
        _cache[seed] = (ds, est, time.perf_counter() - start)
    return _cache[seed]


@pytest.mark.slow
def test_05_learning_sanity():
    rows, wins = [], 0
    for seed in SEEDS:
        ds, est, secs = learning_run(seed)
        batch = est.windows(ds, "test")
        mae = float(np.mean(np.abs(predict_batched(est.params_, batch) - batch.y_future)))
        naive = float(np.mean(np.abs(seasonal_naive(batch) - batch.y_future)))
        gain = 1.0 - mae / naive
        wins += gain >= 0.20 and secs < 300
        rows.append(f"seed {seed}: {100 * gain:.0f}% in {secs:.0f}s")
    check(5, "learning sanity", wins >= 4, f"{wins}/5 seeds beat seasonal naive by >= 20% ({'; '.join(rows)})")


@pytest.mark.slow
def test_06_attribution_fidelity():
    hits, tops = 0, []
    for seed in SEEDS:
        ds = synth_generate(SynthSpec(seed=seed, daily_amp=0.0, weekly_amp=0.0, coupling=(1.0, 0.0), noise=0.05))
        est = PatchDecompForecaster(**FULL, random_state=seed).fit(ds)
        g = est.explain_global(ds)
        top = int(np.argmax(g.importance))
        e = est.layout_.entries[top]
        hits += e.variable == "exog_1" and e.kind == "futr_exog" and e.slot >= est.layout_.n_hist
        tops.append(f"{e.variable}[{e.slot}]")
    check(6, "attribution fidelity", hits >= 4,
          f"exog_1 horizon patch ranked first on {hits}/5 seeds (top patches: {', '.join(tops)})")


@pytest.mark.slow
def test_07_aopcr_ordering():
    ds, est, _ = learning_run(0)
    start = time.perf_counter()
    guided, random = est.aopcr(ds, K=DEFAULT_K, n_seeds=5)
    secs = time.perf_counter() - start
    ok = bool(np.all(guided.scores > random.scores)) and secs < 300
    pairs = ", ".join(f"k={k:g}: {g:.3f} vs {m:.3f}" for k, g, m in zip(DEFAULT_K, guided.scores, random.scores))
    check(7, "AOPCR ordering", ok, f"guided vs mean random ({pairs}) in {secs:.0f}s")


def test_08_exhaustive_aopcr_oracle():
    ds = synth_generate(SynthSpec(length=600, seed=0, calendar=False, coupling=(1.0,),
                                  daily_amp=0.0, weekly_amp=0.0, noise=0.05))
    cfg = ModelConfig(input_size=8, h=4, patch_len=4, hidden_size=8, n_heads=2, n_futr_exog=1,
                      variable_names=ds.variable_names)
    params, _ = train(cfg, make_windows(ds, 8, 4, subset="train"), make_windows(ds, 8, 4, stride=1, subset="valid"),
                      TrainConfig(lr=3e-3, max_epochs=40, patience=8, seed=0))
    lay = cfg.layout()
    te = stack_windows(make_windows(ds, 8, 4, subset="test")[:10])
    means = ds.variable_means("test")
    base = predict_batched(params, te, lay)

    def score(ids):
        pert = remove_patches_batch(te, lay, np.tile(np.asarray(ids), (len(te), 1)), means)
        return float(np.abs(predict_batched(params, pert, lay) - base).sum() / (len(te) * lay.H))

    brute = [score(s) for s in combinations(range(lay.n_patch), 1)]
    guided = aopcr(params, te, lay, AopcrConfig(n_remove=1), means).scores[0]
    check(8, "exhaustive AOPCR oracle", lay.n_patch <= 6 and guided >= np.median(brute),
          f"guided single-patch score {guided:.4f} >= median {np.median(brute):.4f} "
          f"(N_patch={lay.n_patch}, 10 windows)")


DET_CONFIG = {
    "data": {"synth": {"length": 900, "seed": 2}},
    "model": {"input_size": 48, "h": 24, "patch_len": 12, "hidden_size": 8, "n_heads": 2, "dropout": 0.1},
    "training": {"max_epochs": 3, "patience": 3, "seed": 7, "train_stride": 2},
    "output_dir": "run",
}


def test_09_determinism(tmp_path):
    files = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        (d / "cfg.json").write_text(json.dumps(DET_CONFIG))
        assert cli.main(["train", "--config", str(d / "cfg.json")]) == 0
        assert cli.main(["forecast", "--config", str(d / "cfg.json"), "--origins", "700,750", "--explain"]) == 0
        run = d / "run"
        paths = [run / "metrics.json", run / "best.ckpt", run / "forecast.csv"]
        paths += sorted((run / "explanations").iterdir())
        files[rep] = {p.relative_to(run).as_posix(): p.read_bytes() for p in paths}
    same = files["a"] == files["b"]
    check(9, "determinism", same, f"{len(files['a'])} artifacts byte-identical across two runs "
          f"(metrics.json, best.ckpt, forecast.csv, {len(files['a']) - 3} explanation exports)"
          if same else "artifacts differ")


def test_10_real_data_stretch():
    ACCEPTANCE_LINES.append("SKIP  10. real-data stretch: the market CSV is not available offline")
    pytest.skip("the public electricity market CSV is not available in this environment")
