import csv
import json

import jsonschema
import numpy as np
import pytest

from patchdecomp.data import build_layout
from patchdecomp.explain import (
    SCHEMAS,
    export,
    global_explain,
    load_export,
    local_explain,
    variable_curves,
)
from patchdecomp.model import Decomposition, forward

from conftest import random_batch, random_model


def decomposition(c, baseline=None, origin=7):
    c = np.asarray(c, dtype=float)
    baseline = np.zeros(c.shape[0]) if baseline is None else np.asarray(baseline, float)
    return Decomposition(c, baseline, baseline + c.sum(axis=1), origin)


@pytest.fixture
def trained_like(rng):
    cfg, params, lay = random_model(rng, D_futr=2)
    out = forward(random_batch(rng, lay, 5), lay, params, want_decomposition=True)
    return lay, out.decomposition


def test_zero_contributions_zero_importance(tiny_layout):
    le = local_explain(decomposition(np.zeros((4, tiny_layout.n_patch))), tiny_layout)
    assert np.all(le.importance == 0) and np.all(le.normalized == 0) and le.norm == 0


def test_single_nonzero_contribution(tiny_layout):
    c = np.zeros((4, tiny_layout.n_patch))
    c[2, 3] = -3.0
    le = local_explain(decomposition(c), tiny_layout)
    assert le.importance[3] == 3.0 and le.importance.sum() == 3.0
    assert le.normalized[3] == 1.0


def test_importance_matches_brute_force(trained_like):
    lay, dec = trained_like
    for i in range(len(dec)):
        d = dec.window(i)
        le = local_explain(d, lay)
        for j in range(lay.n_patch):
            brute = sum(abs(float(d.contributions[h, j])) for h in range(lay.H))
            assert abs(le.importance[j] - brute) <= 1e-12
        assert np.all(le.importance >= 0)
        assert abs(sum(le.per_variable.values()) - le.importance.sum()) <= 1e-12


def test_curves_sum_identity(trained_like):
    lay, dec = trained_like
    for i in range(len(dec)):
        cv = variable_curves(dec.window(i), lay)
        assert set(cv.curves) == set(lay.variables)
        assert cv.residual() <= 1e-6


def test_single_variable_curve_is_prediction_minus_baseline(rng):
    cfg, params, lay = random_model(rng, D_hist=0, D_futr=0)
    d = forward(random_batch(rng, lay, 1).sample(0), lay, params, want_decomposition=True).decomposition
    cv = variable_curves(d, lay)
    assert np.allclose(cv.curves["y"], d.prediction - d.baseline, atol=1e-12)


def test_global_single_window_equals_local(trained_like):
    lay, dec = trained_like
    le = local_explain(dec.window(0), lay)
    g = global_explain([le])
    assert np.array_equal(g.importance, le.importance) and g.n_windows == 1


def test_global_two_windows_mean(tiny_layout):
    a, b = np.zeros((4, tiny_layout.n_patch)), np.zeros((4, tiny_layout.n_patch))
    a[0, 0], b[0, 0], b[1, 2] = 2.0, 4.0, 1.0
    g = global_explain([local_explain(decomposition(a), tiny_layout), local_explain(decomposition(b), tiny_layout)])
    assert g.importance[0] == 3.0 and g.importance[2] == 0.5


def test_global_streaming_vs_batch_and_order(trained_like):
    lay, dec = trained_like
    locs = [local_explain(dec.window(i), lay) for i in range(len(dec))]
    g = global_explain(locs)
    running = np.zeros(lay.n_patch)
    for k, le in enumerate(locs, start=1):
        running += (le.importance - running) / k
    assert np.max(np.abs(running - g.importance)) <= 1e-12
    assert np.array_equal(global_explain(locs[::-1]).importance, g.importance)


def test_global_duplicated_dataset_is_idempotent(trained_like):
    lay, dec = trained_like
    locs = [local_explain(dec.window(i), lay) for i in range(len(dec))]
    assert np.max(np.abs(global_explain(locs + locs).importance - global_explain(locs).importance)) <= 1e-15


def test_global_empty_is_error():
    with pytest.raises(ValueError):
        global_explain([])


def test_global_keys_and_top(tiny_layout):
    c = np.zeros((4, tiny_layout.n_patch))
    c[:, 5] = 1.0
    g = global_explain([local_explain(decomposition(c), tiny_layout)])
    e = tiny_layout.entries[5]
    assert g.by_key()[(e.kind, e.variable, e.slot)] == 4.0
    assert g.top(1) == [(e.variable, e.slot, 4.0)]


# --- export ----------------------------------------------------------------------------


def _artifacts(lay, dec):
    d = dec.window(1)
    locs = [local_explain(dec.window(i), lay) for i in range(len(dec))]
    return {"curves": variable_curves(d, lay), "local": locs[1], "global": global_explain(locs)}


@pytest.mark.parametrize("name", ["curves", "local", "global"])
@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_export_round_trip(tmp_path, trained_like, name, fmt):
    lay, dec = trained_like
    art = _artifacts(lay, dec)[name]
    path = export(art, fmt, tmp_path / f"{name}.{fmt}")
    back = load_export(path, layout=lay)
    assert type(back) is type(art)
    if name == "curves":
        assert np.array_equal(back.patch_contributions, art.patch_contributions)
        assert np.array_equal(back.baseline, art.baseline) and np.array_equal(back.prediction, art.prediction)
        assert back.origin == art.origin
    else:
        assert np.array_equal(back.importance, art.importance)
    if name == "global":
        assert back.n_windows == art.n_windows


@pytest.mark.parametrize("name", ["curves", "local", "global"])
def test_json_validates_against_schema(tmp_path, trained_like, name):
    lay, dec = trained_like
    path = export(_artifacts(lay, dec)[name], "json", tmp_path / "a.json")
    jsonschema.validate(json.loads(path.read_text()), SCHEMAS[name])


def test_csv_header_and_one_row_per_tuple(tmp_path, trained_like):
    lay, dec = trained_like
    arts = _artifacts(lay, dec)
    expected_rows = {"curves": lay.n_patch * lay.H + 2 * lay.H, "local": lay.n_patch, "global": lay.n_patch}
    for name, art in arts.items():
        with open(export(art, "csv", tmp_path / f"{name}.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] in ("origin", "variable")
        assert len(rows) - 1 == expected_rows[name]


def test_csv_load_requires_layout(tmp_path, trained_like):
    lay, dec = trained_like
    path = export(_artifacts(lay, dec)["local"], "csv", tmp_path / "l.csv")
    with pytest.raises(ValueError):
        load_export(path)


def test_local_rejects_batched_decomposition(trained_like):
    lay, dec = trained_like
    with pytest.raises(ValueError):
        local_explain(dec, lay)


def test_wrong_layout_rejected(trained_like):
    _, dec = trained_like
    with pytest.raises(ValueError):
        local_explain(dec.window(0), build_layout(8, 4, 2, 1, 1))
