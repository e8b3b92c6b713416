"""Local, global and per-variable views of a decomposition, plus file export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import PatchLayout
from .model import Decomposition

__all__ = [
    "ContributionCurves",
    "GlobalExplanation",
    "LocalExplanation",
    "SCHEMAS",
    "export",
    "global_explain",
    "load_export",
    "local_explain",
    "variable_curves",
]

EXPORT_VERSION = 1


@dataclass
class LocalExplanation:
    """Patch importance ``s[j] = sum_h |c[h, j]|`` for one window."""

    origin: int | None
    importance: np.ndarray  # (N_patch,)
    per_variable: dict[str, float]
    norm: float  # max_j s[j]; 0 when every contribution is 0
    layout: PatchLayout

    @property
    def normalized(self) -> np.ndarray:
        return self.importance / self.norm if self.norm > 0 else np.zeros_like(self.importance)

    def ranking(self) -> np.ndarray:
        """Patch ids by decreasing importance; ties go to the lower index."""
        return np.argsort(-self.importance, kind="stable")


@dataclass
class GlobalExplanation:
    importance: np.ndarray  # (N_patch,) mean of local importances
    n_windows: int
    layout: PatchLayout

    @property
    def normalized(self) -> np.ndarray:
        m = float(self.importance.max()) if self.importance.size else 0.0
        return self.importance / m if m > 0 else np.zeros_like(self.importance)

    def by_key(self) -> dict[tuple[str, str, int], float]:
        return {(e.kind, e.variable, e.slot): float(self.importance[e.flat_index]) for e in self.layout.entries}

    def top(self, n: int = 5) -> list[tuple[str, int, float]]:
        order = np.argsort(-self.importance, kind="stable")[:n]
        ent = self.layout.entries
        return [(ent[j].variable, ent[j].slot, float(self.importance[j])) for j in order]


@dataclass
class ContributionCurves:
    """Per-variable contribution series for one window."""

    origin: int | None
    curves: dict[str, np.ndarray]  # variable -> (H,)
    baseline: np.ndarray
    prediction: np.ndarray
    patch_contributions: np.ndarray  # (H, N_patch)
    layout: PatchLayout

    def residual(self) -> float:
        total = self.baseline + sum(self.curves.values())
        return float(np.max(np.abs(total - self.prediction) / (1.0 + np.abs(self.prediction))))


def _single(d: Decomposition) -> Decomposition:
    if d.contributions.ndim != 2:
        raise ValueError("expected a single-window decomposition; use Decomposition.window(i)")
    return d


def local_explain(d: Decomposition, layout: PatchLayout) -> LocalExplanation:
    d = _single(d)
    if d.contributions.shape[1] != layout.n_patch:
        raise ValueError(f"decomposition has {d.contributions.shape[1]} patches, layout {layout.n_patch}")
    s = np.abs(d.contributions).sum(axis=0)
    per_var = {v: float(sum(s[j] for j in layout.patches_of(v))) for v in layout.variables}
    origin = None if d.origin is None else int(d.origin)
    return LocalExplanation(origin, s, per_var, float(s.max()) if s.size else 0.0, layout)


def variable_curves(d: Decomposition, layout: PatchLayout) -> ContributionCurves:
    d = _single(d)
    curves = {}
    for v in layout.variables:
        idx = layout.patches_of(v)
        if not idx:
            raise ValueError(f"variable {v!r} owns no patches")
        curves[v] = d.contributions[:, idx].sum(axis=1)
    origin = None if d.origin is None else int(d.origin)
    return ContributionCurves(origin, curves, d.baseline.copy(), d.prediction.copy(), d.contributions.copy(), layout)


def global_explain(locals_: Iterable[LocalExplanation]) -> GlobalExplanation:
    """Mean local importance per patch; exactly invariant to window order."""
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("global_explain needs at least one local explanation")
    layout = locals_[0].layout
    S = np.stack([le.importance for le in locals_])
    mean = np.array([math.fsum(S[:, j]) for j in range(S.shape[1])]) / len(locals_)
    return GlobalExplanation(mean, len(locals_), layout)


# --- export ------------------------------------------------------------------

CSV_COLUMNS = {
    "curves": ("origin", "variable", "kind", "patch_slot", "h", "contribution"),
    "local": ("origin", "variable", "kind", "patch_slot", "flat_index", "importance", "importance_normalized"),
    "global": ("variable", "kind", "patch_slot", "flat_index", "importance", "importance_normalized", "n_windows"),
}

_LAYOUT_SCHEMA = {
    "type": "object",
    "required": ["L", "H", "P", "variables", "kinds"],
    "properties": {
        "L": {"type": "integer", "minimum": 1},
        "H": {"type": "integer", "minimum": 1},
        "P": {"type": "integer", "minimum": 1},
        "variables": {"type": "array", "items": {"type": "string"}},
        "kinds": {"type": "array", "items": {"enum": ["target", "hist_exog", "futr_exog"]}},
    },
}

_PATCH_ROW = {
    "type": "object",
    "required": ["variable", "kind", "patch_slot", "flat_index"],
    "properties": {
        "variable": {"type": "string"},
        "kind": {"enum": ["target", "hist_exog", "futr_exog"]},
        "patch_slot": {"type": "integer", "minimum": 0},
        "flat_index": {"type": "integer", "minimum": 0},
    },
}

SCHEMAS = {
    "curves": {
        "type": "object",
        "required": ["artifact", "version", "layout", "origin", "baseline", "prediction", "curves", "patches"],
        "properties": {
            "artifact": {"const": "curves"},
            "version": {"const": EXPORT_VERSION},
            "layout": _LAYOUT_SCHEMA,
            "origin": {"type": ["integer", "null"]},
            "baseline": {"type": "array", "items": {"type": "number"}},
            "prediction": {"type": "array", "items": {"type": "number"}},
            "curves": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "number"}}},
            "patches": {
                "type": "array",
                "items": {
                    "allOf": [_PATCH_ROW],
                    "required": ["contribution"],
                    "properties": {"contribution": {"type": "array", "items": {"type": "number"}}},
                },
            },
        },
    },
    "local": {
        "type": "object",
        "required": ["artifact", "version", "layout", "origin", "norm", "per_variable", "patches"],
        "properties": {
            "artifact": {"const": "local"},
            "version": {"const": EXPORT_VERSION},
            "layout": _LAYOUT_SCHEMA,
            "origin": {"type": ["integer", "null"]},
            "norm": {"type": "number", "minimum": 0},
            "per_variable": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
            "patches": {
                "type": "array",
                "items": {
                    "allOf": [_PATCH_ROW],
                    "required": ["importance", "importance_normalized"],
                    "properties": {
                        "importance": {"type": "number", "minimum": 0},
                        "importance_normalized": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
    },
    "global": {
        "type": "object",
        "required": ["artifact", "version", "layout", "n_windows", "patches"],
        "properties": {
            "artifact": {"const": "global"},
            "version": {"const": EXPORT_VERSION},
            "layout": _LAYOUT_SCHEMA,
            "n_windows": {"type": "integer", "minimum": 1},
            "patches": {
                "type": "array",
                "items": {
                    "allOf": [_PATCH_ROW],
                    "required": ["importance", "importance_normalized"],
                    "properties": {
                        "importance": {"type": "number", "minimum": 0},
                        "importance_normalized": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
    },
}


def _artifact_name(artifact) -> str:
    for name, cls in (("curves", ContributionCurves), ("local", LocalExplanation), ("global", GlobalExplanation)):
        if isinstance(artifact, cls):
            return name
    raise TypeError(f"cannot export {type(artifact).__name__}")


def _layout_json(layout: PatchLayout) -> dict:
    return {"L": layout.L, "H": layout.H, "P": layout.P, "variables": list(layout.variables), "kinds": list(layout.kinds)}


def _layout_from_json(d: dict) -> PatchLayout:
    from .data import build_layout

    kinds = d["kinds"]
    return build_layout(d["L"], d["H"], d["P"], kinds.count("hist_exog"), kinds.count("futr_exog"), d["variables"])


def _patch_key(e) -> dict:
    return {"variable": e.variable, "kind": e.kind, "patch_slot": e.slot, "flat_index": e.flat_index}


def to_json_dict(artifact) -> dict:
    name = _artifact_name(artifact)
    lay = artifact.layout
    out = {"artifact": name, "version": EXPORT_VERSION, "layout": _layout_json(lay)}
    if name == "curves":
        out.update(
            origin=artifact.origin,
            baseline=artifact.baseline.tolist(),
            prediction=artifact.prediction.tolist(),
            curves={v: c.tolist() for v, c in artifact.curves.items()},
            patches=[
                {**_patch_key(e), "contribution": artifact.patch_contributions[:, e.flat_index].tolist()}
                for e in lay.entries
            ],
        )
    elif name == "local":
        norm = artifact.normalized
        out.update(
            origin=artifact.origin,
            norm=artifact.norm,
            per_variable=artifact.per_variable,
            patches=[
                {**_patch_key(e), "importance": float(artifact.importance[e.flat_index]),
                 "importance_normalized": float(norm[e.flat_index])}
                for e in lay.entries
            ],
        )
    else:
        norm = artifact.normalized
        out.update(
            n_windows=artifact.n_windows,
            patches=[
                {**_patch_key(e), "importance": float(artifact.importance[e.flat_index]),
                 "importance_normalized": float(norm[e.flat_index])}
                for e in lay.entries
            ],
        )
    return out


def from_json_dict(d: dict):
    lay = _layout_from_json(d["layout"])
    name = d["artifact"]
    order = sorted(d["patches"], key=lambda r: r["flat_index"])
    if name == "curves":
        pc = np.array([r["contribution"] for r in order]).T.reshape(lay.H, lay.n_patch)
        return ContributionCurves(
            d["origin"], {v: np.array(c) for v, c in d["curves"].items()},
            np.array(d["baseline"]), np.array(d["prediction"]), pc, lay,
        )
    imp = np.array([r["importance"] for r in order], dtype=np.float64)
    if name == "local":
        return LocalExplanation(d["origin"], imp, {k: float(v) for k, v in d["per_variable"].items()}, float(d["norm"]), lay)
    if name == "global":
        return GlobalExplanation(imp, int(d["n_windows"]), lay)
    raise ValueError(f"unknown artifact {name!r}")


def _csv_rows(artifact) -> list[tuple]:
    name = _artifact_name(artifact)
    lay = artifact.layout
    origin = "" if getattr(artifact, "origin", None) is None else artifact.origin
    rows = []
    if name == "curves":
        for e in lay.entries:
            for h in range(lay.H):
                rows.append((origin, e.variable, e.kind, e.slot, h, repr(float(artifact.patch_contributions[h, e.flat_index]))))
        for label, series in (("__baseline__", artifact.baseline), ("__prediction__", artifact.prediction)):
            for h in range(lay.H):
                rows.append((origin, label, "", -1, h, repr(float(series[h]))))
    elif name == "local":
        norm = artifact.normalized
        for e in lay.entries:
            rows.append((origin, e.variable, e.kind, e.slot, e.flat_index,
                         repr(float(artifact.importance[e.flat_index])), repr(float(norm[e.flat_index]))))
    else:
        norm = artifact.normalized
        for e in lay.entries:
            rows.append((e.variable, e.kind, e.slot, e.flat_index, repr(float(artifact.importance[e.flat_index])),
                         repr(float(norm[e.flat_index])), artifact.n_windows))
    return rows


def export(artifact, fmt: str, path: str | Path) -> Path:
    """Write an explanation as JSON (see ``SCHEMAS``) or long-format CSV."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(to_json_dict(artifact), indent=1))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS[_artifact_name(artifact)])
            w.writerows(_csv_rows(artifact))
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def load_export(path: str | Path, layout: PatchLayout | None = None):
    """Parse a file written by ``export``. CSV needs the ``layout`` it was written with."""
    path = Path(path)
    if path.suffix == ".json":
        return from_json_dict(json.loads(path.read_text()))
    if layout is None:
        raise ValueError("loading a CSV export requires the layout")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = list(reader)
    kind = next((k for k, cols in CSV_COLUMNS.items() if cols == header), None)
    if kind is None:
        raise ValueError(f"unrecognised CSV header {header}")
    idx = {(e.variable, e.slot): e.flat_index for e in layout.entries}
    if kind == "curves":
        pc = np.zeros((layout.H, layout.n_patch))
        base, pred = np.zeros(layout.H), np.zeros(layout.H)
        origin = None
        for r in rows:
            origin = int(r[0]) if r[0] != "" else None
            h, val = int(r[4]), float(r[5])
            if r[1] == "__baseline__":
                base[h] = val
            elif r[1] == "__prediction__":
                pred[h] = val
            else:
                pc[h, idx[(r[1], int(r[3]))]] = val
        curves = {v: pc[:, layout.patches_of(v)].sum(axis=1) for v in layout.variables}
        return ContributionCurves(origin, curves, base, pred, pc, layout)
    imp = np.zeros(layout.n_patch)
    if kind == "local":
        origin = None
        for r in rows:
            origin = int(r[0]) if r[0] != "" else None
            imp[int(r[4])] = float(r[5])
        per_var = {v: float(sum(imp[j] for j in layout.patches_of(v))) for v in layout.variables}
        return LocalExplanation(origin, imp, per_var, float(imp.max()) if imp.size else 0.0, layout)
    n = 0
    for r in rows:
        imp[int(r[3])] = float(r[4])
        n = int(r[6])
    return GlobalExplanation(imp, n, layout)
