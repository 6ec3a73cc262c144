"""Fidelity, privacy-proxy, downstream, and fairness measurements.

k-way TVD: numeric features are cut at the reference table's 20-group
quantiles (boundary values fall in the lower bin), categoricals keep
their schema categories; for every size-k feature subset the joint cell
histogram yields 0.5 * sum |p_syn - p_ref|, averaged over subsets.

DCR: nearest-neighbor L2 distance from each synthetic row to the
training rows after min-max normalizing numerics by training statistics;
categorical mismatches contribute 1 per feature.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gbt import (
    DESK_GRID,
    FULL_GRID,
    GBTParams,
    accuracy_score,
    auc_score,
    cross_validate_gbt,
    design_matrix,
    predict_proba,
    train_gbt,
)
from .schema import Schema, SchemaError, Table

DEFAULT_QUANTILE_GROUPS = 20


@dataclass(frozen=True)
class BinningSpec:
    """Per-feature discretization learned from a reference table."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    cuts: tuple[tuple[float, ...], ...]  # numeric: interior quantile cuts
    categories: tuple[tuple[str, ...], ...]  # categorical: code order

    @classmethod
    def from_table(
        cls, table: Table, n_groups: int = DEFAULT_QUANTILE_GROUPS
    ) -> "BinningSpec":
        if n_groups < 2:
            raise ValueError("n_groups must be >= 2")
        names, kinds, cuts, cats = [], [], [], []
        qs = np.linspace(0.0, 1.0, n_groups + 1)[1:-1]
        for f in table.schema.features:
            names.append(f.name)
            kinds.append(f.kind)
            if f.kind == "numeric":
                col = np.array([float(r[f.name]) for r in table.rows])
                cuts.append(tuple(np.unique(np.quantile(col, qs))))
                cats.append(())
            else:
                cuts.append(())
                cats.append(f.categories)
        return cls(
            names=tuple(names),
            kinds=tuple(kinds),
            cuts=tuple(cuts),
            categories=tuple(cats),
        )

    def radix(self) -> np.ndarray:
        out = []
        for kind, c, cat in zip(self.kinds, self.cuts, self.categories):
            out.append(len(c) + 1 if kind == "numeric" else len(cat))
        return np.array(out, dtype=np.int64)

    def codes(self, table: Table) -> np.ndarray:
        """Bin codes (rows x features); boundary values go to the lower bin."""
        n = len(table)
        out = np.zeros((n, len(self.names)), dtype=np.int64)
        for j, (name, kind) in enumerate(zip(self.names, self.kinds)):
            if kind == "numeric":
                col = np.array([float(r[name]) for r in table.rows])
                out[:, j] = np.searchsorted(np.array(self.cuts[j]), col, side="left")
            else:
                index = {c: i for i, c in enumerate(self.categories[j])}
                out[:, j] = [index[r[name]] for r in table.rows]
        return out


@dataclass
class TVDResult:
    k: int
    mean: float
    per_subset: dict[tuple[str, ...], float]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mean": self.mean,
            "n_subsets": len(self.per_subset),
            "per_subset": {"|".join(k): v for k, v in self.per_subset.items()},
        }


def _subset_iter(n_features: int, k: int, max_subsets: int, seed: int):
    total = math.comb(n_features, k)
    if total <= max_subsets:
        yield from itertools.combinations(range(n_features), k)
        return
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(seen) < max_subsets and attempts < 100 * max_subsets:
        attempts += 1
        c = tuple(sorted(rng.choice(n_features, size=k, replace=False).tolist()))
        if c not in seen:
            seen.add(c)
            yield c


def kway_tvd(
    synthetic: Table,
    reference: Table,
    k: int,
    binning: BinningSpec | None = None,
    max_subsets: int = 2000,
    seed: int = 0,
) -> TVDResult:
    """Mean total variation distance over size-k feature subsets."""
    if len(synthetic) == 0 or len(reference) == 0:
        raise ValueError("both tables need at least one row")
    binning = binning or BinningSpec.from_table(reference)
    f = len(binning.names)
    if not (1 <= k <= f):
        raise ValueError(f"k={k} outside [1, {f}]")
    codes_s = binning.codes(synthetic)
    codes_r = binning.codes(reference)
    radix = binning.radix()
    ns, nr = len(synthetic), len(reference)
    per_subset: dict[tuple[str, ...], float] = {}
    for cols in _subset_iter(f, k, max_subsets, seed):
        cols = tuple(cols)
        w = np.ones(len(cols), dtype=np.int64)
        for j in range(len(cols) - 2, -1, -1):
            w[j] = w[j + 1] * radix[cols[j + 1]]
        joint_s = codes_s[:, cols] @ w
        joint_r = codes_r[:, cols] @ w
        cells, inverse = np.unique(
            np.concatenate([joint_s, joint_r]), return_inverse=True
        )
        cnt_s = np.bincount(inverse[:ns], minlength=len(cells))
        cnt_r = np.bincount(inverse[ns:], minlength=len(cells))
        tvd = 0.5 * np.abs(cnt_s / ns - cnt_r / nr).sum()
        per_subset[tuple(binning.names[c] for c in cols)] = float(tvd)
    if not per_subset:
        raise ValueError("no feature subsets evaluated")
    return TVDResult(
        k=k,
        mean=float(np.mean(list(per_subset.values()))),
        per_subset=per_subset,
    )


# ---------------------------------------------------------------------------
# distance to closest record


@dataclass
class DCRResult:
    minimum: float
    median: float
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    distances: np.ndarray

    def to_dict(self) -> dict:
        return {
            "minimum": self.minimum,
            "median": self.median,
            "mean": self.mean,
            "histogram": [int(c) for c in self.histogram],
            "bin_edges": [float(e) for e in self.bin_edges],
        }


def _dcr_channels(synthetic: Table, train: Table, schema: Schema):
    """Per-feature distance channels in schema order.

    Numeric features contribute a squared range-normalized difference;
    categoricals — and numerics whose training range is degenerate — an
    exact-equality indicator (any mismatch costs one squared unit).
    """
    channels = []
    for f in schema.features:
        s_col, t_col = synthetic.column(f.name), train.column(f.name)
        if f.kind == "numeric":
            s_arr = np.array([float(v) for v in s_col])
            t_arr = np.array([float(v) for v in t_col])
            lo, hi = float(t_arr.min()), float(t_arr.max())
            if hi > lo:
                channels.append(("num", s_arr, t_arr, hi - lo))
            else:
                channels.append(("eq", s_arr, t_arr, None))
        else:
            cats = {c: i for i, c in enumerate(f.categories)}
            channels.append((
                "eq",
                np.array([cats[v] for v in s_col]),
                np.array([cats[v] for v in t_col]),
                None,
            ))
    return channels


def dcr_histogram(
    synthetic: Table,
    train: Table,
    bins: int = 50,
    chunk: int = 256,
) -> DCRResult:
    """Nearest-neighbor distances from synthetic rows to training rows."""
    if len(synthetic) == 0 or len(train) == 0:
        raise ValueError("both tables need at least one row")
    channels = _dcr_channels(synthetic, train, train.schema)
    best = np.empty(len(synthetic))
    for lo in range(0, len(synthetic), chunk):
        hi = min(lo + chunk, len(synthetic))
        d2 = np.zeros((hi - lo, len(train)))
        for kind, s_arr, t_arr, width in channels:
            if kind == "num":
                diff = (s_arr[lo:hi, None] - t_arr[None, :]) / width
                d2 = d2 + diff * diff
            else:
                d2 = d2 + (s_arr[lo:hi, None] != t_arr[None, :])
        best[lo:hi] = np.sqrt(d2.min(axis=1))
    top = float(best.max())
    hist, edges = np.histogram(best, bins=bins, range=(0.0, top if top > 0 else 1.0))
    return DCRResult(
        minimum=float(best.min()),
        median=float(np.median(best)),
        mean=float(best.mean()),
        histogram=hist,
        bin_edges=edges,
        distances=best,
    )


# ---------------------------------------------------------------------------
# downstream model and fairness


@dataclass
class DownstreamResult:
    accuracy: float
    auc: float
    best_params: GBTParams
    cv_results: list[dict]
    probabilities: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "best_params": {
                "n_estimators": self.best_params.n_estimators,
                "max_depth": self.best_params.max_depth,
                "learning_rate": self.best_params.learning_rate,
            },
            "cv_results": self.cv_results,
        }


def gbt_downstream(
    train_table: Table,
    test_table: Table,
    grid: Mapping[str, Sequence] | None = None,
    full_grid: bool = False,
    folds: int = 5,
    seed: int = 0,
) -> DownstreamResult:
    """CV-select a GBT on train_table, fit, and score on test_table."""
    grid = grid or (FULL_GRID if full_grid else DESK_GRID)
    schema = train_table.schema
    x_tr, y_tr, _ = design_matrix(train_table, schema)
    x_te, y_te, _ = design_matrix(test_table, schema)
    if len(set(y_tr.tolist())) < 2:
        raise SchemaError("training table has a single target class")
    best, results = cross_validate_gbt(x_tr, y_tr, grid, folds=folds, seed=seed)
    model = train_gbt(x_tr, y_tr, best)
    probs = predict_proba(model, x_te)
    return DownstreamResult(
        accuracy=accuracy_score(y_te, probs),
        auc=float(auc_score(y_te, probs)),
        best_params=best,
        cv_results=results,
        probabilities=probs,
    )


@dataclass
class FairnessResult:
    data_dpdiff: float
    model_dpdiff: float | None
    eo_diff: float | None
    group_rates: dict[str, float]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "data_dpdiff": self.data_dpdiff,
            "model_dpdiff": self.model_dpdiff,
            "eo_diff": self.eo_diff,
            "group_rates": self.group_rates,
            "warnings": self.warnings,
        }


def _max_gap(values: list[float]) -> float | None:
    if len(values) < 2:
        return None
    return max(values) - min(values)


def fairness_metrics(
    table: Table,
    sensitive: str | None = None,
    predictions: np.ndarray | None = None,
    threshold: float = 0.5,
) -> FairnessResult:
    """Demographic-parity and equalized-odds gaps across sensitive groups.

    data_dpdiff uses the labels in `table`; model_dpdiff and eo_diff need
    `predictions` (positive-class probabilities aligned with the rows).
    Groups with undefined rates are excluded with a warning.
    """
    schema = table.schema
    sensitive = sensitive or schema.sensitive
    if sensitive is None:
        raise SchemaError("no sensitive feature given")
    positive = schema.positive_label()
    label = schema.target
    y = np.array([1 if r[label] == positive else 0 for r in table.rows])
    g = np.array([r[sensitive] for r in table.rows], dtype=object)
    warns: list[str] = []
    groups = [c for c in schema.feature(sensitive).categories if (g == c).any()]
    for c in schema.feature(sensitive).categories:
        if c not in groups:
            warns.append(f"group {c!r} has no rows; excluded")
    rates = {c: float(y[g == c].mean()) for c in groups}
    data_gap = _max_gap(list(rates.values()))
    if data_gap is None:
        warns.append("fewer than two populated groups; DPDiff undefined")
        data_gap = float("nan")
    model_gap: float | None = None
    eo: float | None = None
    if predictions is not None:
        predictions = np.asarray(predictions, dtype=np.float64)
        if len(predictions) != len(table):
            raise ValueError("predictions length does not match the table")
        pred = (predictions >= threshold).astype(int)
        m_rates = [float(pred[g == c].mean()) for c in groups]
        model_gap = _max_gap(m_rates)
        if model_gap is None:
            model_gap = float("nan")
        tprs, fprs = [], []
        for c in groups:
            sel = g == c
            pos = sel & (y == 1)
            neg = sel & (y == 0)
            if pos.any():
                tprs.append(float(pred[pos].mean()))
            else:
                warns.append(f"group {c!r} has no positive rows; TPR excluded")
            if neg.any():
                fprs.append(float(pred[neg].mean()))
            else:
                warns.append(f"group {c!r} has no negative rows; FPR excluded")
        gaps = [gp for gp in (_max_gap(tprs), _max_gap(fprs)) if gp is not None]
        if gaps:
            eo = max(gaps)
        else:
            warns.append("equalized-odds gap undefined")
            eo = float("nan")
    for w in warns:
        warnings.warn(w, stacklevel=2)
    return FairnessResult(
        data_dpdiff=float(data_gap),
        model_dpdiff=model_gap,
        eo_diff=eo,
        group_rates=rates,
        warnings=warns,
    )
