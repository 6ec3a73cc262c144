"""Fidelity (k-way TVD), DCR privacy proxy, downstream GBT, fairness gaps."""

import numpy as np
import pytest

from dptab.evaluate import (
    BinningSpec,
    dcr_histogram,
    fairness_metrics,
    gbt_downstream,
    kway_tvd,
)
from dptab.schema import FeatureSpec, Schema, SchemaError, Table

from .conftest import build_toy_rows
from .oracles import dcr_bruteforce, eodiff_bruteforce, tvd_bruteforce


def xt_schema(decimals=0, lo=0.0, hi=19.0):
    return Schema(
        features=(
            FeatureSpec(name="X", kind="numeric", minimum=lo, maximum=hi, decimals=decimals),
            FeatureSpec(name="T", kind="categorical", categories=("a", "b")),
        ),
        target="T",
        sensitive=None,
    )


# ----------------------------------------------------------------- binning


def test_binning_quantile_cuts_balance_groups():
    schema = xt_schema()
    rows = [{"X": float(i), "T": "a"} for i in range(20)]
    table = Table(schema, rows)
    spec = BinningSpec.from_table(table, n_groups=4)
    assert spec.cuts[0] == (4.75, 9.5, 14.25)  # linear-interp quantiles
    assert spec.categories[1] == ("a", "b")
    assert tuple(spec.radix()) == (4, 2)
    codes = spec.codes(table)
    assert np.bincount(codes[:, 0]).tolist() == [5, 5, 5, 5]


def test_binning_boundary_goes_to_lower_bin():
    schema = xt_schema(lo=0.0, hi=6.0)
    spec = BinningSpec(
        names=("X", "T"), kinds=("numeric", "categorical"),
        cuts=((2.0, 4.0), ()), categories=((), ("a", "b")),
    )
    rows = [{"X": v, "T": "a"} for v in (1.0, 2.0, 3.0, 4.0, 5.0)]
    codes = spec.codes(Table(schema, rows))
    assert codes[:, 0].tolist() == [0, 0, 1, 1, 2]


def test_binning_constant_column():
    schema = xt_schema(lo=5.0, hi=5.0)
    rows = [{"X": 5.0, "T": "a"} for _ in range(10)]
    spec = BinningSpec.from_table(Table(schema, rows), n_groups=4)
    assert len(spec.cuts[0]) == 1  # duplicate quantiles collapse
    assert np.all(spec.codes(Table(schema, rows))[:, 0] == 0)
    with pytest.raises(ValueError):
        BinningSpec.from_table(Table(schema, rows), n_groups=1)


# --------------------------------------------------------------------- tvd


def test_tvd_identical_tables_is_zero(toy_table):
    for k in (1, 2, 3):
        res = kway_tvd(toy_table, toy_table, k)
        assert res.mean == 0.0
        assert all(v == 0.0 for v in res.per_subset.values())


def test_tvd_disjoint_single_feature(toy_schema):
    base = list(build_toy_rows(300, seed=4))
    ref = Table(toy_schema, [dict(r, Group="A") for r in base])
    syn = Table(toy_schema, [dict(r, Group="B") for r in base])
    res = kway_tvd(syn, ref, 1)
    assert res.per_subset[("Group",)] == 1.0
    assert res.per_subset[("Score",)] == 0.0
    assert res.per_subset[("Outcome",)] == 0.0
    assert res.mean == pytest.approx(1.0 / 3.0, rel=1e-12)


def test_tvd_matches_bruteforce_oracle(toy_schema, toy_table, held_out_table):
    binning = BinningSpec.from_table(toy_table)
    cuts_by_name = {"Score": list(binning.cuts[binning.names.index("Score")])}
    for k in (1, 2, 3):
        res = kway_tvd(held_out_table, toy_table, k, binning=binning)
        ref = tvd_bruteforce(held_out_table, toy_table, toy_schema, cuts_by_name, k)
        assert set(res.per_subset) == set(ref)
        for subset, v in ref.items():
            assert res.per_subset[subset] == pytest.approx(v, abs=1e-12), subset
        assert res.mean == pytest.approx(np.mean(list(ref.values())), abs=1e-12)


def test_tvd_symmetric_under_shared_binning(toy_table, held_out_table):
    binning = BinningSpec.from_table(toy_table)
    a = kway_tvd(held_out_table, toy_table, 2, binning=binning)
    b = kway_tvd(toy_table, held_out_table, 2, binning=binning)
    assert a.mean == pytest.approx(b.mean, abs=1e-12)


def test_tvd_bounds_and_validation(toy_table, held_out_table):
    for k in (1, 2, 3):
        res = kway_tvd(held_out_table, toy_table, k)
        assert 0.0 <= res.mean <= 1.0
        assert all(0.0 <= v <= 1.0 for v in res.per_subset.values())
    with pytest.raises(ValueError):
        kway_tvd(held_out_table, toy_table, 0)
    with pytest.raises(ValueError):
        kway_tvd(held_out_table, toy_table, 4)
    empty = Table(toy_table.schema, [])
    with pytest.raises(ValueError):
        kway_tvd(empty, toy_table, 1)


def test_tvd_subset_cap_and_report(toy_table, held_out_table):
    res = kway_tvd(held_out_table, toy_table, 2, max_subsets=2, seed=1)
    assert len(res.per_subset) == 2
    again = kway_tvd(held_out_table, toy_table, 2, max_subsets=2, seed=1)
    assert res.per_subset == again.per_subset  # seeded subset choice
    d = res.to_dict()
    assert d["k"] == 2 and d["n_subsets"] == 2
    assert all("|" in key for key in d["per_subset"])


# --------------------------------------------------------------------- dcr


def test_dcr_hand_distances():
    schema = xt_schema(lo=0.0, hi=10.0)
    train = Table(schema, [{"X": 0.0, "T": "a"}, {"X": 10.0, "T": "b"}])
    syn = Table(schema, [{"X": 5.0, "T": "a"}, {"X": 10.0, "T": "b"}])
    res = dcr_histogram(syn, train, bins=4)
    # row 1: nearer train row is (0, "a"): sqrt((5/10)^2 + 0) = 0.5
    assert res.distances[0] == pytest.approx(0.5, abs=1e-12)
    assert res.distances[1] == 0.0  # exact training copy
    assert res.minimum == 0.0
    assert res.mean == pytest.approx(0.25, abs=1e-12)
    assert res.histogram.sum() == 2
    assert res.bin_edges[0] == 0.0 and res.bin_edges[-1] == pytest.approx(0.5)


def test_dcr_degenerate_training_range():
    schema = xt_schema(lo=5.0, hi=7.0)
    train = Table(schema, [{"X": 5.0, "T": "a"}])  # constant X in training
    syn = Table(schema, [{"X": 5.0, "T": "a"}, {"X": 7.0, "T": "a"}])
    res = dcr_histogram(syn, train)
    assert res.distances[0] == 0.0
    assert res.distances[1] == pytest.approx(1.0)  # inequality costs one unit


def test_dcr_matches_bruteforce_oracle(toy_schema, toy_table):
    syn = Table(toy_schema, list(build_toy_rows(80, seed=55)))
    train = Table(toy_schema, list(toy_table.rows[:300]))
    res = dcr_histogram(syn, train, chunk=32)
    ref = dcr_bruteforce(syn, train, toy_schema)
    assert np.allclose(res.distances, ref, atol=1e-9)
    assert res.median == pytest.approx(float(np.median(ref)), abs=1e-9)


def test_dcr_validation(toy_table):
    empty = Table(toy_table.schema, [])
    with pytest.raises(ValueError):
        dcr_histogram(empty, toy_table)
    with pytest.raises(ValueError):
        dcr_histogram(toy_table, empty)


# -------------------------------------------------------------- downstream


def test_gbt_downstream_learns_group_rule(toy_table, held_out_table):
    grid = {"n_estimators": (20,), "max_depth": (3,), "learning_rate": (0.1,)}
    res = gbt_downstream(toy_table, held_out_table, grid=grid, folds=3)
    # the planted rule gives Bayes AUC about 0.8 on this toy distribution
    assert res.auc > 0.7
    assert res.accuracy > 0.7
    assert len(res.probabilities) == len(held_out_table)
    d = res.to_dict()
    assert d["best_params"]["n_estimators"] == 20
    assert len(d["cv_results"]) == 1


def test_gbt_downstream_single_class_raises(toy_schema, held_out_table):
    rows = [dict(r, Outcome="yes") for r in build_toy_rows(50, seed=3)]
    with pytest.raises(SchemaError):
        gbt_downstream(Table(toy_schema, rows), held_out_table)


# ---------------------------------------------------------------- fairness


def test_fairness_data_gap_hand_case(toy_schema):
    rows = []
    for i in range(10):
        rows.append({"Group": "A", "Score": 50.0, "Outcome": "yes" if i < 9 else "no"})
        rows.append({"Group": "B", "Score": 50.0, "Outcome": "yes" if i < 1 else "no"})
    res = fairness_metrics(Table(toy_schema, rows))
    assert res.group_rates == {"A": 0.9, "B": 0.1}
    assert res.data_dpdiff == pytest.approx(0.8, abs=1e-12)
    assert res.model_dpdiff is None and res.eo_diff is None
    assert res.warnings == []


def test_fairness_model_gaps_hand_case(toy_schema):
    # A: TPR 1/2, FPR 0/2; B: TPR 2/2, FPR 1/2 -> EODiff max(.5, .5) = .5
    rows = [
        {"Group": "A", "Score": 50.0, "Outcome": "yes"},
        {"Group": "A", "Score": 50.0, "Outcome": "yes"},
        {"Group": "A", "Score": 50.0, "Outcome": "no"},
        {"Group": "A", "Score": 50.0, "Outcome": "no"},
        {"Group": "B", "Score": 50.0, "Outcome": "yes"},
        {"Group": "B", "Score": 50.0, "Outcome": "yes"},
        {"Group": "B", "Score": 50.0, "Outcome": "no"},
        {"Group": "B", "Score": 50.0, "Outcome": "no"},
    ]
    preds = np.array([0.9, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.1])
    res = fairness_metrics(Table(toy_schema, rows), predictions=preds)
    assert res.model_dpdiff == pytest.approx(0.5, abs=1e-12)  # 3/4 - 1/4
    assert res.eo_diff == pytest.approx(0.5, abs=1e-12)
    groups = [r["Group"] for r in rows]
    y = [1 if r["Outcome"] == "yes" else 0 for r in rows]
    yhat = (preds >= 0.5).astype(int).tolist()
    assert res.eo_diff == pytest.approx(eodiff_bruteforce(groups, y, yhat))


def test_fairness_threshold_is_respected(toy_schema):
    rows = [
        {"Group": "A", "Score": 50.0, "Outcome": "yes"},
        {"Group": "B", "Score": 50.0, "Outcome": "no"},
    ]
    preds = np.array([0.6, 0.4])
    with pytest.warns(UserWarning):  # one-class groups: EO channels excluded
        low = fairness_metrics(Table(toy_schema, rows), predictions=preds, threshold=0.3)
        high = fairness_metrics(Table(toy_schema, rows), predictions=preds, threshold=0.5)
    assert low.model_dpdiff == pytest.approx(0.0)  # both predicted positive
    assert high.model_dpdiff == pytest.approx(1.0)


def test_fairness_warnings_and_undefined_rates(toy_schema):
    rows = [
        {"Group": "A", "Score": 50.0, "Outcome": "yes"},
        {"Group": "A", "Score": 50.0, "Outcome": "no"},
    ]
    with pytest.warns(UserWarning) as caught:
        res = fairness_metrics(Table(toy_schema, rows))
    assert any("no rows" in str(w.message) for w in caught)
    assert np.isnan(res.data_dpdiff)  # only one populated group
    assert any("excluded" in w for w in res.warnings)

    # a group with positives only: its FPR is excluded, TPR still counted
    rows2 = [
        {"Group": "A", "Score": 50.0, "Outcome": "yes"},
        {"Group": "A", "Score": 50.0, "Outcome": "no"},
        {"Group": "B", "Score": 50.0, "Outcome": "yes"},
    ]
    preds = np.array([0.9, 0.1, 0.1])
    with pytest.warns(UserWarning, match="no negative rows"):
        res2 = fairness_metrics(Table(toy_schema, rows2), predictions=preds)
    assert res2.eo_diff == pytest.approx(1.0)  # TPR gap 1 - 0


def test_fairness_validation(toy_schema):
    rows = [{"Group": "A", "Score": 50.0, "Outcome": "yes"}]
    plain = Schema(
        features=toy_schema.features, target=toy_schema.target, sensitive=None
    )
    with pytest.raises(SchemaError):
        fairness_metrics(Table(plain, rows))
    with pytest.raises(ValueError):
        fairness_metrics(
            Table(toy_schema, rows), predictions=np.array([0.5, 0.5])
        )
