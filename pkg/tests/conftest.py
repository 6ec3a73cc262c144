"""Shared fixtures: toy data, a small trained model, and the Adult CSV."""

from __future__ import annotations

import gzip
import pathlib

import numpy as np
import pytest

from dptab.schema import FeatureSpec, Schema, Table
from dptab.trainer import (
    StageOneConfig,
    StageTwoConfig,
    TrainConfig,
    two_stage_finetune,
)

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_toy_schema() -> Schema:
    return Schema(
        features=(
            FeatureSpec("Group", "categorical", categories=("A", "B")),
            FeatureSpec("Score", "numeric", minimum=10.0, maximum=99.0, decimals=0),
            FeatureSpec("Outcome", "categorical", categories=("no", "yes")),
        ),
        target="Outcome",
        sensitive="Group",
    )


def build_toy_rows(n: int, seed: int) -> tuple[dict, ...]:
    """Group balanced, Outcome strongly group-dependent (planted 2-feature
    correlation, demographic-parity gap 0.6), Score ~ round(N(55, 8))."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        g = "A" if rng.random() < 0.5 else "B"
        y = "yes" if rng.random() < (0.8 if g == "A" else 0.2) else "no"
        s = float(int(np.clip(rng.normal(55.0, 8.0), 10, 99)))
        rows.append({"Group": g, "Score": s, "Outcome": y})
    return tuple(rows)


@pytest.fixture(scope="session")
def toy_schema() -> Schema:
    return build_toy_schema()


@pytest.fixture(scope="session")
def toy_table(toy_schema) -> Table:
    return Table(toy_schema, build_toy_rows(4000, 100))


@pytest.fixture(scope="session")
def held_out_table(toy_schema) -> Table:
    return Table(toy_schema, build_toy_rows(2000, 200))


def small_train_config(seed: int, **kw) -> TrainConfig:
    """The compact architecture used throughout the test suite."""
    base = dict(
        seed=seed,
        embed_dim=32,
        num_layers=1,
        num_heads=2,
        ffn_dim=64,
        context_length=24,
        stage1=StageOneConfig(epochs=40, batch_size=64, learning_rate=1e-3),
        stage2=StageTwoConfig(
            epochs=4,
            expected_batch_size=128,
            epsilon=1.0,
            delta=1e-6,
            learning_rate=5e-4,
        ),
        probe_rows=1000,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def mini_run(toy_schema, toy_table):
    """A quickly trained (format-capable, non-private) model for unit tests."""
    cfg = small_train_config(
        5,
        stage1=StageOneConfig(epochs=10, batch_size=64, learning_rate=1e-3, random_rows=1500),
        stage2=StageTwoConfig(
            epochs=2, expected_batch_size=96, learning_rate=5e-4, non_private=True
        ),
        probe_rows=100,
    )
    small = Table(toy_schema, toy_table.rows[:1200])
    return two_stage_finetune(small, cfg)


@pytest.fixture(scope="session")
def adult_csv(tmp_path_factory) -> pathlib.Path:
    src = REPO_ROOT / "data" / "adult.csv.gz"
    out = tmp_path_factory.mktemp("adult") / "adult.csv"
    with gzip.open(src, "rb") as gz:
        out.write_bytes(gz.read())
    return out
