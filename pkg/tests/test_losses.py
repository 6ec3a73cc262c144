"""Weighted cross-entropy, numeric-understanding loss, and their gradients."""

import math

import numpy as np
import pytest

from dptab.codec import encode_record
from dptab.losses import (
    FAILURE_PENALTY,
    LossSpec,
    build_lambda_map,
    combined_loss,
    default_lambda_map,
    greedy_decode_number,
    nul,
    squared_error,
    stage1_ce,
    stage1_ce_with_grad,
    wcel,
)
from dptab.schema import FeatureSpec, Schema
from dptab.tokenizer import TokenizedExample, build_vocab, tokenize


@pytest.fixture(scope="module")
def toy_setup():
    """One tokenized toy sentence plus seeded logits shared across tests."""
    from .conftest import build_toy_schema

    schema = build_toy_schema()
    vocab = build_vocab(schema)
    rec = {"Group": "A", "Score": 57.0, "Outcome": "yes"}
    ex = tokenize(encode_record(rec, schema), vocab, schema)
    rng = np.random.default_rng(0)
    logits = rng.normal(0.0, 2.0, size=(len(ex.ids), len(vocab)))
    return schema, vocab, ex, logits


def fd_logits(loss_fn, logits, h=1e-5):
    """Central finite differences of a scalar loss over a logits matrix."""
    g = np.zeros_like(logits)
    it = np.nditer(logits, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = logits[idx]
        logits[idx] = orig + h
        up = loss_fn(logits)
        logits[idx] = orig - h
        down = loss_fn(logits)
        logits[idx] = orig
        g[idx] = (up - down) / (2 * h)
        it.iternext()
    return g


# ---------------------------------------------------------------- LossSpec


def test_loss_spec_validation():
    LossSpec()  # defaults are valid
    assert LossSpec().alpha == 0.65
    assert LossSpec().beta == 1.0
    assert LossSpec().nul_mode == "soft_digit"
    for bad in (
        dict(alpha=-0.1),
        dict(alpha=1.1),
        dict(beta=-1.0),
        dict(nul_mode="hard"),
        dict(lambda_map={"X": 0.0}),
    ):
        with pytest.raises(ValueError):
            LossSpec(**bad)


def test_lambda_map_modes(toy_setup, toy_table):
    schema, _, _, _ = toy_setup
    assert default_lambda_map(schema) == {"Score": 89.0}  # bound range 99 - 10
    assert build_lambda_map(schema, "range") == {"Score": 89.0}
    std = build_lambda_map(schema, "std", toy_table)
    scores = np.array([r["Score"] for r in toy_table.rows])
    assert std["Score"] == pytest.approx(float(scores.std()))
    assert build_lambda_map(schema, "fixed:2.5") == {"Score": 2.5}
    with pytest.raises(ValueError):
        build_lambda_map(schema, "std")  # needs a table
    with pytest.raises(ValueError):
        build_lambda_map(schema, "fixed:-1")
    with pytest.raises(ValueError):
        build_lambda_map(schema, "median")


def test_lambda_map_degenerate_range_is_one():
    f = FeatureSpec(name="K", kind="numeric", minimum=5.0, maximum=5.0, decimals=0)
    t = FeatureSpec(name="T", kind="categorical", categories=("a", "b"))
    schema = Schema(features=(f, t), target="T", sensitive=None)
    assert default_lambda_map(schema) == {"K": 1.0}


# ----------------------------------------------------------- squared error


def test_squared_error_values():
    assert squared_error(10.0, 99.9, 1.0) == pytest.approx(4041.005, rel=1e-12)
    assert squared_error(5.0, 4.0, 10.0) == pytest.approx(0.005, rel=1e-12)
    assert squared_error(7.0, 7.0, 3.0) == 0.0
    assert squared_error(7.0, None, 3.0) == FAILURE_PENALTY == 1.0
    with pytest.raises(ValueError):
        squared_error(1.0, 1.0, 0.0)


# ------------------------------------------------------------ cross entropy


def test_stage1_ce_uniform_hand_value():
    # four positions, three predicted, uniform logits over four tokens:
    # sum of -log(1/4) three times = ln(64)
    ex = TokenizedExample(
        ids=np.array([1, 3, 3, 2]),
        format_mask=np.array([True, False, False, True]),
        numeric_spans=(),
        text="",
    )
    value = stage1_ce(np.zeros((4, 4)), ex)
    assert value == pytest.approx(math.log(64.0), abs=1e-12)
    assert value == pytest.approx(4.158883083359672, abs=1e-12)


def test_stage1_ce_perfect_prediction_is_zero():
    ex = TokenizedExample(
        ids=np.array([1, 3, 0, 2]),
        format_mask=np.array([True, False, False, True]),
        numeric_spans=(),
        text="",
    )
    logits = np.full((4, 4), -40.0)
    for row, target in enumerate(ex.ids[1:]):
        logits[row, target] = 40.0
    assert stage1_ce(logits, ex) == pytest.approx(0.0, abs=1e-12)


def test_stage1_ce_shape_mismatch_raises(toy_setup):
    _, _, ex, logits = toy_setup
    with pytest.raises(ValueError):
        stage1_ce(logits[:-1], ex)


def test_stage1_ce_grad_matches_finite_differences(toy_setup):
    _, _, ex, logits = toy_setup
    value, grad = stage1_ce_with_grad(logits.copy(), ex)
    assert value == pytest.approx(stage1_ce(logits, ex))
    numeric = fd_logits(lambda lg: stage1_ce(lg, ex), logits.copy())
    assert np.allclose(grad, numeric, atol=1e-6)


# -------------------------------------------------------------------- wcel


def test_wcel_alpha_identities(toy_setup):
    _, _, ex, logits = toy_setup
    full = stage1_ce(logits, ex)
    half = wcel(logits, ex, 0.5)
    assert half == pytest.approx(0.5 * full, rel=1e-12)
    fmt_only = wcel(logits, ex, 0.0)
    tab_only = wcel(logits, ex, 1.0)
    assert fmt_only + tab_only == pytest.approx(full, rel=1e-12)
    for a in (0.25, 0.65, 0.9):
        assert wcel(logits, ex, a) == pytest.approx(
            (1 - a) * fmt_only + a * tab_only, rel=1e-12
        )


def test_wcel_splits_format_and_tabular(toy_setup):
    _, vocab, ex, _ = toy_setup
    # reward exactly the format positions: alpha=0 loss low, alpha=1 high
    logits = np.full((len(ex.ids), len(vocab)), 0.0)
    for row, (target, is_fmt) in enumerate(zip(ex.ids[1:], ex.format_mask[1:])):
        if is_fmt:
            logits[row, target] = 50.0
    assert wcel(logits, ex, 0.0) == pytest.approx(0.0, abs=1e-9)
    assert wcel(logits, ex, 1.0) > 1.0


# --------------------------------------------------------------------- nul


def test_nul_soft_digit_uniform_logits(toy_setup):
    schema, vocab, ex, _ = toy_setup
    # uniform digit distribution: expected digit 4.5 in both slots of "57",
    # so n_hat = 45 + 4.5 = 49.5
    value = nul(np.zeros((len(ex.ids), len(vocab))), ex, vocab, {"Score": 89.0})
    assert value == pytest.approx(0.5 * ((49.5 - 57.0) / 89.0) ** 2, rel=1e-12)


def test_nul_soft_digit_perfect_prediction(toy_setup):
    schema, vocab, ex, _ = toy_setup
    logits = np.zeros((len(ex.ids), len(vocab)))
    span = ex.numeric_spans[0]
    for i, pos in enumerate(range(span.start, span.end)):
        logits[pos - 1, int(ex.ids[pos])] = 60.0  # one-hot on the true digits
    assert nul(logits, ex, vocab, {"Score": 89.0}) == pytest.approx(0.0, abs=1e-12)


def test_nul_soft_digit_sign_and_point_from_truth():
    f = FeatureSpec(name="W", kind="numeric", minimum=-5.0, maximum=5.0, decimals=2)
    t = FeatureSpec(name="T", kind="categorical", categories=("a", "b"))
    schema = Schema(features=(f, t), target="T", sensitive=None)
    vocab = build_vocab(schema)
    ex = tokenize("W is -1.50, T is a", vocab, schema)
    # digit slots are 1, .1, .01 places; uniform digits give magnitude 4.995,
    # the sign comes from the true "-" so n_hat = -4.995
    value = nul(np.zeros((len(ex.ids), len(vocab))), ex, vocab, {"W": 10.0})
    assert value == pytest.approx(0.5 * ((-4.995 + 1.5) / 10.0) ** 2, rel=1e-12)


def test_nul_missing_lambda_raises(toy_setup):
    _, vocab, ex, logits = toy_setup
    with pytest.raises(KeyError):
        nul(logits, ex, vocab, {})


def test_nul_no_numeric_features_is_zero():
    f = FeatureSpec(name="A", kind="categorical", categories=("x", "y"))
    t = FeatureSpec(name="T", kind="categorical", categories=("a", "b"))
    schema = Schema(features=(f, t), target="T", sensitive=None)
    vocab = build_vocab(schema)
    ex = tokenize("A is x, T is b", vocab, schema)
    assert nul(np.ones((len(ex.ids), len(vocab))), ex, vocab, {}) == 0.0


def test_greedy_decode_number(toy_setup):
    _, vocab, ex, _ = toy_setup
    span = ex.numeric_spans[0]
    logits = np.zeros((len(ex.ids), len(vocab)))
    logits[span.start - 1, vocab.id_of("5")] = 9.0
    logits[span.end - 2, vocab.id_of("8")] = 9.0
    assert greedy_decode_number(logits, ex, span, vocab) == 58.0
    logits[span.start - 1, vocab.id_of("is")] = 20.0  # argmax is not a digit
    assert greedy_decode_number(logits, ex, span, vocab) is None


def test_nul_reinforce_uses_decoded_error_and_penalty(toy_setup):
    _, vocab, ex, _ = toy_setup
    span = ex.numeric_spans[0]
    logits = np.zeros((len(ex.ids), len(vocab)))
    logits[span.start - 1, vocab.id_of("5")] = 9.0
    logits[span.end - 2, vocab.id_of("8")] = 9.0  # decodes 58, truth 57
    got = nul(logits, ex, vocab, {"Score": 89.0}, nul_mode="reinforce")
    assert got == pytest.approx(0.5 * (1.0 / 89.0) ** 2, rel=1e-12)
    logits[span.start - 1, vocab.id_of("is")] = 20.0  # unparseable decode
    got = nul(logits, ex, vocab, {"Score": 89.0}, nul_mode="reinforce")
    assert got == FAILURE_PENALTY


def test_nul_rejects_unknown_mode(toy_setup):
    _, vocab, ex, logits = toy_setup
    with pytest.raises(ValueError):
        nul(logits, ex, vocab, {"Score": 89.0}, nul_mode="other")


# ---------------------------------------------------------------- combined


def test_combined_loss_is_wcel_plus_beta_nul(toy_setup):
    _, vocab, ex, logits = toy_setup
    spec = LossSpec(alpha=0.65, beta=2.0, lambda_map={"Score": 89.0})
    value, grad = combined_loss(logits, ex, vocab, spec)
    expected = wcel(logits, ex, 0.65) + 2.0 * nul(logits, ex, vocab, {"Score": 89.0})
    assert value == pytest.approx(expected, rel=1e-12)
    assert grad.shape == logits.shape
    value2, none = combined_loss(logits, ex, vocab, spec, want_grad=False)
    assert value2 == pytest.approx(value) and none is None


def test_combined_loss_beta_zero_matches_scaled_ce_grad(toy_setup):
    _, vocab, ex, logits = toy_setup
    spec = LossSpec(alpha=0.5, beta=0.0, lambda_map={"Score": 89.0})
    value, grad = combined_loss(logits, ex, vocab, spec)
    ce, ce_grad = stage1_ce_with_grad(logits, ex)
    assert value == pytest.approx(0.5 * ce, rel=1e-12)
    assert np.allclose(grad, 0.5 * ce_grad, atol=1e-12)


def test_combined_loss_soft_digit_grad_matches_finite_differences(toy_setup):
    _, vocab, ex, logits = toy_setup
    spec = LossSpec(alpha=0.65, beta=1.5, lambda_map={"Score": 89.0})
    _, grad = combined_loss(logits.copy(), ex, vocab, spec)

    def loss_fn(lg):
        v, _ = combined_loss(lg, ex, vocab, spec, want_grad=False)
        return v

    numeric = fd_logits(loss_fn, logits.copy())
    assert np.allclose(grad, numeric, atol=1e-5)


def test_reinforce_grad_is_score_function_form(toy_setup):
    _, vocab, ex, logits = toy_setup
    spec = LossSpec(alpha=0.0, beta=1.0, nul_mode="reinforce", lambda_map={"Score": 89.0})
    _, grad = combined_loss(logits, ex, vocab, spec)
    _, ce_grad_full = stage1_ce_with_grad(logits, ex)
    # subtract the wcel part to isolate the reinforce rows
    wcel_grad = combined_loss(
        logits, ex, vocab, LossSpec(alpha=0.0, beta=0.0, lambda_map={"Score": 89.0})
    )[1]
    iso = grad - wcel_grad
    span = ex.numeric_spans[0]
    rows = np.arange(span.start - 1, span.end - 1)
    se = nul(logits, ex, vocab, {"Score": 89.0}, nul_mode="reinforce")
    sub = logits[rows]
    z = sub - sub.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    expect = p * se
    expect[np.arange(len(rows)), np.argmax(sub, axis=-1)] -= se
    assert np.allclose(iso[rows], expect, atol=1e-12)
    untouched = np.delete(np.arange(len(ex.ids)), rows)
    assert np.allclose(iso[untouched], 0.0, atol=1e-12)
