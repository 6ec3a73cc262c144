"""Training objectives over template sentences.

Next-token convention: logits row j scores the token at position j+1, so
positions 1..L-1 (everything after bos, including eos) are predicted.

wcel: cross-entropy with format positions weighted (1 - alpha) and
tabular positions weighted alpha. At alpha = 0.5 it is exactly half the
plain cross-entropy.

nul: per numeric value, half squared relative error between the true
number and the number read off the logits, scaled by a per-feature
lambda. "soft_digit" reads a differentiable number (expected digit under
a softmax renormalized over the ten digit tokens, sign and decimal point
taken from the ground-truth pattern). "reinforce" reads the greedy argmax
decode, scores 1.0 when it fails to parse, and routes the (detached)
error through a score-function gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .schema import Schema
from .tokenizer import NumericSpan, TokenizedExample, Vocab

NUL_MODES = ("soft_digit", "reinforce")
FAILURE_PENALTY = 1.0


@dataclass(frozen=True)
class LossSpec:
    alpha: float = 0.65
    beta: float = 1.0
    nul_mode: str = "soft_digit"
    lambda_map: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.nul_mode not in NUL_MODES:
            raise ValueError(f"nul_mode must be one of {NUL_MODES}")
        for k, v in self.lambda_map.items():
            if v <= 0.0:
                raise ValueError(f"lambda for {k!r} must be positive")


def default_lambda_map(schema: Schema) -> dict[str, float]:
    """Per-feature scale: the bound range (max - min), so the squared error
    is comparable across features; 1.0 when the range is degenerate."""
    return {
        f.name: (f.maximum - f.minimum) or 1.0
        for f in schema.features
        if f.kind == "numeric"
    }


def build_lambda_map(schema: Schema, mode: str, table=None) -> dict[str, float]:
    """Lambda scales per numeric feature.

    mode "range": schema bound range; "std": standard deviation of the
    given table's column; "fixed:<v>": the constant v.
    """
    if mode == "range":
        return default_lambda_map(schema)
    if mode == "std":
        if table is None:
            raise ValueError("lambda mode 'std' needs a table")
        out = {}
        for f in schema.features:
            if f.kind != "numeric":
                continue
            col = np.array([float(v) for v in table.column(f.name)])
            out[f.name] = float(col.std()) or 1.0
        return out
    if mode.startswith("fixed:"):
        v = float(mode.split(":", 1)[1])
        if v <= 0.0:
            raise ValueError("fixed lambda must be positive")
        return {f.name: v for f in schema.features if f.kind == "numeric"}
    raise ValueError(f"unknown lambda mode {mode!r}")


def squared_error(n_true: float, decoded: float | None, lam: float) -> float:
    """Half squared scaled error; the fixed penalty when decoding failed."""
    if lam <= 0.0:
        raise ValueError("lambda must be positive")
    if decoded is None:
        return FAILURE_PENALTY
    rel = (n_true - decoded) / lam
    return 0.5 * rel * rel


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check(logits: np.ndarray, example: TokenizedExample) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(example.ids):
        raise ValueError(
            f"logits shape {logits.shape} does not match example length "
            f"{len(example.ids)}"
        )
    return logits


def stage1_ce(logits: np.ndarray, example: TokenizedExample) -> float:
    """Plain summed cross-entropy over all predicted positions."""
    logits = _check(logits, example)
    logp = _log_softmax(logits[:-1])
    targets = example.ids[1:]
    return float(-logp[np.arange(len(targets)), targets].sum())


def _ce_grad(logits: np.ndarray, example: TokenizedExample, weights: np.ndarray) -> np.ndarray:
    """d(sum_pos w_pos * -log p(target_pos)) / dlogits."""
    dl = np.zeros_like(logits)
    rows = logits[:-1]
    z = rows - rows.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    soft = ez / ez.sum(axis=-1, keepdims=True)
    targets = example.ids[1:]
    g = soft * weights[:, None]
    g[np.arange(len(targets)), targets] -= weights
    dl[:-1] = g
    return dl


def stage1_ce_with_grad(
    logits: np.ndarray, example: TokenizedExample
) -> tuple[float, np.ndarray]:
    logits = _check(logits, example)
    value = stage1_ce(logits, example)
    ones = np.ones(len(example.ids) - 1)
    return value, _ce_grad(logits, example, ones)


def wcel(logits: np.ndarray, example: TokenizedExample, alpha: float) -> float:
    """Format positions weighted (1 - alpha), tabular positions alpha."""
    logits = _check(logits, example)
    logp = _log_softmax(logits[:-1])
    targets = example.ids[1:]
    nll = -logp[np.arange(len(targets)), targets]
    w = np.where(example.format_mask[1:], 1.0 - alpha, alpha)
    return float((w * nll).sum())


def _wcel_weights(example: TokenizedExample, alpha: float) -> np.ndarray:
    return np.where(example.format_mask[1:], 1.0 - alpha, alpha)


def _span_pattern(span: NumericSpan, example: TokenizedExample, vocab: Vocab):
    """Sign, digit slot rows, and place values from the true token pattern.

    Returns (sign, rows, digit_values_powers) where rows[i] is the logits
    row that predicts the i-th digit slot and powers[i] its place value.
    """
    toks = [vocab.tokens[int(t)] for t in example.ids[span.start : span.end]]
    sign = -1.0 if toks and toks[0] == "-" else 1.0
    digit_offsets = [i for i, t in enumerate(toks) if t.isdigit() and len(t) == 1]
    point = next((i for i, t in enumerate(toks) if t == "."), None)
    powers = []
    int_slots = [i for i in digit_offsets if point is None or i < point]
    frac_slots = [i for i in digit_offsets if point is not None and i > point]
    m = len(int_slots)
    for rank, _ in enumerate(int_slots):
        powers.append(10.0 ** (m - 1 - rank))
    for rank, _ in enumerate(frac_slots):
        powers.append(10.0 ** (-(rank + 1)))
    rows = [span.start - 1 + i for i in int_slots + frac_slots]
    return sign, np.array(rows, dtype=np.int64), np.array(powers)


def greedy_decode_number(
    logits: np.ndarray, example: TokenizedExample, span: NumericSpan, vocab: Vocab
) -> float | None:
    """Argmax-decode the span's characters; None when the text is not a number."""
    logits = _check(logits, example)
    rows = logits[span.start - 1 : span.end - 1]
    toks = [vocab.tokens[int(i)] for i in np.argmax(rows, axis=-1)]
    try:
        return float("".join(toks))
    except ValueError:
        return None


def nul(
    logits: np.ndarray,
    example: TokenizedExample,
    vocab: Vocab,
    lambda_map: Mapping[str, float],
    nul_mode: str = "soft_digit",
) -> float:
    return _nul_impl(logits, example, vocab, lambda_map, nul_mode, want_grad=False)[0]


def _nul_impl(
    logits: np.ndarray,
    example: TokenizedExample,
    vocab: Vocab,
    lambda_map: Mapping[str, float],
    nul_mode: str,
    want_grad: bool,
):
    logits = _check(logits, example)
    if nul_mode not in NUL_MODES:
        raise ValueError(f"nul_mode must be one of {NUL_MODES}")
    dl = np.zeros_like(logits) if want_grad else None
    total = 0.0
    if not example.numeric_spans:  # all-categorical vocabs have no digit ids
        return total, dl
    digit_ids = vocab.digit_ids()
    digit_vals = np.arange(10, dtype=np.float64)
    for span in example.numeric_spans:
        lam = lambda_map.get(span.feature)
        if lam is None:
            raise KeyError(f"no lambda for feature {span.feature!r}")
        if nul_mode == "soft_digit":
            sign, rows, powers = _span_pattern(span, example, vocab)
            sub = logits[rows][:, digit_ids]  # (slots, 10)
            z = sub - sub.max(axis=-1, keepdims=True)
            ez = np.exp(z)
            prob = ez / ez.sum(axis=-1, keepdims=True)
            exp_digit = prob @ digit_vals  # (slots,)
            n_hat = sign * float(exp_digit @ powers)
            err = (n_hat - span.value) / lam
            total += 0.5 * err * err
            if want_grad:
                # d n_hat / d logit_k = sign * power * p_k (k - e)
                coef = (err / lam) * sign * powers  # (slots,)
                gsub = prob * (digit_vals[None, :] - exp_digit[:, None]) * coef[:, None]
                for r, grow in zip(rows, gsub):
                    dl[r, digit_ids] += grow
        else:  # reinforce
            decoded = greedy_decode_number(logits, example, span, vocab)
            se = squared_error(span.value, decoded, lam)
            total += se
            if want_grad:
                rows = np.arange(span.start - 1, span.end - 1)
                sub = logits[rows]
                z = sub - sub.max(axis=-1, keepdims=True)
                ez = np.exp(z)
                prob = ez / ez.sum(axis=-1, keepdims=True)
                greedy = np.argmax(sub, axis=-1)
                g = prob * se
                g[np.arange(len(rows)), greedy] -= se
                dl[rows] += g
    return total, dl


def combined_loss(
    logits: np.ndarray,
    example: TokenizedExample,
    vocab: Vocab,
    spec: LossSpec,
    want_grad: bool = True,
):
    """wcel + beta * nul; returns (loss, dlogits) or (loss, None)."""
    logits = _check(logits, example)
    value = wcel(logits, example, spec.alpha)
    nval, ngrad = _nul_impl(
        logits, example, vocab, spec.lambda_map, spec.nul_mode, want_grad
    )
    value += spec.beta * nval
    if not want_grad:
        return value, None
    dl = _ce_grad(logits, example, _wcel_weights(example, spec.alpha))
    if spec.beta != 0.0:
        dl += spec.beta * ngrad
    return value, dl
