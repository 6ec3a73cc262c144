"""Sampling rows from a trained model, plus fairness-quota planning.

Prompts are either "random_init" (bos + a uniformly chosen feature name +
"is", a fresh name per row) or "value_specified" (bos + rendered clauses
for fixed feature values, ending with ","). Generated sentences are
decoded strictly; rows that fail are regenerated up to max_retries times
and every attempt lands in the compliance tally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .codec import DecodeError, DecodeTally, decode_text
from .model import ModelState, forward_batch
from .schema import Record, Schema, SchemaError, Table
from .tokenizer import Vocab, detokenize

_FORWARD_CHUNK = 512
TRUNCATED = "truncated"


@dataclass(frozen=True)
class PromptSpec:
    mode: str = "random_init"  # "random_init" | "value_specified"
    fixed: tuple[tuple[str, str | float], ...] = ()
    temperature: float = 1.0
    max_retries: int = 8

    def __post_init__(self) -> None:
        if self.mode not in ("random_init", "value_specified"):
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "value_specified" and not self.fixed:
            raise ValueError("value_specified prompts need fixed values")
        if self.mode == "random_init" and self.fixed:
            raise ValueError("random_init prompts cannot fix values")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class SamplingReport:
    rows_requested: int
    rows_emitted: int
    attempts: int
    decoded: int
    failures: dict[str, int]
    compliance: float
    retries_exhausted: int
    mode: str
    temperature: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _validate_fixed(prompt: PromptSpec, schema: Schema) -> list[tuple[str, str]]:
    """Check fixed (feature, value) pairs; returns rendered clause parts."""
    seen = set()
    rendered = []
    for name, value in prompt.fixed:
        f = schema.feature(name)
        if name in seen:
            raise SchemaError(f"feature {name!r} fixed twice")
        seen.add(name)
        if f.kind == "categorical":
            if value not in f.categories:
                raise SchemaError(f"{value!r} is not a category of {name!r}")
            rendered.append((name, str(value)))
        else:
            x = f.canon(float(value))
            if not (f.minimum <= x <= f.maximum):
                raise SchemaError(f"{name!r} value {x} out of range")
            rendered.append((name, f.render(x)))
    if len(rendered) >= len(schema.features):
        raise SchemaError("cannot fix every feature; nothing left to sample")
    return rendered


def _prompt_matrix(
    prompt: PromptSpec,
    vocab: Vocab,
    schema: Schema,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    is_id = vocab.id_of("is")
    comma_id = vocab.id_of(",")
    if prompt.mode == "random_init":
        name_ids = np.array([vocab.id_of(f.name) for f in schema.features])
        picks = rng.integers(len(name_ids), size=count)
        out = np.empty((count, 3), dtype=np.int64)
        out[:, 0] = vocab.bos_id
        out[:, 1] = name_ids[picks]
        out[:, 2] = is_id
        return out
    parts: list[int] = [vocab.bos_id]
    for name, value_text in _validate_fixed(prompt, schema):
        parts.append(vocab.id_of(name))
        parts.append(is_id)
        f = schema.feature(name)
        if f.kind == "categorical":
            parts.append(vocab.id_of(value_text))
        else:
            parts.extend(vocab.id_of(ch) for ch in value_text)
        parts.append(comma_id)
    return np.tile(np.array(parts, dtype=np.int64), (count, 1))


def _draw_batch(
    logits: np.ndarray, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    if temperature <= 0.0:
        return np.argmax(logits, axis=-1)
    z = logits / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(len(p))
    idx = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def _generate(
    state: ModelState,
    vocab: Vocab,
    schema: Schema,
    count: int,
    prompt: PromptSpec,
    rng: np.random.Generator,
) -> list[list[int] | None]:
    """Generate `count` sentences; None marks a row that never emitted eos."""
    ctx = state.config.context_length
    outs: list[list[int] | None] = [None] * count
    for base in range(0, count, _FORWARD_CHUNK):
        m = min(_FORWARD_CHUNK, count - base)
        cur = _prompt_matrix(prompt, vocab, schema, m, rng)
        if cur.shape[1] >= ctx:
            raise SchemaError("prompt does not fit the model context")
        active = np.arange(m)
        while len(active):
            logits, _ = forward_batch(state, cur)
            nxt = _draw_batch(logits[:, -1, :], prompt.temperature, rng)
            cur = np.concatenate([cur, nxt[:, None]], axis=1)
            finished = nxt == vocab.eos_id
            for local in np.flatnonzero(finished):
                outs[base + active[local]] = cur[local].tolist()
            if cur.shape[1] >= ctx:
                break  # unfinished rows stay None (truncated)
            keep = ~finished
            active = active[keep]
            cur = cur[keep]
    return outs


def sample_rows(
    state: ModelState,
    vocab: Vocab,
    schema: Schema,
    n_rows: int,
    prompt: PromptSpec = PromptSpec(),
    seed: int = 0,
) -> tuple[Table, SamplingReport]:
    """Sample rows until each slot decodes or exhausts its retries."""
    if n_rows < 0:
        raise ValueError("n_rows must be >= 0")
    if prompt.mode == "value_specified":
        _validate_fixed(prompt, schema)
    rng = np.random.default_rng(seed)
    fixed = dict(prompt.fixed)
    records: list[Record | None] = [None] * n_rows
    tally = DecodeTally()
    pending = list(range(n_rows))
    for _attempt in range(prompt.max_retries + 1):
        if not pending:
            break
        seqs = _generate(state, vocab, schema, len(pending), prompt, rng)
        still: list[int] = []
        for slot, seq in zip(pending, seqs):
            if seq is None:
                tally.add_failure(TRUNCATED)
                still.append(slot)
                continue
            text = detokenize(seq, vocab)
            try:
                rec = decode_text(text, schema)
            except DecodeError as e:
                tally.add_failure(e.kind)
                still.append(slot)
                continue
            for name, value in fixed.items():
                f = schema.feature(name)
                want = value if f.kind == "categorical" else f.canon(float(value))
                assert rec[name] == want, "fixed value changed during decode"
            records[slot] = rec
            tally.add_ok()
        pending = still
    rows = [r for r in records if r is not None]
    report = SamplingReport(
        rows_requested=n_rows,
        rows_emitted=len(rows),
        attempts=tally.attempts,
        decoded=tally.decoded,
        failures=dict(tally.failed),
        compliance=tally.compliance,
        retries_exhausted=len(pending),
        mode=prompt.mode,
        temperature=prompt.temperature,
    )
    return Table(schema, rows), report


# ---------------------------------------------------------------------------
# fairness quota planning


def group_label_counts(
    table: Table, sensitive: str, label: str
) -> dict[tuple[str, str], int]:
    counts: dict[tuple[str, str], int] = {}
    for r in table.rows:
        key = (str(r[sensitive]), str(r[label]))
        counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass(frozen=True)
class FairnessPlan:
    cells: tuple[tuple[str, str, int], ...]  # (group, label value, rows)
    prompts: tuple[tuple[PromptSpec, int], ...]
    budget: int
    reference_dpdiff: float
    predicted_dpdiff: float
    predicted_rates: dict[str, float] = field(default_factory=dict)


def _gap(pos: dict, tot: dict) -> float:
    rates = [pos[g] / tot[g] for g in pos if tot[g] > 0]
    if len(rates) < 2:
        return 0.0
    return max(rates) - min(rates)


def plan_fairness_quota(
    reference_counts: Mapping[tuple[str, str], int],
    controlled_fraction: float,
    n_total: int,
    sensitive: str,
    label: str,
    positive_label: str,
    negative_label: str | None = None,
    temperature: float = 1.0,
    max_retries: int = 8,
) -> FairnessPlan:
    """Allocate round(controlled_fraction * n_total) value-specified rows
    to (group, label) cells so the combined positive-rate gap is minimal.

    Water-filling: each unit goes to the cell that most reduces the gap;
    once no unit helps, the surplus is split proportionally to the
    reference cells (largest remainder), then single-unit moves polish
    any rounding drift.
    """
    if not (0.0 <= controlled_fraction <= 1.0):
        raise ValueError("controlled_fraction must be in [0, 1]")
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    labels = sorted({y for _, y in reference_counts} | {positive_label})
    if len(labels) > 2:
        raise ValueError(f"label must be binary, got {labels}")
    if negative_label is None:
        negative_label = next((y for y in labels if y != positive_label), None)
    if negative_label is None:
        raise ValueError(
            "negative label unknown: not in the counts and not given"
        )
    groups = sorted({g for g, _ in reference_counts})
    if not groups:
        raise ValueError("empty reference counts")
    pos = {g: reference_counts.get((g, positive_label), 0) for g in groups}
    tot = {
        g: pos[g] + reference_counts.get((g, negative_label), 0) for g in groups
    }
    reference_gap = _gap(pos, tot)
    budget = round(controlled_fraction * n_total)
    alloc = {(g, y): 0 for g in groups for y in (positive_label, negative_label)}

    def apply(cell: tuple[str, str], delta: int) -> None:
        g, y = cell
        alloc[cell] += delta
        tot[g] += delta
        if y == positive_label:
            pos[g] += delta

    remaining = budget
    while remaining > 0:
        base = _gap(pos, tot)
        best_cell, best_gap = None, base - 1e-15
        for g in groups:
            for y in (positive_label, negative_label):
                apply((g, y), +1)
                gap = _gap(pos, tot)
                apply((g, y), -1)
                if gap < best_gap:
                    best_cell, best_gap = (g, y), gap
        if best_cell is None:
            break
        apply(best_cell, +1)
        remaining -= 1

    if remaining > 0:
        # even split of the leftover, proportional to the reference cells
        total_ref = sum(reference_counts.values())
        quotas = {
            (g, y): remaining * reference_counts.get((g, y), 0) / total_ref
            for g in groups
            for y in (positive_label, negative_label)
        }
        floors = {c: int(math.floor(v)) for c, v in quotas.items()}
        gap_units = remaining - sum(floors.values())
        order = sorted(
            quotas, key=lambda c: (-(quotas[c] - floors[c]), groups.index(c[0]), c[1])
        )
        for c in order[:gap_units]:
            floors[c] += 1
        for c, k in floors.items():
            if k:
                apply(c, k)

        # polish rounding drift with single-unit moves
        for _ in range(4 * budget + 16):
            base = _gap(pos, tot)
            best = None
            for src in alloc:
                if alloc[src] == 0:
                    continue
                for dst in alloc:
                    if dst == src:
                        continue
                    apply(src, -1)
                    apply(dst, +1)
                    gap = _gap(pos, tot)
                    apply(dst, -1)
                    apply(src, +1)
                    if gap < base - 1e-12 and (best is None or gap < best[0]):
                        best = (gap, src, dst)
            if best is None:
                break
            apply(best[1], -1)
            apply(best[2], +1)

    cells = tuple(
        (g, y, alloc[(g, y)])
        for g in groups
        for y in (positive_label, negative_label)
    )
    prompts = tuple(
        (
            PromptSpec(
                mode="value_specified",
                fixed=((sensitive, g), (label, y)),
                temperature=temperature,
                max_retries=max_retries,
            ),
            k,
        )
        for g, y, k in cells
        if k > 0
    )
    rates = {g: (pos[g] / tot[g] if tot[g] else float("nan")) for g in groups}
    return FairnessPlan(
        cells=cells,
        prompts=prompts,
        budget=budget,
        reference_dpdiff=reference_gap,
        predicted_dpdiff=_gap(pos, tot),
        predicted_rates=rates,
    )


def sample_fair_mixture(
    state: ModelState,
    vocab: Vocab,
    schema: Schema,
    n_total: int,
    controlled_fraction: float,
    seed: int,
    temperature: float = 1.0,
    max_retries: int = 8,
) -> tuple[Table, FairnessPlan, dict]:
    """Uncontrolled batch plus planner-controlled value-specified rows.

    The planner's reference counts come from the uncontrolled batch
    itself, so the quota corrects the model's own skew.
    """
    if schema.sensitive is None:
        raise SchemaError("schema has no sensitive feature")
    sensitive, label = schema.sensitive, schema.target
    positive = schema.positive_label()
    budget = round(controlled_fraction * n_total)
    n_free = n_total - budget
    free_prompt = PromptSpec(
        mode="random_init", temperature=temperature, max_retries=max_retries
    )
    free_table, free_report = sample_rows(
        state, vocab, schema, n_free, free_prompt, seed=seed
    )
    counts = group_label_counts(free_table, sensitive, label)
    label_cats = schema.feature(label).categories
    negative = next(c for c in label_cats if c != positive)
    plan = plan_fairness_quota(
        counts,
        controlled_fraction,
        n_total,
        sensitive,
        label,
        positive,
        negative_label=negative,
        temperature=temperature,
        max_retries=max_retries,
    )
    rows = list(free_table.rows)
    part_reports = [free_report.to_dict()]
    for i, (prompt, count) in enumerate(plan.prompts):
        part, rep = sample_rows(
            state, vocab, schema, count, prompt, seed=seed + 1000 + i
        )
        rows.extend(part.rows)
        part_reports.append(rep.to_dict())
    combined = Table(schema, rows)
    return combined, plan, {"parts": part_reports}
