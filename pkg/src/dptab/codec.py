"""Record <-> sentence codec.

A record is rendered as one clause per feature, "{name} is {value}",
joined by ", ", with the feature order given by a permutation. Decoding
is strict: every feature exactly once, categories from the closed set,
numbers in canonical fixed-decimal form and inside the schema range.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import Record, Schema, SchemaError

# Decode failure kinds, in the order they are checked.
FAILURE_KINDS = (
    "bad_clause",
    "unknown_feature",
    "duplicate_feature",
    "bad_category",
    "bad_number",
    "out_of_range",
    "missing_feature",
)


class DecodeError(ValueError):
    """A sentence that does not decode to a schema-valid record."""

    def __init__(self, kind: str, message: str):
        assert kind in FAILURE_KINDS
        super().__init__(message)
        self.kind = kind


def encode_record(
    record: Record,
    schema: Schema,
    permutation: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> str:
    """Render a record as a sentence; feature order from `permutation`,
    a fresh random order drawn from `rng`, or schema order."""
    n = len(schema.features)
    if permutation is None:
        perm = rng.permutation(n) if rng is not None else range(n)
    else:
        perm = permutation
        if sorted(perm) != list(range(n)):
            raise SchemaError(f"invalid permutation {list(perm)!r}")
    clauses = []
    for i in perm:
        f = schema.features[int(i)]
        clauses.append(f"{f.name} is {f.render(record[f.name])}")
    return ", ".join(clauses)


def _clause_spans(text: str, schema: Schema) -> list[str]:
    """Split a sentence into clauses at every ', {name} is' boundary."""
    alt = "|".join(re.escape(n) for n in schema.names)
    bounds = [m.start() for m in re.finditer(f", (?:{alt}) is", text)]
    pieces = []
    prev = 0
    for b in bounds:
        pieces.append(text[prev:b])
        prev = b + 2  # skip ", "
    pieces.append(text[prev:])
    return pieces


def parse_clause(clause: str, schema: Schema) -> tuple[str, str]:
    """Split one clause into (feature name, value text)."""
    # longest name first so a name that prefixes another cannot shadow it
    for name in sorted(schema.names, key=len, reverse=True):
        head = name + " is "
        if clause.startswith(head):
            return name, clause[len(head):]
    raise DecodeError("bad_clause", f"clause {clause!r} does not match '<name> is <value>'")


def decode_text(text: str, schema: Schema) -> Record:
    """Parse a sentence back into a typed record, or raise DecodeError."""
    if not text.strip():
        raise DecodeError("bad_clause", "empty sentence")
    record: Record = {}
    for clause in _clause_spans(text, schema):
        name, value = parse_clause(clause, schema)
        if name in record:
            raise DecodeError("duplicate_feature", f"feature {name!r} appears twice")
        f = schema.feature(name)
        if f.kind == "categorical":
            if value not in f.categories:
                raise DecodeError(
                    "bad_category", f"{value!r} is not a category of {name!r}"
                )
            record[name] = value
        else:
            try:
                x = f.canon(float(value))
            except ValueError:
                raise DecodeError(
                    "bad_number", f"{name!r} value {value!r} is not a number"
                ) from None
            if f.render(x) != value:
                # enforces exact canonical rendering: digit count, no '+',
                # no leading zeros, no '-0', no exponent notation
                raise DecodeError(
                    "bad_number",
                    f"{name!r} value {value!r} is not in canonical "
                    f"{f.decimals}-decimal form",
                )
            if not (f.minimum <= x <= f.maximum):
                raise DecodeError(
                    "out_of_range",
                    f"{name!r} value {x} outside [{f.minimum}, {f.maximum}]",
                )
            record[name] = x
    for f in schema.features:
        if f.name not in record:
            raise DecodeError("missing_feature", f"feature {f.name!r} is missing")
    return {f.name: record[f.name] for f in schema.features}


@dataclass
class DecodeTally:
    """Counter over decode attempts, keyed by failure kind."""

    decoded: int = 0
    failed: dict[str, int] | None = None

    def __post_init__(self) -> None:
        if self.failed is None:
            self.failed = {}

    def add_ok(self) -> None:
        self.decoded += 1

    def add_failure(self, kind: str) -> None:
        self.failed[kind] = self.failed.get(kind, 0) + 1

    @property
    def attempts(self) -> int:
        return self.decoded + sum(self.failed.values())

    @property
    def compliance(self) -> float:
        n = self.attempts
        return self.decoded / n if n else 0.0
