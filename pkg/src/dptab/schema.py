"""Tabular schema, typed records, and CSV round-trips.

A Schema is an ordered list of features, each either categorical (closed
set of strings) or numeric (inclusive float range with a fixed number of
decimals). Numeric cell values are always held in canonical form: the
float obtained by re-parsing the fixed-decimal rendering, so that every
value survives an encode/decode round-trip bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Strings with reserved meaning at the token level; data may not use them.
PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN)

MAX_DECIMALS = 6

_NUMERIC_RE = re.compile(r"^-?\d+(\.\d+)?$")

Record = dict[str, object]


class SchemaError(ValueError):
    """Raised when a schema or a table violates schema constraints."""


@dataclass(frozen=True)
class FeatureSpec:
    """One column: name plus either a category set or a numeric range."""

    name: str
    kind: str  # "categorical" | "numeric"
    categories: tuple[str, ...] = ()
    minimum: float = 0.0
    maximum: float = 0.0
    decimals: int = 0

    def render(self, value: object) -> str:
        """Canonical text form of a cell value."""
        if self.kind == "categorical":
            return str(value)
        return f"{float(value):.{self.decimals}f}"

    def canon(self, value: float) -> float:
        """Round to the feature's decimals and normalize -0.0."""
        v = float(f"{float(value):.{self.decimals}f}")
        return 0.0 if v == 0.0 else v


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    target: str
    sensitive: str | None = None

    def __post_init__(self) -> None:
        validate_schema(self)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"no feature named {name!r}")

    def positive_label(self) -> str:
        """Convention: last category of the (binary) target feature."""
        t = self.feature(self.target)
        if t.kind != "categorical":
            raise SchemaError(f"target {self.target!r} is not categorical")
        return t.categories[-1]


def validate_schema(schema: Schema) -> None:
    names = [f.name for f in schema.features]
    if not names:
        raise SchemaError("schema has no features")
    if len(set(names)) != len(names):
        raise SchemaError("duplicate feature names")
    for n in names:
        if not n:
            raise SchemaError("empty feature name")
        if ", " in n:
            raise SchemaError(f"feature name {n!r} contains ', '")
        if n in RESERVED_TOKENS:
            raise SchemaError(f"feature name {n!r} is a reserved token")
    for a in names:
        for b in names:
            # "Age" next to "Age is ..." would make clause boundaries ambiguous.
            if a != b and b.startswith(a + " is"):
                raise SchemaError(
                    f"feature name {b!r} extends {a!r} via ' is'; decoding "
                    "would be ambiguous"
                )
    for f in schema.features:
        if f.kind == "categorical":
            if not f.categories:
                raise SchemaError(f"feature {f.name!r} has no categories")
            if len(set(f.categories)) != len(f.categories):
                raise SchemaError(f"feature {f.name!r} has duplicate categories")
            for c in f.categories:
                if not c:
                    raise SchemaError(f"feature {f.name!r} has an empty category")
                if c in RESERVED_TOKENS:
                    raise SchemaError(
                        f"category {c!r} of {f.name!r} is a reserved token"
                    )
                for n in names:
                    if f", {n} is" in c:
                        raise SchemaError(
                            f"category {c!r} of {f.name!r} contains the clause "
                            f"delimiter ', {n} is' and could not be decoded"
                        )
        elif f.kind == "numeric":
            if not (math.isfinite(f.minimum) and math.isfinite(f.maximum)):
                raise SchemaError(f"feature {f.name!r} has non-finite bounds")
            if f.minimum > f.maximum:
                raise SchemaError(f"feature {f.name!r} has minimum > maximum")
            if not (0 <= f.decimals <= MAX_DECIMALS):
                raise SchemaError(
                    f"feature {f.name!r} decimals must be in [0, {MAX_DECIMALS}]"
                )
            if f.canon(f.minimum) != f.minimum or f.canon(f.maximum) != f.maximum:
                raise SchemaError(
                    f"feature {f.name!r} bounds are not canonical at "
                    f"{f.decimals} decimals"
                )
        else:
            raise SchemaError(f"feature {f.name!r} has unknown kind {f.kind!r}")
    if schema.target not in names:
        raise SchemaError(f"target {schema.target!r} is not a feature")
    if schema.sensitive is not None:
        if schema.sensitive not in names:
            raise SchemaError(f"sensitive {schema.sensitive!r} is not a feature")
        if schema.feature(schema.sensitive).kind != "categorical":
            raise SchemaError(
                f"sensitive feature {schema.sensitive!r} must be categorical"
            )


@dataclass
class Table:
    schema: Schema
    rows: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[object]:
        return [r[name] for r in self.rows]

    def take(self, indices: Iterable[int]) -> "Table":
        return Table(self.schema, [self.rows[i] for i in indices])


def validate_record(record: Record, schema: Schema, where: str = "record") -> Record:
    """Check and canonicalize one record in schema feature order."""
    out: Record = {}
    for f in schema.features:
        if f.name not in record:
            raise SchemaError(f"{where}: missing feature {f.name!r}")
        v = record[f.name]
        if f.kind == "categorical":
            if not isinstance(v, str) or v not in f.categories:
                raise SchemaError(
                    f"{where}: {v!r} is not a category of {f.name!r}"
                )
            out[f.name] = v
        else:
            try:
                x = float(v)  # type: ignore[arg-type]
            except (TypeError, ValueError):
                raise SchemaError(
                    f"{where}: {f.name!r} value {v!r} is not numeric"
                ) from None
            if f.canon(x) != x:
                raise SchemaError(
                    f"{where}: {f.name!r} value {x!r} has more than "
                    f"{f.decimals} decimals"
                )
            if not (f.minimum <= x <= f.maximum):
                raise SchemaError(
                    f"{where}: {f.name!r} value {x!r} outside "
                    f"[{f.minimum}, {f.maximum}]"
                )
            out[f.name] = x
    extra = set(record) - set(schema.names)
    if extra:
        raise SchemaError(f"{where}: unknown features {sorted(extra)}")
    return out


# ---------------------------------------------------------------------------
# CSV I/O


def _read_raw_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty CSV") from None
        rows = [row for row in reader if row]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(
                f"{path}: row {i + 1} has {len(row)} cells, expected {len(header)}"
            )
    return header, rows


def infer_schema(
    path: str,
    target: str | None = None,
    sensitive: str | None = None,
) -> Schema:
    """Infer feature kinds from a CSV: numeric iff every cell parses.

    Categories are stored sorted; numeric bounds come from the data and
    decimals from the longest fractional part seen.
    """
    header, rows = _read_raw_csv(path)
    feats: list[FeatureSpec] = []
    for j, name in enumerate(header):
        col = [row[j].strip() for row in rows]
        if col and all(_NUMERIC_RE.match(c) for c in col):
            decimals = 0
            for c in col:
                if "." in c:
                    decimals = max(decimals, len(c.split(".", 1)[1]))
            if decimals > MAX_DECIMALS:
                raise SchemaError(
                    f"{name!r}: {decimals} decimals exceeds cap {MAX_DECIMALS}"
                )
            vals = [float(f"{float(c):.{decimals}f}") for c in col]
            feats.append(
                FeatureSpec(
                    name=name,
                    kind="numeric",
                    minimum=min(vals),
                    maximum=max(vals),
                    decimals=decimals,
                )
            )
        else:
            feats.append(
                FeatureSpec(
                    name=name,
                    kind="categorical",
                    categories=tuple(sorted(set(col))),
                )
            )
    return Schema(
        features=tuple(feats),
        target=target if target is not None else header[-1],
        sensitive=sensitive,
    )


def load_csv(path: str, schema: Schema | None = None) -> Table:
    """Load a CSV into a validated Table. Lines starting with '#' are skipped."""
    if schema is None:
        schema = infer_schema(path)
    header, rows = _read_raw_csv(path)
    if set(header) != set(schema.names):
        missing = set(schema.names) - set(header)
        extra = set(header) - set(schema.names)
        raise SchemaError(
            f"{path}: header mismatch (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    order = [header.index(n) for n in schema.names]
    out: list[Record] = []
    for i, row in enumerate(rows):
        rec = {n: row[j].strip() for n, j in zip(schema.names, order)}
        typed: Record = {}
        for f in schema.features:
            cell = rec[f.name]
            if f.kind == "numeric":
                try:
                    typed[f.name] = float(cell)
                except ValueError:
                    raise SchemaError(
                        f"{path}: row {i + 1}: {f.name!r} value {cell!r} "
                        "is not numeric"
                    ) from None
            else:
                typed[f.name] = cell
        out.append(validate_record(typed, schema, where=f"{path}: row {i + 1}"))
    return Table(schema, out)


def save_csv(table: Table, path: str, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment is not None:
            fh.write("# " + comment.replace("\n", " ") + "\n")
        writer = csv.writer(fh)
        writer.writerow(table.schema.names)
        for r in table.rows:
            writer.writerow(
                [table.schema.feature(n).render(r[n]) for n in table.schema.names]
            )


# ---------------------------------------------------------------------------
# Schema JSON


def schema_to_dict(schema: Schema) -> dict:
    return {
        "features": [
            {
                "name": f.name,
                "kind": f.kind,
                **(
                    {"categories": list(f.categories)}
                    if f.kind == "categorical"
                    else {
                        "minimum": f.minimum,
                        "maximum": f.maximum,
                        "decimals": f.decimals,
                    }
                ),
            }
            for f in schema.features
        ],
        "target": schema.target,
        "sensitive": schema.sensitive,
    }


def schema_from_dict(d: dict) -> Schema:
    feats = []
    for fd in d["features"]:
        if fd["kind"] == "categorical":
            feats.append(
                FeatureSpec(
                    name=fd["name"],
                    kind="categorical",
                    categories=tuple(fd["categories"]),
                )
            )
        else:
            feats.append(
                FeatureSpec(
                    name=fd["name"],
                    kind="numeric",
                    minimum=float(fd["minimum"]),
                    maximum=float(fd["maximum"]),
                    decimals=int(fd["decimals"]),
                )
            )
    return Schema(
        features=tuple(feats),
        target=d["target"],
        sensitive=d.get("sensitive"),
    )


def save_schema(schema: Schema, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_dict(schema), fh, indent=2)
        fh.write("\n")


def load_schema(path: str) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return schema_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Table operations


def split_table(table: Table, train_fraction: float, seed: int) -> tuple[Table, Table]:
    """Seeded shuffle split; train gets floor(fraction * N) rows."""
    if not (0.0 < train_fraction < 1.0):
        raise SchemaError(f"train_fraction {train_fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(table))
    n_train = int(math.floor(train_fraction * len(table)))
    return table.take(perm[:n_train]), table.take(perm[n_train:])


def generate_random_table(schema: Schema, n_rows: int, seed: int) -> Table:
    """Schema-valid rows with uniform marginals; no data dependence.

    Categorical cells are uniform over categories; numeric cells are uniform
    over the grid of representable values (multiples of 10**-decimals) inside
    [minimum, maximum], so the endpoints are as likely as interior points.
    """
    rng = np.random.default_rng(seed)
    rows: list[Record] = []
    for _ in range(n_rows):
        rec: Record = {}
        for f in schema.features:
            if f.kind == "categorical":
                rec[f.name] = f.categories[int(rng.integers(len(f.categories)))]
            else:
                step = 10.0 ** (-f.decimals)
                n_steps = int(round((f.maximum - f.minimum) / step))
                k = int(rng.integers(n_steps + 1))
                rec[f.name] = f.canon(f.minimum + k * step)
        rows.append(rec)
    return Table(schema, rows)
