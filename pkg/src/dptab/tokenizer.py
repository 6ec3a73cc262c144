"""Word-level vocabulary and tokenization for template sentences.

Tokens are: three reserved ids (pad/bos/eos), feature names, the template
words "is" and ",", category strings (atomic, spaces included), and the
numeric characters 0-9, '.', '-' when the schema has a numeric feature.
Duplicate strings collapse to one id (a category shared by two features,
or a category equal to a feature name, is a single token).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schema import (
    BOS_TOKEN,
    EOS_TOKEN,
    PAD_TOKEN,
    Schema,
)

NUMERIC_CHARS = tuple("0123456789") + (".", "-")
_IS = "is"
_COMMA = ","


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index:
            object.__setattr__(
                self, "index", {t: i for i, t in enumerate(self.tokens)}
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in vocab") from None

    def digit_ids(self) -> np.ndarray:
        """Ids of '0'..'9' in digit order."""
        return np.array([self.id_of(str(d)) for d in range(10)], dtype=np.int64)


def build_vocab(schema: Schema) -> Vocab:
    """Deterministic vocab: reserved, names, 'is', ',', categories
    (schema order), then numeric characters if any feature is numeric."""
    tokens: list[str] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN]
    seen = set(tokens)

    def add(t: str) -> None:
        if t not in seen:
            seen.add(t)
            tokens.append(t)

    for f in schema.features:
        add(f.name)
    add(_IS)
    add(_COMMA)
    for f in schema.features:
        if f.kind == "categorical":
            for c in f.categories:
                add(c)
    if any(f.kind == "numeric" for f in schema.features):
        for c in NUMERIC_CHARS:
            add(c)
    return Vocab(tokens=tuple(tokens))


@dataclass(frozen=True)
class NumericSpan:
    """Half-open id range [start, end) of one numeric value's characters."""

    start: int
    end: int
    value: float
    feature: str


@dataclass(frozen=True)
class TokenizedExample:
    ids: np.ndarray  # int64, starts with bos, ends with eos
    format_mask: np.ndarray  # bool, True where the token is template scaffold
    numeric_spans: tuple[NumericSpan, ...]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


def sentence_token_length(schema: Schema, record: dict) -> int:
    """Token count of the encoded record incl. bos/eos (permutation-invariant)."""
    n = 2  # bos, eos
    for i, f in enumerate(schema.features):
        n += 2  # name, "is"
        if i > 0:
            n += 1  # ","
        if f.kind == "categorical":
            n += 1
        else:
            n += len(f.render(record[f.name]))
    return n


def tokenize(text: str, vocab: Vocab, schema: Schema) -> TokenizedExample:
    """Tokenize a template sentence, marking format vs tabular positions.

    Format positions: bos, eos, feature names, "is", ",". Tabular
    positions: category tokens and numeric characters. Each numeric value
    contributes one NumericSpan over its character tokens.
    """
    from .codec import _clause_spans, parse_clause  # local to avoid cycle

    ids: list[int] = [vocab.bos_id]
    fmt: list[bool] = [True]
    spans: list[NumericSpan] = []
    for ci, clause in enumerate(_clause_spans(text, schema)):
        if ci > 0:
            ids.append(vocab.id_of(_COMMA))
            fmt.append(True)
        name, value = parse_clause(clause, schema)
        f = schema.feature(name)
        ids.append(vocab.id_of(name))
        fmt.append(True)
        ids.append(vocab.id_of(_IS))
        fmt.append(True)
        if f.kind == "categorical":
            ids.append(vocab.id_of(value))
            fmt.append(False)
        else:
            start = len(ids)
            for ch in value:
                ids.append(vocab.id_of(ch))
                fmt.append(False)
            spans.append(
                NumericSpan(
                    start=start,
                    end=len(ids),
                    value=f.canon(float(value)),
                    feature=name,
                )
            )
    ids.append(vocab.eos_id)
    fmt.append(True)
    return TokenizedExample(
        ids=np.array(ids, dtype=np.int64),
        format_mask=np.array(fmt, dtype=bool),
        numeric_spans=tuple(spans),
        text=text,
    )


def detokenize(ids, vocab: Vocab) -> str:
    """Rebuild sentence text from ids; pad/bos/eos are dropped.

    Joining rules: no space before ',', no space between consecutive
    numeric characters, single space otherwise.
    """
    numeric = set(NUMERIC_CHARS)
    parts: list[str] = []
    prev: str | None = None
    for i in ids:
        i = int(i)
        if i in (vocab.pad_id, vocab.bos_id, vocab.eos_id):
            continue
        tok = vocab.tokens[i]
        if prev is None:
            parts.append(tok)
        elif tok == _COMMA:
            parts.append(tok)
        elif tok in numeric and prev in numeric:
            parts.append(tok)
        else:
            parts.append(" " + tok)
        prev = tok
    return "".join(parts)
