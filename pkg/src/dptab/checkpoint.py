"""Binary checkpoint: weights + vocab + schema + privacy ledger.

Layout: 4-byte magic, u64 little-endian header length, UTF-8 JSON header
(model config, vocab, schema, ledger, trainable set, tensor manifest,
free-form metadata), raw little-endian float32 tensors in manifest
order, and a trailing sha256 over everything before it. Loading verifies
the magic and the checksum, so truncation or bit damage is detected.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .accountant import PrivacyLedger
from .model import ModelConfig, ModelState, param_shapes
from .schema import Schema, schema_from_dict, schema_to_dict
from .tokenizer import Vocab

MAGIC = b"DTB1"


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    state: ModelState
    vocab: Vocab
    schema: Schema
    ledger: PrivacyLedger
    meta: dict


def save_checkpoint(
    path: str,
    state: ModelState,
    vocab: Vocab,
    schema: Schema,
    ledger: PrivacyLedger,
    meta: dict | None = None,
) -> None:
    manifest = [[name, list(p.shape)] for name, p in state.params.items()]
    header = {
        "model_config": state.config.to_dict(),
        "vocab": list(vocab.tokens),
        "schema": schema_to_dict(schema),
        "ledger": ledger.to_dict(),
        "trainable": list(state.trainable),
        "manifest": manifest,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for name, _ in manifest:
        blob += np.ascontiguousarray(state.params[name], dtype="<f4").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint")
    digest = blob[-32:]
    if hashlib.sha256(blob[:-32]).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")
    off = len(MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None
    off += header_len
    config = ModelConfig.from_dict(header["model_config"])
    expected = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name, shape in header["manifest"]:
        shape = tuple(int(s) for s in shape)
        if name not in expected or expected[name] != shape:
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[off : off + size], dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
        off += size
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: missing tensors")
    if off != len(blob) - 32:
        raise CheckpointError(f"{path}: trailing bytes in tensor section")
    state = ModelState(
        config=config, params=params, trainable=tuple(header["trainable"])
    )
    return CheckpointBundle(
        state=state,
        vocab=Vocab(tokens=tuple(header["vocab"])),
        schema=schema_from_dict(header["schema"]),
        ledger=PrivacyLedger.from_dict(header["ledger"]),
        meta=header.get("meta", {}),
    )
