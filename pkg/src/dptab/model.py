"""Small decoder-only transformer with hand-written backprop.

Parameters are stored float32, all math runs in float64. The backward
pass can keep the batch axis on every weight gradient, which is what
per-example clipping needs; the same code path with the batch axis summed
out serves ordinary training.

Layout per block: x += Attn(LN(x)); x += FFN(LN(x)); rotary position
encoding on q/k (no positional parameters); bias-free linear maps; final
LayerNorm then an untied output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_LN_EPS = 1e-5
_NEG_INF = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    context_length: int = 256
    adapter_rank: int = 0
    dropout_prob: float = 0.0
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the reserved tokens")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "context_length": self.context_length,
            "adapter_rank": self.adapter_rank,
            "dropout_prob": self.dropout_prob,
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order; every consumer iterates this dict."""
    d, f, v, r = config.embed_dim, config.ffn_dim, config.vocab_size, config.adapter_rank
    shapes: dict[str, tuple[int, ...]] = {"emb": (v, d)}
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
            if r > 0:
                shapes[p + "attn." + w + "_a"] = (d, r)
                shapes[p + "attn." + w + "_b"] = (r, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.w2"] = (f, d)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["wout"] = (d, v)
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]  # float32, canonical order
    trainable: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.trainable:
            self.trainable = tuple(self.params)

    def set_trainable(self, names: Iterable[str]) -> None:
        names = tuple(names)
        for n in names:
            if n not in self.params:
                raise KeyError(f"unknown parameter {n!r}")
        # keep canonical order regardless of the order given
        self.trainable = tuple(n for n in self.params if n in set(names))


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Gaussian init, std 0.02; residual-output projections scaled by
    1/sqrt(2 * num_layers); norms at identity; adapter B-matrices zero."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(2.0 * config.num_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):  # norm gains
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or name.endswith("_b"):  # norm biases, adapter B
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            w = rng.normal(0.0, 0.02, size=shape)
            if name.endswith(("attn.wo", "ffn.w2")):
                w *= resid_scale
            params[name] = w.astype(np.float32)
    return ModelState(config=config, params=params)


def stage_trainable(config: ModelConfig, stage: int) -> tuple[str, ...]:
    """Parameter names updated per training stage.

    Full fine-tune (adapter_rank 0): stage 1 trains everything, stage 2
    freezes the embedding table. With adapters, both stages train only the
    adapter matrices, plus the embedding table in stage 1.
    """
    names = list(param_shapes(config))
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if config.adapter_rank > 0:
        keep = tuple(n for n in names if n.endswith(("_a", "_b")))
        return ("emb",) + keep if stage == 1 else keep
    if stage == 1:
        return tuple(names)
    return tuple(n for n in names if n != "emb")


# ---------------------------------------------------------------------------
# forward / backward


def _rope_tables(config: ModelConfig, t: int) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / config.head_dim)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)  # (t, half) each


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (B, T, H, hd) with hd in interleaved pairs
    b, t, h, hd = x.shape
    xp = x.reshape(b, t, h, hd // 2, 2)
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    even = xp[..., 0] * c - xp[..., 1] * s
    odd = xp[..., 0] * s + xp[..., 1] * c
    return np.stack([even, odd], axis=-1).reshape(b, t, h, hd)


def _rope_unapply(dx: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # inverse rotation = rotation by -angle
    b, t, h, hd = dx.shape
    xp = dx.reshape(b, t, h, hd // 2, 2)
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    even = xp[..., 0] * c + xp[..., 1] * s
    odd = -xp[..., 0] * s + xp[..., 1] * c
    return np.stack([even, odd], axis=-1).reshape(b, t, h, hd)


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, xhat, inv


def _layernorm_bwd(dout, xhat, inv, g, per_example: bool):
    # returns dx, dg, db
    if per_example:
        dg = np.einsum("btd,btd->bd", dout, xhat)
        db = dout.sum(axis=1)
    else:
        dg = np.einsum("btd,btd->d", dout, xhat)
        db = dout.sum(axis=(0, 1))
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu_fwd(u: np.ndarray) -> np.ndarray:
    t = _GELU_C * (u + _GELU_A * u**3)
    return 0.5 * u * (1.0 + np.tanh(t))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    t = _GELU_C * (u + _GELU_A * u**3)
    th = np.tanh(t)
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)


def _params64(state: ModelState) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in state.params.items()}


def _effective(p: dict[str, np.ndarray], prefix: str, w: str, rank: int) -> np.ndarray:
    base = p[prefix + w]
    if rank > 0:
        return base + p[prefix + w + "_a"] @ p[prefix + w + "_b"]
    return base


def forward_batch(
    state: ModelState,
    ids: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the model on right-padded id rows; returns (logits, cache).

    Pads may only appear after real tokens; causal masking then keeps them
    out of every real position's attention, so no key masking is needed.
    """
    cfg = state.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be (batch, time)")
    b, t = ids.shape
    if t > cfg.context_length:
        raise ValueError(f"sequence length {t} exceeds context {cfg.context_length}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    p = _params64(state)
    h, hd = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    cos, sin = _rope_tables(cfg, t)
    causal = np.triu(np.full((t, t), _NEG_INF), k=1)  # additive mask
    drop = cfg.dropout_prob if train else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("dropout requires an rng")

    x = p["emb"][ids]  # (B, T, D)
    cache: dict = {"ids": ids, "cos": cos, "sin": sin, "layers": [], "drop": drop}
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        lc: dict = {"x_in": x}
        h1, xhat1, inv1 = _layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        lc.update(h1=h1, xhat1=xhat1, inv1=inv1)
        wq = _effective(p, pre + "attn.", "wq", cfg.adapter_rank)
        wk = _effective(p, pre + "attn.", "wk", cfg.adapter_rank)
        wv = _effective(p, pre + "attn.", "wv", cfg.adapter_rank)
        wo = _effective(p, pre + "attn.", "wo", cfg.adapter_rank)
        q = (h1 @ wq).reshape(b, t, h, hd)
        k = (h1 @ wk).reshape(b, t, h, hd)
        v = (h1 @ wv).reshape(b, t, h, hd)
        qr = _rope_apply(q, cos, sin)
        kr = _rope_apply(k, cos, sin)
        scores = np.einsum("bihe,bjhe->bhij", qr, kr) * scale + causal
        scores -= scores.max(axis=-1, keepdims=True)
        ew = np.exp(scores)
        w = ew / ew.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bhij,bjhe->bihe", w, v).reshape(b, t, cfg.embed_dim)
        attn = ctx @ wo
        lc.update(qr=qr, kr=kr, v=v, w=w, ctx=ctx)
        if drop > 0.0:
            mask = (rng.random(attn.shape) >= drop) / (1.0 - drop)
            attn = attn * mask
            lc["drop_attn"] = mask
        x = x + attn
        lc["x_mid"] = x
        h2, xhat2, inv2 = _layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        lc.update(h2=h2, xhat2=xhat2, inv2=inv2)
        u = h2 @ p[pre + "ffn.w1"]
        act = _gelu_fwd(u)
        f = act @ p[pre + "ffn.w2"]
        lc.update(u=u, act=act)
        if drop > 0.0:
            mask = (rng.random(f.shape) >= drop) / (1.0 - drop)
            f = f * mask
            lc["drop_ffn"] = mask
        x = x + f
        cache["layers"].append(lc)
    hf, xhatf, invf = _layernorm_fwd(x, p["lnf.g"], p["lnf.b"])
    cache.update(hf=hf, xhatf=xhatf, invf=invf)
    logits = hf @ p["wout"]
    return logits, cache


def forward(state: ModelState, ids: Sequence[int]) -> np.ndarray:
    """Single-sequence forward; logits row j scores the token at j+1."""
    arr = np.asarray(ids, dtype=np.int64)[None, :]
    logits, _ = forward_batch(state, arr)
    return logits[0]


def backward_batch(
    state: ModelState,
    cache: dict,
    dlogits: np.ndarray,
    per_example: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of sum_b loss_b w.r.t. every parameter.

    With per_example=True each gradient keeps the leading batch axis,
    i.e. grads[name][b] is d loss_b / d param.
    """
    cfg = state.config
    p = _params64(state)
    ids = cache["ids"]
    b, t = ids.shape
    h, hd = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    cos, sin = cache["cos"], cache["sin"]
    drop = cache["drop"]
    grads: dict[str, np.ndarray] = {}

    def wsum(a: str, x_: np.ndarray, dy: np.ndarray) -> None:
        # gradient of y = x @ W accumulated for parameter `a`
        if per_example:
            grads[a] = np.einsum("bti,btj->bij", x_, dy)
        else:
            grads[a] = np.einsum("bti,btj->ij", x_, dy)

    def adapter_grads(prefix: str, w: str, x_: np.ndarray, dy: np.ndarray) -> None:
        a, bb = p[prefix + w + "_a"], p[prefix + w + "_b"]
        dy_bt = dy @ bb.T  # (B,T,r)
        xa = x_ @ a  # (B,T,r)
        if per_example:
            grads[prefix + w + "_a"] = np.einsum("bti,btr->bir", x_, dy_bt)
            grads[prefix + w + "_b"] = np.einsum("btr,btj->brj", xa, dy)
        else:
            grads[prefix + w + "_a"] = np.einsum("bti,btr->ir", x_, dy_bt)
            grads[prefix + w + "_b"] = np.einsum("btr,btj->rj", xa, dy)

    # output projection and final norm
    wsum("wout", cache["hf"], dlogits)
    dhf = dlogits @ p["wout"].T
    dx, dg, db = _layernorm_bwd(dhf, cache["xhatf"], cache["invf"], p["lnf.g"], per_example)
    grads["lnf.g"], grads["lnf.b"] = dg, db

    for i in reversed(range(cfg.num_layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]
        # FFN branch
        df = dx if drop == 0.0 else dx * lc["drop_ffn"]
        wsum(pre + "ffn.w2", lc["act"], df)
        dact = df @ p[pre + "ffn.w2"].T
        du = dact * _gelu_grad(lc["u"])
        wsum(pre + "ffn.w1", lc["h2"], du)
        dh2 = du @ p[pre + "ffn.w1"].T
        dx2, dg, db = _layernorm_bwd(dh2, lc["xhat2"], lc["inv2"], p[pre + "ln2.g"], per_example)
        grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg, db
        dx = dx + dx2
        # attention branch
        dattn = dx if drop == 0.0 else dx * lc["drop_attn"]
        wq = _effective(p, pre + "attn.", "wq", cfg.adapter_rank)
        wk = _effective(p, pre + "attn.", "wk", cfg.adapter_rank)
        wv = _effective(p, pre + "attn.", "wv", cfg.adapter_rank)
        wo = _effective(p, pre + "attn.", "wo", cfg.adapter_rank)
        wsum(pre + "attn.wo", lc["ctx"], dattn)
        if cfg.adapter_rank > 0:
            adapter_grads(pre + "attn.", "wo", lc["ctx"], dattn)
        dctx = (dattn @ wo.T).reshape(b, t, h, hd)
        dw = np.einsum("bihe,bjhe->bhij", dctx, lc["v"])
        dv = np.einsum("bhij,bihe->bjhe", lc["w"], dctx)
        wmat = lc["w"]
        ds = wmat * (dw - (dw * wmat).sum(axis=-1, keepdims=True))
        dqr = np.einsum("bhij,bjhe->bihe", ds, lc["kr"]) * scale
        dkr = np.einsum("bhij,bihe->bjhe", ds, lc["qr"]) * scale
        dq = _rope_unapply(dqr, cos, sin).reshape(b, t, cfg.embed_dim)
        dk = _rope_unapply(dkr, cos, sin).reshape(b, t, cfg.embed_dim)
        dvf = dv.reshape(b, t, cfg.embed_dim)
        h1 = lc["h1"]
        wsum(pre + "attn.wq", h1, dq)
        wsum(pre + "attn.wk", h1, dk)
        wsum(pre + "attn.wv", h1, dvf)
        if cfg.adapter_rank > 0:
            adapter_grads(pre + "attn.", "wq", h1, dq)
            adapter_grads(pre + "attn.", "wk", h1, dk)
            adapter_grads(pre + "attn.", "wv", h1, dvf)
        dh1 = dq @ wq.T + dk @ wk.T + dvf @ wv.T
        dx1, dg, db = _layernorm_bwd(dh1, lc["xhat1"], lc["inv1"], p[pre + "ln1.g"], per_example)
        grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg, db
        dx = dx + dx1

    # embedding scatter
    v_ = cfg.vocab_size
    if per_example:
        demb = np.zeros((b, v_, cfg.embed_dim))
        np.add.at(demb, (np.arange(b)[:, None], ids), dx)
    else:
        demb = np.zeros((v_, cfg.embed_dim))
        np.add.at(demb, ids.reshape(-1), dx.reshape(-1, cfg.embed_dim))
    grads["emb"] = demb
    return grads


# ---------------------------------------------------------------------------
# parameter vector helpers


def num_params(state: ModelState, names: Sequence[str] | None = None) -> int:
    names = state.trainable if names is None else names
    return int(sum(state.params[n].size for n in names))


def param_vector(state: ModelState, names: Sequence[str] | None = None) -> np.ndarray:
    names = state.trainable if names is None else names
    if not names:
        return np.zeros(0)
    return np.concatenate([state.params[n].astype(np.float64).ravel() for n in names])


def set_param_vector(state: ModelState, vec: np.ndarray, names: Sequence[str] | None = None) -> None:
    names = state.trainable if names is None else names
    off = 0
    for n in names:
        sz = state.params[n].size
        state.params[n] = (
            vec[off : off + sz].reshape(state.params[n].shape).astype(np.float32)
        )
        off += sz
    if off != len(vec):
        raise ValueError("vector length does not match parameter sizes")


def flatten_grads(
    grads: dict[str, np.ndarray],
    names: Sequence[str],
    per_example: bool,
    batch: int | None = None,
) -> np.ndarray:
    """Concatenate selected gradients in canonical order."""
    if not names:
        return np.zeros((batch, 0)) if per_example else np.zeros(0)
    if per_example:
        return np.concatenate(
            [grads[n].reshape(grads[n].shape[0], -1) for n in names], axis=1
        )
    return np.concatenate([grads[n].ravel() for n in names])


def sample_next(
    state: ModelState,
    prefix: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
) -> int:
    """Draw the next token id; temperature <= 0 means argmax."""
    logits = forward(state, prefix)[-1]
    return int(_draw(logits, temperature, rng))


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    z -= z.max()
    prob = np.exp(z)
    prob /= prob.sum()
    return int(rng.choice(len(prob), p=prob))
