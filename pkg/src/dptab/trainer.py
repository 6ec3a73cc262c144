"""Two-stage fine-tuning with differentially private stage 2.

Stage 1 teaches the sentence format on schema-valid random rows (plain
cross-entropy, ordinary Adam, no privacy cost). Stage 2 runs DPSGD over
the sensitive rows with the combined objective: per-example gradients
clipped to C, summed, Gaussian noise N(0, (sigma C)^2 I) added, and the
sum divided by the expected batch size q*N before an Adam update. An
empty Poisson batch still consumes a step and an independent noise draw.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .accountant import PrivacyLedger, PrivacySpec
from .codec import encode_record
from .losses import (
    LossSpec,
    build_lambda_map,
    combined_loss,
    stage1_ce,
    stage1_ce_with_grad,
)
from .model import (
    ModelConfig,
    ModelState,
    backward_batch,
    flatten_grads,
    forward_batch,
    init_model,
    num_params,
    stage_trainable,
)
from .schema import Record, Schema, Table, generate_random_table
from .tokenizer import (
    TokenizedExample,
    Vocab,
    build_vocab,
    sentence_token_length,
    tokenize,
)

TRAIN_MODES = ("two_stage", "single_stage")


@dataclass(frozen=True)
class StageOneConfig:
    epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 64
    random_rows: int | None = None  # default: max(len(train), 2000)


@dataclass(frozen=True)
class StageTwoConfig:
    epochs: int = 4
    learning_rate: float = 5e-4
    expected_batch_size: int = 128
    epsilon: float = 1.0
    delta: float = 1e-6
    clip_norm: float = 1.0
    noise_multiplier: float | None = None  # None: calibrate from the budget
    non_private: bool = False


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    mode: str = "two_stage"
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    context_length: int = 256
    adapter_rank: int = 0
    dropout_prob: float = 0.0
    alpha: float = 0.65
    beta: float = 1.0
    nul_mode: str = "soft_digit"
    lambda_mode: str = "range"
    stage1: StageOneConfig = field(default_factory=StageOneConfig)
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)
    eval_fraction: float = 0.05
    eval_max_rows: int = 256
    probe_rows: int = 200
    probe_temperature: float = 1.0
    grad_chunk: int = 32

    def __post_init__(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            context_length=self.context_length,
            adapter_rank=self.adapter_rank,
            dropout_prob=self.dropout_prob,
        )


class AdamOptimizer:
    """Vector Adam; step() maps a gradient to the update to subtract."""

    def __init__(
        self,
        n_params: int,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def apply_update(state: ModelState, names: Sequence[str], update: np.ndarray) -> None:
    """Subtract a flat update vector from the named parameters."""
    off = 0
    for n in names:
        p = state.params[n]
        sz = p.size
        new = p.astype(np.float64) - update[off : off + sz].reshape(p.shape)
        state.params[n] = new.astype(np.float32)
        off += sz
    if off != len(update):
        raise ValueError("update length does not match parameters")


def _pad_batch(examples: Sequence[TokenizedExample]) -> np.ndarray:
    t = max(len(e) for e in examples)
    ids = np.zeros((len(examples), t), dtype=np.int64)  # 0 is the pad id
    for i, e in enumerate(examples):
        ids[i, : len(e)] = e.ids
    return ids


def loss_and_per_example_grads(
    state: ModelState,
    examples: Sequence[TokenizedExample],
    vocab: Vocab,
    loss_spec: LossSpec,
    chunk: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Combined loss and flat per-example gradients over state.trainable."""
    names = state.trainable
    p_total = num_params(state, names)
    b = len(examples)
    losses = np.zeros(b)
    grads = np.zeros((b, p_total))
    for lo in range(0, b, chunk):
        part = examples[lo : lo + chunk]
        ids = _pad_batch(part)
        logits, cache = forward_batch(state, ids)
        dlogits = np.zeros_like(logits)
        for j, ex in enumerate(part):
            l = len(ex)
            value, dl = combined_loss(logits[j, :l], ex, vocab, loss_spec)
            if not math.isfinite(value):
                raise ValueError(f"non-finite loss for example {ex.text!r}")
            losses[lo + j] = value
            dlogits[j, :l] = dl
        if p_total:
            g = backward_batch(state, cache, dlogits, per_example=True)
            grads[lo : lo + len(part)] = flatten_grads(
                g, names, per_example=True, batch=len(part)
            )
    return losses, grads


def clip_gradients(per_example: np.ndarray, clip_norm: float):
    """Scale each row to L2 norm at most clip_norm."""
    norms = np.linalg.norm(per_example, axis=1)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-12))
    return per_example * factors[:, None], norms


@dataclass
class StepStats:
    step: int
    losses: np.ndarray
    raw_norms: np.ndarray
    clipped_norms: np.ndarray
    noise: np.ndarray | None
    batch_size: int


def dpsgd_step(
    state: ModelState,
    examples: Sequence[TokenizedExample],
    vocab: Vocab,
    loss_spec: LossSpec,
    clip_norm: float,
    sigma: float,
    expected_batch_size: float,
    optimizer: AdamOptimizer,
    noise_rng: np.random.Generator,
    step_index: int = 0,
    chunk: int = 32,
) -> StepStats:
    """One DPSGD update: clip per example, sum, noise, normalize, Adam."""
    names = state.trainable
    p_total = num_params(state, names)
    if expected_batch_size <= 0:
        raise ValueError("expected_batch_size must be positive")
    if examples:
        losses, per_grads = loss_and_per_example_grads(
            state, examples, vocab, loss_spec, chunk=chunk
        )
        clipped, raw_norms = clip_gradients(per_grads, clip_norm)
        total = clipped.sum(axis=0)
        clipped_norms = np.linalg.norm(clipped, axis=1)
    else:
        losses = np.zeros(0)
        raw_norms = np.zeros(0)
        clipped_norms = np.zeros(0)
        total = np.zeros(p_total)
    noise = None
    if sigma > 0.0:
        noise = noise_rng.normal(0.0, sigma * clip_norm, size=p_total)
        total = total + noise
    update = optimizer.step(total / expected_batch_size)
    apply_update(state, names, update)
    return StepStats(
        step=step_index,
        losses=losses,
        raw_norms=raw_norms,
        clipped_norms=clipped_norms,
        noise=noise,
        batch_size=len(examples),
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainerHooks:
    """Optional test/telemetry hooks; all default to no-ops."""

    on_stage_data: Callable[[int, Table, str], None] | None = None
    on_step: Callable[[StepStats], None] | None = None

    def stage_data(self, stage: int, table: Table, provenance: str) -> None:
        if self.on_stage_data is not None:
            self.on_stage_data(stage, table, provenance)

    def step(self, stats: StepStats) -> None:
        if self.on_step is not None:
            self.on_step(stats)


@dataclass
class TrainingReport:
    mode: str
    n_train_rows: int
    n_eval_rows: int
    stage1_epochs: list[dict] = field(default_factory=list)
    stage2_epochs: list[dict] = field(default_factory=list)
    stage1_compliance: float | None = None
    final_compliance: float | None = None
    sample_rate: float = 0.0
    sigma: float = 0.0
    steps_planned: int = 0
    steps_executed: int = 0
    spent_epsilon: float = 0.0
    epsilon_target: float = 0.0
    delta: float = 0.0
    non_private: bool = False
    halted_on_budget: bool = False

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["spent_epsilon"] = (
            None if math.isinf(self.spent_epsilon) else self.spent_epsilon
        )
        return d


@dataclass
class TrainResult:
    state: ModelState
    vocab: Vocab
    schema: Schema
    ledger: PrivacyLedger
    report: TrainingReport
    privacy: PrivacySpec | None


def measure_perplexity(
    state: ModelState, examples: Sequence[TokenizedExample]
) -> float:
    """exp of mean per-token cross-entropy over all predicted positions."""
    if not examples:
        return float("nan")
    total, count = 0.0, 0
    for lo in range(0, len(examples), 64):
        part = examples[lo : lo + 64]
        ids = _pad_batch(part)
        logits, _ = forward_batch(state, ids)
        for j, ex in enumerate(part):
            total += stage1_ce(logits[j, : len(ex)], ex)
            count += len(ex) - 1
    return float(math.exp(total / count))


def _encode_examples(
    rows: Sequence[Record],
    schema: Schema,
    vocab: Vocab,
    rng: np.random.Generator | None,
) -> list[TokenizedExample]:
    """Tokenize rows; fresh feature permutation per row when rng is given."""
    out = []
    for r in rows:
        out.append(tokenize(encode_record(r, schema, rng=rng), vocab, schema))
    return out


def _probe_compliance(
    state: ModelState,
    vocab: Vocab,
    schema: Schema,
    n_rows: int,
    temperature: float,
    seed: int,
) -> float:
    from .sampler import PromptSpec, sample_rows  # deferred: sampler imports model

    _, report = sample_rows(
        state,
        vocab,
        schema,
        n_rows,
        PromptSpec(mode="random_init", temperature=temperature, max_retries=0),
        seed=seed,
    )
    return report.compliance


def two_stage_finetune(
    train_table: Table,
    config: TrainConfig,
    hooks: TrainerHooks | None = None,
) -> TrainResult:
    hooks = hooks or TrainerHooks()
    schema = train_table.schema
    vocab = build_vocab(schema)
    model_cfg = config.model_config(len(vocab))
    loss_spec = LossSpec(
        alpha=config.alpha,
        beta=config.beta,
        nul_mode=config.nul_mode,
        lambda_map=build_lambda_map(schema, config.lambda_mode, train_table),
    )

    # context check before any training
    for i, row in enumerate(train_table.rows):
        n = sentence_token_length(schema, row)
        if n > model_cfg.context_length:
            raise ValueError(
                f"row {i} needs {n} tokens, over context "
                f"{model_cfg.context_length}"
            )

    rng_eval = np.random.default_rng(config.seed + 6)
    n_total = len(train_table)
    n_eval = min(config.eval_max_rows, int(config.eval_fraction * n_total))
    perm = rng_eval.permutation(n_total)
    eval_rows = [train_table.rows[i] for i in perm[:n_eval]]
    train_rows = [train_table.rows[i] for i in perm[n_eval:]]
    eval_examples = _encode_examples(eval_rows, schema, vocab, rng=None)

    state = init_model(model_cfg, config.seed)
    ledger = PrivacyLedger()
    report = TrainingReport(
        mode=config.mode,
        n_train_rows=len(train_rows),
        n_eval_rows=n_eval,
        epsilon_target=config.stage2.epsilon,
        delta=config.stage2.delta,
        non_private=config.stage2.non_private,
    )
    rng_data = np.random.default_rng(config.seed + 1)
    rng_drop = np.random.default_rng(config.seed + 8)

    # ---- stage 1: format learning on random data (non-private)
    if config.mode == "two_stage":
        s1 = config.stage1
        n_random = s1.random_rows or max(n_total, 2000)
        holdout = min(128, max(1, n_random // 20))
        random_table = generate_random_table(schema, n_random + holdout, config.seed + 7)
        s1_train = Table(schema, random_table.rows[:n_random])
        s1_eval = _encode_examples(
            random_table.rows[n_random:], schema, vocab, rng=None
        )
        hooks.stage_data(1, s1_train, "random")
        for i, row in enumerate(s1_train.rows):
            n = sentence_token_length(schema, row)
            if n > model_cfg.context_length:
                raise ValueError(
                    f"random row {i} needs {n} tokens, over context "
                    f"{model_cfg.context_length}"
                )
        state.set_trainable(stage_trainable(model_cfg, 1))
        adam1 = AdamOptimizer(num_params(state), s1.learning_rate)
        for epoch in range(s1.epochs):
            examples = _encode_examples(s1_train.rows, schema, vocab, rng=rng_data)
            order = rng_data.permutation(len(examples))
            epoch_losses = []
            for lo in range(0, len(order), s1.batch_size):
                part = [examples[i] for i in order[lo : lo + s1.batch_size]]
                ids = _pad_batch(part)
                train_flag = model_cfg.dropout_prob > 0.0
                logits, cache = forward_batch(
                    state, ids, train=train_flag, rng=rng_drop
                )
                dlogits = np.zeros_like(logits)
                batch_loss = 0.0
                for j, ex in enumerate(part):
                    l = len(ex)
                    value, dl = stage1_ce_with_grad(logits[j, :l], ex)
                    if not math.isfinite(value):
                        raise ValueError(
                            f"non-finite loss for example {ex.text!r}"
                        )
                    batch_loss += value
                    dlogits[j, :l] = dl / len(part)
                grads = backward_batch(state, cache, dlogits, per_example=False)
                flat = flatten_grads(grads, state.trainable, per_example=False)
                apply_update(state, state.trainable, adam1.step(flat))
                epoch_losses.append(batch_loss / len(part))
            report.stage1_epochs.append(
                {
                    "epoch": epoch + 1,
                    "mean_loss": float(np.mean(epoch_losses)),
                    "perplexity": measure_perplexity(state, s1_eval),
                }
            )
        report.stage1_compliance = _probe_compliance(
            state,
            vocab,
            schema,
            config.probe_rows,
            config.probe_temperature,
            config.seed + 5,
        )

    # ---- stage 2: DPSGD on the sensitive rows
    s2 = config.stage2
    stage2_table = Table(schema, list(train_rows))
    hooks.stage_data(2, stage2_table, "sensitive")
    n = len(train_rows)
    if n == 0:
        raise ValueError("no training rows left for the private stage")
    if not s2.non_private and s2.delta >= 1.0 / n:
        warnings.warn(
            f"delta={s2.delta} is not below 1/N={1.0 / n:.3g}", stacklevel=2
        )
    q = min(1.0, s2.expected_batch_size / n)
    steps = max(1, round(s2.epochs / q))
    privacy = PrivacySpec(
        epsilon_target=s2.epsilon,
        delta=s2.delta,
        clip_norm=s2.clip_norm,
        sample_rate=q,
        steps=steps,
        noise_multiplier=s2.noise_multiplier,
    )
    sigma = 0.0 if s2.non_private else privacy.resolve_sigma()
    report.sample_rate = q
    report.sigma = sigma
    report.steps_planned = steps

    state.set_trainable(stage_trainable(model_cfg, 2))
    adam2 = AdamOptimizer(num_params(state), s2.learning_rate)
    rng_poisson = np.random.default_rng(config.seed + 3)
    rng_noise = np.random.default_rng(config.seed + 4)
    steps_per_epoch = max(1, round(steps / max(1, s2.epochs)))
    window_losses: list[float] = []
    epoch_no = 0
    for t in range(steps):
        if not s2.non_private:
            prospective = ledger.preview_epsilon(q, sigma, s2.delta)
            if prospective > s2.epsilon * (1.0 + 1e-9):
                report.halted_on_budget = True
                break
        mask = rng_poisson.random(n) < q
        chosen = [train_rows[i] for i in np.flatnonzero(mask)]
        examples = _encode_examples(chosen, schema, vocab, rng=rng_data)
        stats = dpsgd_step(
            state,
            examples,
            vocab,
            loss_spec,
            clip_norm=s2.clip_norm,
            sigma=sigma,
            expected_batch_size=float(s2.expected_batch_size),
            optimizer=adam2,
            noise_rng=rng_noise,
            step_index=t,
            chunk=config.grad_chunk,
        )
        ledger.add_step(q, sigma)
        hooks.step(stats)
        report.steps_executed = t + 1
        if stats.batch_size:
            window_losses.append(float(stats.losses.mean()))
        if (t + 1) % steps_per_epoch == 0 or t == steps - 1:
            epoch_no += 1
            report.stage2_epochs.append(
                {
                    "epoch": epoch_no,
                    "mean_loss": float(np.mean(window_losses)) if window_losses else None,
                    "perplexity": measure_perplexity(state, eval_examples),
                    "spent_epsilon": (
                        None
                        if s2.non_private
                        else float(ledger.spent_epsilon(s2.delta))
                    ),
                }
            )
            window_losses = []

    report.spent_epsilon = ledger.spent_epsilon(s2.delta)
    report.final_compliance = _probe_compliance(
        state,
        vocab,
        schema,
        config.probe_rows,
        config.probe_temperature,
        config.seed + 9,
    )
    return TrainResult(
        state=state,
        vocab=vocab,
        schema=schema,
        ledger=ledger,
        report=report,
        privacy=privacy,
    )
