"""Renyi-DP accounting for the subsampled Gaussian mechanism.

One noisy step with Poisson sampling rate q and noise multiplier sigma
has RDP(alpha) computed in the log domain: a binomial expansion for
integer alpha and a two-branch erfc series for fractional alpha. Steps
compose by adding RDP vectors over a fixed grid of orders; conversion to
(epsilon, delta) takes the classic bound

    epsilon = min_alpha [ RDP(alpha) + log(1/delta) / (alpha - 1) ].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ORDERS: tuple[float, ...] = (
    (1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5)
    + tuple(float(a) for a in range(5, 64))
    + (64.0, 80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0)
)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub of a negative quantity")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    r = math.erfc(x)
    if r > 0.0:
        return math.log(r)
    # erfc underflows near x ~ 27; switch to the asymptotic expansion
    return (
        -math.log(math.pi) / 2
        - math.log(x)
        - x * x
        - 0.5 / (x * x)
        + 0.625 / x**4
        - 37.0 / (24.0 * x**6)
        + 353.0 / (64.0 * x**8)
    )


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(1-q + q e^{(2z-1)/(2 sigma^2)})^alpha], z ~ N(0, sigma^2)."""
    total = -math.inf
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for k in range(alpha + 1):
        term = (
            math.lgamma(alpha + 1)
            - math.lgamma(k + 1)
            - math.lgamma(alpha - k + 1)
            + k * log_q
            + (alpha - k) * log_1mq
            + (k * k - k) / (2.0 * sigma * sigma)
        )
        total = _log_add(total, term)
    return total


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """Fractional-order counterpart via the two-branch series."""
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    sq2s = math.sqrt(2.0) * sigma
    # binomial(alpha, i) tracked incrementally in log space with its sign
    log_coef, sign = 0.0, 1.0
    i = 0
    while True:
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1mq
        log_t1 = log_coef + j * log_q + i * log_1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / sq2s)
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / sq2s)
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if sign > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        if max(log_s0, log_s1) < -30.0 and i > alpha:
            break
        # advance binom(alpha, i) -> binom(alpha, i + 1)
        ratio = (alpha - i) / (i + 1.0)
        if ratio == 0.0:
            break
        if ratio < 0.0:
            sign = -sign
        log_coef += math.log(abs(ratio))
        i += 1
        if i > 10000:
            raise RuntimeError("fractional-order series failed to converge")
    return _log_add(log_a0, log_a1)


def step_rdp(q: float, sigma: float, alpha: float) -> float:
    """RDP of order alpha for one subsampled Gaussian step."""
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"sampling rate q={q} outside [0, 1]")
    if alpha <= 1.0:
        raise ValueError("order must exceed 1")
    if q == 0.0:
        return 0.0
    if sigma <= 0.0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


def step_rdp_vector(
    q: float, sigma: float, orders: tuple[float, ...] = DEFAULT_ORDERS
) -> np.ndarray:
    return np.array([step_rdp(q, sigma, a) for a in orders])


def rdp_to_epsilon(
    rdp: np.ndarray, delta: float, orders: tuple[float, ...] = DEFAULT_ORDERS
) -> tuple[float, float]:
    """Best (epsilon, order) over the grid for the given delta."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta={delta} outside (0, 1)")
    if len(rdp) != len(orders):
        raise ValueError("rdp vector and order grid differ in length")
    log_inv = math.log(1.0 / delta)
    best_eps, best_order = math.inf, orders[-1]
    for r, a in zip(rdp, orders):
        if not math.isfinite(r):
            continue
        eps = r + log_inv / (a - 1.0)
        if eps < best_eps:
            best_eps, best_order = eps, a
    return best_eps, best_order


def rdp_epsilon(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> float:
    """epsilon spent by `steps` subsampled Gaussian steps."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return 0.0
    rdp = step_rdp_vector(q, sigma, orders) * steps
    return rdp_to_epsilon(rdp, delta, orders)[0]


def epsilon_floor(delta: float, orders: tuple[float, ...] = DEFAULT_ORDERS) -> float:
    """Smallest epsilon the grid can certify (sigma -> infinity limit)."""
    return min(math.log(1.0 / delta) / (a - 1.0) for a in orders)


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    q: float,
    steps: int,
    tol: float = 1e-3,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier (to `tol`) with spent epsilon <= target."""
    if epsilon_target <= 0.0:
        raise ValueError("epsilon_target must be positive")
    floor = epsilon_floor(delta, orders)
    if epsilon_target <= floor:
        raise ValueError(
            f"epsilon_target {epsilon_target} is below the achievable range "
            f"(> {floor:.6g} for this order grid and delta={delta})"
        )

    def eps(s: float) -> float:
        return rdp_epsilon(q, sigma=s, steps=steps, delta=delta, orders=orders)

    lo, hi = 1e-3, 1.0
    for _ in range(200):
        if eps(hi) <= epsilon_target:
            break
        hi *= 2.0
        if hi > 1e7:
            raise ValueError("no feasible noise multiplier below 1e7")
    else:
        raise ValueError("bracketing failed")
    while eps(lo) <= epsilon_target and lo > 1e-12:
        lo /= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class PrivacySpec:
    """Per-run privacy parameters for the noisy training stage."""

    epsilon_target: float
    delta: float
    clip_norm: float
    sample_rate: float
    steps: int
    noise_multiplier: float | None = None  # None: calibrated at train time

    def __post_init__(self) -> None:
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if not (0.0 < self.sample_rate <= 1.0):
            raise ValueError("sample_rate must be in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must be in (0, 1)")

    def resolve_sigma(self, tol: float = 1e-3) -> float:
        if self.noise_multiplier is not None:
            return self.noise_multiplier
        return calibrate_sigma(
            self.epsilon_target, self.delta, self.sample_rate, self.steps, tol=tol
        )


@dataclass
class PrivacyLedger:
    """Composed RDP over executed steps, with a step-run record."""

    orders: tuple[float, ...] = DEFAULT_ORDERS
    rdp: np.ndarray | None = None
    runs: list[list[float]] = field(default_factory=list)  # [q, sigma, count]
    non_private: bool = False

    def __post_init__(self) -> None:
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))

    @property
    def steps(self) -> int:
        return int(sum(r[2] for r in self.runs))

    def add_step(self, q: float, sigma: float, count: int = 1) -> None:
        if count < 1:
            return
        if sigma <= 0.0:
            self.non_private = True
        else:
            self.rdp = self.rdp + step_rdp_vector(q, sigma, self.orders) * count
        if self.runs and self.runs[-1][0] == q and self.runs[-1][1] == sigma:
            self.runs[-1][2] += count
        else:
            self.runs.append([float(q), float(sigma), int(count)])

    def spent_epsilon(self, delta: float) -> float:
        if self.non_private:
            return math.inf
        if self.steps == 0:
            return 0.0
        return rdp_to_epsilon(self.rdp, delta, self.orders)[0]

    def preview_epsilon(self, q: float, sigma: float, delta: float) -> float:
        """Spent epsilon if one more (q, sigma) step were executed."""
        if self.non_private or sigma <= 0.0:
            return math.inf
        rdp = self.rdp + step_rdp_vector(q, sigma, self.orders)
        return rdp_to_epsilon(rdp, delta, self.orders)[0]

    def to_dict(self) -> dict:
        return {
            "orders": list(self.orders),
            "rdp": [float(x) for x in self.rdp],
            "runs": [[float(q), float(s), int(c)] for q, s, c in self.runs],
            "non_private": self.non_private,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyLedger":
        return cls(
            orders=tuple(d["orders"]),
            rdp=np.array(d["rdp"], dtype=np.float64),
            runs=[list(r) for r in d["runs"]],
            non_private=bool(d.get("non_private", False)),
        )
