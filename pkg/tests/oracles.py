"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written with different algorithms than the
library code (quadrature instead of series, Counter loops instead of
vectorized bincounts, quadratic scans instead of chunked linear algebra)
so that agreement is meaningful.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


# ---------------------------------------------------------------------------
# Renyi-DP oracle: numerical quadrature of the subsampled-Gaussian moment


def rdp_quadrature(q: float, sigma: float, alpha: float, points: int = 400_001) -> float:
    """alpha-RDP of one subsampled Gaussian step by log-trapezoid quadrature.

    Integrates E_{z~N(0,sigma^2)}[((1-q) + q * exp((2z-1)/(2 sigma^2)))^alpha]
    on a wide grid and converts to RDP. Valid for any alpha > 1, 0 < q <= 1.
    """
    if q == 0.0:
        return 0.0
    s2 = sigma * sigma
    lo = -40.0 * sigma - 5.0
    hi = alpha + 40.0 * sigma + 5.0
    z = np.linspace(lo, hi, points)
    dz = z[1] - z[0]
    log_pdf = -0.5 * z * z / s2 - 0.5 * math.log(2.0 * math.pi * s2)
    t = (2.0 * z - 1.0) / (2.0 * s2)
    if q >= 1.0:
        log_mix = t
    else:
        log_mix = np.logaddexp(math.log1p(-q), math.log(q) + t)
    log_f = log_pdf + alpha * log_mix
    m = log_f.max()
    w = np.exp(log_f - m)
    w[0] *= 0.5
    w[-1] *= 0.5
    log_integral = m + math.log(w.sum()) + math.log(dz)
    return log_integral / (alpha - 1.0)


def rdp_to_epsilon_classic(rdp: float, delta: float, alpha: float) -> float:
    return rdp + math.log(1.0 / delta) / (alpha - 1.0)


def closed_form_gaussian_epsilon(sigma: float, delta: float) -> float:
    """Textbook Gaussian-mechanism bound: eps = sqrt(2 ln(1.25/delta))/sigma."""
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def analytic_gaussian_epsilon(sigma: float, delta: float) -> float:
    """Exact (eps, delta) of one Gaussian mechanism release at sensitivity 1.

    Solves delta(eps) = Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma)
    - eps sigma) for eps by bisection. This is the true optimal curve, so any
    valid accountant must sit at or above it.
    """

    def phi(x: float) -> float:
        return 0.5 * math.erfc(-x / math.sqrt(2.0))

    def delta_of(eps: float) -> float:
        a = 1.0 / (2.0 * sigma)
        return phi(a - eps * sigma) - math.exp(eps) * phi(-a - eps * sigma)

    lo, hi = 0.0, 1.0
    while delta_of(hi) > delta:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("no epsilon found")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if delta_of(mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# metric oracles


def bin_code(value: float, cuts) -> int:
    """Index of the bin for a numeric value: first bin whose cut >= value."""
    for i, c in enumerate(cuts):
        if value <= c:
            return i
    return len(cuts)


def tvd_bruteforce(synthetic, reference, schema, cuts_by_name, k: int) -> dict:
    """Mean k-way TVD via Counter loops over every feature subset.

    cuts_by_name maps numeric feature names to their (sorted) cut values;
    categorical features are compared by raw value.
    """

    def coded_rows(table):
        rows = []
        for rec in table.rows:
            row = {}
            for f in schema.features:
                v = rec[f.name]
                if f.kind == "numeric":
                    row[f.name] = bin_code(float(v), cuts_by_name[f.name])
                else:
                    row[f.name] = v
            rows.append(row)
        return rows

    srows, rrows = coded_rows(synthetic), coded_rows(reference)
    ns, nr = len(srows), len(rrows)
    out = {}
    for subset in itertools.combinations([f.name for f in schema.features], k):
        cs = Counter(tuple(r[n] for n in subset) for r in srows)
        cr = Counter(tuple(r[n] for n in subset) for r in rrows)
        cells = set(cs) | set(cr)
        out[subset] = 0.5 * sum(abs(cs[c] / ns - cr[c] / nr) for c in cells)
    return out


def dcr_bruteforce(synthetic, train, schema) -> list[float]:
    """Nearest-training-row L2 distance per synthetic row, quadratic scan."""
    stats = {}
    for f in schema.features:
        if f.kind != "numeric":
            continue
        vals = [float(v) for v in train.column(f.name)]
        stats[f.name] = (min(vals), max(vals))

    def dist(a, b) -> float:
        s = 0.0
        for f in schema.features:
            va, vb = a[f.name], b[f.name]
            if f.kind == "numeric":
                lo, hi = stats[f.name]
                if hi > lo:
                    dd = (float(va) - float(vb)) / (hi - lo)
                    s += dd * dd
                else:
                    s += 0.0 if float(va) == float(vb) else 1.0
            else:
                s += 0.0 if va == vb else 1.0
        return math.sqrt(s)

    return [min(dist(srow, trow) for trow in train.rows) for srow in synthetic.rows]


def auc_bruteforce(labels, scores) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie) by full pairwise enumeration."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def dpdiff_bruteforce(groups, labels, positive) -> float:
    """Max pairwise gap in positive-label rate across groups."""
    rates = {}
    for g in set(groups):
        members = [l for gg, l in zip(groups, labels) if gg == g]
        rates[g] = sum(1 for l in members if l == positive) / len(members)
    vals = sorted(rates.values())
    return vals[-1] - vals[0] if len(vals) >= 2 else 0.0


def eodiff_bruteforce(groups, y_true, y_pred) -> float:
    """max(TPR gap, FPR gap) over group pairs; undefined rates skipped."""
    tpr, fpr = {}, {}
    for g in set(groups):
        idx = [i for i, gg in enumerate(groups) if gg == g]
        pos = [i for i in idx if y_true[i] == 1]
        neg = [i for i in idx if y_true[i] == 0]
        if pos:
            tpr[g] = sum(1 for i in pos if y_pred[i] == 1) / len(pos)
        if neg:
            fpr[g] = sum(1 for i in neg if y_pred[i] == 1) / len(neg)
    gaps = []
    for rates in (tpr, fpr):
        if len(rates) >= 2:
            vals = sorted(rates.values())
            gaps.append(vals[-1] - vals[0])
    return max(gaps) if gaps else 0.0


# ---------------------------------------------------------------------------
# gradient oracle


def fd_gradient(loss_fn, state, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of loss_fn(state) over every parameter.

    Perturbs the stored (float32) tensors in place one coordinate at a time;
    loss_fn must be a deterministic function of state.params.
    """
    grads = []
    for name in state.params:
        w = state.params[name]
        g = np.zeros(w.size)
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn(state)
            flat[i] = orig - h
            down = loss_fn(state)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return np.concatenate(grads)


# ---------------------------------------------------------------------------
# fairness allocation oracle


def best_gap_enumeration(counts: dict, budget: int, positive, negative) -> float:
    """Smallest achievable two-group DPDiff when adding `budget` rows.

    counts maps (group, label) -> existing rows. Enumerates every split of
    the budget across the four cells (two groups x two labels).
    """
    groups = sorted({g for g, _ in counts})
    assert len(groups) == 2
    a, b = groups

    def gap(extra):
        pa = counts.get((a, positive), 0) + extra[0]
        na = counts.get((a, negative), 0) + extra[1]
        pb = counts.get((b, positive), 0) + extra[2]
        nb = counts.get((b, negative), 0) + extra[3]
        ra = pa / (pa + na) if pa + na else 0.0
        rb = pb / (pb + nb) if pb + nb else 0.0
        return abs(ra - rb)

    best = math.inf
    for i in range(budget + 1):
        for j in range(budget - i + 1):
            for k in range(budget - i - j + 1):
                m = budget - i - j - k
                best = min(best, gap((i, j, k, m)))
    return best
