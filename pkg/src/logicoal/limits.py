"""Evaluators and a sampler for the limiting coalescent-tree law.

For a supercritical binary branching process with birth rate ``birth``
and death rate ``death`` (growth rate r = birth - death > 0), a sample of
m individuals taken late in the growth phase has a coalescent tree whose
law stabilizes.  This module provides:

- ``ctimes_survival``: the multivariate survival function
  P[sigma_1 >= t_1, ..., sigma_{m-1} >= t_{m-1}] of the m - 1 unordered
  limiting coalescence times, which depends on the offspring rates only
  through the growth rate r;
- ``bd_pgf`` / ``bd_laplace_W``: s-derivatives of the population-size
  generating function E[s**N(t)] and v-derivatives of the Laplace
  transform E[exp(-v W)] of the almost-sure limit W of exp(-r t) N(t),
  from the classical linear-fractional closed forms;
- ``ctd_joint_prob``: the joint law of the partition-valued coalescent
  tree observed at finitely many times, evaluated by quadrature over the
  W-mixture variable with the generating-function derivatives above as
  integrand factors;
- ``sample_limit_tree``: a direct sampler of the limiting tree (times
  plus an independent uniform-pairwise-merge topology).

All evaluators are stateless pure functions, safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from random import Random

import mpmath
import numpy as np
from scipy.integrate import quad

from .errors import ConfigError, QuadratureError, UnsupportedOrderError

DEFAULT_MAX_ORDER = 12

# Beyond this magnitude of an intermediate term, float64 cancellation in
# the survival function can eat the answer; re-evaluate in high precision.
_CANCEL_THRESHOLD = 1e6
_TIE_TOLERANCE = 1e-9
_TIE_EPSILON = 1e-6


@dataclass(frozen=True)
class BinaryBDParams:
    """Birth and death rates of a supercritical binary branching process."""

    birth: float
    death: float = 0.0

    def __post_init__(self):
        if self.death < 0 or not math.isfinite(self.birth):
            raise ConfigError("rates must be finite and non-negative")
        if not self.birth - self.death > 0:
            raise ConfigError("growth rate birth - death must be positive")

    @property
    def growth(self) -> float:
        return self.birth - self.death

    @property
    def extinction_prob(self) -> float:
        """P[eventual extinction] = death / birth; also the mass of W at 0."""
        return self.death / self.birth


# -- survival function of the unordered coalescence times --------------------


def _survival_terms(r, ts, exp, expm1, one):
    """Shared evaluation of the survival formula for float or mpmath scalars.

    Returns (value, max_term_magnitude); the magnitude estimates how much
    cancellation occurred between the product term and the sum.
    """
    k = len(ts)
    x = [exp(-r * t) for t in ts]
    omx = [-expm1(-r * t) for t in ts]  # 1 - x_i, accurate for small r*t
    term1 = one
    for xi, oi in zip(x, omx):
        term1 = term1 * (-xi / oi)
    biggest = abs(term1)
    total = term1
    for j in range(k):
        coef = r * ts[j] * x[j] / (omx[j] * omx[j])
        prod = one
        for i in range(k):
            if i != j:
                # x_i - x_j = -x_i * expm1(-r (t_j - t_i)), stable near ties
                prod = prod * (x[i] / (-x[i] * expm1(-r * (ts[j] - ts[i]))))
        term = coef * prod
        biggest = max(biggest, abs(term))
        total = total + term
    m = k + 1
    return m * total, biggest


def _spread_ties(ts: list[float]) -> tuple[list[float], list[float]]:
    """Symmetric offsets separating groups of (nearly) equal arguments."""
    eps = min(_TIE_EPSILON, 0.5 * min(ts))
    order = sorted(range(len(ts)), key=lambda i: ts[i])
    offsets = [0.0] * len(ts)
    group = [order[0]]
    groups = [group]
    for idx in order[1:]:
        if ts[idx] - ts[group[-1]] < _TIE_TOLERANCE:
            group.append(idx)
        else:
            group = [idx]
            groups.append(group)
    for group in groups:
        g = len(group)
        if g > 1:
            for pos, idx in enumerate(group):
                offsets[idx] = eps * (2 * pos - (g - 1)) / (g - 1)
    return ts, offsets


def ctimes_survival(r: float, m: int, t) -> float:
    """P[sigma_1 >= t_1, ..., sigma_{m-1} >= t_{m-1}] for the limit tree.

    ``r`` is the growth rate of the intrinsic binary offspring law; ``t``
    holds m - 1 positive times.  The formula has removable singularities
    at coincident times; arguments closer than 1e-9 are symmetrically
    perturbed by 1e-6 and the two mirrored evaluations averaged.  When
    float64 cancellation between the formula's terms becomes severe the
    evaluation transparently reruns in 60-digit arithmetic.  The result is
    clamped to [0, 1].
    """
    if not r > 0:
        raise ConfigError("growth rate r must be positive")
    ts = [float(v) for v in (t if not np.isscalar(t) else [t])]
    if len(ts) != m - 1:
        raise ConfigError(f"expected {m - 1} times for m={m}, got {len(ts)}")
    if any(not v > 0 for v in ts):
        raise ConfigError("all times must be positive")

    has_tie = any(
        abs(a - b) < _TIE_TOLERANCE
        for i, a in enumerate(ts) for b in ts[i + 1:])
    if has_tie:
        base, offs = _spread_ties(ts)
        plus = _eval_survival(r, [b + o for b, o in zip(base, offs)])
        minus = _eval_survival(r, [b - o for b, o in zip(base, offs)])
        val = 0.5 * (plus + minus)
    else:
        val = _eval_survival(r, ts)
    return min(1.0, max(0.0, val))


def _eval_survival(r: float, ts: list[float]) -> float:
    val, biggest = _survival_terms(r, ts, math.exp, math.expm1, 1.0)
    if biggest > _CANCEL_THRESHOLD:
        with mpmath.workdps(60):
            mval, _ = _survival_terms(
                mpmath.mpf(r), [mpmath.mpf(v) for v in ts],
                mpmath.exp, mpmath.expm1, mpmath.mpf(1))
            val = float(mval)
    return val


def pair_coalescence_cdf(r: float, times) -> np.ndarray:
    """Vectorized CDF of the single coalescence time of a pair (m = 2).

    Equals 1 - ctimes_survival(r, 2, t) evaluated stably for arrays.
    """
    t = np.asarray(times, dtype=float)
    rt = r * t
    with np.errstate(divide="ignore", invalid="ignore"):
        one = -np.expm1(-rt)
        surv = 2.0 * np.exp(-rt) * (rt - one) / (one * one)
        cdf = np.where(rt > 0, 1.0 - surv, 0.0)
    return np.clip(cdf, 0.0, 1.0)


# -- classical binary birth-death closed forms -------------------------------


def _alpha_beta(p: BinaryBDParams, t: float) -> tuple[float, float]:
    """Linear-fractional parameters of the size law at time t.

    P[N(t) = 0] = alpha and, conditional on survival, N(t) is geometric
    with failure probability beta: E[s**N(t)] = alpha +
    (1 - alpha)(1 - beta) s / (1 - beta s).
    """
    if t == 0:
        return 0.0, 0.0
    em = math.exp(-p.growth * t)
    denom = p.birth - p.death * em
    frac = -math.expm1(-p.growth * t)  # 1 - em
    return p.death * frac / denom, p.birth * frac / denom


def bd_pgf(p: BinaryBDParams, t: float, s: float, j: int = 0,
           max_order: int = DEFAULT_MAX_ORDER) -> float:
    """j-th s-derivative of E[s**N(t)] for the binary birth-death process."""
    if not 0 <= s <= 1:
        raise ConfigError(f"s={s} outside [0, 1]")
    if t < 0:
        raise ConfigError("t must be non-negative")
    if j < 0 or j > max_order:
        raise UnsupportedOrderError(f"derivative order {j} above limit {max_order}")
    alpha, beta = _alpha_beta(p, t)
    if j == 0:
        return alpha + (1 - alpha) * (1 - beta) * s / (1 - beta * s)
    return ((1 - alpha) * (1 - beta) * math.factorial(j)
            * beta ** (j - 1) / (1 - beta * s) ** (j + 1))


def bd_laplace_W(p: BinaryBDParams, v: float, j: int = 0,
                 max_order: int = DEFAULT_MAX_ORDER) -> float:
    """j-th v-derivative of E[exp(-v W)], W = lim exp(-r t) N(t).

    W places mass death/birth at zero (the extinction event) and is
    otherwise exponential with rate 1 - death/birth, which makes E[W] = 1.
    """
    if v < 0:
        raise ConfigError("v must be non-negative")
    if j < 0 or j > max_order:
        raise UnsupportedOrderError(f"derivative order {j} above limit {max_order}")
    q = p.extinction_prob
    surv = 1.0 - q
    if j == 0:
        return q + surv * surv / (surv + v)
    return (-1) ** j * math.factorial(j) * surv * surv / (surv + v) ** (j + 1)


# -- joint law of the partition process ---------------------------------------


def partitions_of(m: int) -> list[tuple[frozenset[int], ...]]:
    """All set partitions of {1..m}, each as a tuple of frozensets."""
    parts: list[list[set[int]]] = [[]]
    for elem in range(1, m + 1):
        nxt = []
        for p in parts:
            for i in range(len(p)):
                nxt.append([b | {elem} if k == i else set(b)
                            for k, b in enumerate(p)])
            nxt.append([set(b) for b in p] + [{elem}])
        parts = nxt
    out = []
    for p in parts:
        out.append(tuple(sorted((frozenset(b) for b in p), key=sorted)))
    return out


def _normalize_partition(gamma, m: int) -> tuple[frozenset[int], ...]:
    blocks = tuple(frozenset(int(i) for i in block) for block in gamma)
    seen: set[int] = set()
    for b in blocks:
        if not b:
            raise ConfigError("partition contains an empty block")
        if b & seen:
            raise ConfigError("partition blocks overlap")
        seen |= b
    if seen != set(range(1, m + 1)):
        raise ConfigError(f"partition does not cover 1..{m}")
    return blocks


def ctd_joint_prob(p: BinaryBDParams, m: int, times, partitions,
                   quad_tol: float = 1e-8,
                   max_order: int = DEFAULT_MAX_ORDER) -> float:
    """P[partition process equals gamma_k at time t_k for k = 1..r].

    ``times`` must be strictly increasing positives and ``partitions`` a
    chain where every block of the later partition lies inside a block of
    the earlier one (the tree only ever splits forward in time).

    The joint probability is an integral over the mixture variable of the
    limit W: each block alive on an inter-observation interval contributes
    a generating-function derivative factor (its descendants at the next
    observation, with the chosen ones removed), and each block at the last
    observation contributes a Laplace-transform derivative of its size.
    The integrand is rescaled by exp(growth * t_r) so that the exponential
    prefactor cancels, and integrated adaptively (Gauss-Kronrod) on a
    compactified axis to absolute tolerance ``quad_tol``.
    """
    times = [float(t) for t in (times if not np.isscalar(times) else [times])]
    if not times:
        raise ConfigError("at least one observation time required")
    if any(not t > 0 for t in times):
        raise ConfigError("observation times must be positive")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("observation times must be strictly increasing")
    chain = [_normalize_partition(g, m) for g in partitions]
    if len(chain) != len(times):
        raise ConfigError("need exactly one partition per observation time")

    root = (frozenset(range(1, m + 1)),)
    full_chain = [root] + chain
    splits = []  # per epoch i: (dt, list of b_i(Gamma))
    for i in range(len(times)):
        gamma, finer = full_chain[i], full_chain[i + 1]
        counts = []
        for block in gamma:
            b = sum(1 for sub in finer if sub <= block)
            if b < 1:
                raise ConfigError("partitions do not form a refinement chain")
            counts.append(b)
        if sum(counts) != len(finer):
            raise ConfigError("partitions do not form a refinement chain")
        dt = times[i] - (times[i - 1] if i > 0 else 0.0)
        splits.append((dt, counts))

    orders = [len(b) for b in chain[-1]]
    if max(max(o for _, c in splits for o in c), max(orders)) > max_order:
        raise UnsupportedOrderError(
            f"required derivative order exceeds limit {max_order}")

    growth = p.growth
    q = p.extinction_prob
    t_last = times[-1]
    scales = [math.exp(min(growth * (t_last - t), 700.0)) for t in times]
    fact = math.factorial(m - 1)

    def integrand(u: float) -> float:
        w = u / (1.0 - u)
        val = w ** (m - 1) / fact
        for (dt, counts), scale in zip(splits, scales):
            arg = bd_laplace_W(p, scale * w, 0, max_order)
            hcache: dict[int, float] = {}
            for b in counts:
                h = hcache.get(b)
                if h is None:
                    h = hcache[b] = bd_pgf(p, dt, arg, b, max_order)
                val *= h
        for o in orders:
            val *= bd_laplace_W(p, w, o, max_order)
        return val / (1.0 - u) ** 2

    result = quad(integrand, 0.0, 1.0, epsabs=quad_tol, epsrel=1e-10,
                  limit=200, full_output=1)
    if len(result) > 3:
        raise QuadratureError(f"quadrature did not converge: {result[3]}")
    value, abserr = result[0], result[1]
    if abserr > 10 * max(quad_tol, abs(value) * 1e-6):
        raise QuadratureError(
            f"quadrature error estimate {abserr:.2e} too large for value {value:.6e}")
    return (-1) ** m * value / (1.0 - q)


# -- direct sampler of the limiting tree --------------------------------------


@dataclass(frozen=True)
class LimitTree:
    """A sampled limiting coalescent tree for m leaves.

    ``times`` are the m - 1 unordered coalescence times; ``merges`` is the
    backward merge sequence of the topology (uniformly random pairwise
    merges, independent of the times).  The k-th merge, counting backward
    from the sampling horizon, happens at the k-th largest time.
    """

    m: int
    times: tuple[float, ...]
    merges: tuple[tuple[frozenset[int], frozenset[int]], ...]

    def merge_times(self) -> list[tuple[float, frozenset[int]]]:
        """(time, merged block) pairs, most recent merge first."""
        ordered = sorted(self.times, reverse=True)
        return [(t, a | b) for t, (a, b) in zip(ordered, self.merges)]

    def pair_time(self, i: int, j: int) -> float:
        """Coalescence time of leaves i and j (1-based)."""
        for t, block in self.merge_times():
            if i in block and j in block:
                return t
        raise ValueError(f"leaves {i} and {j} never merge")

    def partition_at(self, t: float) -> tuple[tuple[int, ...], ...]:
        """Partition of {1..m} at time t: i, j together iff they merge at >= t."""
        blocks = {frozenset({i}) for i in range(1, self.m + 1)}
        for time, (a, b) in zip(sorted(self.times, reverse=True), self.merges):
            if time >= t:
                blocks.discard(a)
                blocks.discard(b)
                blocks.add(a | b)
        return tuple(sorted((tuple(sorted(b)) for b in blocks)))

    def topology_string(self) -> str:
        """Nested-parentheses rendering of the merge structure."""
        reps: dict[frozenset[int], str] = {
            frozenset({i}): str(i) for i in range(1, self.m + 1)}
        out = ""
        for a, b in self.merges:
            sa, sb = reps.pop(a), reps.pop(b)
            if min(b) < min(a):
                sa, sb = sb, sa
            out = f"({sa},{sb})"
            reps[a | b] = out
        return out if self.m > 1 else "1"


def sample_limit_tree(p: BinaryBDParams, m: int, seed: int) -> LimitTree:
    """Draw a limiting coalescent tree: coalescence times plus topology.

    The times are sampled from their exact joint law via its mixture
    representation: conditionally on W ~ Exp(1) and on the gaps
    (Delta_1, ..., Delta_{m-1}) between m ordered uniform points on [0, 1],
    the m - 1 times are independent with
    P[sigma_i >= s] = exp(-W Delta_i (exp(r s) - 1)), which integrates to
    the survival function ``ctimes_survival``.  Because the limiting law
    depends on the offspring rates only through the growth rate, W is
    always the standard exponential regardless of the death rate.  The
    topology is an independent sequence of uniform pairwise merges.
    """
    if m < 2:
        raise ConfigError("a limit tree needs at least m = 2 leaves")
    r = p.growth
    rng = Random(seed)
    w = rng.expovariate(1.0)

    while True:
        points = sorted(rng.random() for _ in range(m))
        deltas = [b - a for a, b in zip(points, points[1:])]
        if all(d > 0 for d in deltas):
            break

    times = tuple(
        math.log1p(-math.log(1.0 - rng.random()) / (w * d)) / r
        for d in deltas)

    blocks: list[frozenset[int]] = [frozenset({i}) for i in range(1, m + 1)]
    merges = []
    while len(blocks) > 1:
        i, j = rng.sample(range(len(blocks)), 2)
        a, b = blocks[i], blocks[j]
        merges.append((a, b))
        blocks = [blk for k, blk in enumerate(blocks) if k not in (i, j)]
        blocks.append(a | b)
    return LimitTree(m=m, times=times, merges=tuple(merges))
