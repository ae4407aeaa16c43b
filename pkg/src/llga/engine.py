"""One iteration and full runs of the (1+(lambda,lambda)) GA on match-count fitness.

The iteration never materializes offspring bit vectors it can avoid: offspring
fitness only depends on how many flipped/crossed positions currently agree with
the target, so agreement counts are drawn directly (hypergeometric), and the
actual flip positions are sampled afterwards only for the individual that
survives selection.  This is distribution-preserving because flip sets and
crossover takes are exchangeable over positions.

Evaluation accounting: the initial point's evaluation is not counted; crossover
offspring identical to a parent are skipped (not evaluated, not selectable).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal, Optional, Protocol, Sequence

import numpy as np

from .bitstrings import (
    BitVector,
    ContractViolationError,
    Target,
    as_generator,
    fitness,
    sample_uniform,
)

Comparison = Literal["improved", "equal", "worse"]


def clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def default_cutoff(n: int) -> int:
    """Evaluation budget used for runs unless overridden: 0.8 * n^2."""
    return int(round(0.8 * n * n))


@dataclass(frozen=True)
class ParameterSet:
    """One iteration's parameters with derived rates.

    p = alpha * lambda_m / n is the per-position mutation rate and
    c = beta / lambda_c the per-position crossover bias, both capped at 1.
    No lower clamp is applied: rate coefficients below 1/lambda are a
    legitimate way to force single-bit steps.
    """

    lambda_m: int
    alpha: float
    lambda_c: int
    beta: float
    p: float
    c: float

    def __post_init__(self) -> None:
        if self.lambda_m < 1 or self.lambda_c < 1:
            raise ContractViolationError("offspring counts must be >= 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise ContractViolationError("alpha and beta must be positive")
        if not (0 < self.p <= 1 and 0 < self.c <= 1):
            raise ContractViolationError("p and c must lie in (0, 1]")

    @classmethod
    def create(
        cls, n: int, lambda_m: int, alpha: float, lambda_c: int, beta: float
    ) -> "ParameterSet":
        if n < 1:
            raise ContractViolationError("n must be >= 1")
        p = min(alpha * lambda_m / n, 1.0)
        c = min(beta / lambda_c, 1.0)
        return cls(
            lambda_m=int(lambda_m), alpha=float(alpha),
            lambda_c=int(lambda_c), beta=float(beta), p=p, c=c,
        )


@dataclass(frozen=True)
class IterationOutcome:
    """What a policy observes after one iteration.

    delta_f = f(best offspring) - f(parent before the iteration); negative when
    the best offspring is worse (then the parent is kept).  comparison carries
    the sign of delta_f.
    """

    delta_f: int
    evals_used: int
    comparison: Comparison


class Policy(Protocol):
    def select(self, fx: int, n: int) -> ParameterSet: ...
    def observe(self, outcome: IterationOutcome) -> None: ...
    def reset(self) -> None: ...


class GaState:
    """Mutable run state; fx always equals the match count of x."""

    __slots__ = ("n", "x", "fx", "evaluations", "iterations")

    def __init__(self, n: int, x: np.ndarray, fx: int) -> None:
        self.n = n
        self.x = x
        self.fx = fx
        self.evaluations = 0
        self.iterations = 0

    @classmethod
    def fresh(cls, initial: BitVector, target: Target) -> "GaState":
        if initial.n != target.n:
            raise ContractViolationError("initial point and target lengths differ")
        return cls(initial.n, initial.bits.copy(), fitness(initial, target))

    def point(self) -> BitVector:
        return BitVector(self.x)


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    fx: int
    params: ParameterSet
    evals_cum: int


@dataclass(frozen=True)
class RunResult:
    evaluations_total: int
    success: bool
    iterations: int
    final_fitness: int
    trajectory: Optional[tuple[TrajectoryPoint, ...]] = None


def sample_conditional_binomial(n: int, p: float, rng) -> int:
    """Binomial(n, p) conditioned on being positive.

    Rejection sampling when a positive draw is reasonably likely; otherwise an
    exact inverse-CDF walk over the conditional pmf, which costs O(1) expected
    work even when n*p is tiny and rejection would almost always miss.
    """
    if n < 1 or not (0 < p <= 1):
        raise ContractViolationError("need n >= 1 and 0 < p <= 1")
    g = as_generator(rng)
    miss = (1.0 - p) ** n
    if miss < 0.95:
        while True:
            val = int(g.binomial(n, p))
            if val > 0:
                return val
    # pmf(k+1)/pmf(k) = (n-k)/(k+1) * p/(1-p); start at k = 1
    u = g.random() * (1.0 - miss)
    ratio = p / (1.0 - p)
    pmf = n * p * (1.0 - p) ** (n - 1)
    k = 1
    acc = pmf
    while acc < u and k < n:
        pmf *= (n - k) * ratio / (k + 1)
        k += 1
        acc += pmf
    return k


def _distinct_indices(rng: np.random.Generator, m: int, k: int) -> np.ndarray:
    """k distinct uniform indices from range(m)."""
    if k > m:
        raise ContractViolationError("cannot draw more distinct indices than exist")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if 2 * k >= m:
        return rng.permutation(m)[:k]
    out = np.empty(k, dtype=np.int64)
    seen = set()
    count = 0
    while count < k:
        for v in rng.integers(0, m, size=k - count):
            v = int(v)
            if v not in seen:
                seen.add(v)
                out[count] = v
                count += 1
    return out


def flip_exact(x: BitVector, l: int, rng) -> BitVector:
    """Flip exactly l distinct positions chosen uniformly at random."""
    if not (0 <= l <= x.n):
        raise ContractViolationError("flip count must lie in [0, n]")
    g = as_generator(rng)
    bits = x.bits.copy()
    idx = _distinct_indices(g, x.n, l)
    bits[idx] ^= 1
    return BitVector(bits)


def biased_crossover(x: BitVector, x_prime: BitVector, c: float, rng) -> BitVector:
    """Take each position from x_prime with probability c, else from x."""
    if x.n != x_prime.n:
        raise ContractViolationError("crossover parents must have equal length")
    if not (0 < c <= 1):
        raise ContractViolationError("c must lie in (0, 1]")
    g = as_generator(rng)
    take = g.random(x.n) < c
    return BitVector(np.where(take, x_prime.bits, x.bits))


def run_iteration(
    state: GaState, params: ParameterSet, target: Target, rng
) -> IterationOutcome:
    """One mutation-crossover-selection cycle; mutates state in place."""
    n = state.n
    fx = state.fx
    if fx >= n:
        raise ContractViolationError("iteration requires a non-optimal parent")
    if target.n != n:
        raise ContractViolationError("target length does not match state")
    g = as_generator(rng)

    lam_m = params.lambda_m
    lam_c = params.lambda_c

    # mutation: l ~ Bin(n, p) conditioned positive, lam_m offspring with l flips
    l = sample_conditional_binomial(n, params.p, g)
    # agreement loss per mutant: flipped positions that currently agree
    h = g.hypergeometric(fx, n - fx, l, size=lam_m) if fx > 0 else np.zeros(
        lam_m, dtype=np.int64
    )
    # tied mutants share fitness and their flip sets are exchangeable, so the
    # uniform tie-break is realized by the conditional materialization below
    winner_h = int(h.min())
    f_mut = fx + l - 2 * winner_h

    # crossover offspring summarized as (takes, bad takes); bad = positions
    # whose flip broke an agreement, so crossing them back loses fitness
    sizes = g.binomial(l, params.c, size=lam_c)
    keep = (sizes > 0) & (sizes < l)
    kept_sizes = sizes[keep]
    if kept_sizes.size and winner_h > 0:
        kept_bad = g.hypergeometric(winner_h, l - winner_h, kept_sizes)
    else:
        kept_bad = np.zeros(kept_sizes.size, dtype=np.int64)
    f_cross = fx + kept_sizes - 2 * kept_bad

    cand_f = np.concatenate(([f_mut], f_cross))
    f_best = int(cand_f.max())
    best_ties = np.flatnonzero(cand_f == f_best)
    sel = int(best_ties[g.integers(best_ties.size)]) if best_ties.size > 1 else int(
        best_ties[0]
    )

    delta_f = f_best - fx
    if delta_f >= 0:
        # materialize the survivor's flip set and apply it
        mask = state.x == target.z.bits
        agree_idx = np.flatnonzero(mask)
        dis_idx = np.flatnonzero(~mask)
        mut_agree = agree_idx[_distinct_indices(g, agree_idx.size, winner_h)]
        mut_dis = dis_idx[_distinct_indices(g, dis_idx.size, l - winner_h)]
        if sel == 0:
            flip_a, flip_d = mut_agree, mut_dis
        else:
            s = int(kept_sizes[sel - 1])
            b = int(kept_bad[sel - 1])
            flip_a = mut_agree[_distinct_indices(g, winner_h, b)]
            flip_d = mut_dis[_distinct_indices(g, l - winner_h, s - b)]
        state.x[flip_a] ^= 1
        state.x[flip_d] ^= 1
        state.fx = f_best

    state.evaluations += lam_m + int(kept_sizes.size)
    state.iterations += 1
    comparison: Comparison = (
        "improved" if delta_f > 0 else ("equal" if delta_f == 0 else "worse")
    )
    return IterationOutcome(
        delta_f=delta_f,
        evals_used=lam_m + int(kept_sizes.size),
        comparison=comparison,
    )


def run_episode(
    policy: Policy,
    n: int,
    rng,
    *,
    cutoff: Optional[int] = None,
    target: Optional[Target] = None,
    initial: Optional[BitVector] = None,
    record_trajectory: bool = False,
) -> RunResult:
    """Run until the optimum is found or the evaluation budget is spent.

    An iteration started within budget runs to completion, so the final count
    may overshoot the cutoff by the last iteration's evaluations.  Trajectory
    rows log each iteration's parameters with the fitness and cumulative
    evaluations after it.
    """
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    if cutoff is None:
        cutoff = default_cutoff(n)
    if cutoff <= 0:
        raise ContractViolationError("cutoff must be positive")
    g = as_generator(rng)
    if target is None:
        target = Target.all_ones(n)
    if target.n != n:
        raise ContractViolationError("target length does not match n")
    if initial is None:
        initial = sample_uniform(n, g)

    policy.reset()
    state = GaState.fresh(initial, target)
    rows: list[TrajectoryPoint] = []
    while state.fx < n and state.evaluations < cutoff:
        params = policy.select(state.fx, n)
        outcome = run_iteration(state, params, target, g)
        policy.observe(outcome)
        if record_trajectory:
            rows.append(
                TrajectoryPoint(
                    iteration=state.iterations,
                    fx=state.fx,
                    params=params,
                    evals_cum=state.evaluations,
                )
            )
    return RunResult(
        evaluations_total=state.evaluations,
        success=state.fx == n,
        iterations=state.iterations,
        final_fitness=state.fx,
        trajectory=tuple(rows) if record_trajectory else None,
    )


TRAJECTORY_COLUMNS = (
    "iteration", "fx", "lambda_m", "alpha", "lambda_c", "beta", "evals_cum",
)


def write_trajectory_csv(points: Sequence[TrajectoryPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for pt in points:
            writer.writerow(
                [
                    pt.iteration,
                    pt.fx,
                    pt.params.lambda_m,
                    repr(pt.params.alpha),
                    pt.params.lambda_c,
                    repr(pt.params.beta),
                    pt.evals_cum,
                ]
            )
