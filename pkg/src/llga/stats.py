"""ERT evaluation over seeded run batches and nonparametric significance tests.

Expected running time (ERT) is the total number of fitness evaluations spent
across all runs divided by the number of runs that reached the optimum.
Policies are compared pairwise (paired by seed index) with the Wilcoxon
signed-rank test, and families of comparisons are corrected with the
Holm-Bonferroni step-down procedure at level 0.01 (two-sided).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bitstrings import ContractViolationError
from .engine import Policy, default_cutoff, run_episode


@dataclass(frozen=True)
class ErtSummary:
    """Outcome of evaluating one policy at one problem size.

    std is the sample standard deviation (ddof=1) of per-run evaluation
    counts among successful runs; NaN when fewer than two runs succeeded.
    """

    n: int
    runs: int
    successes: int
    ert: float
    normalized_ert: float
    std: float
    evaluations: tuple[int, ...]
    success_flags: tuple[bool, ...]

    def __post_init__(self) -> None:
        if not (0 <= self.successes <= self.runs):
            raise ContractViolationError("successes must lie in [0, runs]")
        if (self.successes > 0) != math.isfinite(self.ert):
            raise ContractViolationError("ert must be finite iff successes > 0")
        if len(self.evaluations) != self.runs or len(self.success_flags) != self.runs:
            raise ContractViolationError("per-run records must match run count")

    @classmethod
    def from_runs(
        cls, n: int, evaluations: Sequence[int], success_flags: Sequence[bool]
    ) -> "ErtSummary":
        evals = np.asarray(evaluations, dtype=np.int64)
        succ = np.asarray(success_flags, dtype=bool)
        runs = len(evals)
        successes = int(succ.sum())
        total = int(evals.sum())
        ert = total / successes if successes > 0 else math.inf
        if successes >= 2:
            std = float(np.std(evals[succ], ddof=1))
        else:
            std = math.nan
        return cls(
            n=n,
            runs=runs,
            successes=successes,
            ert=ert,
            normalized_ert=ert / n,
            std=std,
            evaluations=tuple(int(v) for v in evals),
            success_flags=tuple(bool(v) for v in succ),
        )


# Module-level worker state, set once per process by the pool initializer so
# the policy is not re-pickled for every seed.
_EVAL_CTX: dict = {}


def _seed_generator(
    master_seed: int, prefix: tuple[int, ...], seed: int
) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(*prefix, seed))
    return np.random.Generator(np.random.PCG64(ss))


def _init_eval_worker(policy, n, cutoff, master_seed, prefix) -> None:
    _EVAL_CTX["job"] = (policy, n, cutoff, master_seed, prefix)


def _eval_one_seed(seed: int) -> tuple[int, bool]:
    policy, n, cutoff, master_seed, prefix = _EVAL_CTX["job"]
    g = _seed_generator(master_seed, prefix, seed)
    result = run_episode(policy, n, g, cutoff=cutoff)
    return result.evaluations_total, result.success


def evaluate_policy(
    policy: Policy,
    n: int,
    seeds,
    master_seed: int,
    *,
    cutoff: Optional[int] = None,
    parallel: int = 1,
    stream_prefix: tuple[int, ...] = (),
) -> ErtSummary:
    """Run one episode per seed and summarize.

    seeds may be an integer (meaning range(seeds)) or an explicit list of
    distinct non-negative integers.  Run i uses the random stream identified
    by (master_seed, *stream_prefix, seeds[i]); with the default empty prefix
    this is exactly RngStream(master_seed, seed).  Results are ordered by
    position in seeds, so the summary does not depend on the parallel degree.
    """
    if isinstance(seeds, (int, np.integer)):
        seed_list = list(range(int(seeds)))
    else:
        seed_list = [int(s) for s in seeds]
    if not seed_list:
        raise ContractViolationError("need at least one seed")
    if len(set(seed_list)) != len(seed_list):
        raise ContractViolationError("seeds must be distinct")
    if cutoff is None:
        cutoff = default_cutoff(n)

    if parallel > 1 and len(seed_list) > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(
            processes=min(parallel, len(seed_list)),
            initializer=_init_eval_worker,
            initargs=(policy, n, cutoff, master_seed, stream_prefix),
        ) as pool:
            rows = pool.map(_eval_one_seed, seed_list, chunksize=16)
    else:
        _init_eval_worker(policy, n, cutoff, master_seed, stream_prefix)
        rows = [_eval_one_seed(s) for s in seed_list]

    evals = [r[0] for r in rows]
    succ = [r[1] for r in rows]
    return ErtSummary.from_runs(n, evals, succ)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


@dataclass(frozen=True)
class WilcoxonResult:
    """statistic is W+, the rank sum of positive differences a - b."""

    statistic: float
    n_nonzero: int
    p_value: float
    method: str  # "exact" | "approx" | "degenerate"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of the tied block."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p by full enumeration of the 2^k sign assignments.

    Midranks are doubled so every rank is an integer; the distribution of the
    doubled W+ is built by dynamic programming.  Counts stay below 2^53, so
    float64 arithmetic is exact.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(round(2.0 * w_plus))
    denom = 2.0 ** len(doubled_ranks)
    p_le = counts[: w2 + 1].sum() / denom
    p_ge = counts[w2:].sum() / denom
    return min(1.0, 2.0 * min(p_le, p_ge))


def _approx_p(ranks: np.ndarray, w_plus: float) -> float:
    """Normal approximation with tie correction and continuity correction."""
    k = len(ranks)
    mu = k * (k + 1) / 4.0
    var = k * (k + 1) * (2 * k + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0.0:
        return 1.0
    d = w_plus - mu
    d = math.copysign(max(0.0, abs(d) - 0.5), d)  # continuity correction
    z = d / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_signed_rank(
    a, b=None, *, exact_limit: int = 25
) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test on a - b (or on a alone).

    Zero differences are dropped.  With no nonzero differences the result is
    degenerate with p = 1; with 1..4 nonzero differences the test is refused.
    Up to exact_limit nonzero pairs the p-value is exact (all sign
    assignments enumerated); beyond that a tie- and continuity-corrected
    normal approximation is used.
    """
    a = np.asarray(a, dtype=np.float64)
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ContractViolationError("paired samples must have equal length")
        d = a - b
    else:
        d = a
    if d.ndim != 1:
        raise ContractViolationError("samples must be 1-d")
    d = d[d != 0.0]
    k = len(d)
    if k == 0:
        return WilcoxonResult(0.0, 0, 1.0, "degenerate")
    if k < 5:
        raise ContractViolationError(
            f"need >= 5 nonzero differences for a meaningful test, got {k}"
        )
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if k <= exact_limit:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        return WilcoxonResult(w_plus, k, _exact_p(doubled, w_plus), "exact")
    return WilcoxonResult(w_plus, k, _approx_p(ranks, w_plus), "approx")


# ---------------------------------------------------------------------------
# Holm-Bonferroni step-down correction


@dataclass(frozen=True)
class HolmResult:
    adjusted: tuple[float, ...]
    reject: tuple[bool, ...]
    level: float


def holm_bonferroni(p_values: Sequence[float], level: float = 0.01) -> HolmResult:
    """Step-down correction: adjusted p(j) = max over i<=j of (m-i)*p(i), capped.

    Rejection of the j-th sorted hypothesis requires all earlier ones to be
    rejected too, which the running maximum encodes.
    """
    if not (0.0 < level < 1.0):
        raise ContractViolationError("level must lie in (0, 1)")
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return HolmResult((), (), level)
    if np.any((p < 0.0) | (p > 1.0)) or np.any(~np.isfinite(p)):
        raise ContractViolationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m, dtype=np.float64)
    running = 0.0
    for j, idx in enumerate(order):
        running = max(running, min(1.0, (m - j) * p[idx]))
        adjusted[idx] = running
    reject = adjusted <= level
    return HolmResult(tuple(float(v) for v in adjusted), tuple(bool(v) for v in reject), level)


# ---------------------------------------------------------------------------
# Comparison tables


@dataclass(frozen=True)
class PairedComparison:
    """Wilcoxon comparison of two per-seed runtime vectors (paired by index)."""

    runtimes_a: tuple[int, ...]
    runtimes_b: tuple[int, ...]
    statistic: float
    p_value: float
    significant: bool
    level: float

    @classmethod
    def from_runtimes(
        cls, a: Sequence[int], b: Sequence[int], level: float = 0.01
    ) -> "PairedComparison":
        if len(a) != len(b):
            raise ContractViolationError(
                f"pairing is by seed index: got {len(a)} vs {len(b)} runs"
            )
        res = wilcoxon_signed_rank(np.asarray(a, float), np.asarray(b, float))
        return cls(
            runtimes_a=tuple(int(v) for v in a),
            runtimes_b=tuple(int(v) for v in b),
            statistic=res.statistic,
            p_value=res.p_value,
            significant=res.p_value <= level,
            level=level,
        )


@dataclass(frozen=True)
class TableCell:
    """One (policy, n) entry of a comparison table.

    best marks the lowest ERT at this n; indistinguishable marks non-best
    policies whose paired test against the best did not reject at the given
    level after Holm correction.
    """

    policy_id: str
    n: int
    summary: ErtSummary
    best: bool
    indistinguishable: bool
    p_value: Optional[float]
    p_adjusted: Optional[float]


def comparison_table(
    policies: Sequence[tuple[str, Policy]],
    ns: Sequence[int],
    runs: int,
    master_seed: int,
    *,
    level: float = 0.01,
    parallel: int = 1,
) -> list[TableCell]:
    """Evaluate every (policy, n) cell on shared seeds and mark significance.

    Per problem size: the best (lowest-ERT) policy is marked; every other
    policy is paired-tested against it and the family of comparisons is
    Holm-corrected at that n.  Ties in ERT go to the earlier policy.
    """
    if not policies:
        raise ContractViolationError("need at least one policy")
    if len({pid for pid, _ in policies}) != len(policies):
        raise ContractViolationError("policy ids must be distinct")
    cells: list[TableCell] = []
    for n in ns:
        summaries = [
            (pid, evaluate_policy(pol, n, runs, master_seed, parallel=parallel))
            for pid, pol in policies
        ]
        best_i = min(range(len(summaries)), key=lambda i: (summaries[i][1].ert, i))
        others = [i for i in range(len(summaries)) if i != best_i]
        p_raw: dict[int, float] = {}
        for i in others:
            res = wilcoxon_signed_rank(
                np.asarray(summaries[i][1].evaluations, float),
                np.asarray(summaries[best_i][1].evaluations, float),
            )
            p_raw[i] = res.p_value
        holm = holm_bonferroni([p_raw[i] for i in others], level) if others else None
        adj = {i: holm.adjusted[j] for j, i in enumerate(others)} if holm else {}
        rej = {i: holm.reject[j] for j, i in enumerate(others)} if holm else {}
        for i, (pid, summary) in enumerate(summaries):
            cells.append(
                TableCell(
                    policy_id=pid,
                    n=n,
                    summary=summary,
                    best=i == best_i,
                    indistinguishable=i != best_i and not rej.get(i, False),
                    p_value=p_raw.get(i),
                    p_adjusted=adj.get(i),
                )
            )
    return cells


def _fmt(v: Optional[float], digits: int = 3) -> str:
    if v is None:
        return ""
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def render_table_csv(cells: Sequence[TableCell]) -> str:
    header = (
        "policy,n,runs,successes,ert,normalized_ert,std,"
        "best,indistinguishable,p_value,p_adjusted"
    )
    lines = [header]
    for c in cells:
        s = c.summary
        lines.append(
            ",".join(
                [
                    c.policy_id,
                    str(c.n),
                    str(s.runs),
                    str(s.successes),
                    _fmt(s.ert),
                    _fmt(s.normalized_ert),
                    _fmt(s.std),
                    str(int(c.best)),
                    str(int(c.indistinguishable)),
                    _fmt(c.p_value, 6),
                    _fmt(c.p_adjusted, 6),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def render_table_text(cells: Sequence[TableCell]) -> str:
    """Aligned text; *value* marks the best per n, _value_ marks cells not
    significantly different from it."""
    ns = sorted({c.n for c in cells})
    ids = list(dict.fromkeys(c.policy_id for c in cells))
    by_key = {(c.policy_id, c.n): c for c in cells}

    def shown(c: Optional[TableCell]) -> str:
        if c is None:
            return ""
        v = _fmt(c.summary.normalized_ert)
        if c.best:
            return f"*{v}*"
        if c.indistinguishable:
            return f"_{v}_"
        return v

    col0 = max(len("policy"), *(len(i) for i in ids))
    headers = ["policy".ljust(col0)] + [f"n={n}" for n in ns]
    rows = []
    for pid in ids:
        rows.append([pid.ljust(col0)] + [shown(by_key.get((pid, n))) for n in ns])
    widths = [max(len(r[j]) for r in [headers] + rows) for j in range(len(headers))]
    out = []
    for r in [headers] + rows:
        out.append("  ".join(v.rjust(w) if j else v.ljust(w)
                             for j, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(out) + "\n"


def _json_safe(v: float) -> Optional[float]:
    return None if (math.isnan(v) or math.isinf(v)) else v


def render_table_json(cells: Sequence[TableCell], *, level: float = 0.01) -> str:
    """JSON with raw per-seed runtimes for archival; infinities become null."""
    payload = {
        "level": level,
        "cells": [
            {
                "policy": c.policy_id,
                "n": c.n,
                "runs": c.summary.runs,
                "successes": c.summary.successes,
                "ert": _json_safe(c.summary.ert),
                "normalized_ert": _json_safe(c.summary.normalized_ert),
                "std": _json_safe(c.summary.std),
                "best": c.best,
                "indistinguishable": c.indistinguishable,
                "p_value": c.p_value,
                "p_adjusted": c.p_adjusted,
                "per_seed_evaluations": list(c.summary.evaluations),
                "per_seed_success": list(c.summary.success_flags),
            }
            for c in cells
        ],
    }
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"
