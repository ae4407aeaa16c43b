"""Parameter-control policies for the (1+(lambda,lambda)) GA.

A policy maps the parent fitness fx (and problem size n) to the next
iteration's ParameterSet.  Stateless formula policies ignore feedback;
self-adjusting ones update an internal real-valued lambda from the outcome of
each iteration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .bitstrings import ContractViolationError
from .engine import IterationOutcome, ParameterSet, clamp


class TableFormatError(ValueError):
    """A policy table file failed validation."""


def round_lambda(value: float) -> int:
    """Offspring counts are integers >= 1; nearest integer wins."""
    return max(1, round(value))


def _sqrt_lambda(fx: int, n: int) -> int:
    return round_lambda(math.sqrt(n / (n - fx)))


def _staged_lambda_m(fx: int, n: int) -> int:
    return 1 if fx <= 0.95 * n else _sqrt_lambda(fx, n)


def _staged_alpha(fx: int, n: int) -> float:
    return 0.001 if fx <= 0.95 * n else 1.0


def _double_sqrt_lambda_c(fx: int, n: int) -> int:
    return round_lambda(2.0 * math.sqrt(n / (n - fx)))


class PolicyBase:
    """select/observe/reset protocol with no-op feedback handling."""

    def select(self, fx: int, n: int) -> ParameterSet:
        raise NotImplementedError

    def observe(self, outcome: IterationOutcome) -> None:
        pass

    def reset(self) -> None:
        pass


def _check_fx(fx: int, n: int) -> None:
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    if not (0 <= fx < n):
        raise ContractViolationError(f"fx must lie in [0, n); got fx={fx}, n={n}")


class FormulaPolicy(PolicyBase):
    """Pure function of (fx, n), memoized per instance."""

    def __init__(self) -> None:
        self._cache: dict[tuple[int, int], ParameterSet] = {}

    def _values(self, fx: int, n: int) -> tuple[int, float, int, float]:
        raise NotImplementedError

    def select(self, fx: int, n: int) -> ParameterSet:
        _check_fx(fx, n)
        key = (fx, n)
        got = self._cache.get(key)
        if got is None:
            lam_m, alpha, lam_c, beta = self._values(fx, n)
            got = ParameterSet.create(n, lam_m, alpha, lam_c, beta)
            self._cache[key] = got
        return got


class TheoryPolicy(FormulaPolicy):
    """lambda = round(sqrt(n/(n-fx))) for both phases, unit rate coefficients."""

    def _values(self, fx: int, n: int):
        lam = _sqrt_lambda(fx, n)
        return lam, 1.0, lam, 1.0


class TwoPhasePolicy(FormulaPolicy):
    """Mutation suppressed until fx exceeds 0.95n, wide crossover throughout.

    lambda_m = 1 and alpha = 0.001 in the first phase, then both follow the
    square-root schedule with alpha = 1; lambda_c = round(2 sqrt(n/(n-fx)))
    and beta = 1 in both phases.
    """

    def _values(self, fx: int, n: int):
        return (
            _staged_lambda_m(fx, n),
            _staged_alpha(fx, n),
            _double_sqrt_lambda_c(fx, n),
            1.0,
        )


class UShapeAlphaPolicy(FormulaPolicy):
    """TwoPhasePolicy with a U-shaped alpha: 0.5, then 0.001, then 1."""

    def _values(self, fx: int, n: int):
        if fx < 0.85 * n:
            alpha = 0.5
        elif fx <= 0.95 * n:
            alpha = 0.001
        else:
            alpha = 1.0
        return (
            _staged_lambda_m(fx, n),
            alpha,
            _double_sqrt_lambda_c(fx, n),
            1.0,
        )


# a source is a shared equation family token or a fixed number
PerParameterSource = Union[str, float, int]

_SOURCE_TOKENS = ("theory", "staged")


class CompositePolicy(PolicyBase):
    """Mix equation families per parameter.

    Per-parameter meaning of the tokens:
      lambda_m: theory -> round(sqrt(n/(n-fx)));  staged -> 1 until fx > 0.95n
      alpha:    theory -> 1;                      staged -> 0.001 until fx > 0.95n
      lambda_c: theory -> copy lambda_m;          staged -> round(2 sqrt(n/(n-fx)))
      beta:     theory -> 1;                      staged -> 1
    A numeric source fixes the parameter (offspring counts are rounded to the
    nearest integer, at least 1).
    """

    def __init__(
        self,
        lambda_m: PerParameterSource = "theory",
        alpha: PerParameterSource = "theory",
        lambda_c: PerParameterSource = "theory",
        beta: PerParameterSource = "theory",
    ) -> None:
        for src in (lambda_m, alpha, lambda_c, beta):
            if isinstance(src, str) and src not in _SOURCE_TOKENS:
                raise ContractViolationError(
                    f"unknown source {src!r}; expected one of {_SOURCE_TOKENS} or a number"
                )
        self.sources = (lambda_m, alpha, lambda_c, beta)
        self._cache: dict[tuple[int, int], ParameterSet] = {}

    def select(self, fx: int, n: int) -> ParameterSet:
        _check_fx(fx, n)
        key = (fx, n)
        got = self._cache.get(key)
        if got is not None:
            return got
        src_lm, src_a, src_lc, src_b = self.sources

        if src_lm == "theory":
            lam_m = _sqrt_lambda(fx, n)
        elif src_lm == "staged":
            lam_m = _staged_lambda_m(fx, n)
        else:
            lam_m = round_lambda(float(src_lm))

        if src_a == "theory":
            alpha = 1.0
        elif src_a == "staged":
            alpha = _staged_alpha(fx, n)
        else:
            alpha = float(src_a)

        if src_lc == "theory":
            lam_c = lam_m
        elif src_lc == "staged":
            lam_c = _double_sqrt_lambda_c(fx, n)
        else:
            lam_c = round_lambda(float(src_lc))

        beta = 1.0 if src_b in _SOURCE_TOKENS else float(src_b)

        got = ParameterSet.create(n, lam_m, alpha, lam_c, beta)
        self._cache[key] = got
        return got


@dataclass(frozen=True)
class SelfAdjustConfig:
    """Static parameters of the multiplicative-update scheme.

    plateau says what happens to lambda when the best offspring ties the
    parent: "grow" treats it like a failure, "hold" leaves lambda unchanged.
    """

    alpha: float = 1.0
    beta: float = 1.0
    crossover_ratio: float = 1.0
    inc_factor: float = 1.5 ** 0.25
    dec_factor: float = 1.0 / 1.5
    lambda_init: float = 1.0
    plateau: str = "grow"

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0 and self.crossover_ratio > 0):
            raise ContractViolationError("rate coefficients must be positive")
        if not (self.inc_factor >= 1.0 and 0 < self.dec_factor <= 1.0):
            raise ContractViolationError(
                "need inc_factor >= 1 and dec_factor in (0, 1]"
            )
        if self.lambda_init < 1.0:
            raise ContractViolationError("lambda_init must be >= 1")
        if self.plateau not in ("grow", "hold"):
            raise ContractViolationError("plateau must be 'grow' or 'hold'")


class SelfAdjustingPolicy(PolicyBase):
    """Keeps a real-valued lambda clamped to [1, n-1]: a strict improvement
    shrinks it by dec_factor, a failure grows it by inc_factor, so lambda is
    stationary when about one in five iterations succeeds (inc_factor =
    F^(1/4), dec_factor = 1/F).

    Rates are derived from the real-valued lambda, not the rounded offspring
    counts: p = alpha * lambda / n (kept at least 1/n) and
    c = beta / (crossover_ratio * lambda); only the population sizes round.
    """

    def __init__(self, config: SelfAdjustConfig = SelfAdjustConfig()) -> None:
        self.config = config
        self.lambda_real = config.lambda_init
        self._n: Optional[int] = None

    def reset(self) -> None:
        self.lambda_real = self.config.lambda_init
        self._n = None

    def select(self, fx: int, n: int) -> ParameterSet:
        _check_fx(fx, n)
        hi = max(1.0, n - 1.0)
        lam = self.lambda_real = clamp(self.lambda_real, 1.0, hi)
        self._n = n
        cfg = self.config
        lam_m = min(round_lambda(lam), max(1, n - 1))
        lam_c_real = cfg.crossover_ratio * lam
        p = clamp(cfg.alpha * lam / n, 1.0 / n, 1.0)
        c = min(cfg.beta / lam_c_real, 1.0)
        return ParameterSet(
            lambda_m=lam_m,
            alpha=cfg.alpha,
            lambda_c=round_lambda(lam_c_real),
            beta=cfg.beta,
            p=p,
            c=c,
        )

    def observe(self, outcome: IterationOutcome) -> None:
        if outcome.comparison == "improved":
            factor = self.config.dec_factor
        elif outcome.comparison == "equal" and self.config.plateau == "hold":
            factor = 1.0
        else:
            factor = self.config.inc_factor
        hi = max(1.0, (self._n - 1.0)) if self._n is not None else math.inf
        self.lambda_real = clamp(self.lambda_real * factor, 1.0, hi)


def one_fifth_policy(forget_rate: float = 1.5) -> SelfAdjustingPolicy:
    """One-fifth success rule: lambda *= F^(1/4) on improvement, /= F otherwise."""
    if forget_rate <= 1.0:
        raise ContractViolationError("forget_rate must exceed 1")
    return SelfAdjustingPolicy(
        SelfAdjustConfig(
            inc_factor=forget_rate ** 0.25, dec_factor=1.0 / forget_rate
        )
    )


# constants found by offline tuning of the self-adjusting scheme
TUNED_CONFIG = SelfAdjustConfig(
    alpha=0.3594,
    beta=1.4128,
    crossover_ratio=1.2379,
    inc_factor=1.1672,
    dec_factor=0.691,
    plateau="hold",
)


def tuned_policy() -> SelfAdjustingPolicy:
    return SelfAdjustingPolicy(TUNED_CONFIG)


POLICY_TABLE_COLUMNS = ("fx", "lambda_m", "alpha", "lambda_c", "beta")


class TablePolicy(PolicyBase):
    """Lookup policy with one row per fitness value 0..n-1."""

    def __init__(self, rows: Sequence[tuple[int, float, int, float]]) -> None:
        n = len(rows)
        if n < 1:
            raise TableFormatError("policy table must have at least one row")
        self.n = n
        self._params = [
            ParameterSet.create(n, lam_m, alpha, lam_c, beta)
            for (lam_m, alpha, lam_c, beta) in rows
        ]

    def select(self, fx: int, n: int) -> ParameterSet:
        _check_fx(fx, n)
        if n != self.n:
            raise ContractViolationError(
                f"table was built for n={self.n}, asked for n={n}"
            )
        return self._params[fx]

    @classmethod
    def from_csv(cls, path) -> "TablePolicy":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise TableFormatError(f"{path}: empty file") from None
            if tuple(h.strip() for h in header) != POLICY_TABLE_COLUMNS:
                raise TableFormatError(
                    f"{path}: bad header {header!r}, expected {list(POLICY_TABLE_COLUMNS)}"
                )
            by_fx: dict[int, tuple[int, float, int, float]] = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    fx = int(row[0])
                    lam_m = _int_field(row[1])
                    alpha = float(row[2])
                    lam_c = _int_field(row[3])
                    beta = float(row[4])
                except (ValueError, IndexError) as exc:
                    raise TableFormatError(f"{path}:{lineno}: {exc}") from None
                if fx in by_fx:
                    raise TableFormatError(f"{path}:{lineno}: duplicate fx={fx}")
                by_fx[fx] = (lam_m, alpha, lam_c, beta)
        n = len(by_fx)
        missing = sorted(set(range(n)) - set(by_fx))
        if missing:
            raise TableFormatError(
                f"{path}: fitness values must cover 0..{n - 1}; missing {missing[:5]}"
            )
        try:
            return cls([by_fx[fx] for fx in range(n)])
        except ContractViolationError as exc:
            raise TableFormatError(f"{path}: {exc}") from None

    def to_csv(self, path) -> None:
        write_policy_table(self, self.n, path)


def _int_field(text: str) -> int:
    val = float(text)
    if val != int(val):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(val)


def write_policy_table(policy: PolicyBase, n: int, path) -> None:
    """Dump policy decisions for every fitness value to CSV.

    Self-adjusting policies are excluded: their choice depends on history, not
    on fx alone.
    """
    if isinstance(policy, SelfAdjustingPolicy):
        raise ContractViolationError(
            "self-adjusting policies have no per-fitness table"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POLICY_TABLE_COLUMNS)
        for fx in range(n):
            ps = policy.select(fx, n)
            writer.writerow(
                [fx, ps.lambda_m, repr(ps.alpha), ps.lambda_c, repr(ps.beta)]
            )


# rows of the symbolic ablation: which parameters leave the theory schedule
ABLATION_ROWS: tuple[tuple[str, tuple[PerParameterSource, ...]], ...] = (
    ("theory", ("theory", "theory", "theory", "theory")),
    ("lm", ("staged", "theory", "theory", "theory")),
    ("alpha", ("theory", "staged", "theory", "theory")),
    ("lc", ("theory", "theory", "staged", "theory")),
    ("alpha_lc", ("theory", "staged", "staged", "theory")),
    ("lm_lc", ("staged", "theory", "staged", "theory")),
    ("full", ("staged", "staged", "staged", "theory")),
)


def ablation_policies() -> list[tuple[str, CompositePolicy]]:
    return [(name, CompositePolicy(*sources)) for name, sources in ABLATION_ROWS]
