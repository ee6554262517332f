"""Offspring-rate schedules for density-dependent branching processes.

A schedule assigns, to every carrying capacity ``kappa`` and population
size ``n``, a finite map ``i -> rate`` giving the per-individual rate of
being replaced by ``i`` offspring.  The built-in kinds cover density
independence, logistic and Gompertz death due to competition, reduced
binary reproduction, and exponential-to-polynomial growth; ``user-table``
schedules allow arbitrary piecewise-in-n rate maps for testing.

All schedules carry "intrinsic" rates: the offspring law in force while
the population is small.  Intrinsic mean growth must be positive
(supercritical), and offspring support is finite and bounded, which makes
second moments finite by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError

DEFAULT_MAX_OFFSPRING = 8

KINDS = (
    "density-independent",
    "logistic-death",
    "gompertz-death",
    "logistic-reduced-birth-binary",
    "exp-to-poly-binary",
    "user-table",
)


class OffspringRates:
    """Finite map from offspring count to a non-negative per-individual rate.

    Zero-rate entries are dropped so that two maps describing the same law
    compare equal.  Instances are immutable.
    """

    __slots__ = ("_rates",)

    def __init__(self, rates: Mapping[int, float],
                 max_offspring: int = DEFAULT_MAX_OFFSPRING):
        clean = {}
        for i, r in rates.items():
            i = int(i)
            r = float(r)
            if i < 0:
                raise ConfigError(f"offspring count {i} is negative")
            if i > max_offspring:
                raise ConfigError(
                    f"offspring count {i} exceeds the support limit {max_offspring}")
            if not math.isfinite(r) or r < 0:
                raise ConfigError(f"rate for offspring count {i} is {r}")
            if r > 0:
                clean[i] = r
        self._rates = dict(sorted(clean.items()))

    def as_dict(self) -> dict[int, float]:
        return dict(self._rates)

    def items(self) -> Iterator[tuple[int, float]]:
        return iter(self._rates.items())

    def get(self, i: int) -> float:
        return self._rates.get(i, 0.0)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(self._rates)

    @property
    def total(self) -> float:
        return sum(self._rates.values())

    def mean_growth(self) -> float:
        return sum((i - 1) * r for i, r in self._rates.items())

    def second_moment(self) -> float:
        return sum(i * i * r for i, r in self._rates.items())

    def is_binary(self) -> bool:
        return all(i in (0, 2) for i in self._rates)

    def __eq__(self, other) -> bool:
        return isinstance(other, OffspringRates) and self._rates == other._rates

    def __hash__(self) -> int:
        return hash(tuple(self._rates.items()))

    def __repr__(self) -> str:
        return f"OffspringRates({self._rates})"


def mean_growth_rate(r: OffspringRates) -> float:
    """Per-individual mean growth rate: sum of (i - 1) * rate(i)."""
    return r.mean_growth()


class UserTableRow(NamedTuple):
    """One row of a user-table schedule: rates in force for n in [n_min, n_max]."""

    n_min: int
    n_max: int
    rates: OffspringRates


@dataclass(frozen=True)
class SuperlinearParams:
    """Parameters of the superlinear-growth lower bound c * n**(-alpha)."""

    c: float
    alpha: float

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError("c must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")


class SuperlinearReport(NamedTuple):
    holds: bool
    first_violation: Optional[int]


@dataclass(frozen=True)
class RateSchedule:
    """A family of offspring-rate maps indexed by (kappa, n).

    Immutable after construction and safe to share across threads.  The
    ``params`` dict holds schedule-specific constants (currently only the
    exponent ``a`` of the exp-to-poly kind); ``table`` holds the rows of a
    user-table schedule.
    """

    kind: str
    intrinsic: OffspringRates
    params: dict = field(default_factory=dict)
    table: tuple[UserTableRow, ...] = ()
    max_offspring: int = DEFAULT_MAX_OFFSPRING

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.intrinsic.mean_growth() <= 0:
            raise ConfigError("intrinsic rates must have positive mean growth")
        if self.kind in ("logistic-reduced-birth-binary", "exp-to-poly-binary"):
            if not self.intrinsic.is_binary():
                raise ConfigError(f"{self.kind} requires binary intrinsic rates")
        if self.kind == "exp-to-poly-binary":
            a = self.params.get("a")
            if a is None or not 0 <= a < 1:
                raise ConfigError("exp-to-poly-binary requires parameter a in [0, 1)")
        if self.kind == "user-table" and not self.table:
            raise ConfigError("user-table schedule requires at least one row")

    # -- core evaluation ---------------------------------------------------

    def rate_table(self, kappa: int, n: int) -> dict[int, float]:
        """Plain dict of rates at (kappa, n), negatives clamped to zero.

        This is the cheap accessor used by the simulator's inner loop;
        :func:`rates_at` wraps the result in :class:`OffspringRates`.
        """
        if n < 1:
            raise ConfigError("population size n must be >= 1")
        if kappa < 1:
            raise ConfigError("kappa must be >= 1")
        base = self.intrinsic
        kind = self.kind
        if kind == "density-independent":
            return base.as_dict()
        if kind == "logistic-death":
            out = base.as_dict()
            out[0] = base.get(0) + (n / kappa) * base.mean_growth()
            return out
        if kind == "gompertz-death":
            if kappa < 2:
                raise ConfigError("gompertz-death requires kappa >= 2")
            out = base.as_dict()
            out[0] = base.get(0) + (math.log(n) / math.log(kappa)) * base.mean_growth()
            return out
        if kind == "logistic-reduced-birth-binary":
            lam0, lam2 = base.get(0), base.get(2)
            birth = lam2 + (n / kappa) * (lam0 - lam2)
            return {0: lam0, 2: max(birth, 0.0)}
        if kind == "exp-to-poly-binary":
            lam0, lam2 = base.get(0), base.get(2)
            a = self.params["a"]
            birth = lam0 + kappa / (kappa + n ** a) * (lam2 - lam0)
            return {0: lam0, 2: max(birth, 0.0)}
        # user-table: first covering row wins; n outside all rows falls back
        # to the intrinsic rates.
        for row in self.table:
            if row.n_min <= n <= row.n_max:
                return row.rates.as_dict()
        return base.as_dict()

    def mean_growth_at(self, kappa: int, n) -> np.ndarray | float:
        """Mean growth rate at (kappa, n); accepts a vector of sizes n."""
        n_arr = np.asarray(n, dtype=float)
        base = self.intrinsic
        g = base.mean_growth()
        kind = self.kind
        if kind == "density-independent":
            out = np.full_like(n_arr, g)
        elif kind == "logistic-death":
            out = g - (n_arr / kappa) * g
        elif kind == "gompertz-death":
            out = g - (np.log(n_arr) / math.log(kappa)) * g
        elif kind == "logistic-reduced-birth-binary":
            lam0, lam2 = base.get(0), base.get(2)
            birth = np.maximum(lam2 + (n_arr / kappa) * (lam0 - lam2), 0.0)
            out = birth - lam0
        elif kind == "exp-to-poly-binary":
            lam0, lam2 = base.get(0), base.get(2)
            birth = np.maximum(lam0 + kappa / (kappa + n_arr ** self.params["a"]) * (lam2 - lam0), 0.0)
            out = birth - lam0
        else:
            out = np.array([mean_growth_rate(rates_at(self, kappa, int(v))) for v in np.atleast_1d(n_arr)])
            out = out.reshape(n_arr.shape)
        return float(out) if np.isscalar(n) or n_arr.ndim == 0 else out

    # -- serialization -----------------------------------------------------

    def to_descriptor(self) -> dict:
        """JSON-ready descriptor: {"kind", "intrinsic", "params"}."""
        desc = {
            "kind": self.kind,
            "intrinsic": {str(i): r for i, r in self.intrinsic.items()},
            "params": dict(self.params),
        }
        if self.kind == "user-table":
            desc["params"]["rows"] = [
                {"n_min": row.n_min, "n_max": row.n_max,
                 "rates": {str(i): r for i, r in row.rates.items()}}
                for row in self.table
            ]
        return desc

    @classmethod
    def from_descriptor(cls, desc: Mapping,
                        max_offspring: int = DEFAULT_MAX_OFFSPRING) -> "RateSchedule":
        try:
            kind = desc["kind"]
            intrinsic = OffspringRates(
                {int(k): float(v) for k, v in desc["intrinsic"].items()},
                max_offspring=max_offspring)
        except KeyError as exc:
            raise ConfigError(f"schedule descriptor missing key {exc}") from exc
        params = dict(desc.get("params", {}))
        rows = params.pop("rows", None)
        table = ()
        if rows is not None:
            table = tuple(
                UserTableRow(int(r["n_min"]), int(r["n_max"]),
                             OffspringRates({int(k): float(v) for k, v in r["rates"].items()},
                                            max_offspring=max_offspring))
                for r in rows
            )
        return cls(kind=kind, intrinsic=intrinsic, params=params,
                   table=table, max_offspring=max_offspring)


def schedule_to_json(s: RateSchedule) -> str:
    return json.dumps(s.to_descriptor())


def schedule_from_json(text: str) -> RateSchedule:
    try:
        desc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid schedule JSON: {exc}") from exc
    return RateSchedule.from_descriptor(desc)


# -- convenience constructors ----------------------------------------------

def density_independent(intrinsic: Mapping[int, float]) -> RateSchedule:
    return RateSchedule("density-independent", OffspringRates(intrinsic))


def logistic_death(intrinsic: Mapping[int, float]) -> RateSchedule:
    return RateSchedule("logistic-death", OffspringRates(intrinsic))


def gompertz_death(intrinsic: Mapping[int, float]) -> RateSchedule:
    return RateSchedule("gompertz-death", OffspringRates(intrinsic))


def logistic_reduced_birth(intrinsic: Mapping[int, float]) -> RateSchedule:
    return RateSchedule("logistic-reduced-birth-binary", OffspringRates(intrinsic))


def exp_to_poly(intrinsic: Mapping[int, float], a: float) -> RateSchedule:
    return RateSchedule("exp-to-poly-binary", OffspringRates(intrinsic), params={"a": a})


def user_table(intrinsic: Mapping[int, float],
               rows: Sequence[tuple[int, int, Mapping[int, float]]]) -> RateSchedule:
    table = tuple(UserTableRow(lo, hi, OffspringRates(r)) for lo, hi, r in rows)
    return RateSchedule("user-table", OffspringRates(intrinsic), table=table)


# -- diagnostics -----------------------------------------------------------

def rates_at(s: RateSchedule, kappa: int, n: int) -> OffspringRates:
    """Offspring rates of schedule ``s`` at carrying capacity kappa and size n."""
    return OffspringRates(s.rate_table(kappa, n), max_offspring=s.max_offspring)


def total_variation_gap(s: RateSchedule, kappa: int, n: int) -> float:
    """Per-individual decoupling intensity: sum over i of |intrinsic - at(kappa, n)|.

    Zero exactly when the schedule is density-independent at (kappa, n).
    """
    at = s.rate_table(kappa, n)
    base = s.intrinsic.as_dict()
    return sum(abs(base.get(i, 0.0) - at.get(i, 0.0)) for i in set(base) | set(at))


def check_superlinear(s: RateSchedule, kappa: int, p: SuperlinearParams,
                      n_max: int) -> SuperlinearReport:
    """Check the growth bound mean_growth(kappa, n) >= c * n**(-alpha) on 1..n_max."""
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    n = np.arange(1, n_max + 1, dtype=float)
    growth = np.asarray(s.mean_growth_at(kappa, n))
    ok = growth >= p.c * n ** (-p.alpha)
    if bool(ok.all()):
        return SuperlinearReport(True, None)
    return SuperlinearReport(False, int(np.argmin(ok)) + 1)
