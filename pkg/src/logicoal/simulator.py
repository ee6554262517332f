"""Exact event-driven simulation of density-dependent branching genealogies.

The simulator draws every reproduction event of the continuous-time Markov
chain: while the population has size n under schedule rates ``L``, the
total event rate is ``n * sum_j L_j(kappa, n)``, waiting times are
exponential at that rate, the reproducing individual is uniform among the
living and the offspring count j is chosen proportionally to ``L_j``.
Nothing is approximated: the coalescent analysis downstream needs the full
genealogy, so tau-leaping and similar accelerations are out of scope.

``simulate_coupled`` runs the bivariate chain that couples the
density-dependent model with its density-independent ("intrinsic")
counterpart, moving shared individuals jointly at the pointwise minimum of
the two rate families and splitting the excess into one-sided moves.  The
coupling keeps the two populations equal for as long as possible; the
first one-sided event while they are still equal is recorded as the
decoupling time.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .genealogy import EventLog, Label, ROOT
from .rates import RateSchedule

DEFAULT_EVENT_BUDGET = 10_000_000


@dataclass(frozen=True)
class StoppingRule:
    """When to stop a run: fixed time, size threshold, log-size threshold,
    or a fixed number of events.

    Thresholds are

    - ``fixed-time``: stop at clock time ``value``;
    - ``size-threshold``: stop when the population first reaches
      ``ceil(value * kappa)`` individuals;
    - ``log-size-threshold``: stop when log(size) first reaches
      ``value * log(kappa)``, i.e. size >= kappa ** value;
    - ``event-budget``: stop after ``value`` events.
    """

    kind: str
    value: float

    KINDS = ("fixed-time", "size-threshold", "log-size-threshold", "event-budget")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown stopping rule kind {self.kind!r}")
        if not self.value > 0:
            raise ConfigError("stopping rule threshold must be positive")

    def size_threshold(self, kappa: int) -> Optional[int]:
        if self.kind == "size-threshold":
            return max(1, math.ceil(self.value * kappa))
        if self.kind == "log-size-threshold":
            return max(1, math.ceil(kappa ** self.value))
        return None

    def spec_string(self) -> str:
        tag = {"fixed-time": "time", "size-threshold": "size",
               "log-size-threshold": "logsize", "event-budget": "events"}[self.kind]
        return f"{tag}:{self.value!r}"


def fixed_time(t: float) -> StoppingRule:
    return StoppingRule("fixed-time", t)


def size_threshold(x: float) -> StoppingRule:
    return StoppingRule("size-threshold", x)


def log_size_threshold(x: float) -> StoppingRule:
    return StoppingRule("log-size-threshold", x)


def event_budget_rule(n: int) -> StoppingRule:
    return StoppingRule("event-budget", n)


def parse_stop_spec(spec: str) -> StoppingRule:
    """Parse "time:3.0" | "size:0.1" | "logsize:0.5" | "events:1000"."""
    try:
        tag, raw = spec.split(":", 1)
        value = float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad stop spec {spec!r}") from exc
    kinds = {"time": "fixed-time", "size": "size-threshold",
             "logsize": "log-size-threshold", "events": "event-budget"}
    if tag not in kinds:
        raise ConfigError(f"bad stop spec {spec!r}")
    return StoppingRule(kinds[tag], value)


class Outcome(enum.Enum):
    STOPPED = "stopped"
    EXTINCT = "extinct"
    BUDGET_EXHAUSTED = "budget-exhausted"
    FROZEN = "stopped-frozen"


@dataclass
class SimulationRun:
    """One completed sample path: the event log plus the stopping record."""

    schedule: RateSchedule
    kappa: int
    seed: int
    log: EventLog
    stop_time: float
    outcome: Outcome

    _replaced: Optional[dict] = None

    def replaced_times(self) -> dict[Label, float]:
        """Cached map label -> replacement time (lazily built once)."""
        if self._replaced is None:
            self._replaced = {parent: time for time, parent, _ in self.log.events}
        return self._replaced


def derive_seed(*entropy: int) -> int:
    """Deterministic 64-bit seed from a tuple of integers (platform-stable)."""
    return int(np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy] or 0)
               .generate_state(1, np.uint64)[0])


def _rate_entry(schedule: RateSchedule, kappa: int, n: int):
    table = schedule.rate_table(kappa, n)
    js = tuple(j for j, r in table.items() if r > 0)
    rs = tuple(table[j] for j in js)
    cum = []
    acc = 0.0
    for r in rs:
        acc += r
        cum.append(acc)
    return acc, js, tuple(cum)


def simulate(schedule: RateSchedule, kappa: int, stop: StoppingRule, seed: int,
             event_budget: int = DEFAULT_EVENT_BUDGET) -> SimulationRun:
    """Draw one exact sample path from the founding individual.

    Deterministic given (schedule, kappa, stop, seed): the same arguments
    produce a bit-identical event log.  A global event budget terminates
    configurations that would otherwise run forever; exhaustion is
    reported through the outcome, not an exception.
    """
    rng = random.Random(seed)
    expov = rng.expovariate
    uniform = rng.random

    alive: list[Label] = [ROOT]
    events: list = []
    t = 0.0
    n = 1

    time_limit = stop.value if stop.kind == "fixed-time" else None
    threshold = stop.size_threshold(kappa)
    event_limit = int(stop.value) if stop.kind == "event-budget" else None

    cache: dict[int, tuple] = {}

    if threshold is not None and n >= threshold:
        return SimulationRun(schedule, kappa, seed, EventLog(events), 0.0, Outcome.STOPPED)

    while True:
        entry = cache.get(n)
        if entry is None:
            entry = cache[n] = _rate_entry(schedule, kappa, n)
        total_per, js, cum = entry
        if total_per == 0.0:
            return SimulationRun(schedule, kappa, seed, EventLog(events), t, Outcome.FROZEN)

        t_next = t + expov(n * total_per)
        if time_limit is not None and t_next > time_limit:
            return SimulationRun(schedule, kappa, seed, EventLog(events), time_limit,
                                 Outcome.STOPPED)
        t = t_next

        idx = int(uniform() * n)
        parent = alive[idx]
        alive[idx] = alive[-1]
        alive.pop()

        if len(js) == 1:
            j = js[0]
        else:
            x = uniform() * total_per
            j = js[-1]
            for pos, c in enumerate(cum):
                if x < c:
                    j = js[pos]
                    break

        events.append((t, parent, j))
        for i in range(1, j + 1):
            alive.append(parent + (i,))
        n += j - 1

        if n == 0:
            return SimulationRun(schedule, kappa, seed, EventLog(events), t, Outcome.EXTINCT)
        if threshold is not None and n >= threshold:
            return SimulationRun(schedule, kappa, seed, EventLog(events), t, Outcome.STOPPED)
        if event_limit is not None and len(events) >= event_limit:
            return SimulationRun(schedule, kappa, seed, EventLog(events), t, Outcome.STOPPED)
        if len(events) >= event_budget:
            return SimulationRun(schedule, kappa, seed, EventLog(events), t,
                                 Outcome.BUDGET_EXHAUSTED)


@dataclass
class CoupledRun:
    """Joint sample path of the intrinsic-rate and density-dependent models.

    ``decouple_time`` is the time of the first event applied to only one of
    the two populations while they were still equal as label sets; it is
    None when the populations remained equal for the whole run.
    """

    schedule: RateSchedule
    kappa: int
    seed: int
    log_intrinsic: EventLog
    log_dependent: EventLog
    decouple_time: Optional[float]
    stop_time: float
    outcome: Outcome


def simulate_coupled(schedule: RateSchedule, kappa: int, stop: StoppingRule,
                     seed: int, event_budget: int = DEFAULT_EVENT_BUDGET) -> CoupledRun:
    """Simulate the coupled pair of genealogies from a single random stream.

    Individuals present in both populations move jointly at the pointwise
    minimum of the intrinsic and density-dependent rates; positive rate
    excesses move one population alone, as do individuals present in only
    one population.  Size-based stopping rules are evaluated against the
    density-dependent population; fixed-time rules against the shared clock.
    """
    rng = random.Random(seed)
    expov = rng.expovariate
    uniform = rng.random

    base = schedule.intrinsic.as_dict()
    support = sorted(base)
    lam_inf = [base.get(j, 0.0) for j in support]
    sum_inf = sum(lam_inf)

    shared: list[Label] = [ROOT]
    inf_only: list[Label] = []
    dep_only: list[Label] = []
    ev_inf: list = []
    ev_dep: list = []
    t = 0.0
    n_steps = 0
    decouple_time: Optional[float] = None

    time_limit = stop.value if stop.kind == "fixed-time" else None
    threshold = stop.size_threshold(kappa)
    event_limit = int(stop.value) if stop.kind == "event-budget" else None

    cache: dict[int, tuple] = {}

    def finish(outcome: Outcome, stop_time: float) -> CoupledRun:
        return CoupledRun(schedule, kappa, seed, EventLog(ev_inf), EventLog(ev_dep),
                          decouple_time, stop_time, outcome)

    if threshold is not None and 1 >= threshold:
        return finish(Outcome.STOPPED, 0.0)

    while True:
        n_dep = len(shared) + len(dep_only)
        n_inf = len(shared) + len(inf_only)
        if n_dep == 0 and n_inf == 0:
            return finish(Outcome.EXTINCT, t)

        if n_dep > 0:
            entry = cache.get(n_dep)
            if entry is None:
                table = schedule.rate_table(kappa, n_dep)
                allj = sorted(set(support) | set(table))
                row = []
                for j in allj:
                    li = base.get(j, 0.0)
                    lk = table.get(j, 0.0)
                    mn = li if li < lk else lk
                    row.append((j, li, lk, mn, li - mn, lk - mn))
                entry = cache[n_dep] = (row, sum(table.values()))
            row, sum_dep = entry
        else:
            row = [(j, base.get(j, 0.0), 0.0, 0.0, base.get(j, 0.0), 0.0) for j in support]
            sum_dep = 0.0

        s_cnt, a_cnt, b_cnt = len(shared), len(inf_only), len(dep_only)
        sum_min = sum(r[3] for r in row)
        sum_exc_inf = sum(r[4] for r in row)
        sum_exc_dep = sum(r[5] for r in row)

        # five event classes: (population moved, parent pool, per-individual rates)
        r_joint = s_cnt * sum_min
        r_inf_shared = s_cnt * sum_exc_inf
        r_inf_alone = a_cnt * sum_inf
        r_dep_shared = s_cnt * sum_exc_dep
        r_dep_alone = b_cnt * sum_dep
        total = r_joint + r_inf_shared + r_inf_alone + r_dep_shared + r_dep_alone

        if total == 0.0:
            return finish(Outcome.FROZEN, t)

        t_next = t + expov(total)
        if time_limit is not None and t_next > time_limit:
            return finish(Outcome.STOPPED, time_limit)
        t = t_next

        x = uniform() * total
        if x < r_joint:
            cls, weight_idx, pool = "joint", 3, shared
        elif x < r_joint + r_inf_shared:
            cls, weight_idx, pool = "inf-shared", 4, shared
        elif x < r_joint + r_inf_shared + r_inf_alone:
            cls, weight_idx, pool = "inf-alone", 1, inf_only
        elif x < total - r_dep_alone:
            cls, weight_idx, pool = "dep-shared", 5, shared
        else:
            cls, weight_idx, pool = "dep-alone", 2, dep_only

        wsum = sum(r[weight_idx] for r in row)
        y = uniform() * wsum
        j = row[-1][0]
        acc = 0.0
        for r in row:
            acc += r[weight_idx]
            if y < acc:
                j = r[0]
                break

        idx = int(uniform() * len(pool))
        parent = pool[idx]
        pool[idx] = pool[-1]
        pool.pop()
        children = [parent + (i,) for i in range(1, j + 1)]

        if cls == "joint":
            shared.extend(children)
            ev_inf.append((t, parent, j))
            ev_dep.append((t, parent, j))
        elif cls in ("inf-shared", "inf-alone"):
            if cls == "inf-shared":
                # parent stays alive in the dependent population only
                dep_only.append(parent)
                if decouple_time is None and a_cnt == 0 and b_cnt == 0:
                    decouple_time = t
            inf_only.extend(children)
            ev_inf.append((t, parent, j))
        else:
            if cls == "dep-shared":
                inf_only.append(parent)
                if decouple_time is None and a_cnt == 0 and b_cnt == 0:
                    decouple_time = t
            dep_only.extend(children)
            ev_dep.append((t, parent, j))

        n_steps += 1
        n_dep = len(shared) + len(dep_only)
        if n_dep == 0 and len(inf_only) == 0:
            return finish(Outcome.EXTINCT, t)
        if threshold is not None and n_dep >= threshold:
            return finish(Outcome.STOPPED, t)
        if event_limit is not None and n_steps >= event_limit:
            return finish(Outcome.STOPPED, t)
        if n_steps >= event_budget:
            return finish(Outcome.BUDGET_EXHAUSTED, t)
