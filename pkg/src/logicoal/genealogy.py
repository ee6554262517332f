"""Ulam-Harris labels, event logs, population replay and Newick export.

Individuals are named by tuples of positive integers; the empty tuple is
the founding individual and the proper prefixes of a label are exactly
its ancestors.  A run's full history is an append-only event log: each
event replaces one living parent by its children ``parent + (1,)``
through ``parent + (j,)`` (``j = 0`` is a death).  Population snapshots
at arbitrary times are reconstructed by replay, which applies all events
with time <= t to the founding population (right-continuous paths).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .errors import NewickError

Label = tuple[int, ...]

ROOT: Label = ()


class Event(NamedTuple):
    time: float
    parent: Label
    offspring_count: int


@dataclass
class EventLog:
    """Time-ordered event sequence starting from the population {root} at 0.

    Written by exactly one simulation; immutable (by convention) once the
    run completes, after which it may be shared freely for analysis.
    """

    events: list[Event] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def end_time(self) -> float:
        return self.events[-1].time if self.events else 0.0


class PopulationSnapshot(NamedTuple):
    alive: frozenset[Label]
    size: int


def lcp(a: Label, b: Label) -> Label:
    """Longest common prefix of two labels (the most recent common ancestor)."""
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return a[:n]


def is_ancestor(a: Label, b: Label, strict: bool = False) -> bool:
    """Whether a precedes b in the genealogical order (a prefix of b).

    With ``strict=True`` a label does not precede itself.
    """
    if strict and len(a) >= len(b):
        return False
    return b[:len(a)] == a


def replay(log: EventLog, t: float) -> PopulationSnapshot:
    """Population alive at time t: all events with time <= t applied to {root}."""
    if t < 0:
        raise ValueError("replay time must be non-negative")
    alive: set[Label] = {ROOT}
    for time, parent, j in log.events:
        if time > t:
            break
        alive.discard(parent)
        for i in range(1, j + 1):
            alive.add(parent + (i,))
    return PopulationSnapshot(frozenset(alive), len(alive))


def lifespan(log: EventLog, u: Label) -> Optional[tuple[float, Optional[float]]]:
    """Interval during which u was alive, or None if u never lived.

    Returns ``(birth, replaced)`` where ``replaced`` is None if u is still
    alive at the end of the log.  The founding individual is born at 0.
    A parent's replacement time equals its children's birth time, so the
    intervals of a parent and its children abut exactly.
    """
    birth: Optional[float] = 0.0 if u == ROOT else None
    for time, parent, j in log.events:
        if birth is None and parent == u[:-1] and u[-1] <= j:
            birth = time
        if birth is not None and parent == u:
            return birth, time
    if birth is None:
        return None
    return birth, None


def replaced_times(log: EventLog) -> dict[Label, float]:
    """Map from each replaced label to the time of its replacement event."""
    return {parent: time for time, parent, _ in log.events}


# -- sampled trees and Newick export -----------------------------------------


@dataclass
class TreeNode:
    """A rooted tree node with a branch length toward its parent.

    Leaves carry a name; internal nodes have two or more children.  The
    root's own ``length`` is ignored by the Newick writer.
    """

    name: Optional[str] = None
    length: float = 0.0
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def to_newick(tree: TreeNode) -> str:
    """Standard Newick string with branch lengths, 6 significant digits.

    A single leaf serializes without parentheses ("1:L;") for widest
    parser compatibility.
    """

    def fmt(x: float) -> str:
        if not x >= 0:
            raise NewickError(f"negative branch length {x}")
        return f"{x:.6g}"

    def emit(node: TreeNode) -> str:
        if node.is_leaf:
            if not node.name:
                raise NewickError("leaf without a name")
            return f"{node.name}:{fmt(node.length)}"
        inner = ",".join(emit(c) for c in node.children)
        return f"({inner}):{fmt(node.length)}"

    if tree.is_leaf:
        if not tree.name:
            raise NewickError("leaf without a name")
        return f"{tree.name}:{fmt(tree.length)};"
    inner = ",".join(emit(c) for c in tree.children)
    return f"({inner});"


# -- CSV interchange ----------------------------------------------------------


def label_to_str(u: Label) -> str:
    """Dot-joined path; the root serializes as the empty string."""
    return ".".join(str(i) for i in u)


def label_from_str(s: str) -> Label:
    if not s:
        return ROOT
    return tuple(int(part) for part in s.split("."))


def write_event_log_csv(log: EventLog, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "parent", "offspring_count"])
        for time, parent, j in log.events:
            writer.writerow([repr(time), label_to_str(parent), j])


def read_event_log_csv(path) -> EventLog:
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["time", "parent", "offspring_count"]:
            raise ValueError(f"unexpected event-log header: {header}")
        for row in reader:
            events.append(Event(float(row[0]), label_from_str(row[1]), int(row[2])))
    return EventLog(events)
