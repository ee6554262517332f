"""Sampling individuals at the stopping time and extracting coalescent trees.

Two sampling schemes are provided: a plain uniform sample without
replacement, and mark-based sampling with replacement, where each sample
carries a uniform mark in [0,1) and is mapped to the living individual
whose descendant-fraction interval contains the mark.  The intervals
subdivide [0,1) recursively: the interval of a label has width equal to
the fraction of the living population descended from it, and children
partition their parent's interval in index order.  Interval endpoints are
exact rationals over the population size, so the partition of [0,1) is
exact rather than approximate.

Coalescence times come straight from the labels: the most recent common
ancestor of two samples is their longest common prefix, and the pair's
coalescence time is the moment that ancestor was replaced by its
children.  A matrix of pairwise times is ultrametric, and induces the
partition-valued coalescent tree: at time t, samples i and j share a
block exactly when their coalescence time is >= t.

All operations are pure functions of completed runs and are safe to call
from parallel analysis code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from random import Random
from typing import Optional, Sequence

from .errors import (ExtinctPopulationError, InsufficientPopulationError,
                     UltrametricError)
from .genealogy import Label, ROOT, TreeNode, is_ancestor, lcp, replay
from .simulator import SimulationRun


@dataclass(frozen=True)
class SampleSet:
    """An ordered sample of individuals alive at ``sample_time``.

    ``ghost`` marks the degenerate outcome of mark-based sampling from an
    extinct population (no labels; nothing to coalesce).
    """

    labels: tuple[Label, ...]
    sample_time: float
    with_replacement: bool
    ghost: bool = False

    @property
    def m(self) -> int:
        return len(self.labels)


def descendant_fraction(run: SimulationRun, u: Label, t: float) -> float:
    """Fraction of the population at time t descended from u (0 if extinct)."""
    alive, size = replay(run.log, t)
    if size == 0:
        return 0.0
    return sum(1 for v in alive if v[:len(u)] == u) / size


@dataclass(frozen=True)
class ThetaIntervals:
    """Half-open subintervals of [0,1), one per living individual.

    Intervals are pairwise disjoint with union [0,1); the width of a
    label's interval is its descendant fraction (1/N for an individual),
    and the interval of any label nests inside the span of each of its
    ancestors.  Endpoints are exact ``Fraction`` values over N.
    """

    intervals: dict[Label, tuple[Fraction, Fraction]]
    order: tuple[Label, ...]

    @property
    def size(self) -> int:
        return len(self.order)

    def locate(self, mark: float) -> Label:
        """The living individual whose interval contains ``mark``."""
        if not 0 <= mark < 1:
            raise ValueError(f"mark {mark} outside [0, 1)")
        idx = math.floor(Fraction(mark) * len(self.order))
        return self.order[idx]


def theta_intervals(run: SimulationRun, t: float) -> ThetaIntervals:
    """Exact descendant-fraction subdivision of [0,1) at time t.

    Children are visited in birth-index order, so the k-th living label in
    depth-first order receives [k/N, (k+1)/N).
    """
    alive, size = replay(run.log, t)
    if size == 0:
        raise ExtinctPopulationError(f"population extinct at t={t}")

    children: dict[Label, set[int]] = {}
    for v in alive:
        for depth in range(len(v)):
            children.setdefault(v[:depth], set()).add(v[depth])

    order: list[Label] = []

    def visit(u: Label) -> None:
        if u in children:
            for i in sorted(children[u]):
                visit(u + (i,))
        else:
            order.append(u)

    visit(ROOT)
    n = Fraction(size)
    intervals = {u: (Fraction(k) / n, Fraction(k + 1) / n)
                 for k, u in enumerate(order)}
    return ThetaIntervals(intervals, tuple(order))


def sample_without_replacement(run: SimulationRun, m: int, seed: int) -> SampleSet:
    """Uniformly random distinct m-subset of the final population, in random order."""
    alive, size = replay(run.log, run.stop_time)
    if size < m:
        raise InsufficientPopulationError(
            f"population of size {size} cannot supply {m} distinct samples")
    rng = Random(seed)
    labels = tuple(rng.sample(sorted(alive), m))
    return SampleSet(labels, run.stop_time, with_replacement=False)


def sample_by_marks(run: SimulationRun, marks: Sequence[float]) -> SampleSet:
    """Map uniform marks in [0,1) to living individuals via their intervals.

    Sampling is with replacement: two marks landing in the same interval
    select the same individual.  An extinct population yields the ghost
    outcome (an empty, flagged sample) rather than an error.
    """
    alive, size = replay(run.log, run.stop_time)
    if size == 0:
        return SampleSet((), run.stop_time, with_replacement=True, ghost=True)
    theta = theta_intervals(run, run.stop_time)
    labels = tuple(theta.locate(x) for x in marks)
    return SampleSet(labels, run.stop_time, with_replacement=True)


@dataclass(frozen=True)
class CoalescenceMatrix:
    """Pairwise coalescence times and ancestor labels for an m-sample.

    ``tau[i][j]`` is the replacement time of the most recent common
    ancestor of samples i and j (diagonal unused); a pair of identical
    labels, possible when sampling with replacement, is assigned the
    sample time itself.  The sampled labels travel with the matrix so the
    induced partition process can keep duplicates together beyond the last
    breakpoint.
    """

    m: int
    tau: tuple[tuple[float, ...], ...]
    mrca: tuple[tuple[Optional[Label], ...], ...]
    labels: tuple[Label, ...]
    sample_time: float

    def pair_times(self) -> list[float]:
        """Upper-triangle coalescence times in (i, j) order with i < j."""
        return [self.tau[i][j] for i in range(self.m) for j in range(i + 1, self.m)]


def coalescence_matrix(run: SimulationRun, sample: SampleSet) -> CoalescenceMatrix:
    """Pairwise coalescence data for a sample taken at the run's stop time."""
    m = sample.m
    replaced = run.replaced_times()
    tau = [[0.0] * m for _ in range(m)]
    mrca: list[list[Optional[Label]]] = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            a, b = sample.labels[i], sample.labels[j]
            anc = lcp(a, b)
            mrca[i][j] = mrca[j][i] = anc
            if a == b:
                t = sample.sample_time
            else:
                t = replaced[anc]
            tau[i][j] = tau[j][i] = t
    return CoalescenceMatrix(
        m=m,
        tau=tuple(tuple(row) for row in tau),
        mrca=tuple(tuple(row) for row in mrca),
        labels=sample.labels,
        sample_time=sample.sample_time,
    )


@dataclass(frozen=True)
class PartitionProcess:
    """The partition-valued coalescent tree induced by a coalescence matrix.

    Partitions are materialized lazily per queried time from the stored
    breakpoints (the distinct coalescence times); they coarsen toward a
    single block as t decreases to 0 and refine to groups of identical
    sampled labels as t passes the last breakpoint.
    """

    m: int
    breakpoints: tuple[float, ...]
    _matrix: CoalescenceMatrix

    def partition_at(self, t: float) -> tuple[tuple[int, ...], ...]:
        """Partition of {1..m} at time t, as sorted tuples of sample indices."""
        mat = self._matrix
        parent = list(range(self.m))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(self.m):
            for j in range(i + 1, self.m):
                together = mat.tau[i][j] >= t or mat.labels[i] == mat.labels[j]
                if together:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[ri] = rj
        blocks: dict[int, list[int]] = {}
        for i in range(self.m):
            blocks.setdefault(find(i), []).append(i + 1)
        return tuple(sorted(tuple(sorted(b)) for b in blocks.values()))


def partition_process(mat: CoalescenceMatrix) -> PartitionProcess:
    """Build the partition process, validating the ultrametric property.

    For every triple of samples the smallest two of the three pairwise
    coalescence times must coincide; a matrix violating this cannot come
    from a genealogy and is rejected.
    """
    m = mat.m
    for i in range(m):
        for j in range(i + 1, m):
            for k in range(j + 1, m):
                trip = sorted((mat.tau[i][j], mat.tau[i][k], mat.tau[j][k]))
                if trip[0] != trip[1]:
                    raise UltrametricError(
                        f"triple ({i + 1},{j + 1},{k + 1}) has distinct smallest "
                        f"coalescence times {trip[0]} and {trip[1]}")
    breakpoints = tuple(sorted({mat.tau[i][j] for i in range(m)
                                for j in range(i + 1, m)}))
    return PartitionProcess(m=m, breakpoints=breakpoints, _matrix=mat)


def tree_from_matrix(mat: CoalescenceMatrix) -> TreeNode:
    """Rooted tree with branch lengths from an ultrametric coalescence matrix.

    Leaves are named by sample index 1..m; merges are applied at the
    distinct coalescence times in decreasing order, so simultaneous merges
    (three or more samples coalescing in one reproduction event, or
    duplicate labels) produce multifurcations.
    """
    m = mat.m
    if m == 1:
        return TreeNode(name="1", length=mat.sample_time)
    clusters: dict[int, TreeNode] = {
        i: TreeNode(name=str(i + 1)) for i in range(m)}
    height = {i: mat.sample_time for i in range(m)}
    rep = list(range(m))

    def find(i: int) -> int:
        while rep[i] != i:
            rep[i] = rep[rep[i]]
            i = rep[i]
        return i

    times = sorted({mat.tau[i][j] for i in range(m) for j in range(i + 1, m)},
                   reverse=True)
    for t in times:
        groups: dict[int, set[int]] = {}
        for i in range(m):
            for j in range(i + 1, m):
                if mat.tau[i][j] == t:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        g = groups.setdefault(min(ri, rj), {ri, rj})
                        g.add(ri)
                        g.add(rj)
        # transitively merge overlapping groups formed at the same time
        merged: list[set[int]] = []
        for g in groups.values():
            for other in merged:
                if other & g:
                    other |= g
                    break
            else:
                merged.append(g)
        for g in merged:
            roots = sorted({find(i) for i in g})
            if len(roots) < 2:
                continue
            node = TreeNode()
            for r in roots:
                child = clusters.pop(r)
                child.length = height[r] - t
                node.children.append(child)
            anchor = roots[0]
            for r in roots[1:]:
                rep[r] = anchor
            clusters[anchor] = node
            height[anchor] = t
    # every pair carries a coalescence time, so all clusters have merged
    assert len(clusters) == 1
    return clusters.popitem()[1]
