"""Compression plans: pseudo-pruning, plain pruning and clustering baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .saliency import SaliencyVector
from .similarity import SimilarityMatrix

METHODS = ("ream_pseudo_prune", "prune_freq", "prune_reap", "cluster_avg_linkage", "assign_nearest")


class InfeasibleCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingPlan:
    centroids: tuple[int, ...]
    assignments: dict[int, int] = field(default_factory=dict)
    capacity: int | None = None
    method: str = "ream_pseudo_prune"

    @property
    def n_keep(self) -> int:
        return len(self.centroids)

    def members(self, centroid: int) -> list[int]:
        """Absorbed experts of ``centroid`` in ascending index order."""
        return sorted(j for j, c in self.assignments.items() if c == centroid)

    def groups(self) -> list[tuple[int, list[int]]]:
        return [(c, self.members(c)) for c in self.centroids]

    def singletons(self) -> int:
        return sum(1 for _, m in self.groups() if not m)

    def validate(self, n: int) -> None:
        cset = set(self.centroids)
        if len(cset) != len(self.centroids):
            raise ValueError("duplicate centroid")
        keys = set(self.assignments)
        if cset & keys:
            raise ValueError("an expert is both centroid and member")
        covered = cset | keys
        if not covered <= set(range(n)):
            raise ValueError("expert index out of range")
        if self.assignments and covered != set(range(n)):
            raise ValueError("centroids and members do not partition the layer")
        if any(c not in cset for c in self.assignments.values()):
            raise ValueError("assignment to a non-centroid")
        if self.capacity is not None:
            for c in self.centroids:
                if len(self.members(c)) > self.capacity:
                    raise ValueError(f"centroid {c} exceeds capacity {self.capacity}")

    def dump(self) -> str:
        lines = [f"# method={self.method} capacity={self.capacity}"]
        for c, members in self.groups():
            lines.append(f"centroid {c} members {','.join(map(str, members))}")
        return "\n".join(lines) + "\n"


def parse_plan(text: str) -> GroupingPlan:
    centroids, assignments = [], {}
    method, capacity = "ream_pseudo_prune", None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "method":
                    method = val
                elif key == "capacity":
                    capacity = None if val == "None" else int(val)
            continue
        parts = line.split()
        if len(parts) not in (3, 4) or parts[0] != "centroid" or parts[2] != "members":
            raise ValueError(f"malformed plan line: {line!r}")
        c = int(parts[1])
        centroids.append(c)
        if len(parts) == 4:
            for m in parts[3].split(","):
                assignments[int(m)] = c
    return GroupingPlan(tuple(centroids), assignments, capacity, method)


def rank_by_saliency(saliency: SaliencyVector) -> list[int]:
    """Indices sorted by descending saliency, ties to the lower index."""
    s = saliency.scores
    return sorted(range(s.size), key=lambda i: (-s[i], i))


def _check_keep(n: int, n_keep: int) -> None:
    if not 1 <= n_keep < n:
        raise ValueError(f"n_keep must satisfy 1 <= n_keep < {n}, got {n_keep}")


def prune_select(saliency: SaliencyVector, n_keep: int) -> GroupingPlan:
    """Keep the ``n_keep`` most salient experts and drop the rest."""
    _check_keep(len(saliency), n_keep)
    centroids = tuple(rank_by_saliency(saliency)[:n_keep])
    return GroupingPlan(centroids, {}, None, f"prune_{saliency.kind}")


def pseudo_prune(
    saliency: SaliencyVector, sim: SimilarityMatrix, n_keep: int, capacity: int
) -> GroupingPlan:
    """Top-saliency centroids, each greedily absorbing up to ``capacity``
    of the most similar unassigned experts, in centroid order."""
    n = len(saliency)
    _check_keep(n, n_keep)
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    if capacity * n_keep < n - n_keep:
        raise InfeasibleCapacityError(
            f"{n_keep} centroids x capacity {capacity} cannot absorb {n - n_keep} experts"
        )
    centroids = rank_by_saliency(saliency)[:n_keep]
    unassigned = [j for j in range(n) if j not in set(centroids)]
    assignments: dict[int, int] = {}
    for c in centroids:
        if not unassigned:
            break
        row = sim.values[c]
        ranked = sorted(unassigned, key=lambda j: (-row[j], j))
        for j in ranked[:capacity]:
            assignments[j] = c
        taken = set(ranked[:capacity])
        unassigned = [j for j in unassigned if j not in taken]
    return GroupingPlan(tuple(centroids), assignments, capacity, "ream_pseudo_prune")


def assign_nearest(saliency: SaliencyVector, sim: SimilarityMatrix, n_keep: int) -> GroupingPlan:
    """Top-saliency centroids; every other expert joins its most similar
    centroid with no size limit."""
    n = len(saliency)
    _check_keep(n, n_keep)
    centroids = rank_by_saliency(saliency)[:n_keep]
    cset = set(centroids)
    assignments = {}
    for j in range(n):
        if j in cset:
            continue
        assignments[j] = max(centroids, key=lambda c: (sim.values[c, j], -c))
    return GroupingPlan(tuple(centroids), assignments, None, "assign_nearest")


def average_linkage_clusters(distance: np.ndarray, n_clusters: int) -> list[list[int]]:
    """Agglomerative clustering with average linkage down to ``n_clusters``.

    Each step merges the pair of clusters with the smallest mean pairwise
    distance; ties go to the pair with the lowest (min index, min index).
    """
    d = np.asarray(distance, dtype=np.float64)
    clusters = [[i] for i in range(d.shape[0])]
    while len(clusters) > n_clusters:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                link = d[np.ix_(clusters[a], clusters[b])].mean()
                if best is None or link < best[0]:
                    best = (link, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return clusters


def cluster_avg_linkage(sim: SimilarityMatrix, n_keep: int) -> GroupingPlan:
    """HC-SMoE style grouping on ``1 - similarity`` with average linkage.

    The representative of each cluster is the member with the highest mean
    similarity to the other members. Centroids come out in ascending order.
    """
    n = sim.n
    if not 1 <= n_keep <= n:
        raise ValueError(f"n_keep must satisfy 1 <= n_keep <= {n}, got {n_keep}")
    clusters = average_linkage_clusters(1.0 - sim.values, n_keep)
    centroids, assignments = [], {}
    for members in clusters:
        if len(members) == 1:
            rep = members[0]
        else:
            sub = sim.values[np.ix_(members, members)]
            within = (sub.sum(axis=1) - np.diag(sub)) / (len(members) - 1)
            rep = members[int(np.argmax(within))]
        centroids.append(rep)
        for m in members:
            if m != rep:
                assignments[m] = rep
    order = sorted(range(len(centroids)), key=lambda k: centroids[k])
    return GroupingPlan(tuple(centroids[k] for k in order), assignments, None, "cluster_avg_linkage")


def write_plan(plan: GroupingPlan, path) -> None:
    Path(path).write_text(plan.dump())
