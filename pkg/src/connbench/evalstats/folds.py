"""Family-grouped, target-stratified k-fold assignment."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..dataio import Dataset
from ..ndcore import make_rng


class FoldPlanError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    """Subject-to-fold map plus the outer schedule: iteration i tests fold i, validates fold i+1."""

    assignments: dict[str, int]
    k: int

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def schedule(self) -> list[tuple[int, int]]:
        return [(i, (i + 1) % self.k) for i in range(self.k)]

    def sizes(self) -> list[int]:
        counts = np.bincount(list(self.assignments.values()), minlength=self.k)
        return [int(c) for c in counts]

    def digest(self) -> str:
        text = "\n".join(f"{sid}:{f}" for sid, f in sorted(self.assignments.items()))
        return hashlib.sha256(f"k={self.k}\n{text}".encode("utf-8")).hexdigest()[:16]


def make_fold_plan(dataset: Dataset, k: int = 10, bins: int = 10, seed: int = 0) -> FoldPlan:
    """Greedy stratified assignment that never splits a family.

    Families go largest first, then by the decile of their mean target.
    Each family lands in the fold holding the fewest subjects of its decile,
    preferring smaller folds; only folds that keep every fold within one
    maximal family size of the smallest are eligible.
    """
    families: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(dataset.subjects):
        families[s.family_id].append(i)
    if len(families) < k:
        raise FoldPlanError(f"{len(families)} families cannot fill {k} folds")
    targets = np.array([s.behavior for s in dataset.subjects])
    edges = np.quantile(targets, np.linspace(0, 1, bins + 1)[1:-1])

    rng = make_rng(seed)
    names = sorted(families)
    order = rng.permutation(len(names))
    fold_priority = rng.permutation(k)
    fams = []
    for j in order:
        members = families[names[j]]
        decile = int(np.searchsorted(edges, targets[members].mean(), side="right"))
        fams.append((-len(members), decile, j, members))
    fams.sort(key=lambda f: (f[0], f[1]))
    max_size = max(len(m) for m in families.values())

    size = np.zeros(k, dtype=int)
    per_bin = np.zeros((k, bins), dtype=int)
    assignments: dict[str, int] = {}
    for neg_size, decile, _, members in fams:
        n = -neg_size
        eligible = [f for f in range(k) if size[f] + n <= size.min() + max_size]
        best = min(eligible, key=lambda f: (per_bin[f, decile], size[f], fold_priority[f]))
        size[best] += n
        per_bin[best, decile] += n
        for i in members:
            assignments[dataset.subjects[i].id] = best
    ordered = {sid: assignments[sid] for sid in dataset.ids}
    return FoldPlan(assignments=ordered, k=k)
