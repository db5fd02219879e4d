"""Participant-level stratified k-fold planning with leakage verification.

Participants are partitioned by identity, never by clip, so no individual
contributes frames to both sides of any fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, FrailtyLabel


class StratificationError(Exception):
    """A class has too few participants to fill every fold."""


@dataclass
class FoldPlan:
    k: int
    folds: list[tuple[set[str], set[str]]]  # (train_ids, test_ids) per fold
    seed: int
    per_fold_class_counts: dict[tuple[int, str, FrailtyLabel], int] = field(default_factory=dict)

    def test_sizes(self) -> list[int]:
        return [len(test) for _, test in self.folds]

    def train_sizes(self) -> list[int]:
        return [len(train) for train, _ in self.folds]


def _bucket_sizes(class_sizes: dict[FrailtyLabel, int], k: int) -> dict[FrailtyLabel, list[int]]:
    """Assign per-class test-bucket sizes so fold totals stay as even as possible.

    Each class splits into buckets of size floor(n/k) or floor(n/k)+1.  The +1
    remainders go to the folds with the smallest running total so far (ties
    broken toward lower fold indices), processing classes in label order.
    """
    totals = [0] * k
    sizes: dict[FrailtyLabel, list[int]] = {}
    for label in sorted(class_sizes):
        n = class_sizes[label]
        base, extra = divmod(n, k)
        order = sorted(range(k), key=lambda f: (totals[f], f))
        class_buckets = [base] * k
        for f in order[:extra]:
            class_buckets[f] += 1
        sizes[label] = class_buckets
        for f in range(k):
            totals[f] += class_buckets[f]
    return sizes


def make_folds(
    manifest: DatasetManifest, k: int, seed: int, allow_sparse_classes: bool = False
) -> FoldPlan:
    """Deterministic stratified plan: per class, canonical sort, seeded shuffle, deal into folds.

    A class with fewer than k participants is an error unless
    allow_sparse_classes is set, in which case some test folds simply receive
    none of that class (balance stays within the +-1 bound).
    """
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    by_class: dict[FrailtyLabel, list[str]] = {label: [] for label in FrailtyLabel}
    for e in manifest.entries:
        by_class[e.label].append(e.participant_id)
    if not allow_sparse_classes:
        for label, ids in by_class.items():
            if len(ids) < k:
                raise StratificationError(
                    f"class {label.canonical_name} has {len(ids)} participants, fewer than k={k}"
                )
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = _bucket_sizes({label: len(ids) for label, ids in by_class.items()}, k)

    test_sets: list[set[str]] = [set() for _ in range(k)]
    counts: dict[tuple[int, str, FrailtyLabel], int] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        cursor = 0
        for f in range(k):
            take = sizes[label][f]
            test_sets[f].update(shuffled[cursor : cursor + take])
            counts[(f, "test", label)] = take
            cursor += take

    all_ids = set(manifest.participant_ids())
    folds = []
    for f in range(k):
        train = all_ids - test_sets[f]
        folds.append((train, test_sets[f]))
        for label in FrailtyLabel:
            class_total = len(by_class[label])
            counts[(f, "train", label)] = class_total - counts[(f, "test", label)]
    return FoldPlan(k=k, folds=folds, seed=seed, per_fold_class_counts=counts)


@dataclass
class LeakageReport:
    passed: bool
    problems: list[str] = field(default_factory=list)


def verify_no_leakage(plan: FoldPlan, manifest: DatasetManifest) -> LeakageReport:
    """Check train/test disjointness per fold and that test sets partition the cohort."""
    problems: list[str] = []
    all_ids = set(manifest.participant_ids())
    for f, (train, test) in enumerate(plan.folds):
        overlap = train & test
        for pid in sorted(overlap):
            problems.append(f"fold {f}: participant {pid} appears in both train and test")
        for pid in sorted((train | test) - all_ids):
            problems.append(f"fold {f}: participant {pid} not in manifest")
        missing_side = all_ids - (train | test)
        for pid in sorted(missing_side):
            problems.append(f"fold {f}: participant {pid} on neither side")
    seen: dict[str, int] = {}
    for f, (_, test) in enumerate(plan.folds):
        for pid in test:
            if pid in seen:
                problems.append(f"participant {pid} in test sets of folds {seen[pid]} and {f}")
            seen[pid] = f
    uncovered = all_ids - set(seen)
    if uncovered:
        problems.append(f"incomplete test cover: {sorted(uncovered)} in no test set")
    return LeakageReport(passed=not problems, problems=problems)


def write_fold_plan(plan: FoldPlan, path: str | Path) -> None:
    """Serialize to text: a k/seed header then one `fold,partition,id` line per membership."""
    lines = [f"k={plan.k},seed={plan.seed}", "fold_index,partition,participant_id"]
    for f, (train, test) in enumerate(plan.folds):
        for pid in sorted(train):
            lines.append(f"{f},train,{pid}")
        for pid in sorted(test):
            lines.append(f"{f},test,{pid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_fold_plan(path: str | Path) -> FoldPlan:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = dict(part.split("=") for part in text[0].split(","))
    k, seed = int(header["k"]), int(header["seed"])
    folds: list[tuple[set[str], set[str]]] = [(set(), set()) for _ in range(k)]
    for line in text[2:]:
        f, partition, pid = line.split(",", 2)
        folds[int(f)][0 if partition == "train" else 1].add(pid)
    return FoldPlan(k=k, folds=folds, seed=seed)
