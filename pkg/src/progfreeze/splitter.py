"""Balanced, repeated, patient-level cross-validation plans and their audit.

Positives are partitioned into k disjoint test subsets per repeat; each
subset is paired with an equal number of negatives drawn without
replacement within that repeat. Everyone outside a fold's test set trains.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort


class SplitConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Fold:
    repeat: int
    fold: int
    test: tuple[tuple[int, int], ...]      # (patient_id, image_index)
    train: tuple[int, ...]                 # patient_ids, all images used

    @property
    def test_ids(self) -> tuple[int, ...]:
        return tuple(pid for pid, _ in self.test)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    repeats: int
    seed: int
    repeat_seeds: tuple[int, ...]
    folds: tuple[Fold, ...]
    target: str = "bpd"

    def by_repeat(self, r: int) -> list[Fold]:
        return [f for f in self.folds if f.repeat == r]

    def to_dict(self) -> dict:
        return {
            "k": self.k, "repeats": self.repeats, "seed": self.seed, "target": self.target,
            "repeat_seeds": list(self.repeat_seeds),
            "folds": [{"repeat": f.repeat, "fold": f.fold,
                       "test": [list(t) for t in f.test], "train": list(f.train)}
                      for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = tuple(Fold(int(f["repeat"]), int(f["fold"]),
                           tuple((int(a), int(b)) for a, b in f["test"]),
                           tuple(int(x) for x in f["train"])) for f in d["folds"])
        return cls(int(d["k"]), int(d["repeats"]), int(d["seed"]),
                   tuple(int(s) for s in d["repeat_seeds"]), folds, d.get("target", "bpd"))

    def fingerprint(self) -> str:
        """Hash of fold membership only (used to enforce paired comparisons)."""
        payload = [[f.repeat, f.fold, sorted(f.test), sorted(f.train)] for f in self.folds]
        return hashlib.sha256(json.dumps(payload).encode()).hexdigest()[:16]


def make_folds(cohort: Cohort, k: int = 5, repeats: int = 6, seed: int = 0,
               target: str = "bpd", test_image: str = "first") -> FoldPlan:
    """Build ``repeats`` balanced k-fold partitions of the positive class.

    ``test_image`` is "first" (stable index 0) or "random" (drawn per repeat seed).
    """
    pos = sorted(cohort.ids(1, target))
    neg = sorted(cohort.ids(0, target))
    if len(pos) < k:
        raise SplitConfigurationError(f"need at least k={k} positives, have {len(pos)}")
    if len(neg) < len(pos):
        raise SplitConfigurationError(
            f"need at least {len(pos)} negatives to balance every test fold, have {len(neg)}")
    if test_image not in ("first", "random"):
        raise SplitConfigurationError(f"unknown test_image mode {test_image!r}")
    everyone = pos + neg
    repeat_seeds = tuple(int(s) for s in np.random.SeedSequence(seed).generate_state(repeats))
    folds = []
    for r, rseed in enumerate(repeat_seeds):
        rng = np.random.default_rng(rseed)
        pos_parts = np.array_split(rng.permutation(pos), k)
        neg_perm = rng.permutation(neg)
        start = 0
        for f, part in enumerate(pos_parts):
            negs = neg_perm[start:start + len(part)]
            start += len(part)
            test_ids = [int(x) for x in part] + [int(x) for x in negs]
            test = []
            for pid in test_ids:
                n_img = len(cohort.patient(pid).images)
                idx = 0 if test_image == "first" else int(rng.integers(n_img))
                test.append((pid, idx))
            test_set = set(test_ids)
            train = tuple(pid for pid in everyone if pid not in test_set)
            folds.append(Fold(r, f, tuple(test), train))
    return FoldPlan(k, repeats, seed, repeat_seeds, tuple(folds), target)


@dataclass
class SplitAudit:
    results: dict[str, list] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(not bad for bad in self.results.values())

    def failures(self) -> dict[str, list]:
        return {k: v for k, v in self.results.items() if v}


CONSTRAINTS = (
    "positives_tested_exactly_once",
    "negatives_tested_at_most_once",
    "balanced_test_folds",
    "no_train_test_leakage",
    "single_test_image",
)


def audit(plan: FoldPlan, cohort: Cohort) -> SplitAudit:
    """Check every split constraint; each entry lists offending ids (empty = pass)."""
    res = {c: [] for c in CONSTRAINTS}
    pos = set(cohort.ids(1, plan.target))
    neg = set(cohort.ids(0, plan.target))
    for r in range(plan.repeats):
        counts: dict[int, int] = {}
        for f in plan.by_repeat(r):
            ids = [pid for pid, _ in f.test]
            for pid in set(ids):
                counts[pid] = counts.get(pid, 0) + 1
            n_pos = sum(pid in pos for pid in ids)
            n_neg = sum(pid in neg for pid in ids)
            if n_pos != n_neg:
                res["balanced_test_folds"].append((r, f.fold))
            leaked = sorted(set(ids) & set(f.train))
            res["no_train_test_leakage"].extend((r, f.fold, pid) for pid in leaked)
            dup = sorted({pid for pid in ids if ids.count(pid) > 1})
            res["single_test_image"].extend((r, f.fold, pid) for pid in dup)
            for pid, idx in f.test:
                if pid in cohort._by_id and not 0 <= idx < len(cohort.patient(pid).images):
                    res["single_test_image"].append((r, f.fold, pid))
        for pid in sorted(pos):
            if counts.get(pid, 0) != 1:
                res["positives_tested_exactly_once"].append((r, pid))
        for pid in sorted(neg):
            if counts.get(pid, 0) > 1:
                res["negatives_tested_at_most_once"].append((r, pid))
    return SplitAudit(res)
