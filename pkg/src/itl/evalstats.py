"""Evaluation protocol: Dice scoring, tumor regions, splits, exact Wilcoxon.

The comparison harness pairs two methods over identical Monte-Carlo splits
(7:1:2 train/val/test by default), scores whole-tumor / tumor-core /
enhancing-tumor Dice per case, and tests per-repeat mean differences with an
exact two-sided Wilcoxon signed-rank test. "Exact" means the null
distribution is enumerated over all 2^n sign assignments of the realized
ranks (computed by dynamic programming over doubled ranks, which are
integers even under average-rank ties), not a normal approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from itl.data import LabelMap, Taxonomy

REGION_NAMES = ("WT", "TC", "ET")

# tumor label values composing each evaluation region
_REGION_CLASSES = {"WT": (1, 2, 3), "TC": (2, 3), "ET": (3,)}

WILCOXON_MAX_N = 25


def binary_dice(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {truth_mask.shape}")
    total = int(pred_mask.sum()) + int(truth_mask.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred_mask & truth_mask).sum()) / total


def compose_tumor_regions(labels: LabelMap) -> dict[str, np.ndarray]:
    """WT/TC/ET masks from tumor labels; nesting ET <= TC <= WT by construction."""
    if labels.taxonomy != Taxonomy.TUMOR:
        raise ValueError(f"tumor taxonomy required, got {labels.taxonomy.value}")
    return {name: np.isin(labels.data, classes)
            for name, classes in _REGION_CLASSES.items()}


def per_class_dice(pred: LabelMap, truth: LabelMap,
                   classes: Sequence[int] = (1, 2, 3)) -> dict[int, float]:
    """Per-class Dice of hard label maps (used for tissue evaluation)."""
    if pred.data.shape != truth.data.shape:
        raise ValueError("label shapes differ")
    return {int(k): binary_dice(pred.data == k, truth.data == k) for k in classes}


@dataclass
class SplitPlan:
    """One Monte-Carlo repeat: disjoint train/val/test case-id lists."""

    repeat_index: int
    train: list[str]
    val: list[str]
    test: list[str]

    def validate(self) -> None:
        groups = [self.train, self.val, self.test]
        all_ids = [cid for g in groups for cid in g]
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("split groups overlap")
        if not self.train or not self.test:
            raise ValueError("train and test must be non-empty")

    def to_dict(self) -> dict:
        return {"repeat_index": self.repeat_index, "train": list(self.train),
                "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(repeat_index=int(d["repeat_index"]), train=list(d["train"]),
                   val=list(d["val"]), test=list(d["test"]))


def monte_carlo_splits(case_ids: Sequence[str], seed: int,
                       ratios: tuple[int, int, int] = (7, 1, 2),
                       repeats: int = 11) -> list[SplitPlan]:
    """Independent shuffled partitions; val/test sizes floor, train the rest.

    Each repeat derives its own RNG stream from (seed, repeat), so plans are
    deterministic and insensitive to the order case ids are passed in.
    """
    ids = sorted(set(case_ids))
    if len(ids) != len(list(case_ids)):
        raise ValueError("case_ids contains duplicates")
    if len(ids) < 10:
        raise ValueError(f"need at least 10 cases for a {ratios} split, got {len(ids)}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be 3 positive numbers, got {ratios}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    total = sum(ratios)
    n = len(ids)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    n_train = n - n_val - n_test

    plans = []
    for repeat in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, repeat]))
        perm = [ids[i] for i in rng.permutation(n)]
        plan = SplitPlan(
            repeat_index=repeat,
            train=sorted(perm[:n_train]),
            val=sorted(perm[n_train:n_train + n_val]),
            test=sorted(perm[n_train + n_val:]),
        )
        plan.validate()
        plans.append(plan)
    return plans


def _doubled_ranks(abs_diffs: np.ndarray) -> np.ndarray:
    """Average ranks times two: integers even with ties, so arithmetic is exact."""
    n = abs_diffs.size
    order = np.argsort(abs_diffs, kind="stable")
    doubled = np.zeros(n, dtype=np.int64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and abs_diffs[order[j + 1]] == abs_diffs[order[i]]:
            j += 1
        dr = (i + 1) + (j + 1)  # doubled average of 1-based positions i..j
        for k in range(i, j + 1):
            doubled[order[k]] = dr
        i = j + 1
    return doubled


def wilcoxon_signed_rank_exact(diffs: Sequence[float]) -> tuple[float, float]:
    """Exact two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; |diffs| are ranked with average ranks on
    ties; W = min(W+, W-). The two-sided p-value is the null probability
    that min(W+, W-) is at most the observed W, with the null enumerating
    all 2^n equally likely sign assignments of the realized ranks.
    """
    d = np.asarray(list(diffs), dtype=np.float64)
    if d.size == 0:
        raise ValueError("no differences given")
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    nz = d[d != 0.0]
    if nz.size == 0:
        raise ValueError("all differences are zero; the test is undefined")
    n = int(nz.size)
    if n > WILCOXON_MAX_N:
        raise ValueError(f"exact enumeration supports n <= {WILCOXON_MAX_N}, got {n}")

    doubled = _doubled_ranks(np.abs(nz))
    w_plus2 = int(doubled[nz > 0].sum())
    w_minus2 = int(doubled[nz < 0].sum())
    total2 = int(doubled.sum())
    w_obs2 = min(w_plus2, w_minus2)

    # distribution of doubled W+ over all sign assignments, by subset-sum DP
    counts = np.zeros(total2 + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r > 0 else counts
        counts = counts + shifted

    sums = np.arange(total2 + 1)
    extreme = np.minimum(sums, total2 - sums) <= w_obs2
    p = float(counts[extreme].sum()) / float(2 ** n)
    return w_obs2 / 2.0, p


@dataclass
class MetricsReport:
    """Per-case and aggregate region Dice for one repeat's test set."""

    repeat_index: int
    test_cases: list[str]
    per_case: dict[str, dict[str, float]]
    region_means: dict[str, float]
    region_summary: dict[str, dict[str, float]]
    config_hash: str = ""

    def validate(self) -> None:
        for cid, scores in self.per_case.items():
            for region, value in scores.items():
                if not (0.0 <= value <= 1.0):
                    raise ValueError(f"{cid} {region}: dice {value} outside [0,1]")

    def to_dict(self) -> dict:
        return {
            "repeat_index": self.repeat_index,
            "test_cases": list(self.test_cases),
            "per_case": self.per_case,
            "region_means": self.region_means,
            "region_summary": self.region_summary,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(repeat_index=int(d["repeat_index"]), test_cases=list(d["test_cases"]),
                   per_case=d["per_case"], region_means=d["region_means"],
                   region_summary=d["region_summary"],
                   config_hash=d.get("config_hash", ""))


def evaluate_split(predictions: Mapping[str, LabelMap],
                   truths: Mapping[str, LabelMap],
                   split: SplitPlan,
                   config_hash: str = "") -> MetricsReport:
    """Score every test case of a split; aggregates are per-region statistics."""
    per_case: dict[str, dict[str, float]] = {}
    for cid in split.test:
        if cid not in predictions:
            raise KeyError(f"no prediction for test case {cid!r}")
        if cid not in truths:
            raise KeyError(f"no ground truth for test case {cid!r}")
        pred_regions = compose_tumor_regions(predictions[cid])
        true_regions = compose_tumor_regions(truths[cid])
        per_case[cid] = {name: binary_dice(pred_regions[name], true_regions[name])
                         for name in REGION_NAMES}

    region_means = {}
    region_summary = {}
    for name in REGION_NAMES:
        values = np.array([per_case[cid][name] for cid in split.test])
        region_means[name] = float(values.mean())
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        region_summary[name] = {"mean": float(values.mean()), "median": float(med),
                                "q1": float(q1), "q3": float(q3)}
    report = MetricsReport(repeat_index=split.repeat_index, test_cases=list(split.test),
                           per_case=per_case, region_means=region_means,
                           region_summary=region_summary, config_hash=config_hash)
    report.validate()
    return report


TEST_NAME = "exact two-sided Wilcoxon signed-rank"


@dataclass
class ComparisonReport:
    """Paired per-region comparison of two methods over identical splits."""

    n_repeats: int
    regions: dict[str, dict]
    test_name: str = TEST_NAME

    def to_dict(self) -> dict:
        return {"n_repeats": self.n_repeats, "test_name": self.test_name,
                "regions": self.regions}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(n_repeats=int(d["n_repeats"]), regions=d["regions"],
                   test_name=d.get("test_name", TEST_NAME))

    def format_table(self) -> str:
        """Aligned text table: region, method means, mean difference, p-value."""
        lines = [f"{'region':<8}{'baseline':>10}{'proposed':>10}{'diff':>10}{'p':>12}"]
        for name in REGION_NAMES:
            r = self.regions[name]
            p = "degenerate" if r["degenerate"] else f"{r['p_value']:.6g}"
            lines.append(f"{name:<8}{r['baseline_mean']:>10.3f}{r['proposed_mean']:>10.3f}"
                         f"{r['mean_diff']:>10.3f}{p:>12}")
        return "\n".join(lines)


def compare_methods(baseline: Sequence[MetricsReport],
                    proposed: Sequence[MetricsReport]) -> ComparisonReport:
    """Pair per-repeat region means and test differences per region.

    Refuses unpaired input: both report lists must cover the same repeats
    with identical test cases, so each difference is a true paired sample.
    """
    if len(baseline) != len(proposed) or not baseline:
        raise ValueError(
            f"need equal non-empty report lists, got {len(baseline)} vs {len(proposed)}"
        )
    base_by_rep = {r.repeat_index: r for r in baseline}
    prop_by_rep = {r.repeat_index: r for r in proposed}
    if set(base_by_rep) != set(prop_by_rep) or len(base_by_rep) != len(baseline):
        raise ValueError("repeat indices do not pair up")
    for rep, b in base_by_rep.items():
        if sorted(b.test_cases) != sorted(prop_by_rep[rep].test_cases):
            raise ValueError(f"repeat {rep}: test cases differ between methods")

    order = sorted(base_by_rep)
    regions: dict[str, dict] = {}
    for name in REGION_NAMES:
        b_means = [base_by_rep[rep].region_means[name] for rep in order]
        p_means = [prop_by_rep[rep].region_means[name] for rep in order]
        diffs = [p - b for p, b in zip(p_means, b_means)]
        degenerate = all(d == 0.0 for d in diffs)
        if degenerate:
            w, p_value = None, None
        else:
            w, p_value = wilcoxon_signed_rank_exact(diffs)
        regions[name] = {
            "baseline_mean": float(np.mean(b_means)),
            "proposed_mean": float(np.mean(p_means)),
            "per_repeat_baseline": b_means,
            "per_repeat_proposed": p_means,
            "diffs": diffs,
            "mean_diff": float(np.mean(diffs)),
            "wilcoxon_w": w,
            "p_value": p_value,
            "degenerate": degenerate,
        }
    return ComparisonReport(n_repeats=len(order), regions=regions)
