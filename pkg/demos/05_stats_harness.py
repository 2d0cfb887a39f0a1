"""The evaluation half on its own: splits, reports, paired comparison.

Fakes two methods with known per-case scores so the comparison table and the
exact signed-rank p-values can be read against intuition.
"""
import numpy as np

from itl.data import LabelMap, Taxonomy
from itl.evalstats import (MetricsReport, compare_methods, monte_carlo_splits,
                           wilcoxon_signed_rank_exact)

ids = [f"case_{i:02d}" for i in range(20)]
plans = monte_carlo_splits(ids, seed=11, ratios=(7, 1, 2), repeats=6)
print(f"{len(plans)} repeats; first split sizes: "
      f"train {len(plans[0].train)}, val {len(plans[0].val)}, test {len(plans[0].test)}")
overlap = set(plans[0].test) & set(plans[1].test)
print("test overlap between repeats 0 and 1:", sorted(overlap) or "none")

rng = np.random.default_rng(11)


def fake_report(plan, mean_wt):
    per_case = {}
    for cid in plan.test:
        wt = float(np.clip(rng.normal(mean_wt, 0.05), 0, 1))
        per_case[cid] = {"WT": wt,
                         "TC": wt - 0.05,
                         "ET": wt - 0.10}
    names = ("WT", "TC", "ET")
    means = {n: float(np.mean([v[n] for v in per_case.values()])) for n in names}
    summary = {n: {"mean": means[n],
                   "std": float(np.std([v[n] for v in per_case.values()])),
                   "median": float(np.median([v[n] for v in per_case.values()]))}
               for n in names}
    return MetricsReport(repeat_index=plan.repeat_index,
                         test_cases=list(plan.test), per_case=per_case,
                         region_means=means, region_summary=summary)


baseline = [fake_report(p, 0.70) for p in plans]
proposed = [fake_report(p, 0.74) for p in plans]

cmp = compare_methods(baseline, proposed)
print()
print(cmp.format_table())

# the exact test by hand, next to a textbook case
w, p = wilcoxon_signed_rank_exact([0.3, 0.1, 0.2, -0.4])
print(f"\ndiffs (0.3, 0.1, 0.2, -0.4): W={w}, p={p} (expect 14/16={14/16})")
w, p = wilcoxon_signed_rank_exact(cmp.regions["WT"].diffs)
print(f"WT per-repeat diffs: W={w}, p={p:.4f}")
