import itertools
import json

import numpy as np
import pytest
import scipy.stats

from itl.data import LabelMap, Taxonomy
from itl.evalstats import (
    ComparisonReport,
    MetricsReport,
    REGION_NAMES,
    SplitPlan,
    binary_dice,
    compare_methods,
    compose_tumor_regions,
    evaluate_split,
    monte_carlo_splits,
    per_class_dice,
    wilcoxon_signed_rank_exact,
)


# ---------------------------------------------------------------- binary dice

def test_binary_dice_fixture():
    # |A|=4, |B|=8, |A&B|=2 -> 2*2/12
    a = np.zeros(20, dtype=bool)
    b = np.zeros(20, dtype=bool)
    a[:4] = True
    b[2:10] = True
    assert abs(binary_dice(a, b) - 2 * 2 / 12) < 1e-12


def test_binary_dice_edges():
    z = np.zeros((3, 3), dtype=bool)
    o = np.ones((3, 3), dtype=bool)
    assert binary_dice(z, z) == 1.0
    assert binary_dice(o, o) == 1.0
    assert binary_dice(z, o) == 0.0
    assert binary_dice(o, z) == 0.0


def test_binary_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        binary_dice(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


# -------------------------------------------------------------- tumor regions

def _tumor_map(data):
    return LabelMap(np.asarray(data, dtype=np.int8), Taxonomy.TUMOR)


def test_compose_tumor_regions_masks():
    data = np.zeros((2, 2, 2), dtype=np.int8)
    data[0, 0, 0] = 1
    data[0, 0, 1] = 2
    data[0, 1, 0] = 3
    regions = compose_tumor_regions(_tumor_map(data))
    assert regions["WT"].sum() == 3
    assert regions["TC"].sum() == 2
    assert regions["ET"].sum() == 1
    # nesting: ET subset of TC subset of WT
    assert not (regions["ET"] & ~regions["TC"]).any()
    assert not (regions["TC"] & ~regions["WT"]).any()


def test_compose_tumor_regions_rejects_tissue():
    tissue = LabelMap(np.zeros((2, 2, 2), dtype=np.int8), Taxonomy.TISSUE)
    with pytest.raises(ValueError, match="tumor taxonomy"):
        compose_tumor_regions(tissue)


def test_per_class_dice_identity_and_disjoint():
    data = (np.arange(27).reshape(3, 3, 3) % 4).astype(np.int8)
    m = LabelMap(data, Taxonomy.TISSUE)
    assert per_class_dice(m, m) == {1: 1.0, 2: 1.0, 3: 1.0}
    other = LabelMap(((data + 1) % 4).astype(np.int8), Taxonomy.TISSUE)
    assert per_class_dice(m, other) == {1: 0.0, 2: 0.0, 3: 0.0}


# -------------------------------------------------------------------- splits

def test_split_sizes_ten_cases():
    ids = [f"c{i:02d}" for i in range(10)]
    plans = monte_carlo_splits(ids, seed=5, repeats=3)
    for plan in plans:
        assert (len(plan.train), len(plan.val), len(plan.test)) == (7, 1, 2)


def test_split_sizes_floor_rule():
    ids = [f"c{i:02d}" for i in range(23)]
    plan = monte_carlo_splits(ids, seed=0, repeats=1)[0]
    # 23 cases at 7:1:2 -> val floor(2.3)=2, test floor(4.6)=4, train rest
    assert (len(plan.train), len(plan.val), len(plan.test)) == (17, 2, 4)


def test_split_partition_properties():
    ids = [f"c{i:02d}" for i in range(14)]
    for seed in range(50):
        for plan in monte_carlo_splits(ids, seed=seed, repeats=2):
            combined = plan.train + plan.val + plan.test
            assert sorted(combined) == ids


def test_split_determinism_and_order_insensitivity():
    ids = [f"c{i:02d}" for i in range(12)]
    a = monte_carlo_splits(ids, seed=9, repeats=4)
    b = monte_carlo_splits(list(reversed(ids)), seed=9, repeats=4)
    assert [p.to_dict() for p in a] == [p.to_dict() for p in b]


def test_split_repeats_differ():
    ids = [f"c{i:02d}" for i in range(20)]
    plans = monte_carlo_splits(ids, seed=3, repeats=11)
    test_sets = {tuple(p.test) for p in plans}
    assert len(test_sets) > 1


def test_split_seed_changes_plans():
    ids = [f"c{i:02d}" for i in range(12)]
    a = monte_carlo_splits(ids, seed=0, repeats=3)
    b = monte_carlo_splits(ids, seed=1, repeats=3)
    assert [p.to_dict() for p in a] != [p.to_dict() for p in b]


def test_split_too_few_cases():
    with pytest.raises(ValueError, match="at least 10"):
        monte_carlo_splits([f"c{i}" for i in range(9)], seed=0)


def test_split_duplicate_ids():
    ids = [f"c{i:02d}" for i in range(10)] + ["c00"]
    with pytest.raises(ValueError, match="duplicates"):
        monte_carlo_splits(ids, seed=0)


def test_split_plan_round_trip():
    plan = monte_carlo_splits([f"c{i:02d}" for i in range(11)], seed=2, repeats=1)[0]
    loaded = SplitPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
    assert loaded == plan


# ------------------------------------------------------------------ wilcoxon

def _enumerate_wilcoxon(diffs):
    """Brute-force oracle: walk all 2^n sign assignments of the ranks."""
    d = np.asarray(diffs, dtype=np.float64)
    nz = d[d != 0.0]
    ranks = scipy.stats.rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    w_minus = float(ranks[nz < 0].sum())
    w_obs = min(w_plus, w_minus)
    total = float(ranks.sum())
    hits = 0
    for signs in itertools.product((False, True), repeat=len(ranks)):
        wp = sum(r for r, s in zip(ranks, signs) if s)
        if min(wp, total - wp) <= w_obs + 1e-9:
            hits += 1
    return w_obs, hits / 2 ** len(ranks)


def test_wilcoxon_all_positive_n5():
    w, p = wilcoxon_signed_rank_exact([0.3, 1.1, 0.2, 2.0, 0.7])
    assert w == 0.0
    assert abs(p - 2 / 32) < 1e-15


def test_wilcoxon_mixed_fixture():
    w, p = wilcoxon_signed_rank_exact([1.0, 2.0, 3.0, -4.0])
    assert w == 4.0
    assert abs(p - 14 / 16) < 1e-15


def test_wilcoxon_all_positive_n11():
    w, p = wilcoxon_signed_rank_exact([0.1 * (i + 1) for i in range(11)])
    assert w == 0.0
    assert abs(p - 2 / 2048) < 1e-15


def test_wilcoxon_matches_enumeration_oracle():
    rng = np.random.default_rng(303)
    checked = 0
    for trial in range(60):
        n = int(rng.integers(1, 13))
        kind = trial % 3
        while True:
            if kind == 0:
                d = rng.normal(size=n)
            elif kind == 1:
                d = rng.integers(-3, 4, size=n).astype(float)
            else:
                d = rng.integers(1, 4, size=n) * rng.choice([-1.0, 1.0], size=n)
            if np.any(d != 0):
                break
        w_mine, p_mine = wilcoxon_signed_rank_exact(d)
        w_ref, p_ref = _enumerate_wilcoxon(d)
        assert abs(w_mine - w_ref) < 1e-12, d
        assert abs(p_mine - p_ref) < 1e-12, d
        checked += 1
    assert checked == 60


def test_wilcoxon_sign_flip_symmetry():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.normal(size=int(rng.integers(2, 10)))
        if not np.any(d != 0):
            continue
        w_a, p_a = wilcoxon_signed_rank_exact(d)
        w_b, p_b = wilcoxon_signed_rank_exact(-d)
        assert w_a == w_b
        assert p_a == p_b


def test_wilcoxon_scale_invariance():
    d = [0.3, -1.2, 0.8, 2.5, -0.1]
    assert wilcoxon_signed_rank_exact(d) == wilcoxon_signed_rank_exact(
        [2.5 * x for x in d])


def test_wilcoxon_zeros_dropped():
    with_zeros = wilcoxon_signed_rank_exact([0.0, 1.0, 2.0, 0.0, 3.0, -4.0, 5.0])
    without = wilcoxon_signed_rank_exact([1.0, 2.0, 3.0, -4.0, 5.0])
    assert with_zeros == without


def test_wilcoxon_errors():
    with pytest.raises(ValueError, match="no differences"):
        wilcoxon_signed_rank_exact([])
    with pytest.raises(ValueError, match="all differences are zero"):
        wilcoxon_signed_rank_exact([0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="n <= 25"):
        wilcoxon_signed_rank_exact(list(range(1, 27)))
    with pytest.raises(ValueError, match="finite"):
        wilcoxon_signed_rank_exact([1.0, float("nan")])


def test_wilcoxon_p_is_probability():
    rng = np.random.default_rng(11)
    for _ in range(30):
        d = rng.normal(size=int(rng.integers(1, 20)))
        _, p = wilcoxon_signed_rank_exact(d)
        assert 0.0 < p <= 1.0


# ------------------------------------------------------------- evaluate_split

def _three_case_setup():
    shape = (3, 3, 3)
    truth = np.zeros(shape, dtype=np.int8)
    truth[0, 0, 0] = 1
    truth[0, 0, 1] = 2
    truth[0, 0, 2] = 3

    perfect = truth.copy()
    et_missed = truth.copy()
    et_missed[0, 0, 2] = 2  # enhancing voxel called core: WT/TC right, ET empty
    all_background = np.zeros(shape, dtype=np.int8)

    truths = {f"tgt_{i:03d}": _tumor_map(truth) for i in range(3)}
    predictions = {
        "tgt_000": _tumor_map(perfect),
        "tgt_001": _tumor_map(et_missed),
        "tgt_002": _tumor_map(all_background),
    }
    split = SplitPlan(repeat_index=0, train=["tgt_900"], val=[],
                      test=["tgt_000", "tgt_001", "tgt_002"])
    return predictions, truths, split


def test_evaluate_split_per_case_values():
    predictions, truths, split = _three_case_setup()
    report = evaluate_split(predictions, truths, split, config_hash="abc")
    assert report.per_case["tgt_000"] == {"WT": 1.0, "TC": 1.0, "ET": 1.0}
    assert report.per_case["tgt_001"] == {"WT": 1.0, "TC": 1.0, "ET": 0.0}
    assert report.per_case["tgt_002"] == {"WT": 0.0, "TC": 0.0, "ET": 0.0}
    assert report.config_hash == "abc"


def test_evaluate_split_aggregates():
    predictions, truths, split = _three_case_setup()
    report = evaluate_split(predictions, truths, split)
    assert abs(report.region_means["WT"] - 2 / 3) < 1e-12
    assert report.region_summary["WT"]["median"] == 1.0
    assert report.region_summary["WT"]["q1"] == 0.5
    assert report.region_summary["WT"]["q3"] == 1.0
    assert abs(report.region_means["ET"] - 1 / 3) < 1e-12


def test_evaluate_split_missing_prediction():
    predictions, truths, split = _three_case_setup()
    del predictions["tgt_001"]
    with pytest.raises(KeyError, match="tgt_001"):
        evaluate_split(predictions, truths, split)


def test_metrics_report_round_trip():
    predictions, truths, split = _three_case_setup()
    report = evaluate_split(predictions, truths, split, config_hash="deadbeef")
    loaded = MetricsReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert loaded == report


# ------------------------------------------------------------ compare_methods

def _report_with_means(repeat, means, test_cases=("tgt_000", "tgt_001")):
    per_case = {cid: dict(means) for cid in test_cases}
    summary = {k: {"mean": v, "median": v, "q1": v, "q3": v} for k, v in means.items()}
    return MetricsReport(repeat_index=repeat, test_cases=list(test_cases),
                         per_case=per_case, region_means=dict(means),
                         region_summary=summary)


def _paired_reports(base_means, prop_means, repeats=11, jitter=0.001):
    """Per-repeat means fluctuating symmetrically around the requested values."""
    baseline, proposed = [], []
    for rep in range(repeats):
        offset = (rep - (repeats - 1) / 2) * jitter
        baseline.append(_report_with_means(
            rep, {k: v + offset for k, v in base_means.items()}))
        proposed.append(_report_with_means(
            rep, {k: v + offset for k, v in prop_means.items()}))
    return baseline, proposed


def test_compare_methods_reference_format():
    base = {"WT": 0.883, "TC": 0.831, "ET": 0.729}
    prop = {"WT": 0.888, "TC": 0.832, "ET": 0.737}
    baseline, proposed = _paired_reports(base, prop)
    report = compare_methods(baseline, proposed)
    assert report.n_repeats == 11
    for name in REGION_NAMES:
        r = report.regions[name]
        assert abs(r["baseline_mean"] - base[name]) < 1e-9
        assert abs(r["proposed_mean"] - prop[name]) < 1e-9
        assert not r["degenerate"]
        # constant positive diffs across 11 repeats: most extreme table entry
        assert abs(r["p_value"] - 2 / 2048) < 1e-12
    table = report.format_table()
    for token in ("WT", "TC", "ET", "0.883", "0.888", "0.831", "0.832",
                  "0.729", "0.737"):
        assert token in table
    assert "signed-rank" in report.test_name


def test_compare_methods_antisymmetry():
    rng = np.random.default_rng(19)
    baseline, proposed = [], []
    for rep in range(7):
        baseline.append(_report_with_means(
            rep, {k: float(v) for k, v in zip(REGION_NAMES, rng.uniform(0.5, 0.9, 3))}))
        proposed.append(_report_with_means(
            rep, {k: float(v) for k, v in zip(REGION_NAMES, rng.uniform(0.5, 0.9, 3))}))
    fwd = compare_methods(baseline, proposed)
    rev = compare_methods(proposed, baseline)
    for name in REGION_NAMES:
        f, r = fwd.regions[name], rev.regions[name]
        assert np.allclose(f["diffs"], [-d for d in r["diffs"]])
        assert f["p_value"] == r["p_value"]
        assert f["wilcoxon_w"] == r["wilcoxon_w"]
        assert f["baseline_mean"] == r["proposed_mean"]


def test_compare_methods_degenerate_flag():
    baseline, _ = _paired_reports({"WT": 0.8, "TC": 0.7, "ET": 0.6},
                                  {"WT": 0.8, "TC": 0.7, "ET": 0.6})
    report = compare_methods(baseline, baseline)
    for name in REGION_NAMES:
        r = report.regions[name]
        assert r["degenerate"]
        assert r["p_value"] is None
        assert r["wilcoxon_w"] is None
    assert "degenerate" in report.format_table()


def test_compare_methods_refuses_mismatched_splits():
    baseline, proposed = _paired_reports({"WT": 0.8, "TC": 0.7, "ET": 0.6},
                                         {"WT": 0.9, "TC": 0.8, "ET": 0.7},
                                         repeats=3)
    proposed[1].test_cases = ["tgt_777", "tgt_778"]
    with pytest.raises(ValueError, match="test cases differ"):
        compare_methods(baseline, proposed)


def test_compare_methods_refuses_unpaired_repeats():
    baseline, proposed = _paired_reports({"WT": 0.8, "TC": 0.7, "ET": 0.6},
                                         {"WT": 0.9, "TC": 0.8, "ET": 0.7},
                                         repeats=3)
    with pytest.raises(ValueError, match="equal non-empty"):
        compare_methods(baseline, proposed[:2])
    proposed[0].repeat_index = 99
    with pytest.raises(ValueError, match="repeat indices"):
        compare_methods(baseline, proposed)


def test_comparison_report_round_trip():
    baseline, proposed = _paired_reports({"WT": 0.8, "TC": 0.7, "ET": 0.6},
                                         {"WT": 0.9, "TC": 0.8, "ET": 0.7},
                                         repeats=5)
    report = compare_methods(baseline, proposed)
    loaded = ComparisonReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert loaded.n_repeats == report.n_repeats
    assert loaded.test_name == report.test_name
    assert loaded.regions["WT"]["p_value"] == report.regions["WT"]["p_value"]
