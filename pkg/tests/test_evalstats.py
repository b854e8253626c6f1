import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from connbench import ndcore as nd
from connbench.dataio import Dataset, GeneratorConfig, Subject, generate_synthetic
from connbench.evalstats import (ConstantTargetWarning, FoldPlanError, UndefinedMetricError,
                                 corrected_resampled_ttest, joint_loss, mae, make_fold_plan, pcc, r2)
from connbench.evalstats.crossval import MetricCell
from connbench.evalstats.report import (ReportError, format_cell, pairwise_report, read_report_csv,
                                        report_csv, report_markdown, stats_csv, summary_csv, write_report)

finite = st.floats(-10, 10, allow_nan=False)


# --------------------------------------------------------------- joint loss

def test_joint_loss_zero_at_target(rng):
    y = rng.normal(size=6)
    assert joint_loss(y, y).value.item() == pytest.approx(0.0, abs=1e-8)


def test_joint_loss_anticorrelated():
    t = np.array([1.0, -1.0, 1.0, -1.0])
    p = -t
    expected = np.abs(p - t).mean() + ((p - t) ** 2).mean() + 2.0
    assert joint_loss(p, t).value.item() == pytest.approx(expected, abs=1e-7)


def test_joint_loss_gradient(rng):
    p = nd.Tensor(rng.normal(size=8), requires_grad=True)
    t = rng.normal(size=8)
    g = nd.backward(joint_loss(p, t))[p]
    num = nd.numerical_grad(lambda: float(joint_loss(p, t).value.item()), p.value)
    assert nd.relative_error(g, num) <= 1e-5


def test_joint_loss_constant_target_flagged():
    with pytest.warns(ConstantTargetWarning):
        out = joint_loss(np.array([1.0, 2.0, 3.0]), np.ones(3))
    assert np.isfinite(out.value).all()


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_joint_loss_zero_iff_equal(p, t):
    if np.ptp(t) < 1e-3:
        return
    loss = joint_loss(p, t).value.item()
    assert loss >= -1e-8
    if not np.allclose(p, t, atol=1e-6):
        assert loss > 0


# ------------------------------------------------------------------ metrics

def test_perfect_prediction():
    t = np.array([1.0, 3.0, 2.0])
    assert r2(t, t) == 1.0 and pcc(t, t) == pytest.approx(1.0) and mae(t, t) == 0.0


def test_mean_predictor_has_zero_r2(rng):
    t = rng.normal(size=9)
    assert r2(np.full(9, t.mean()), t) == pytest.approx(0.0, abs=1e-15)


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_r2_at_most_one(p, t):
    if np.ptp(t) < 1e-3:
        return
    assert r2(p, t) <= 1.0


def test_constant_target_is_undefined():
    with pytest.raises(UndefinedMetricError):
        r2([1.0, 2.0, 3.0], [2.0, 2.0, 2.0 + 1e-15])
    with pytest.raises(UndefinedMetricError):
        pcc([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])


def test_r2_reference_mean_flag():
    t = np.array([1.0, 2.0, 3.0])
    p = np.array([1.0, 2.0, 4.0])
    assert r2(p, t, reference_mean=0.0) == pytest.approx(1 - 1 / 14)


def test_pcc_matches_scipy(rng):
    p, t = rng.normal(size=20), rng.normal(size=20)
    assert pcc(p, t) == pytest.approx(stats.pearsonr(p, t)[0], abs=1e-12)


# ------------------------------------------------------------------- t-test

def test_hand_example():
    diffs = 0.02 + 0.01 * np.array([1, -1] * 5) * math.sqrt(9 / 10)
    assert diffs.std(ddof=1) == pytest.approx(0.01)
    res = corrected_resampled_ttest(diffs, n_train=9, n_test=1)
    assert res.t == pytest.approx(0.02 / math.sqrt(0.0001 * (0.1 + 1 / 9)), abs=1e-9)
    assert res.t == pytest.approx(4.3529, abs=1e-3)
    assert res.df == 9


def test_all_zero_diffs():
    res = corrected_resampled_ttest(np.zeros(10), 90, 10)
    assert (res.t, res.p) == (0.0, 1.0)


def test_constant_nonzero_diffs():
    res = corrected_resampled_ttest(np.full(10, -0.3), 90, 10)
    assert res.t == -math.inf and res.p == 0.0


@given(arrays(np.float64, 10, elements=st.floats(-1, 1)))
def test_corrected_is_scaled_plain_t(d):
    if np.ptp(d) < 1e-9:
        return
    res = corrected_resampled_ttest(d, 270, 30)
    plain = d.mean() / (d.std(ddof=1) / math.sqrt(10))
    assert res.t == pytest.approx(plain * math.sqrt(0.1 / (0.1 + 30 / 270)), rel=1e-9, abs=1e-12)
    assert abs(res.t) < abs(plain) or plain == 0
    assert 0.0 <= res.p <= 1.0
    assert np.sign(res.t) == np.sign(d.mean())


def reference_ttest(d, n_train, n_test):
    k = len(d)
    t = np.mean(d) / math.sqrt(np.var(d, ddof=1) * (1 / k + n_test / n_train))
    return t, 2 * stats.t.sf(abs(t), k - 1)


def test_matches_independent_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 15))
        d = rng.normal(rng.normal(), rng.uniform(0.01, 2), size=k)
        n_test = float(rng.uniform(1, 50))
        n_train = float(rng.uniform(10, 500))
        t, p = reference_ttest(d, n_train, n_test)
        res = corrected_resampled_ttest(d, n_train, n_test)
        assert abs(res.t - t) <= 1e-10 * max(1, abs(t))
        assert abs(res.p - p) <= 1e-10


def test_ttest_preconditions():
    with pytest.raises(ValueError):
        corrected_resampled_ttest([0.1], 9, 1)
    with pytest.raises(ValueError):
        corrected_resampled_ttest([0.1, 0.2], 0, 1)


# ---------------------------------------------------------------- fold plan

def _dataset(sizes, targets=None):
    subs, i = [], 0
    for f, n in enumerate(sizes):
        for _ in range(n):
            y = float(i) if targets is None else targets[i]
            subs.append(Subject(f"s{i:03d}", f"f{f:03d}", 30.0, i % 2, np.eye(2), np.zeros((2, 3)), y))
            i += 1
    return Dataset(subs, "rest")


def test_singleton_families_fill_each_fold_once():
    plan = make_fold_plan(_dataset([1] * 10))
    assert plan.sizes() == [1] * 10


def test_family_of_four_stays_together():
    plan = make_fold_plan(_dataset([4] + [1] * 12))
    assert len({plan.assignments[f"s{i:03d}"] for i in range(4)}) == 1


def test_too_few_families():
    with pytest.raises(FoldPlanError):
        make_fold_plan(_dataset([2] * 9))


@given(st.lists(st.integers(1, 4), min_size=10, max_size=60), st.integers(0, 1000))
def test_fold_plan_invariants(sizes, seed):
    ds = _dataset(sizes, list(np.random.default_rng(seed).normal(size=sum(sizes))))
    plan = make_fold_plan(ds, seed=seed)
    fam_folds = {}
    for s in ds.subjects:
        fam_folds.setdefault(s.family_id, set()).add(plan.assignments[s.id])
    assert all(len(v) == 1 for v in fam_folds.values())
    assert max(plan.sizes()) - min(plan.sizes()) <= max(sizes)
    sched = plan.schedule()
    assert sorted(t for t, _ in sched) == list(range(10))
    assert sorted(v for _, v in sched) == list(range(10))
    assert all(t != v for t, v in sched)
    assert make_fold_plan(ds, seed=seed) == plan


def test_fold_targets_close_to_population():
    ds = generate_synthetic(GeneratorConfig(n_subjects=300, n_regions=6, seed=0))
    plan = make_fold_plan(ds, seed=0)
    y = np.array([s.behavior for s in ds.subjects])
    fold = np.array([plan.assignments[s.id] for s in ds.subjects])
    for f in range(10):
        assert stats.ks_2samp(y[fold == f], y).statistic <= 0.35


def test_digest_changes_with_assignment():
    plan = make_fold_plan(_dataset([1] * 12))
    other = make_fold_plan(_dataset([1] * 12), seed=1)
    assert plan.digest() != other.digest() or plan == other


# ------------------------------------------------------------------ reports

def cells_grid(models, modalities, rng, plan="p"):
    return [MetricCell(m, d, {k: list(rng.normal(size=10)) for k in ("r2", "pcc", "mae")}, plan)
            for m in models for d in modalities]


def test_report_combinatorics(rng):
    models = ["krr", "gnn_fc", "gnn_ts", "trf_gnn"]
    mods = ["rest", "task_wm", "task_lang"]
    rep = pairwise_report(cells_grid(models, mods, rng), 300)
    r2_rows = [c for c in rep.comparisons if c.metric == "r2"]
    assert len(rep.cells) == 12
    assert sum(c.comparison_type == "model" for c in r2_rows) == 24
    assert sum(c.comparison_type == "modality" for c in r2_rows) == 15
    assert {c.scope for c in r2_rows if c.comparison_type == "model"} == set(mods) | {"average"}


def test_self_comparison_p_is_one(rng):
    cell = cells_grid(["a"], ["rest"], rng)[0]
    twin = MetricCell("b", "rest", {k: list(v) for k, v in cell.values.items()}, cell.plan)
    rep = pairwise_report([cell, twin], 100)
    assert all(c.p == 1.0 and c.t == 0.0 for c in rep.comparisons)


def test_mismatched_plans_rejected(rng):
    cells = cells_grid(["a"], ["rest"], rng, plan="x") + cells_grid(["b"], ["rest"], rng, plan="y")
    with pytest.raises(ReportError, match="fold plans"):
        pairwise_report(cells, 100)


def test_cell_format():
    assert format_cell(0.131, 0.087) == "0.131 ± 0.087"


def test_metric_cell_needs_equal_counts():
    with pytest.raises(ValueError):
        MetricCell("a", "b", {"r2": [1.0] * 10, "pcc": [1.0] * 9})


def test_summary_uses_sample_std(rng):
    rep = pairwise_report(cells_grid(["a"], ["rest"], rng), 100)
    row = next(r for r in rep.summary if r.metric == "r2")
    vals = rep.cells[0].values["r2"]
    assert row.mean == pytest.approx(np.mean(vals)) and row.std == pytest.approx(np.std(vals, ddof=1))


def test_report_files_roundtrip(tmp_path, rng):
    rep = pairwise_report(cells_grid(["krr", "gnn_fc"], ["rest", "task_wm"], rng, plan="abc"), 300)
    write_report(rep, tmp_path)
    text = (tmp_path / "report.csv").read_text()
    assert text.startswith("# fold_plan=abc n_subjects=300 k=10\nmodel,modality,fold,metric,value\n")
    assert (tmp_path / "report_summary.csv").read_text().startswith("model,modality,metric,mean,std\n")
    assert (tmp_path / "stats.csv").read_text().startswith("comparison_type,lhs,rhs,scope,metric,t,p\n")
    for name in ("report.csv", "report_summary.csv", "stats.csv", "report.md"):
        assert b"\r" not in (tmp_path / name).read_bytes()
    parsed = read_report_csv(tmp_path / "report.csv")
    again = pairwise_report(parsed.cells, parsed.n_subjects)
    assert stats_csv(again) == stats_csv(rep) and summary_csv(again) == summary_csv(rep)
    assert report_csv(again) == text
    assert "±" in report_markdown(rep)


def test_read_report_requires_header(tmp_path):
    (tmp_path / "r.csv").write_text("model,modality,fold,metric,value\n")
    with pytest.raises(ReportError, match="fold_plan"):
        read_report_csv(tmp_path / "r.csv")
