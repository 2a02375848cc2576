"""Metrics, report structure, and small-scale experiment wiring."""

import numpy as np
import pytest

from metaloc import evaluation, meta, tasks
from metaloc.evaluation import EvalReport, benchmark, cdf, cross_scenario_matrix, distance_error
from metaloc.meta import MetaConfig


def small_scenarios(n, start=70):
    cfg = tasks.ChannelConfig(samples_per_rp=4)
    return [tasks.generate_scenario(start + i, cfg) for i in range(n)]


def quick_cfg(**kw):
    defaults = dict(
        alpha=0.001,
        beta=0.001,
        gamma=0.0005,
        inner_steps=1,
        shots=1,
        meta_iterations=2,
        meta_batch_size=1,
        seed=9,
        importance_epochs=2,
        baseline_epochs=2,
        finetune_epochs=1,
    )
    defaults.update(kw)
    return MetaConfig(**defaults)


# ---------------------------------------------------------------------------
# metrics


def test_distance_error_examples():
    assert distance_error((0.0, 0.0), (3.0, 4.0)) == 5.0
    assert distance_error((7.0, -2.0), (7.0, -2.0)) == 0.0


def test_distance_error_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.uniform(-100, 100, 2), rng.uniform(-100, 100, 2)
        assert distance_error(a, b) == pytest.approx(distance_error(b, a))


def test_cdf_counting_and_extremes():
    errors = [10.0, 20.0, 60.0]
    assert cdf(errors, [50.0])[0] == pytest.approx(2 / 3)
    assert cdf(errors, [5.0])[0] == 0.0
    assert cdf(errors, [100.0])[0] == 1.0


def test_cdf_strictly_below():
    assert cdf([50.0, 10.0], [50.0])[0] == pytest.approx(0.5)


def test_cdf_monotone_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        errors = rng.uniform(0, 300, size=40)
        thresholds = np.sort(rng.uniform(0, 320, size=15))
        fractions = cdf(errors, thresholds)
        assert np.all(np.diff(fractions) >= 0)


def test_cdf_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        cdf([], [10.0])


# ---------------------------------------------------------------------------
# report


def test_report_populations_and_summary():
    report = EvalReport()
    report.add("maml", 5, 0, "s0", [10.0, 20.0])
    report.add("maml", 5, 1, "s1", [30.0])
    report.add("conventional", 5, 0, "s0", [50.0])
    assert report.cells() == [("conventional", 5), ("maml", 5)]
    assert np.array_equal(report.population("maml", 5), [10.0, 20.0, 30.0])
    rows = {(r["algorithm"], r["shots"]): r for r in report.summary()}
    assert rows[("maml", 5)]["count"] == 3
    assert rows[("maml", 5)]["mean_cm"] == pytest.approx(20.0)


def test_report_cdf_table_ends_at_one():
    report = EvalReport()
    report.add("maml", 5, 0, "s0", [10.0, 500.0])  # beyond the default grid
    rows = [r for r in report.cdf_table() if r["algorithm"] == "maml"]
    fractions = [r["fraction"] for r in rows]
    assert fractions[-1] == 1.0
    assert all(b >= a for a, b in zip(fractions, fractions[1:]))


# ---------------------------------------------------------------------------
# cross-scenario matrix


def test_matrix_shape_and_validation():
    scenarios = small_scenarios(3)
    cfg = quick_cfg()
    m = cross_scenario_matrix(scenarios, cfg, fine_tune_shots=0)
    assert m.shape == (3, 3)
    assert np.all(np.isfinite(m)) and np.all(m >= 0)
    with pytest.raises(ValueError, match="at least 2"):
        cross_scenario_matrix(scenarios[:1], cfg)
    with pytest.raises(ValueError, match="fine_tune_shots"):
        cross_scenario_matrix(scenarios, cfg, fine_tune_shots=3)


def test_matrix_duplicate_scenarios_off_diagonal_matches_diagonal():
    base = small_scenarios(1, start=80)[0]
    import copy

    twin = copy.deepcopy(base)
    twin.id = "scenario_twin"
    cfg = quick_cfg(baseline_epochs=30)
    m = cross_scenario_matrix([base, twin], cfg, fine_tune_shots=0)
    # identical data: training on one is training on the other
    assert abs(m[0, 1] - m[0, 0]) <= 0.35 * max(m[0, 0], 1.0)
    assert abs(m[1, 0] - m[1, 1]) <= 0.35 * max(m[1, 1], 1.0)


# ---------------------------------------------------------------------------
# benchmark


def test_benchmark_structure_and_fairness():
    scenarios = small_scenarios(5)
    cfg = quick_cfg()
    report = benchmark(
        scenarios, ["conventional", "fomaml"], [1, 2], repeats=2, cfg=cfg, test_count=1
    )
    assert set(report.cells()) == {
        ("conventional", 1),
        ("conventional", 2),
        ("fomaml", 1),
        ("fomaml", 2),
    }
    # repeats pool: 2 repeats x 1 test scenario each
    entries = [e for e in report.entries if e["algorithm"] == "fomaml" and e["shots"] == 1]
    assert len(entries) == 2
    # fairness: identical test scenarios per repeat across algorithms
    by_algo = {}
    for e in report.entries:
        if e["shots"] == 1:
            by_algo.setdefault(e["algorithm"], []).append((e["repeat"], e["scenario"]))
    assert sorted(by_algo["conventional"]) == sorted(by_algo["fomaml"])


def test_benchmark_repeats_scale_error_count():
    scenarios = small_scenarios(4)
    cfg = quick_cfg()
    r1 = benchmark(scenarios, ["conventional"], [1], repeats=1, cfg=cfg, test_count=1)
    r3 = benchmark(scenarios, ["conventional"], [1], repeats=3, cfg=cfg, test_count=1)
    assert r3.population("conventional", 1).size == 3 * r1.population("conventional", 1).size


def test_benchmark_rejects_unknown_algorithm():
    with pytest.raises(ValueError, match="unknown algorithm"):
        benchmark(small_scenarios(3), ["magic"], [1], 1, quick_cfg(), test_count=1)


def test_benchmark_maml_vs_tb_gamma_zero_identical_errors():
    scenarios = small_scenarios(4)
    cfg = quick_cfg(gamma=0.0, meta_iterations=3)
    ra = benchmark(scenarios, ["maml"], [1], repeats=1, cfg=cfg, test_count=1)
    rb = benchmark(scenarios, ["tb-maml"], [1], repeats=1, cfg=cfg, test_count=1)
    assert np.array_equal(ra.population("maml", 1), rb.population("tb-maml", 1))


# ---------------------------------------------------------------------------
# task-count sweep


def test_sweep_structure_and_shared_subsets():
    scenarios = small_scenarios(6)
    cfg = quick_cfg()
    out = evaluation.task_count_sweep(
        scenarios, ["fomaml"], counts=[2, 4], repeats=2, cfg=cfg, test_count=2
    )
    assert set(out) == {("fomaml", 2), ("fomaml", 4)}
    assert len(out[("fomaml", 2)]["per_repeat"]) == 2
    with pytest.raises(ValueError, match="exceeds available"):
        evaluation.task_count_sweep(
            scenarios, ["fomaml"], counts=[5], repeats=1, cfg=cfg, test_count=2
        )
    with pytest.raises(ValueError, match="meta-learners"):
        evaluation.task_count_sweep(
            scenarios, ["conventional"], counts=[2], repeats=1, cfg=cfg, test_count=2
        )


def test_sweep_full_count_matches_benchmark_protocol():
    # counts=[all training tasks] uses the full training set, same splits
    scenarios = small_scenarios(5)
    cfg = quick_cfg(meta_iterations=2)
    sweep = evaluation.task_count_sweep(
        scenarios, ["fomaml"], counts=[4], repeats=1, cfg=cfg, test_count=1
    )
    assert ("fomaml", 4) in sweep and sweep[("fomaml", 4)]["mean_cm"] > 0
