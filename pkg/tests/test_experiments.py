import csv
import json

import numpy as np
import pytest

import linsaddle as ls
from linsaddle.experiments import (
    EscapeRun,
    escape_epoch,
    escape_threshold,
    run_optimizer,
    summarize_runs,
    summary_to_json,
    write_histogram_csv,
    write_runs_csv,
)

from conftest import random_certified_spec, random_weights


SMALL_CFG = dict(dims=(6, 5, 5, 4), m=30, r=2, data_seed=0)


def test_perturb_near_is_deterministic(small_problem):
    _, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(0))
    a = ls.perturb_near(w, 0.1, seed=5)
    c = ls.perturb_near(w, 0.1, seed=5)
    d = ls.perturb_near(w, 0.1, seed=6)
    for h in range(1, shape.H + 1):
        assert np.array_equal(a.layer(h), c.layer(h))
    assert any(
        not np.array_equal(a.layer(h), d.layer(h)) for h in range(1, shape.H + 1)
    )


def test_perturb_near_scale_semantics(small_problem):
    # noise RMS per entry tracks scale * ||W_h||_F / sqrt(size)
    _, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(1))
    scale = 0.05
    p = ls.perturb_near(w, scale, seed=0)
    for h in range(1, shape.H + 1):
        diff = p.layer(h) - w.layer(h)
        sigma = scale * np.linalg.norm(w.layer(h)) / np.sqrt(diff.size)
        rms = np.sqrt(np.mean(diff**2))
        assert 0.3 * sigma < rms < 3.0 * sigma


def test_perturb_near_zero_layer_fallback(small_problem):
    _, b, shape = small_problem
    w = ls.Weights(
        [np.zeros(shape.layer_shape(h)) for h in range(1, shape.H + 1)], shape
    )
    p = ls.perturb_near(w, 0.1, seed=0)
    assert all(np.linalg.norm(p.layer(h)) > 0 for h in range(1, shape.H + 1))


def test_run_optimizer_zero_lr_constant_trace(small_problem):
    data, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(2), scale=0.3)
    opt = ls.OptimizerConfig(algorithm="gd", lr=0.0)
    _, trace = run_optimizer(w, b, data, opt, max_epochs=5)
    assert len(trace) == 6
    assert all(t == trace[0] for t in trace)


def test_gd_stays_at_critical_point(small_problem):
    data, b, shape = small_problem
    rng = np.random.default_rng(3)
    spec = random_certified_spec(shape, b.d_y, rng, support=(1, 2))
    w = ls.build_critical_point(spec, b, shape)
    opt = ls.OptimizerConfig(algorithm="gd", lr=1e-3)
    _, trace = run_optimizer(w, b, data, opt, max_epochs=10)
    assert np.allclose(trace, trace[0], rtol=1e-9)


def test_gd_monotone_decrease(small_problem):
    data, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(4), scale=0.3)
    lr = 1e-4 / np.linalg.norm(b.sigma_xx, 2)
    opt = ls.OptimizerConfig(algorithm="gd", lr=lr, mse_scaling=False)
    _, trace = run_optimizer(w, b, data, opt, max_epochs=10)
    assert all(trace[k + 1] < trace[k] for k in range(10))


def test_run_optimizer_rejects_unknown_algorithm(small_problem):
    data, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(5))
    with pytest.raises(ValueError):
        run_optimizer(w, b, data, ls.OptimizerConfig(algorithm="lbfgs"))


def test_run_optimizer_diverges_with_huge_lr(small_problem):
    data, b, shape = small_problem
    w = random_weights(shape, np.random.default_rng(6), scale=1.0)
    opt = ls.OptimizerConfig(algorithm="gd", lr=10.0, mse_scaling=False)
    with pytest.raises(ls.Diverged) as exc:
        run_optimizer(w, b, data, opt, max_epochs=50)
    assert len(exc.value.trace) >= 2  # partial trace attached


def test_escape_threshold_and_epoch(small_problem):
    _, b, _ = small_problem
    thr = escape_threshold(b, 2)
    plateau = ls.critical_value((1, 2), b)
    assert thr == pytest.approx(plateau - 0.5 * b.lambdas[2])
    assert escape_threshold(b, 2, margin_index=4) == pytest.approx(
        plateau - 0.5 * b.lambdas[3]
    )
    with pytest.raises(ls.InvalidRank):
        escape_threshold(b, 2, margin_index=5)
    assert escape_epoch([5.0, 4.0, 3.0], 3.5) == 2
    assert escape_epoch([5.0, 4.0], 0.5) is None
    assert escape_epoch([], 1.0) is None


def test_run_experiment_deterministic():
    cfg = ls.ExperimentConfig(variant="non_tightened", n_runs=2, max_epochs=40,
                              **SMALL_CFG)
    a = ls.run_experiment(cfg)
    c = ls.run_experiment(cfg)
    assert [r.final_loss for r in a] == [r.final_loss for r in c]
    assert [r.escape_epoch for r in a] == [r.escape_epoch for r in c]


def test_run_experiment_traces_optional():
    cfg = ls.ExperimentConfig(variant="tightened", n_runs=1, max_epochs=5,
                              keep_traces=True, **SMALL_CFG)
    (run,) = ls.run_experiment(cfg)
    assert run.loss_trace is not None and len(run.loss_trace) == 6
    cfg2 = ls.ExperimentConfig(variant="tightened", n_runs=1, max_epochs=5,
                               **SMALL_CFG)
    (run2,) = ls.run_experiment(cfg2)
    assert run2.loss_trace is None
    assert run2.final_loss == run.loss_trace[-1]


def test_max_epochs_zero_never_escapes():
    cfg = ls.ExperimentConfig(variant="tightened", n_runs=1, max_epochs=0,
                              **SMALL_CFG)
    (run,) = ls.run_experiment(cfg)
    assert run.escape_epoch is None and not run.diverged


def test_summarize_runs_censoring():
    runs = [
        EscapeRun(0, "x", 10, 1.0, False),
        EscapeRun(1, "x", 30, 1.0, False),
        EscapeRun(2, "x", None, 9.0, False),
        EscapeRun(3, "x", None, np.inf, True),
    ]
    s = summarize_runs(runs)
    assert s["variant"] == "x" and s["n_runs"] == 4
    assert s["median_escape_epoch"] is None  # upper half censored
    assert s["q25_escape_epoch"] == pytest.approx(25.0)
    assert s["fraction_never_escaped"] == pytest.approx(0.5)
    assert s["n_diverged"] == 1
    s0 = summarize_runs([])
    assert s0["median_escape_epoch"] is None and s0["n_runs"] == 0


def test_csv_and_json_outputs(tmp_path):
    runs = [
        EscapeRun(0, "tightened", 12, 2.5, False),
        EscapeRun(1, "tightened", None, 8.0, False),
        EscapeRun(0, "non_tightened", 3, 1.5, False),
    ]
    rp = tmp_path / "runs.csv"
    write_runs_csv(rp, runs)
    rows = list(csv.reader(rp.open()))
    assert rows[0] == ["run", "variant", "escape_epoch", "final_loss", "diverged"]
    assert rows[2][2] == ""  # censored epoch stays empty
    hp = tmp_path / "hist.csv"
    write_histogram_csv(hp, runs, n_bins=4, max_epochs=16)
    hrows = list(csv.reader(hp.open()))
    never = [r for r in hrows if r[1] == "never"]
    assert len(never) == 2  # one per variant
    counts = sum(int(r[3]) for r in hrows[1:])
    assert counts == 3  # every run lands in a bin or in 'never'
    obj = json.loads(summary_to_json([summarize_runs(runs[:2])]))
    assert obj["variants"][0]["n_runs"] == 2


def test_small_escape_contrast():
    # scaled-down version of the escape experiment: the tightened plateau
    # holds the optimizer strictly longer than the untightened one
    common = dict(n_runs=4, max_epochs=800, **SMALL_CFG)
    tight = ls.run_experiment(ls.ExperimentConfig(variant="tightened", **common))
    loose = ls.run_experiment(ls.ExperimentConfig(variant="non_tightened", **common))
    st = summarize_runs(tight)
    sl = summarize_runs(loose)
    assert sl["fraction_never_escaped"] == 0.0
    assert st["median_escape_epoch"] is None or (
        st["median_escape_epoch"] > sl["median_escape_epoch"]
    )
