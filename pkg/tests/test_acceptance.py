"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The lines are also collected into the terminal summary ("acceptance
criteria" section) so they survive output capture.
"""
import csv
import io
import math
import time
from dataclasses import replace
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

from dense_align import trainer as tr
from dense_align.cli import main
from dense_align.config import load_config
from dense_align.loss import LN2, LossConfig, dpo_trajectory_variant, loss_full, timestep_distribution
from dense_align.mdp import validate_C
from dense_align.preference import PreferencePair
from dense_align.verify import run_checks, run_suite

from conftest import ACCEPTANCE

DESK_CONFIG = Path(__file__).resolve().parents[1] / "src" / "dense_align" / "data" / "desk_config.json"
SEEDS = (0, 1, 2)


def record(k, passed, detail):
    ACCEPTANCE[k] = (bool(passed), detail)
    print(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="module")
def desk():
    return load_config(DESK_CONFIG)


@pytest.fixture(scope="module")
def base_ckpt(desk_base, prompts, tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "base.ckpt"
    tr.save_policy(path, desk_base, prompts, seed=0)
    return path


@pytest.fixture(scope="module")
def behavioural(desk, desk_base, prompts):
    """Three seeds of the desk run: N=20, one prompt, M_tr=2000."""
    assert desk_base.schedule.n_steps == 20
    runs = {}
    for seed in SEEDS:
        before = desk_base.net.params.copy()
        cfg = desk.trainer_config([prompts.index("single")], seed=seed)
        res = tr.train(desk_base, prompts, cfg)
        runs[seed] = (res, before)
    return runs


def test_criterion_1_exact_tier():
    t0 = time.perf_counter()
    report = run_suite(0, 100)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in report.results if not r.passed]
    ok = report.passed and elapsed <= 60
    record(1, ok, f"{len(report.results)} checks x 100 seeds in {elapsed:.1f}s"
                  + (f"; failed: {failed}" if failed else ""))
    assert ok, report.table()


def test_criterion_2_gradient_fidelity():
    names = ["gradient.tabular", "gradient.diffusion_adapter", "gradient.tabular_direction"]
    results = run_checks(names, 0, 20)
    worst = {r.name: r.residual for r in results}
    ok = all(r.passed for r in results)
    record(2, ok, "20 seeds, worst rel. error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_3_trajectory_level_variant(desk, base_ckpt, tmp_path):
    uniform = all(np.array_equal(timestep_distribution(1.0, n), np.full(n, 1.0 / n)) for n in (1, 4, 20, 50))
    cfg = LossConfig(C=10.0, gamma=1.0)
    diffs = [0.3, -0.2, 0.05, 0.11]
    ident = lambda t: np.asarray(t, float)  # noqa: E731
    values = {dpo_trajectory_variant(PreferencePair(0, np.array(p), np.zeros(4), 1.0, 0.0), ident, cfg)
              for p in permutations(diffs)}
    spread = max(values) - min(values)
    same_as_full = loss_full(PreferencePair(0, np.array(diffs), np.zeros(4), 1.0, 0.0), ident, cfg) == min(values)

    out = tmp_path / "traj"
    rc = main(["align", "--config", str(DESK_CONFIG), "--base", str(base_ckpt), "--gamma", "1.0",
               "--output", str(out)])
    echoed = load_config(out / "config.json")
    only_gamma = replace(echoed, loss=replace(echoed.loss, gamma=desk.loss.gamma), output_dir=desk.output_dir) == desk
    rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    ok = uniform and spread <= 1e-15 and same_as_full and rc == 0 and only_gamma and echoed.loss.gamma == 1.0
    record(3, ok, f"uniform weights={uniform}, permutation spread={spread:.1e}, "
                  f"align --gamma 1.0 exit {rc}, final win {float(rows[-1]['win_rate']):.3f}")
    assert ok


def test_criterion_4_baseline_identities(behavioural, desk_base, prompts, desk):
    losses, ratios, identical = [], [], True
    for seed, (res, before) in behavioural.items():
        first = res.metrics[0]
        losses.append(abs(first.loss - LN2))
        ratios.append(first.mean_abs_logratio)
        identical &= np.array_equal(desk_base.net.params, before)
    # per-step ratios at step 0 on a fresh collection, every row
    cfg = desk.trainer_config([0], seed=9)
    state = tr.initial_state(desk_base, cfg)
    store = tr.collect_stage(desk_base, prompts, cfg, 0)
    policy = desk_base.with_adapter(state.adapter)
    N = desk_base.schedule.n_steps
    all_steps = np.tile(np.arange(N), (store.pairs.shape[0], 1))
    loss, _, mean_abs, _ = tr.batch_loss_and_grad(policy, store, np.arange(store.pairs.shape[0]), all_steps, cfg.loss)
    ok = max(losses) <= 1e-10 and max(ratios) == 0.0 and identical and abs(loss - LN2) <= 1e-10 and mean_abs == 0.0
    record(4, ok, f"|loss0 - ln 2| max {max(losses):.1e}, step-0 |log-ratio| {max(ratios + [mean_abs])}, "
                  f"base bit-identical={identical}")
    assert ok


def test_criterion_5_behavioural_run(behavioural):
    details, ok = [], True
    for seed, (res, _) in behavioural.items():
        first, last = res.metrics[0], res.metrics[-1]
        assert last.step == 2000
        good = last.mean_score > first.mean_score and last.win_rate >= 0.6
        ok &= good
        details.append(f"seed {seed}: score {first.mean_score:.3f}->{last.mean_score:.3f} win {last.win_rate:.2f}")
    record(5, ok, "; ".join(details))
    assert ok


def steps_to(rows, threshold=0.55):
    for step, wr in rows:
        if wr >= threshold:
            return step
    return math.inf


def test_criterion_6_gamma_ablation(base_ckpt, tmp_path, monkeypatch):
    monkeypatch.setenv("DENSE_ALIGN_THREADS", "1")
    out = tmp_path / "sweep"
    rc = main(["sweep", "--config", str(DESK_CONFIG), "--base", str(base_ckpt), "--gammas", "0.9", "1.0",
               "--seeds", "5", "--eval-every", "1", "--output", str(out)])
    assert rc == 0
    runs = {}
    for row in csv.DictReader(io.StringIO((out / "sweep.csv").read_text())):
        runs.setdefault((float(row["value"]), int(row["seed"])), []).append((int(row["step"]), float(row["win_rate"])))
    reach = {g: [steps_to(sorted(runs[(g, s)])) for s in range(5)] for g in (0.9, 1.0)}
    mean = {g: float(np.mean(v)) for g, v in reach.items()}
    ok = mean[0.9] <= mean[1.0]
    tie = mean[0.9] == mean[1.0]
    record(6, ok, f"steps to win 0.55: gamma 0.9 {reach[0.9]} (mean {mean[0.9]:.1f}), "
                  f"gamma 1.0 {reach[1.0]} (mean {mean[1.0]:.1f})"
                  + ("; tie at the first evaluation, the comparison does not discriminate" if tie else ""))
    assert ok


def test_criterion_7_determinism(base_ckpt, tmp_path, monkeypatch):
    small = ["--config", str(DESK_CONFIG), "--set", "train.m_tr=20", "--set", "train.m_col=10",
             "--eval-every", "5"]
    outputs = {}
    for threads in ("1", "2", "3"):
        monkeypatch.setenv("DENSE_ALIGN_THREADS", threads)
        d = tmp_path / f"t{threads}"
        assert main(["sweep", *small, "--base", str(base_ckpt), "--gammas", "0.9", "1.0", "--seeds", "2",
                     "--output", str(d / "sweep")]) == 0
        assert main(["align", *small, "--base", str(base_ckpt), "--output", str(d / "align")]) == 0
        assert main(["eval", "--base", str(base_ckpt), "--aligned", str(d / "align" / "aligned.ckpt"),
                     "--n-samples", "50", "--out", str(d / "eval.csv")]) == 0
        assert main(["pretrain", "--config", str(DESK_CONFIG), "--iters", "50", "--set", "eval_samples=20",
                     "--output", str(d / "pre")]) == 0
        outputs[threads] = [(d / p).read_bytes() for p in
                            ("sweep/sweep.csv", "align/metrics.csv", "eval.csv", "pre/pretrain_metrics.csv")]
    ok = outputs["1"] == outputs["2"] == outputs["3"]
    record(7, ok, "sweep, align, eval and pretrain CSVs byte-identical at 1, 2 and 3 threads")
    assert ok


def test_criterion_8_coefficient():
    ok = validate_C(0.56, 1.0) and not validate_C(0.5, 1.0)
    record(8, ok, f"validate_C(0.56)={validate_C(0.56, 1.0)}, validate_C(0.5)={validate_C(0.5, 1.0)}")
    assert ok
