"""Acceptance checks, one test and one printed PASS/FAIL line per criterion.

The seed-averaged runs come from ``protocol`` and are shared with the
slow invariant tests, so a full session trains every configuration once.
"""

import itertools

import numpy as np
import pytest

import protocol
from circuit_seed.core_math import make_rng
from circuit_seed.diagnostics import random_mask, signal_retention, top_k_mask
from circuit_seed.discovery import accumulate, score
from circuit_seed.experiments import ExperimentConfig, run_sweep
from circuit_seed.lora_mlp import Batch, backward
from circuit_seed.tasks import DENSE, SPARSE, TargetSpec, make_task
from conftest import small_model
from test_lora_mlp import gradient_check_errors

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


def seed_mean(reports, *path):
    vals = []
    for r in reports:
        for p in path:
            r = r[p]
        vals.append(r)
    return float(np.mean(vals))


def test_criterion_1_concentrated_signal(report):
    t = protocol.sweep(SPARSE)
    inf02, rnd02 = t.mean("s_hat", 0.02), t.mean("random", 0.02)
    inf05, rnd05 = t.mean("s_hat", 0.5), t.mean("random", 0.5)
    lora = t.mean("lora", 0.02)
    ok = inf02 <= 0.35 and rnd02 >= 0.80 and inf05 <= 0.05 and rnd05 >= 0.20 and lora <= 0.05
    report(1, "sparse task sweep", ok,
           f"f=0.02 informed {inf02:.4f} (<=0.35) random {rnd02:.4f} (>=0.80); "
           f"f=0.5 informed {inf05:.4f} (<=0.05) random {rnd05:.4f} (>=0.20); lora {lora:.4f} (<=0.05)")


def test_criterion_2_dense_signal(report):
    t = protocol.sweep(DENSE)
    inf = [t.mean("s_hat", f) for f in protocol.FRACTIONS]
    rnd = [t.mean("random", f) for f in protocol.FRACTIONS]
    ratios = [i / r for i, r in zip(inf, rnd)]
    in_band = all(0.3 <= q <= 1.1 for q in ratios)
    mono = all(a >= b for a, b in zip(inf, inf[1:])) and all(a >= b for a, b in zip(rnd, rnd[1:]))
    report(2, "dense task sweep", in_band and mono,
           "ratios " + ", ".join(f"{f:g}:{q:.3f}" for f, q in zip(protocol.FRACTIONS, ratios))
           + f" (band [0.3, 1.1]); monotone={mono}")


def test_criterion_3_regime_dichotomy(report):
    clean, noisy = protocol.diagnostics("clean"), protocol.diagnostics("noisy")
    c = {k: seed_mean(clean, "structure", k) for k in clean[0]["structure"]}
    n = {k: seed_mean(noisy, "structure", k) for k in noisy[0]["structure"]}
    ok = (c["mean_cosine"] > n["mean_cosine"]
          and c["accumulation_efficiency"] > n["accumulation_efficiency"]
          and c["effective_rank"] < n["effective_rank"])
    report(3, "regime dichotomy", ok,
           f"cos {c['mean_cosine']:.3f} vs {n['mean_cosine']:.3f}; "
           f"efficiency {c['accumulation_efficiency']:.3f} vs {n['accumulation_efficiency']:.3f}; "
           f"rank {c['effective_rank']:.2f} vs {n['effective_rank']:.2f} (clean vs noisy)")


def test_criterion_4_retention_laws(report):
    rng = make_rng(404)
    g = rng.standard_t(2, size=1024)
    mc = float(np.mean([signal_retention(g, random_mask((1024,), 51, rng)) for _ in range(10_000)]))
    mc_ok = abs(mc - 51 / 1024) <= 0.01
    exact = True
    for _ in range(10):
        v = rng.normal(size=8)
        for k in range(9):
            best = max(signal_retention(v, np.isin(np.arange(8), idx))
                       for idx in itertools.combinations(range(8), k)) if k else 0.0
            got = signal_retention(v, top_k_mask(v, k))
            exact &= got == best
    report(4, "signal retention", mc_ok and exact,
           f"MC mean {mc:.5f} vs k/d {51 / 1024:.5f} (+-0.01); top-k exhaustive match d=8 all k: {exact}")


def test_criterion_5_gradient_oracle(report):
    worst = gradient_check_errors()
    rng = make_rng(5)
    zero_a = True
    for _ in range(50):
        m = small_model(rng, b_std=0.0)
        g = backward(m, Batch(rng.normal(size=(6, 4)), rng.normal(size=(3, 4))))
        zero_a &= not np.any(g.d_a)
    report(5, "gradient oracle", worst < 1e-4 and zero_a,
           f"max relative FD error {worst:.2e} (<1e-4); dA exactly zero at B=0: {zero_a}")


def test_criterion_6_knockout(report):
    reps = protocol.diagnostics("noisy")
    worst = np.inf
    detail = []
    for i, point in enumerate(reps[0]["knockout"]):
        f = point["fraction"]
        if 0 < f <= 0.5:
            c = np.mean([r["knockout"][i]["circuit_mse"] for r in reps])
            r_ = np.mean([r["knockout"][i]["random_mse"] for r in reps])
            worst = min(worst, c - r_)
            detail.append(f"{f:g}:{c:.3f}/{r_:.3f}")
    report(6, "knockout", worst >= 0, "circuit/random " + ", ".join(detail))


def test_criterion_7_update_alignment(report):
    clean = seed_mean(protocol.diagnostics("clean"), "update_energy", "circuit_over_random")
    noisy = seed_mean(protocol.diagnostics("noisy"), "update_energy", "circuit_over_random")
    report(7, "update alignment", clean < 1 and noisy > 1,
           f"clean {clean:.3f} (<1), noisy {noisy:.3f} (>1)")


def test_criterion_8_stability(report):
    s = protocol.stability()
    n10, n25 = s["mc_convergence"]["10"], s["mc_convergence"]["25"]
    eps = [s["a_perturbation"][repr(e)] for e in (0.01, 0.1, 0.5, 2.0)]
    zero = s["a_perturbation"]["0.0"]
    ok = n25 >= n10 >= 0.5 and all(a >= b for a, b in zip(eps, eps[1:])) and zero == 1.0
    report(8, "stability", ok,
           f"N=25 {n25:.3f} >= N=10 {n10:.3f} >= 0.5; eps overlaps "
           + ", ".join(f"{v:.3f}" for v in eps) + f"; eps=0 {zero}")


def test_criterion_9_determinism_and_bias_variance(report, tmp_path):
    kw = dict(methods=("s_hat", "random", "lora"), budgets=(0.02, 0.5), seeds=2, steps=200,
              n_passes=20, eval_every=50)
    run_sweep(ExperimentConfig(out=str(tmp_path / "a"), **kw))
    run_sweep(ExperimentConfig(out=str(tmp_path / "b"), **kw))
    same = all((tmp_path / "a" / "sweep" / n).read_bytes() == (tmp_path / "b" / "sweep" / n).read_bytes()
               for n in ("sweep.csv", "sweep_aggregate.csv"))
    worst = np.inf
    for kind in (SPARSE, DENSE):
        for seed in range(protocol.SEEDS):
            task = make_task(TargetSpec(kind=kind, seed=seed))
            model = task.fresh_model()
            stats = accumulate(model, task, 100, 128, make_rng(seed))
            worst = min(worst, float(np.min(score(stats, "f_hat") - score(stats, "s_hat") ** 2)))
    report(9, "determinism and bias-variance", same and worst >= -1e-12,
           f"byte-identical CSVs: {same}; min(f_hat - s_hat^2) = {worst:.3e} (>= -1e-12)")
