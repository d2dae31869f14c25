"""End-to-end acceptance checks.

Each test appends one PASS/FAIL line to the terminal summary. Tolerances are
pinned; Monte Carlo checks use fixed seeds so a rerun reproduces every line.
The full module takes roughly a quarter of an hour on one core.
"""

import os
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import multivariate_normal, ortho_group

from aberrant_mix.em import EmOptions, fit_em, make_rng
from aberrant_mix.model import (
    Dataset,
    EfaParams,
    FactorStructure,
    MixtureParams,
    assemble_cfa_cov,
    assemble_efa_cov,
    count_params,
    mixture_loglik,
    mixture_weights,
    posterior_probs,
)
from aberrant_mix.selection import criteria, scan
from aberrant_mix.simulation import (
    Study1Config,
    Study2Config,
    gen_cfa_block,
    gen_efa_block,
    gen_study1,
    run_study,
    score_classification,
    sgr_replacement_matrix,
    summarize,
)
from conftest import ACCEPTANCE_LINES, random_params

REPS = 50
OPTS = EmOptions(n_starts=3)


def report(label, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _study(cfg, keys):
    rows = run_study(cfg, REPS, OPTS)
    failed = sum("error" in r for r in rows)
    return summarize(rows, keys), failed


def test_c1_study2_extreme_large():
    s, failed = _study(Study2Config(n=1000, p=30, pi=0.6, gamma=4.0, delta=1.5, seed=101), ["BACC", "MCC"])
    bacc, mcc = s["BACC"]["mean"], s["MCC"]["mean"]
    report("1 study2 extreme n=1000 p=30 pi=0.6", bacc >= 0.97 and mcc >= 0.97 and failed == 0,
           f"BACC {bacc:.4f} (>= 0.97), MCC {mcc:.4f} (>= 0.97), failed fits {failed}/{REPS}")


def test_c2_study2_extreme_small():
    s, failed = _study(Study2Config(n=250, p=16, pi=0.6, gamma=4.0, delta=1.5, seed=102), ["BACC"])
    bacc = s["BACC"]["mean"]
    report("2 study2 extreme n=250 p=16 pi=0.6", bacc >= 0.93 and failed == 0,
           f"BACC {bacc:.4f} (>= 0.93), failed fits {failed}/{REPS}")


def test_c3_study2_recovery_pattern():
    s, failed = _study(Study2Config(n=1000, p=16, pi=0.8, gamma=4.0, delta=1.5, seed=103),
                       ["lambda_bias", "theta_bias", "mu_bias"])
    lam, theta, mu = (s[k]["mean"] for k in ("lambda_bias", "theta_bias", "mu_bias"))
    ok = abs(lam) <= 0.05 and -0.05 <= theta <= 0.01 and mu <= -0.4 and failed == 0
    report("3 study2 recovery pi=0.8 p=16", ok,
           f"lambda bias {lam:+.4f} (|.| <= 0.05), theta bias {theta:+.4f} (in [-0.05, 0.01]), "
           f"mu bias {mu:+.4f} (<= -0.4)")


@pytest.mark.parametrize("pi, K, C, bound", [(0.6, 4, 2, 0.95), (0.4, 2, 1, 0.85)])
def test_c4_study1_spot_checks(pi, K, C, bound):
    s, failed = _study(Study1Config(pi=pi, K=K, q=1, C=C, seed=104), ["BACC"])
    bacc = s["BACC"]["mean"]
    report(f"4 study1 pi={pi} K={K} C={C}", bacc >= bound and failed == 0,
           f"BACC {bacc:.4f} (>= {bound}), failed fits {failed}/{REPS}")


def test_c5_criteria_identities():
    r = criteria(-31202.9928, 180, 763, 0.3520)
    checks = {
        "CLC": abs(r.CLC - (62405.9856 + 0.704)) <= 0.01,
        "ICL-BIC - BIC": abs((r.ICL_BIC - r.BIC) - 0.7040) <= 1e-6,
        "H": abs(r.H - 0.9993) <= 5e-4,
        "BIC": abs(r.BIC - 63600.5623) <= 1.0,
    }
    report("5 criteria identities", all(checks.values()),
           f"CLC {r.CLC:.4f}, ICL-BIC - BIC {r.ICL_BIC - r.BIC:.7f}, H {r.H:.5f}, BIC {r.BIC:.4f} "
           f"(BIC off by {r.BIC - 63600.5623:+.4f})" + "".join(f"; {k} out of tolerance" for k, v in checks.items() if not v))


CASE1 = os.environ.get("ABERRANT_MIX_CASE1")


@pytest.mark.skipif(not CASE1 or not Path(CASE1, "data.csv").exists(),
                    reason="set ABERRANT_MIX_CASE1 to the case-study directory (data.csv, design.csv, truth.csv, structure.json)")
def test_c6_case_study_one():
    from aberrant_mix.cli import RunConfig, load_dataset, load_structure
    from aberrant_mix.diagnostics import fit_cfa_single

    d = Path(CASE1)
    cfg = RunConfig(command="fit", out=d, data=d / "data.csv", design=d / "design.csv", truth=d / "truth.csv",
                    structure=d / "structure.json")
    data = load_dataset(cfg)
    structure = load_structure(cfg.structure)
    _, idx = fit_cfa_single(data, structure)
    res = scan(data, structure, [1], [("age",)], EmOptions(n_starts=10), means_fixed_zero=True)
    m = res.rows[0].metrics
    ok = abs(idx.CFI - 0.543) <= 0.03 and abs(idx.RMSEA - 0.117) <= 0.01 and m["SE"] == 1.0 and m["SP"] >= 0.88
    report("6 case study 1", ok,
           f"CFI {idx.CFI:.3f} (0.543 +- 0.03), RMSEA {idx.RMSEA:.3f} (0.117 +- 0.01), "
           f"K=1 ^ age SE {m['SE']:.4f} (= 1), SP {m['SP']:.4f} (>= 0.88)")


def _toy(rng, p, q, K, C, n):
    params, structure = random_params(rng, p, q, K, C)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, C))])
    z = rng.uniform(size=n) < mixture_weights(x, params.reg)
    y = np.empty((n, p))
    y[z] = gen_cfa_block(params.cfa, int(z.sum()), rng)
    y[~z] = gen_efa_block(params.efa, int((~z).sum()), rng)
    return Dataset(y, x), params, structure


def test_c7_property_suite():
    notes = []

    # EM monotonicity on 200 random small instances
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(4, 13))
        q = int(rng.integers(1, min(3, p - 1) + 1))
        K = int(rng.integers(1, min(3, p - 1) + 1))
        data, _, structure = _toy(rng, p, q, K, int(rng.integers(0, 3)), int(rng.integers(60, 301)))
        fit = fit_em(data, structure, K, EmOptions(n_starts=1, max_iter=100, seed=seed))
        trace = np.asarray(fit.loglik_trace)
        worst = min(worst, float(np.min(np.diff(trace) / np.maximum(1.0, np.abs(trace[1:])))))
    mono = worst >= -1e-12
    notes.append(f"monotone worst step {worst:.1e}")

    # rotation invariance, posterior normalisation, brute-force density oracle
    rot_err = post_err = dens_err = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        data, params, _ = _toy(rng, 6, 2, 2, 1, 3)
        R = ortho_group.rvs(2, random_state=seed)
        efa = params.efa
        rotated = MixtureParams(params.cfa, EfaParams(efa.loadings @ R, efa.uniquenesses, R.T @ efa.factor_means), params.reg)
        ll = mixture_loglik(data, params)
        rot_err = max(rot_err, abs(mixture_loglik(data, rotated) - ll))
        post_err = max(post_err, float(np.max(np.abs(posterior_probs(data, params).sum(axis=1) - 1.0))))
        pi = mixture_weights(data.design, params.reg)
        cfa_mean = params.cfa.loadings @ params.cfa.factor_means
        efa_mean = efa.loadings @ efa.factor_means
        brute = sum(
            np.log(pi[i] * multivariate_normal(cfa_mean, assemble_cfa_cov(params.cfa)).pdf(data.responses[i])
                   + (1 - pi[i]) * multivariate_normal(efa_mean, assemble_efa_cov(efa)).pdf(data.responses[i]))
            for i in range(3)
        )
        dens_err = max(dens_err, abs(brute - ll))
    notes.append(f"rotation {rot_err:.1e}, posterior sums {post_err:.1e}, density oracle {dens_err:.1e}")

    # SGR rows and extreme-over-slight dominance
    sgr_err, dominance = 0.0, True
    for M in range(2, 12):
        for kappa in (0.25, 0.5, 1.0):
            ext, sli = sgr_replacement_matrix(M, 4.0, 1.5, kappa), sgr_replacement_matrix(M, 1.5, 4.0, kappa)
            sgr_err = max(sgr_err, float(np.max(np.abs(ext.sum(axis=1) - 1))), float(np.max(np.abs(sli.sum(axis=1) - 1))))
            dominance &= bool(np.all(np.cumsum(ext, axis=1) <= np.cumsum(sli, axis=1) + 1e-15))
    notes.append(f"SGR rows {sgr_err:.1e}, dominance {dominance}")

    # MCC/BACC hand arithmetic: TP 40, FN 10, TN 35, FP 15
    s = score_classification([0] * 50 + [1] * 50, [0] * 40 + [1] * 10 + [1] * 35 + [0] * 15).metrics
    metrics_ok = abs(s.BACC - 0.75) < 1e-15 and abs(s.MCC - 1250 / np.sqrt(55 * 50 * 50 * 45)) < 1e-12

    # parameter-count formula over the grid; simple structure has p free loadings
    counts_ok = all(
        count_params(FactorStructure.simple(p, q), K, C, mfz)
        == p + p + p * K + p + K + C + 1 + q * (q - 1) // 2 + (0 if mfz else q)
        for p in range(3, 13) for q in range(1, p) for K in range(1, p) for C in range(0, 3) for mfz in (False, True)
    )

    # determinism
    data, _, structure = _toy(np.random.default_rng(7), 8, 2, 1, 1, 150)
    a = fit_em(data, structure, 1, EmOptions(n_starts=2, seed=3)).to_json()
    b = fit_em(data, structure, 1, EmOptions(n_starts=2, seed=3)).to_json()
    r1, r2 = make_rng(9, 1, 2).standard_normal(5), make_rng(9, 1, 2).standard_normal(5)
    determinism = a == b and r1.tobytes() == r2.tobytes()

    ok = (mono and rot_err <= 1e-9 and post_err <= 1e-12 and dens_err <= 1e-10 and sgr_err <= 1e-12 and dominance
          and metrics_ok and counts_ok and determinism)
    notes.append(f"metrics {metrics_ok}, counts {counts_ok}, determinism {determinism}")
    report("7 property suite", ok, "; ".join(notes))


def test_c8_selection_rule():
    hits = []
    for r in range(25):
        sample = gen_study1(Study1Config(pi=0.6, K=2, q=1, C=1, seed=11), make_rng(11, 0, r))
        res = scan(sample.data, sample.structure, [1, 2, 3], [sample.data.covariate_names], EmOptions(n_starts=3, seed=r))
        hits.append(res.selected_row is not None and res.selected_row.K == 2)
    rate = float(np.mean(hits))
    report("8 selection rule K=2 recovery", rate >= 0.8, f"{sum(hits)}/25 = {rate:.2f} (>= 0.80)")
