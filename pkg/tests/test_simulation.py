import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from aberrant_mix.em import make_rng
from aberrant_mix.model import CfaParams, EfaParams, FactorStructure, assemble_cfa_cov, assemble_efa_cov, cholesky, params_from_dict
from aberrant_mix.simulation import (
    Study1Config,
    Study2Config,
    config_from_json,
    config_to_json,
    default_thresholds,
    discretize,
    draw_cfa_truth,
    gen_cfa_block,
    gen_efa_block,
    gen_study1,
    gen_study2,
    perturb_faking,
    run_replication,
    sample_lkj,
    score_classification,
    score_recovery,
    sgr_replacement_matrix,
    summarize,
    write_rows_csv,
)


# ---------------------------------------------------------------------------
# LKJ


def test_lkj_q1():
    np.testing.assert_array_equal(sample_lkj(1, 1.0, np.random.default_rng(0)), [[1.0]])


def test_lkj_q2_uniform_marginal():
    rng = np.random.default_rng(0)
    r = np.array([sample_lkj(2, 1.0, rng)[0, 1] for _ in range(10_000)])
    assert stats.kstest(r, stats.uniform(-1, 2).cdf).statistic < 0.05


def test_lkj_marginal_general_shape():
    # off-diagonal marginal of LKJ(eta) in dimension q: (r+1)/2 ~ Beta(b, b), b = eta - 1 + q/2
    rng = np.random.default_rng(1)
    q, eta = 4, 2.0
    r = np.array([sample_lkj(q, eta, rng)[0, 3] for _ in range(5000)])
    b = eta - 1 + q / 2
    assert stats.kstest((r + 1) / 2, stats.beta(b, b).cdf).statistic < 0.05


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(0.3, 10))
def test_lkj_valid_correlation(seed, q, shape):
    r = sample_lkj(q, shape, np.random.default_rng(seed))
    assert np.array_equal(r, r.T)
    assert np.all(np.diag(r) == 1.0)
    cholesky(r)


def test_lkj_rejects_bad_shape():
    with pytest.raises(ValueError):
        sample_lkj(3, 0.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# block generators


def test_cfa_block_zero_loadings_covariance():
    theta = np.array([0.5, 1.0, 2.0])
    cfa = CfaParams(np.zeros((3, 1)), np.eye(1), theta, np.zeros(1))
    y = gen_cfa_block(cfa, 100_000, np.random.default_rng(0))
    np.testing.assert_allclose(np.cov(y.T), np.diag(theta), atol=0.02 * 2)


def test_cfa_block_covariance_matches_model():
    rng = np.random.default_rng(1)
    cfa = draw_cfa_truth(FactorStructure.simple(6, 2), rng)
    y = gen_cfa_block(cfa, 100_000, rng)
    np.testing.assert_allclose(np.cov(y.T), assemble_cfa_cov(cfa), atol=0.03)


def test_efa_block_covariance_and_mean():
    rng = np.random.default_rng(2)
    efa = EfaParams(rng.uniform(0.05, 0.99, (5, 2)), np.full(5, 0.85), np.array([1.0, 2.0]))
    y = gen_efa_block(efa, 100_000, rng)
    np.testing.assert_allclose(np.cov(y.T), assemble_efa_cov(efa), atol=0.03)
    np.testing.assert_allclose(y.mean(axis=0), efa.mean, atol=0.03)


def test_efa_block_zero_loadings():
    efa = EfaParams(np.zeros((3, 1)), np.full(3, 0.85), np.array([2.0]))
    y = gen_efa_block(efa, 50_000, np.random.default_rng(0))
    np.testing.assert_allclose(np.cov(y.T), 0.85 * np.eye(3), atol=0.03)


def test_blocks_reproducible():
    cfa = draw_cfa_truth(FactorStructure.simple(5, 1), np.random.default_rng(0))
    a = gen_cfa_block(cfa, 20, make_rng(4, 0, 1))
    b = gen_cfa_block(cfa, 20, make_rng(4, 0, 1))
    assert a.tobytes() == b.tobytes()


def test_draw_truth_unit_item_variance():
    cfa = draw_cfa_truth(FactorStructure.simple(30, 3), np.random.default_rng(3))
    np.testing.assert_allclose(np.diag(assemble_cfa_cov(cfa)), 1.0, atol=1e-12)
    assert np.all(cfa.uniquenesses > 0)


# ---------------------------------------------------------------------------
# Study 1


@pytest.mark.parametrize("C", [1, 2])
def test_study1_dimensions(C):
    cfg = Study1Config(n=300, p=12, pi=0.6, q=3, K=2, C=C)
    s = gen_study1(cfg, np.random.default_rng(0))
    assert s.data.responses.shape == (300, 12)
    assert s.data.design.shape == (300, C + 1)
    assert s.data.truth.shape == (300,)
    assert np.all(np.isin(s.data.design[:, 1], (0.0, 1.0)))
    if C == 2:
        assert np.all(np.abs(s.data.design[:, 2]) <= 5.0)


def test_study1_membership_share():
    from scipy.special import expit

    cfg = Study1Config(n=5000, pi=0.6, C=2)
    s = gen_study1(cfg, np.random.default_rng(7))
    pi = expit(s.data.design @ s.params.reg.beta)
    se = np.sqrt(np.sum(pi * (1 - pi))) / cfg.n
    assert abs(s.data.truth.mean() - pi.mean()) <= 3 * se


def test_study1_minority_regular():
    cfg = Study1Config(n=4000, pi=0.05, C=1)
    s = gen_study1(cfg, np.random.default_rng(8))
    beta = s.params.reg.beta
    assert beta[0] == pytest.approx(np.log(0.05 / 0.95))
    from scipy.special import expit

    pi = expit(s.data.design @ beta)
    assert abs(s.data.truth.mean() - pi.mean()) <= 3 * np.sqrt(np.sum(pi * (1 - pi))) / cfg.n
    assert s.data.truth.mean() < 0.2


def test_study1_truth_round_trip_bit_exact():
    s = gen_study1(Study1Config(n=50, p=10, K=2, C=2), np.random.default_rng(0))
    doc = json.loads(json.dumps(s.truth_dict()))
    params, structure = params_from_dict(doc)
    assert params.cfa.loadings.tobytes() == s.params.cfa.loadings.tobytes()
    assert params.efa.factor_means.tobytes() == s.params.efa.factor_means.tobytes()
    assert params.reg.beta.tobytes() == s.params.reg.beta.tobytes()
    assert doc["truth"] == s.data.truth.tolist()


def test_config_json_round_trip():
    for cfg in (Study1Config(pi=0.4, K=4, C=2, seed=3), Study2Config(n=250, gamma=1.5, delta=4.0, seed=9)):
        assert config_from_json(config_to_json(cfg)) == cfg


# ---------------------------------------------------------------------------
# discretization and SGR


def test_discretize_boundaries():
    tau = default_thresholds(11)
    assert discretize(np.array([tau[0] - 1.0]), 11, tau)[0] == 1
    assert discretize(np.array([tau[-1] + 1.0]), 11, tau)[0] == 11
    # ties go down: y equal to tau_m lands in category m
    assert discretize(np.array([tau[3]]), 11, tau)[0] == 4


def test_discretize_rejects_unsorted():
    with pytest.raises(ValueError):
        discretize(np.zeros(3), 3, [0.5, 0.1])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50))
def test_discretize_monotone(values):
    v = np.sort(np.array(values))
    cats = discretize(v, 11, default_thresholds(11))
    assert np.all(np.diff(cats) >= 0)
    assert cats.min() >= 1 and cats.max() <= 11


def test_default_thresholds_uniform_usage():
    y = np.random.default_rng(0).standard_normal(200_000)
    freq = np.bincount(discretize(y, 11, default_thresholds(11)), minlength=12)[1:] / y.size
    np.testing.assert_allclose(freq, 1 / 11, atol=0.005)


def test_sgr_last_row_absorbing():
    P = sgr_replacement_matrix(11, 4.0, 1.5, 1.0)
    np.testing.assert_array_equal(P[-1], np.eye(11)[-1])


def test_sgr_kappa_zero_identity():
    np.testing.assert_array_equal(sgr_replacement_matrix(7, 1.5, 4.0, 0.0), np.eye(7))


def test_sgr_symmetric_two_categories():
    P = sgr_replacement_matrix(11, 2.0, 2.0, 1.0)
    m = 11 - 2  # 1-based category M - 2
    assert P[m - 1, 9] == pytest.approx(0.5, abs=1e-15)
    assert P[m - 1, 10] == pytest.approx(0.5, abs=1e-15)


def test_sgr_rows_sum_to_one_grid():
    for M in range(2, 12):
        for g in (0.5, 1.0, 1.5, 4.0):
            for d in (0.5, 1.0, 1.5, 4.0):
                for k in (0.0, 0.5, 1.0):
                    P = sgr_replacement_matrix(M, g, d, k)
                    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
                    assert np.all(np.tril(P, -1) == 0)


def test_sgr_extreme_dominates_slight():
    ext, sli = sgr_replacement_matrix(11, 4.0, 1.5, 1.0), sgr_replacement_matrix(11, 1.5, 4.0, 1.0)
    for m in range(10):
        assert np.all(np.cumsum(ext[m]) <= np.cumsum(sli[m]) + 1e-15)


@pytest.mark.parametrize("M", [1, 0])
def test_sgr_rejects_small_m(M):
    with pytest.raises(ValueError):
        sgr_replacement_matrix(M, 1.0, 1.0, 1.0)


def test_perturb_kappa_zero_identity():
    y = np.random.default_rng(0).integers(1, 12, size=(50, 6))
    out = perturb_faking(y, np.arange(50), 4.0, 1.5, 0.0, np.random.default_rng(1))
    np.testing.assert_array_equal(out, y)


@given(st.integers(0, 2**32 - 1))
def test_perturb_never_decreases(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, 12, size=(30, 5))
    rows = rng.uniform(size=30) < 0.5
    out = perturb_faking(y, rows, 4.0, 1.5, 1.0, rng)
    assert np.all(out >= y)
    np.testing.assert_array_equal(out[~rows], y[~rows])
    below = y[rows] < 11
    assert np.all(out[rows][below] > y[rows][below])


def test_perturb_extreme_shifts_more():
    y = np.random.default_rng(0).integers(1, 12, size=(2000, 5))
    ext = perturb_faking(y, np.arange(2000), 4.0, 1.5, 1.0, make_rng(3, 0, 0))
    sli = perturb_faking(y, np.arange(2000), 1.5, 4.0, 1.0, make_rng(3, 0, 0))
    assert ext.mean() > sli.mean()


# ---------------------------------------------------------------------------
# Study 2


def test_study2_faking_share_and_honest_rows():
    cfg = Study2Config(n=1000, p=16, pi=0.8)
    s = gen_study2(cfg, np.random.default_rng(4))
    z = s.data.truth
    assert abs((1 - z.mean()) - 0.2) <= 3 * np.sqrt(0.2 * 0.8 / 1000)
    honest = discretize(s.latent, cfg.M, cfg.cut_points())
    np.testing.assert_array_equal(s.data.responses[z == 1], honest[z == 1])
    assert np.all(s.data.responses[z == 0] >= honest[z == 0])
    assert s.data.design.shape == (1000, 1)
    assert s.params.reg.beta[0] == pytest.approx(np.log(4.0))


def test_study2_extreme_faking_mean_shift():
    cfg = Study2Config(n=1000, p=16, pi=0.6, gamma=4.0, delta=1.5)
    s = gen_study2(cfg, np.random.default_rng(5))
    y, z = s.data.responses, s.data.truth
    assert y[z == 0].mean() - y[z == 1].mean() > 0.5


# ---------------------------------------------------------------------------
# scoring


def test_metrics_perfect():
    m = score_classification([1, 0, 1, 0], [1, 0, 1, 0]).metrics
    assert (m.SE, m.SP, m.BACC, m.MCC) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_random_guessing():
    truth = [0] * 10 + [1] * 10
    pred = [0] * 5 + [1] * 5 + [0] * 5 + [1] * 5
    s = score_classification(truth, pred)
    assert (s.counts.TP, s.counts.FP, s.counts.TN, s.counts.FN) == (5, 5, 5, 5)
    assert s.metrics.MCC == 0.0 and s.metrics.BACC == 0.5


def test_metrics_hand_arithmetic():
    # aberrant = 0 is the positive class
    truth = [0] * 50 + [1] * 50
    pred = [0] * 40 + [1] * 10 + [1] * 35 + [0] * 15
    s = score_classification(truth, pred)
    assert (s.counts.TP, s.counts.FN, s.counts.TN, s.counts.FP) == (40, 10, 35, 15)
    assert s.metrics.SE == pytest.approx(0.8)
    assert s.metrics.SP == pytest.approx(0.7)
    assert s.metrics.BACC == pytest.approx(0.75)
    assert s.metrics.MCC == pytest.approx((1400 - 150) / np.sqrt(55 * 50 * 50 * 45), abs=1e-12)
    assert s.metrics.MCC == pytest.approx(0.5025, abs=1e-4)


def test_metrics_degenerate_denominator():
    assert score_classification([0, 1, 1], [1, 1, 1]).metrics.MCC == 0.0


@given(st.integers(1, 500), st.integers(0, 500), st.integers(1, 500), st.integers(0, 500))
def test_metrics_invariants(tp, fn, tn, fp):
    truth = [0] * (tp + fn) + [1] * (tn + fp)
    pred = [0] * tp + [1] * fn + [1] * tn + [0] * fp
    s = score_classification(truth, pred)
    m = s.metrics
    assert s.counts.n == len(truth)
    assert m.BACC == (m.SE + m.SP) / 2
    assert -1.0 - 1e-12 <= m.MCC <= 1.0 + 1e-12
    assert 0 <= m.SE <= 1 and 0 <= m.SP <= 1


def test_recovery_identical_is_zero():
    cfa = draw_cfa_truth(FactorStructure.simple(8, 2), np.random.default_rng(0))
    rec = score_recovery(cfa, cfa, 0.8, np.log(4.0))
    for block, v in rec.items():
        assert v["bias"] == pytest.approx(0.0, abs=1e-15) and v["rmse"] == pytest.approx(0.0, abs=1e-15), block


def test_recovery_constant_shift():
    cfa = draw_cfa_truth(FactorStructure.simple(8, 2), np.random.default_rng(0))
    shifted = CfaParams(cfa.loadings + 0.1 * (cfa.loadings != 0), cfa.factor_corr, cfa.uniquenesses, cfa.factor_means)
    rec = score_recovery(cfa, shifted)
    assert rec["lambda"]["bias"] == pytest.approx(0.1)
    assert rec["lambda"]["rmse"] == pytest.approx(0.1)


def test_recovery_sign_aligned():
    cfa = draw_cfa_truth(FactorStructure.simple(6, 2), np.random.default_rng(1))
    s = np.array([-1.0, 1.0])
    flipped = CfaParams(cfa.loadings * s, cfa.factor_corr * np.outer(s, s), cfa.uniquenesses, cfa.factor_means)
    assert score_recovery(cfa, flipped)["lambda"]["rmse"] == pytest.approx(0.0, abs=1e-15)


def test_recovery_dimension_mismatch():
    a = draw_cfa_truth(FactorStructure.simple(6, 2), np.random.default_rng(1))
    b = draw_cfa_truth(FactorStructure.simple(6, 1), np.random.default_rng(1))
    with pytest.raises(ValueError):
        score_recovery(a, b)


# ---------------------------------------------------------------------------
# replication harness


def test_replication_row_and_csv(tmp_path):
    from aberrant_mix.em import EmOptions

    cfg = Study1Config(n=200, p=8, pi=0.7, q=1, K=1, C=1, seed=3)
    rows = [run_replication(cfg, r, EmOptions(n_starts=1, max_iter=50)) for r in range(2)]
    assert rows[0]["TP"] + rows[0]["FN"] + rows[0]["TN"] + rows[0]["FP"] == 200
    again = run_replication(cfg, 1, EmOptions(n_starts=1, max_iter=50))
    assert again["loglik"] == rows[1]["loglik"]
    out = tmp_path / "reps.csv"
    write_rows_csv(rows, out)
    write_rows_csv(rows, out, append=True)
    with open(out) as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 4 and "BACC" in table[0] and "_fit" not in table[0]
    summ = summarize(rows, ["BACC"])
    assert summ["BACC"]["n"] == 2
