"""
Synthetic data for the two Monte Carlo designs, the SGR faking-good
perturbation, and classification / parameter-recovery scoring.

Study 1 draws a CFA+EFA mixture with logit covariates. Study 2 draws honest
CFA ratings, discretizes them to M categories and replaces a random subset
of rows with faked ratings from the SGR conditional replacement distribution.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import expit

from aberrant_mix.model import (
    CfaParams,
    Dataset,
    EfaParams,
    FactorStructure,
    MixtureParams,
    MixtureReg,
    ParameterError,
    cholesky,
    params_to_dict,
)

MAX_REDRAWS = 100


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Study1Config:
    n: int = 1000
    p: int = 30
    pi: float = 0.80
    q: int = 1
    K: int = 2
    C: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.pi < 1:
            raise ValueError("pi must lie in (0, 1)")
        if not (self.q < self.p and self.K < self.p):
            raise ValueError("q and K must be smaller than p")
        if self.C not in (0, 1, 2):
            raise ValueError("C must be 0, 1 or 2")


@dataclass(frozen=True)
class Study2Config:
    n: int = 1000
    p: int = 16
    pi: float = 0.80
    gamma: float = 4.0
    delta: float = 1.5
    q: int = 4
    K: int = 1
    M: int = 11
    kappa: float = 1.0
    seed: int = 0
    thresholds: Optional[tuple] = None

    def __post_init__(self):
        if not 0 < self.pi < 1:
            raise ValueError("pi must lie in (0, 1)")
        if self.gamma <= 0 or self.delta <= 0:
            raise ValueError("gamma and delta must be positive")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if not 0 <= self.kappa <= 1:
            raise ValueError("kappa must lie in [0, 1]")
        if self.thresholds is not None:
            object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
            if len(self.thresholds) != self.M - 1:
                raise ValueError("thresholds must have M - 1 entries")

    def cut_points(self) -> np.ndarray:
        if self.thresholds is not None:
            return np.asarray(self.thresholds)
        return default_thresholds(self.M)


def config_from_json(text: str):
    doc = json.loads(text)
    study = doc.pop("study", None)
    if study in (1, "1", "study1"):
        return Study1Config(**doc)
    if study in (2, "2", "study2"):
        return Study2Config(**doc)
    raise ValueError("config JSON needs 'study': 1 or 2")


def config_to_json(cfg) -> str:
    study = 1 if isinstance(cfg, Study1Config) else 2
    return json.dumps({"study": study, **asdict(cfg)})


@dataclass
class SimulatedSample:
    data: Dataset
    structure: FactorStructure
    params: MixtureParams
    latent: Optional[np.ndarray] = None  # continuous responses before discretization (Study 2)

    def truth_dict(self) -> dict:
        doc = params_to_dict(self.params, self.structure)
        doc["truth"] = self.data.truth.astype(int).tolist()
        return doc


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def sample_lkj(q: int, shape: float, rng: np.random.Generator) -> np.ndarray:
    """q x q correlation matrix from LKJ(shape) by the onion method."""
    if shape <= 0:
        raise ValueError("shape must be positive")
    if q == 1:
        return np.ones((1, 1))
    beta = shape + (q - 2) / 2.0
    r12 = 2.0 * rng.beta(beta, beta) - 1.0
    corr = np.array([[1.0, r12], [r12, 1.0]])
    for k in range(2, q):
        beta -= 0.5
        y = rng.beta(k / 2.0, beta)
        u = rng.normal(size=k)
        u /= np.linalg.norm(u)
        z = np.linalg.cholesky(corr) @ (np.sqrt(y) * u)
        corr = np.block([[corr, z[:, None]], [z[None, :], np.ones((1, 1))]])
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def gen_cfa_block(params: CfaParams, m: int, rng: np.random.Generator) -> np.ndarray:
    """m rows of y = L1 eta + delta, eta ~ N(mu, Phi), delta ~ N(0, diag(Theta))."""
    chol = cholesky(params.factor_corr, "factor_corr")
    eta = params.factor_means + rng.standard_normal((m, params.q)) @ chol.T
    noise = rng.standard_normal((m, params.p)) * np.sqrt(params.uniquenesses)
    return eta @ params.loadings.T + noise


def gen_efa_block(params: EfaParams, r: int, rng: np.random.Generator) -> np.ndarray:
    """r rows of y = L2 xi + eps, xi ~ N(nu, I), eps ~ N(0, diag(Psi))."""
    xi = params.factor_means + rng.standard_normal((r, params.k))
    noise = rng.standard_normal((r, params.p)) * np.sqrt(params.uniquenesses)
    return xi @ params.loadings.T + noise


def draw_cfa_truth(structure: FactorStructure, rng: np.random.Generator) -> CfaParams:
    """Loadings U(0.05, 0.99) on the free pattern, Phi ~ LKJ(1), unit item variances."""
    p, q = structure.p, structure.q
    mask = structure.mask
    lam = rng.uniform(0.05, 0.99, (p, q)) * mask
    phi = sample_lkj(q, 1.0, rng)
    for j in range(p):
        for _ in range(MAX_REDRAWS):
            if 1.0 - lam[j] @ phi @ lam[j] > 0:
                break
            lam[j] = rng.uniform(0.05, 0.99, q) * mask[j]
        else:
            raise ParameterError(f"item {j}: no loading draw with positive uniqueness after {MAX_REDRAWS} tries")
    theta = 1.0 - np.einsum("jk,kl,jl->j", lam, phi, lam)
    return CfaParams(lam, phi, theta, np.zeros(q), means_fixed_zero=False)


def gen_study1(cfg: Study1Config, rng: np.random.Generator) -> SimulatedSample:
    structure = FactorStructure.simple(cfg.p, cfg.q)
    cfa = draw_cfa_truth(structure, rng)
    efa = EfaParams(rng.uniform(0.05, 0.99, (cfg.p, cfg.K)), np.full(cfg.p, 0.85), rng.uniform(0.5, 5.0, cfg.K))
    beta = np.empty(cfg.C + 1)
    beta[0] = np.log(cfg.pi / (1.0 - cfg.pi))
    beta[1:] = rng.uniform(-1.5, 1.5, cfg.C)
    cols = [np.ones(cfg.n)]
    names = []
    if cfg.C >= 1:
        cols.append(rng.binomial(1, 0.5, cfg.n).astype(float))
        names.append("x1")
    if cfg.C >= 2:
        cols.append(rng.uniform(-5.0, 5.0, cfg.n))
        names.append("x2")
    design = np.column_stack(cols)
    pi = expit(design @ beta)
    z = (rng.uniform(size=cfg.n) < pi).astype(np.int8)
    y = np.empty((cfg.n, cfg.p))
    n1 = int(z.sum())
    y[z == 1] = gen_cfa_block(cfa, n1, rng)
    y[z == 0] = gen_efa_block(efa, cfg.n - n1, rng)
    params = MixtureParams(cfa, efa, MixtureReg(beta, names))
    return SimulatedSample(Dataset(y, design, z, covariate_names=names), structure, params)


def default_thresholds(M: int) -> np.ndarray:
    """Standard-normal quantiles at probabilities 1/M, ..., (M-1)/M."""
    return stats.norm.ppf(np.arange(1, M) / M)


def discretize(values: np.ndarray, M: int, thresholds) -> np.ndarray:
    """Category m (1-based) iff tau_{m-1} < y <= tau_m, tau_0 = -inf, tau_M = +inf."""
    tau = np.asarray(thresholds, dtype=float)
    if tau.shape != (M - 1,):
        raise ValueError(f"need {M - 1} thresholds, got {tau.shape}")
    if np.any(np.diff(tau) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    return np.searchsorted(tau, np.asarray(values, dtype=float), side="left").astype(np.int64) + 1


def sgr_replacement_matrix(M: int, gamma: float, delta: float, kappa: float = 1.0) -> np.ndarray:
    """Row-stochastic P[m-1, m'-1] = P(fake = m' | honest = m).

    Upward moves follow a Beta(gamma, delta) discretized over the categories
    m+1..M (equal-width subintervals of (0, 1)), scaled by kappa; the rating
    stays put with probability 1 - kappa and never decreases.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    if gamma <= 0 or delta <= 0:
        raise ValueError("gamma and delta must be positive")
    if not 0 <= kappa <= 1:
        raise ValueError("kappa must lie in [0, 1]")
    P = np.zeros((M, M))
    for m in range(1, M):
        width = M - m
        cdf = stats.beta.cdf(np.linspace(0.0, 1.0, width + 1), gamma, delta)
        dg = np.diff(cdf)
        dg /= dg.sum()
        P[m - 1, m - 1] = 1.0 - kappa
        P[m - 1, m:] = kappa * dg
    P[M - 1, M - 1] = 1.0
    return P


def perturb_faking(
    responses: np.ndarray,
    rows,
    gamma: float,
    delta: float,
    kappa: float,
    rng: np.random.Generator,
    M: int = 11,
) -> np.ndarray:
    """Resample every cell of the selected rows from the replacement distribution."""
    out = np.array(responses, dtype=np.int64, copy=True)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    if rows.size == 0:
        return out
    if out.min() < 1 or out.max() > M:
        raise ValueError(f"responses must lie in 1..{M}")
    cum = np.cumsum(sgr_replacement_matrix(M, gamma, delta, kappa), axis=1)
    cum[:, -1] = 1.0
    block = out[rows]
    u = rng.uniform(size=block.shape)
    cum_rows = cum[block - 1]  # (r, p, M)
    out[rows] = np.sum(u[..., None] >= cum_rows, axis=-1) + 1
    return out


def gen_study2(cfg: Study2Config, rng: np.random.Generator) -> SimulatedSample:
    structure = FactorStructure.simple(cfg.p, cfg.q)
    cfa = draw_cfa_truth(structure, rng)
    latent = gen_cfa_block(cfa, cfg.n, rng)
    honest = discretize(latent, cfg.M, cfg.cut_points())
    z = (rng.uniform(size=cfg.n) < cfg.pi).astype(np.int8)
    faked = perturb_faking(honest, z == 0, cfg.gamma, cfg.delta, cfg.kappa, rng, cfg.M)
    beta = np.array([np.log(cfg.pi / (1.0 - cfg.pi))])
    # fakers have no factor-model truth, so the EFA slot holds a zero placeholder
    efa = EfaParams(np.zeros((cfg.p, cfg.K)), np.ones(cfg.p), np.zeros(cfg.K))
    params = MixtureParams(cfa, efa, MixtureReg(beta))
    data = Dataset(faked.astype(float), np.ones((cfg.n, 1)), z)
    return SimulatedSample(data, structure, params, latent=latent)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def n(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


@dataclass(frozen=True)
class ClassMetrics:
    SE: float
    SP: float
    BACC: float
    MCC: float


@dataclass(frozen=True)
class ClassificationScore:
    counts: ConfusionCounts
    metrics: ClassMetrics

    def metrics_dict(self) -> dict:
        return asdict(self.metrics)


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def score_classification(truth, predicted) -> ClassificationScore:
    """Confusion counts and SE/SP/BACC/MCC with the aberrant class (z = 0) as positive."""
    truth = np.asarray(truth).astype(int)
    predicted = np.asarray(predicted).astype(int)
    if truth.shape != predicted.shape:
        raise ValueError("truth and predicted must have equal lengths")
    pos_t, pos_p = truth == 0, predicted == 0
    tp = int(np.sum(pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    se, sp = _ratio(tp, tp + fn), _ratio(tn, tn + fp)
    den = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / np.sqrt(den) if den > 0 else 0.0
    return ClassificationScore(ConfusionCounts(tp, fp, tn, fn), ClassMetrics(se, sp, (se + sp) / 2.0, float(mcc)))


def score_recovery(
    true_params: CfaParams,
    est_params: CfaParams,
    true_pi: Optional[float] = None,
    est_beta0: Optional[float] = None,
) -> dict:
    """Bias and RMSE per block after sign-aligning estimated factors to the truth.

    Blocks: ``lambda`` (entries free in the true pattern), ``theta``, ``phi``
    (strict lower triangle), ``mu`` and, when both are given, ``pi``
    (logistic(est_beta0) against true_pi).
    """
    from aberrant_mix.em import align_cfa

    if true_params.loadings.shape != est_params.loadings.shape:
        raise ValueError("parameter dimensions differ")
    est = align_cfa(est_params, true_params)
    free = true_params.loadings != 0
    tril = np.tril_indices(true_params.q, -1)
    diffs = {
        "lambda": est.loadings[free] - true_params.loadings[free],
        "theta": est.uniquenesses - true_params.uniquenesses,
        "phi": est.factor_corr[tril] - true_params.factor_corr[tril],
        "mu": est.factor_means - true_params.factor_means,
    }
    if true_pi is not None and est_beta0 is not None:
        diffs["pi"] = np.array([expit(est_beta0) - true_pi])
    out = {}
    for block, d in diffs.items():
        if d.size == 0:
            continue
        out[block] = {"bias": float(np.mean(d)), "rmse": float(np.sqrt(np.mean(d * d)))}
    return out


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------


def replication_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(rep), 7)).generate_state(1, np.uint64)[0])


def run_replication(cfg, rep: int, opts=None, standardize: Optional[bool] = None) -> dict:
    """Generate, fit and score one replication; returns a flat result row.

    Study 2 data are column-standardized before fitting unless
    ``standardize=False``; Study 1 data are fitted on their own scale.
    """
    from aberrant_mix.em import EmOptions, FitFailure, fit_em, make_rng

    opts = opts or EmOptions()
    rng = make_rng(cfg.seed, start=0, replicate=rep)
    is_study2 = isinstance(cfg, Study2Config)
    sample = gen_study2(cfg, rng) if is_study2 else gen_study1(cfg, rng)
    if standardize is None:
        standardize = is_study2
    data = sample.data.standardized() if standardize else sample.data
    row = {"replication": rep, **{f"cfg_{k}": v for k, v in asdict(cfg).items() if k != "thresholds"}}
    try:
        fit = fit_em(data, sample.structure, cfg.K, replace(opts, seed=replication_seed(cfg.seed, rep)))
    except FitFailure as exc:
        row["error"] = str(exc)
        return row
    score = score_classification(sample.data.truth, fit.assignments)
    row.update(asdict(score.counts))
    row.update(score.metrics_dict())
    row.update(loglik=fit.loglik, converged=fit.converged, n_iter=fit.n_iter)
    rec = score_recovery(sample.params.cfa, fit.params.cfa, cfg.pi, float(fit.params.reg.beta[0]))
    for block, v in rec.items():
        row[f"{block}_bias"] = v["bias"]
        row[f"{block}_rmse"] = v["rmse"]
    row["_sample"] = sample
    row["_fit"] = fit
    return row


def _worker(args):
    cfg, rep, opts, standardize = args
    row = run_replication(cfg, rep, opts, standardize)
    row.pop("_sample", None)
    row.pop("_fit", None)
    return row


def n_workers() -> int:
    env = os.environ.get("ABERRANT_MIX_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def run_study(cfg, reps: int, opts=None, standardize: Optional[bool] = None, workers: Optional[int] = None) -> list:
    """Run ``reps`` independent replications; order of the result follows rep index."""
    workers = workers or n_workers()
    jobs = [(cfg, r, opts, standardize) for r in range(reps)]
    if workers == 1:
        return [_worker(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, jobs))


def summarize(rows: list, keys=None) -> dict:
    """Mean and sd across replications for each numeric metric."""
    keys = keys or [k for k in rows[0] if not k.startswith(("cfg_", "_")) and k not in ("replication", "error")]
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r and r[k] is not None], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[k] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0, "n": int(vals.size)}
    return out


def write_rows_csv(rows: list, path, append: bool = False) -> None:
    cols = []
    for r in rows:
        for k in r:
            if not k.startswith("_") and k not in cols:
                cols.append(k)
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        if not exists:
            writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items() if not k.startswith("_")})
