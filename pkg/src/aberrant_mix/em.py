"""
EM estimation for the CFA+EFA mixture.

One EM iteration is ``e_step -> m_step_cfa -> m_step_efa -> m_step_beta``.
The E-step returns exact Gaussian conditional factor moments; each M-step
maximizes its responsibility-weighted share of the expected complete-data
log-likelihood. The unit-diagonal constraint on Phi is imposed afterwards by
rescaling the factors, which leaves the observed-data likelihood unchanged.
"""

from __future__ import annotations

import functools
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit

from aberrant_mix.model import (
    CfaParams,
    Dataset,
    EfaParams,
    FactorStructure,
    MixtureParams,
    MixtureReg,
    ParameterError,
    _normalize_log,
    _logpdf_rows,
    assemble_cfa_cov,
    assemble_efa_cov,
    cholesky,
    classify,
    count_params,
    log_mixture_weights,
    params_to_dict,
)

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
WARMUP_SWEEPS = 10


class EmptyComponentError(ParameterError):
    """A mixture component received (numerically) zero total responsibility."""


class SingularNormalEquations(ParameterError):
    def __init__(self, item: int, block: str):
        self.item = item
        super().__init__(f"singular normal equations for item {item} in the {block} loading update")


class FitFailure(RuntimeError):
    """Every EM start failed. ``causes`` maps start index to the error message."""

    def __init__(self, causes: dict):
        self.causes = causes
        lines = "; ".join(f"start {k}: {v}" for k, v in causes.items())
        super().__init__(f"all {len(causes)} EM starts failed ({lines})")


def make_rng(seed: int, start: int = 0, replicate: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, replicate, start)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(start)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class EmOptions:
    max_iter: int = 500
    tol: float = 1e-6
    n_starts: int = 10
    ridge: float = 1e-6
    uniqueness_floor: float = 1e-4
    seed: int = 0
    jitter_sd: float = 0.05
    kmeans_iter: int = 20

    def __post_init__(self):
        if self.max_iter < 1 or self.n_starts < 1:
            raise ValueError("max_iter and n_starts must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.uniqueness_floor > 0:
            raise ValueError("uniqueness_floor must be > 0")
        if self.ridge < 0 or self.jitter_sd < 0:
            raise ValueError("ridge and jitter_sd must be nonnegative")


@dataclass
class EStepMoments:
    """Responsibilities and conditional factor moments at the current parameters.

    The conditional covariances do not depend on y, so one (q, q) and one
    (K, K) matrix are stored; per-observation second moments are
    ``cov + outer(mean_i, mean_i)``.
    """

    responsibilities: np.ndarray
    loglik: float
    cfa_means: np.ndarray
    cfa_cov: np.ndarray
    efa_means: np.ndarray
    efa_cov: np.ndarray

    def cfa_second_moment(self, i: int) -> np.ndarray:
        m = self.cfa_means[i]
        return self.cfa_cov + np.outer(m, m)

    def efa_second_moment(self, i: int) -> np.ndarray:
        m = self.efa_means[i]
        return self.efa_cov + np.outer(m, m)


@dataclass
class NewtonInfo:
    iterations: int = 0
    converged: bool = False
    separated: bool = False
    ridged: bool = False


@dataclass
class FitResult:
    params: MixtureParams
    responsibilities: np.ndarray
    assignments: np.ndarray
    loglik_trace: list
    converged: bool
    n_iter: int
    n_params: int
    entropy_raw: float
    structure: Optional[FactorStructure] = None
    start_index: int = 0
    start_failures: dict = field(default_factory=dict)
    start_logliks: dict = field(default_factory=dict)
    beta_flags: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def K(self) -> int:
        return self.params.efa.k

    def to_dict(self) -> dict:
        doc = params_to_dict(self.params, self.structure)
        doc.update(
            loglik=self.loglik,
            n_params=self.n_params,
            entropy_raw=self.entropy_raw,
            converged=self.converged,
            n_iter=self.n_iter,
            start_index=self.start_index,
            start_failures={str(k): v for k, v in self.start_failures.items()},
            loglik_trace=[float(v) for v in self.loglik_trace],
            assignments=self.assignments.astype(int).tolist(),
            responsibilities=self.responsibilities.tolist(),
        )
        return doc

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _conditional_moments(y, mean_f, cov_f, lam, chol):
    """Gaussian conditioning of factors f ~ N(mean_f, cov_f) on y = lam f + e."""
    lam_cov = lam @ cov_f  # (p, r)
    gain_t = cho_solve((chol, True), lam_cov, check_finite=False)  # Sigma^-1 lam cov_f
    means = mean_f + (y - lam @ mean_f) @ gain_t
    cov = cov_f - gain_t.T @ lam_cov
    return means, 0.5 * (cov + cov.T)


def e_step(data: Dataset, params: MixtureParams) -> EStepMoments:
    y = data.responses
    cfa, efa = params.cfa, params.efa
    chol1 = cholesky(assemble_cfa_cov(cfa), "CFA covariance")
    chol2 = cholesky(assemble_efa_cov(efa), "EFA covariance")
    logpi, log1mpi = log_mixture_weights(data.design, params.reg)
    joint = np.empty((data.n, 2))
    joint[:, 0] = logpi + _logpdf_rows(y, cfa.mean, chol1)
    joint[:, 1] = log1mpi + _logpdf_rows(y, efa.mean, chol2)
    resp, row_ll = _normalize_log(joint)
    m1, v1 = _conditional_moments(y, cfa.factor_means, cfa.factor_corr, cfa.loadings, chol1)
    m2, v2 = _conditional_moments(y, efa.factor_means, np.eye(efa.k), efa.loadings, chol2)
    return EStepMoments(resp, float(np.sum(row_ll)), m1, v1, m2, v2)


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------


def _weighted_sums(y, w, means, cov):
    total = float(np.sum(w))
    wm = means * w[:, None]
    s_yy = (y * y).T @ w
    s_yf = y.T @ wm
    s_ff = total * cov + means.T @ wm
    return total, s_yy, s_yf, 0.5 * (s_ff + s_ff.T), wm.sum(axis=0)


@functools.lru_cache(maxsize=64)
def _pattern_groups(mask_bytes: bytes, shape: tuple) -> tuple:
    """Items grouped by identical free-loading rows: ((free, items), ...)."""
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(shape)
    rows, inverse = np.unique(mask, axis=0, return_inverse=True)
    return tuple((np.flatnonzero(row), np.flatnonzero(inverse.ravel() == g)) for g, row in enumerate(rows))


def _regress_items(s_yy, s_yf, s_ff, total, mask, block):
    """Row-wise weighted least squares of items on factors restricted to ``mask``."""
    p, r = s_yf.shape
    lam = np.zeros((p, r))
    for free, items in _pattern_groups(mask.tobytes(), mask.shape):
        a = s_ff[np.ix_(free, free)]
        try:
            chol = cholesky(a, "factor second moment")
        except ParameterError:
            raise SingularNormalEquations(int(items[0]), block) from None
        lam[np.ix_(items, free)] = cho_solve((chol, True), s_yf[np.ix_(items, free)].T).T
    resid = s_yy - 2.0 * np.einsum("jk,jk->j", lam, s_yf) + np.einsum("jk,kl,jl->j", lam, s_ff, lam)
    return lam, resid / total


def m_step_cfa(
    data: Dataset,
    moments: EStepMoments,
    structure: FactorStructure,
    means_fixed_zero: bool = False,
    uniqueness_floor: float = 1e-4,
    ridge: float = 1e-6,
) -> CfaParams:
    w = moments.responsibilities[:, 0]
    total, s_yy, s_yf, s_ff, s_f = _weighted_sums(data.responses, w, moments.cfa_means, moments.cfa_cov)
    if total <= 1e-10:
        raise EmptyComponentError("empty CFA component")
    lam, theta = _regress_items(s_yy, s_yf, s_ff, total, structure.mask, "CFA")
    theta = np.maximum(theta + ridge, uniqueness_floor)
    q = structure.q
    mu = np.zeros(q) if means_fixed_zero else s_f / total
    phi = s_ff / total - np.outer(mu, mu)
    scale = np.sqrt(np.diag(phi))
    phi = phi / np.outer(scale, scale)
    phi = 0.5 * (phi + phi.T)
    np.fill_diagonal(phi, 1.0)
    return CfaParams(lam * scale, phi, theta, mu / scale, means_fixed_zero)


def m_step_efa(
    data: Dataset,
    moments: EStepMoments,
    uniqueness_floor: float = 1e-4,
    ridge: float = 1e-6,
) -> EfaParams:
    w = moments.responsibilities[:, 1]
    total, s_yy, s_yf, s_ff, s_f = _weighted_sums(data.responses, w, moments.efa_means, moments.efa_cov)
    if total <= 1e-10:
        raise EmptyComponentError("empty EFA component")
    mask = np.ones_like(s_yf, dtype=bool)
    lam, psi = _regress_items(s_yy, s_yf, s_ff, total, mask, "EFA")
    psi = np.maximum(psi + ridge, uniqueness_floor)
    return EfaParams(lam, psi, s_f / total)


def _logit_objective(design, target, beta):
    t = design @ beta
    return float(np.sum(-target * np.logaddexp(0.0, -t) - (1.0 - target) * np.logaddexp(0.0, t)))


def _clamp_step(design, beta, step):
    """Largest fraction of ``step`` keeping |x beta| <= LOGIT_CLAMP."""
    t0, dt = design @ beta, design @ step
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(dt > 0, (LOGIT_CLAMP - t0) / dt, np.where(dt < 0, (-LOGIT_CLAMP - t0) / dt, np.inf))
    frac = float(np.min(lim, initial=np.inf))
    return min(1.0, max(frac, 0.0))


def m_step_beta(
    design: np.ndarray,
    responsibilities: np.ndarray,
    beta_init,
    covariate_names: Sequence[str] = (),
    max_iter: int = 50,
    gtol: float = 1e-8,
) -> tuple[MixtureReg, NewtonInfo]:
    """Weighted-logistic Newton update of the mixing coefficients.

    Maximizes sum_i z_i log pi_i + (1 - z_i) log(1 - pi_i) with soft targets
    z_i = P(z_i = 1 | y_i). Steps are halved until the objective does not
    decrease; linear predictors are kept within +-30.
    """
    x = np.asarray(design, dtype=float)
    target = np.asarray(responsibilities, dtype=float)[:, 0]
    beta = np.array(beta_init, dtype=float, copy=True)
    info = NewtonInfo()
    t = x @ beta
    if np.max(np.abs(t)) > LOGIT_CLAMP:
        beta *= LOGIT_CLAMP / np.max(np.abs(t))
        info.separated = True
    obj = _logit_objective(x, target, beta)
    for it in range(max_iter):
        pi = expit(x @ beta)
        grad = x.T @ (target - pi)
        if np.max(np.abs(grad)) <= gtol:
            info.converged = True
            break
        hess = (x * (pi * (1.0 - pi))[:, None]).T @ x
        try:
            chol = cholesky(hess, "logit Hessian")
        except ParameterError:
            chol = cholesky(hess + 1e-8 * np.eye(hess.shape[0]), "logit Hessian")
            info.ridged = True
        step = cho_solve((chol, True), grad)
        frac = _clamp_step(x, beta, step)
        if frac < 1.0:
            info.separated = True
            step = step * frac
        for _ in range(30):
            cand = beta + step
            cand_obj = _logit_objective(x, target, cand)
            if cand_obj >= obj:
                break
            step = 0.5 * step
        else:
            # no ascent left at floating-point resolution
            info.converged = True
            break
        beta, obj = cand, cand_obj
        info.iterations = it + 1
        if frac == 0.0:
            break
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(beta))):
            info.converged = True
            break
    return MixtureReg(beta, covariate_names), info


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _kmeans2(y: np.ndarray, rng: np.random.Generator, n_iter: int) -> np.ndarray:
    """Two-group Lloyd iterations from k-means++ seeded centroids."""
    n = y.shape[0]
    first = y[rng.integers(n)]
    d2 = np.sum((y - first) ** 2, axis=1)
    second = y[rng.choice(n, p=d2 / d2.sum())] if d2.sum() > 0 else y[rng.integers(n)]
    centroids = np.vstack([first, second])
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        dist = ((y[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        for g in (0, 1):
            members = y[labels == g]
            if len(members):
                centroids[g] = members.mean(axis=0)
    return labels


def _group_moments(y: np.ndarray, ridge: float):
    n, p = y.shape
    mean = y.mean(axis=0)
    if n < p + 1:
        warnings.warn("covariance rank-deficient: group has fewer than p + 1 rows", RuntimeWarning, stacklevel=3)
    cov = np.cov(y, rowvar=False, bias=True) if n > 1 else np.zeros((p, p))
    cov = np.atleast_2d(cov) + max(ridge, 1e-3) * np.eye(p) * (n < p + 1)
    return mean, cov


def _ppca(cov: np.ndarray, r: int):
    """Top-r probabilistic-PCA loadings and residual variance of ``cov``."""
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    sigma2 = float(np.mean(vals[r:])) if vals.size > r else 0.0
    lam = vecs[:, :r] * np.sqrt(np.maximum(vals[:r] - sigma2, 1e-3))
    signs = np.where(lam.sum(axis=0) < 0, -1.0, 1.0)
    return lam * signs


def _init_cfa(y, structure, means_fixed_zero, floor, ridge):
    mean, cov = _group_moments(y, ridge)
    p, q = structure.p, structure.q
    lam = np.zeros((p, q))
    composites = np.zeros((y.shape[0], q))
    for k in range(q):
        items = np.flatnonzero(structure.mask[:, k])
        if items.size == 1:
            lam[items, k] = np.sqrt(0.5 * cov[items[0], items[0]])
            composites[:, k] = y[:, items[0]]
        else:
            block = _ppca(cov[np.ix_(items, items)], 1)[:, 0]
            lam[items, k] = block
            composites[:, k] = (y[:, items] - mean[items]) @ block
    if q > 1 and y.shape[0] > 2:
        phi = np.corrcoef(composites, rowvar=False)
        if not np.all(np.isfinite(phi)) or np.linalg.eigvalsh(phi).min() < 1e-3:
            phi = np.eye(q)
    else:
        phi = np.eye(q)
    np.fill_diagonal(phi, 1.0)
    diag = np.diag(cov)
    theta = np.maximum(diag - np.einsum("jk,kl,jl->j", lam, phi, lam), np.maximum(0.1 * diag, floor))
    mu = np.zeros(q) if means_fixed_zero else np.linalg.lstsq(lam, mean, rcond=None)[0]
    return lam, phi, theta, mu


def _init_efa(y, K, floor, ridge):
    # no item intercepts: the mean must lie in span(L2), so directions come
    # from the uncentered second moment and are scaled by centered variance
    mean, cov = _group_moments(y, ridge)
    vals, vecs = np.linalg.eigh(cov + np.outer(mean, mean))
    dirs = vecs[:, ::-1][:, :K]
    resid = np.linalg.eigvalsh(cov)[::-1][K:]
    sigma2 = float(np.mean(resid)) if resid.size else 0.0
    var = np.einsum("jk,jl,lk->k", dirs, cov, dirs)
    lam = dirs * np.sqrt(np.maximum(var - sigma2, 1e-2))
    lam *= np.where(lam.sum(axis=0) < 0, -1.0, 1.0)
    diag = np.diag(cov)
    psi = np.maximum(diag - np.sum(lam * lam, axis=1), np.maximum(0.1 * diag, floor))
    nu = np.linalg.lstsq(lam, mean, rcond=None)[0]
    return lam, psi, nu


def initialize(
    data: Dataset,
    structure: FactorStructure,
    K: int,
    opts: EmOptions = EmOptions(),
    start: int = 0,
    means_fixed_zero: bool = False,
    covariate_names: Sequence[str] = (),
) -> MixtureParams:
    """Starting values for one EM chain.

    A two-group k-means split (centroids seeded from ``opts.seed`` only) is
    oriented by start parity: even starts give the larger group to the CFA
    component, odd starts the smaller. The CFA block is fit to its group by
    per-factor principal axes, the EFA block by a top-K eigendecomposition,
    and beta0 is the logit of the CFA group share. Loadings are then
    jittered with N(0, jitter_sd^2) noise drawn from the (seed, start) stream
    and refined by a few EM sweeps with responsibilities pinned to the split.
    """
    y = data.responses
    n = data.n
    if n < structure.p + 1:
        warnings.warn("covariance rank-deficient: n < p + 1", RuntimeWarning, stacklevel=2)
    labels = _kmeans2(y, make_rng(opts.seed, start=0, replicate=0), opts.kmeans_iter)
    sizes = np.bincount(labels, minlength=2)
    larger = int(np.argmax(sizes))
    cfa_group = larger if start % 2 == 0 else 1 - larger
    in_cfa = labels == cfa_group
    if in_cfa.sum() < 2 or (~in_cfa).sum() < 2:
        # degenerate split: fall back to a seeded random halving
        in_cfa = make_rng(opts.seed, start=0, replicate=0).permutation(n) < n // 2 + (start % 2)
    lam1, phi, theta, mu = _init_cfa(y[in_cfa], structure, means_fixed_zero, opts.uniqueness_floor, opts.ridge)
    lam2, psi, nu = _init_efa(y[~in_cfa], K, opts.uniqueness_floor, opts.ridge)
    if opts.jitter_sd > 0:
        rng = make_rng(opts.seed, start=start, replicate=0)
        lam1 = lam1 + rng.normal(0.0, opts.jitter_sd, lam1.shape) * structure.mask
        lam2 = lam2 + rng.normal(0.0, opts.jitter_sd, lam2.shape)
    share = np.clip(in_cfa.mean(), 0.02, 0.98)
    beta = np.zeros(data.design.shape[1])
    beta[0] = np.log(share / (1.0 - share))
    params = MixtureParams(
        CfaParams(lam1, phi, theta, mu, means_fixed_zero),
        EfaParams(lam2, psi, nu),
        MixtureReg(beta, covariate_names),
    )
    return _pinned_warmup(data, params, in_cfa, structure, opts)


def _pinned_warmup(data, params, in_cfa, structure, opts, n_sweeps: int = WARMUP_SWEEPS):
    """EM sweeps with responsibilities fixed at the hard partition.

    Lets each block fit its own group before the components compete; beta is
    left at the logit of the group share.
    """
    pinned = np.column_stack([in_cfa, ~in_cfa]).astype(float)
    for _ in range(n_sweeps):
        moments = e_step(data, params)
        moments.responsibilities = pinned
        cfa = m_step_cfa(data, moments, structure, params.cfa.means_fixed_zero, opts.uniqueness_floor, opts.ridge)
        efa = m_step_efa(data, moments, opts.uniqueness_floor, opts.ridge)
        params = MixtureParams(cfa, efa, params.reg)
    return params


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def em_iteration(
    data: Dataset,
    params: MixtureParams,
    moments: EStepMoments,
    structure: FactorStructure,
    opts: EmOptions,
) -> tuple[MixtureParams, NewtonInfo]:
    cfa = m_step_cfa(data, moments, structure, params.cfa.means_fixed_zero, opts.uniqueness_floor, opts.ridge)
    efa = m_step_efa(data, moments, opts.uniqueness_floor, opts.ridge)
    reg, info = m_step_beta(data.design, moments.responsibilities, params.reg.beta, params.reg.covariate_names)
    return MixtureParams(cfa, efa, reg), info


def run_chain(data: Dataset, structure: FactorStructure, params: MixtureParams, opts: EmOptions):
    """Iterate EM from ``params``; returns (params, moments, trace, converged, n_iter, flags)."""
    moments = e_step(data, params)
    trace = [moments.loglik]
    flags = {"separated": False, "ridged": False}
    converged = False
    n_iter = 0
    for _ in range(opts.max_iter):
        params, info = em_iteration(data, params, moments, structure, opts)
        flags["separated"] |= info.separated
        flags["ridged"] |= info.ridged
        moments = e_step(data, params)
        trace.append(moments.loglik)
        n_iter += 1
        if not np.isfinite(trace[-1]):
            raise ParameterError("log-likelihood became non-finite")
        if abs(trace[-1] - trace[-2]) < opts.tol:
            converged = True
            break
    return params, moments, trace, converged, n_iter, flags


def fit_em(
    data: Dataset,
    structure: FactorStructure,
    K: int,
    opts: EmOptions = EmOptions(),
    means_fixed_zero: bool = False,
    init: Optional[MixtureParams] = None,
) -> FitResult:
    """Multi-start EM; returns the chain with the highest final log-likelihood.

    With ``init`` given, a single chain is run from those parameters.
    """
    if structure.p != data.p:
        raise ParameterError(f"structure has p={structure.p}, data has p={data.p}")
    if not 1 <= K < data.p:
        raise ParameterError(f"need 1 <= K < p, got K={K}")
    names = data.covariate_names if len(data.covariate_names) == data.n_covariates else ()
    best = None
    failures = {}
    logliks = {}
    n_starts = 1 if init is not None else opts.n_starts
    for s in range(n_starts):
        try:
            with warnings.catch_warnings():
                if s > 0:
                    warnings.simplefilter("ignore", RuntimeWarning)
                start_params = init if init is not None else initialize(data, structure, K, opts, s, means_fixed_zero, names)
            out = run_chain(data, structure, start_params, opts)
        except (ParameterError, np.linalg.LinAlgError) as exc:
            failures[s] = str(exc)
            log.debug("start %d failed: %s", s, exc)
            continue
        logliks[s] = out[2][-1]
        if best is None or out[2][-1] > best[1][2][-1]:
            best = (s, out)
    if best is None:
        raise FitFailure(failures)
    s, (params, moments, trace, converged, n_iter, flags) = best
    resp = moments.responsibilities
    from aberrant_mix.selection import entropy_raw

    return FitResult(
        params=params,
        responsibilities=resp,
        assignments=classify(resp),
        loglik_trace=trace,
        converged=converged,
        n_iter=n_iter,
        n_params=count_params(structure, K, data.n_covariates, means_fixed_zero),
        entropy_raw=entropy_raw(resp),
        structure=structure,
        start_index=s,
        start_failures=failures,
        start_logliks=logliks,
        beta_flags=flags,
    )


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


def varimax(loadings: np.ndarray, max_iter: int = 500, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Kaiser varimax; returns (rotated loadings, orthogonal rotation R) with rotated = loadings @ R."""
    lam = np.asarray(loadings, dtype=float)
    p, k = lam.shape
    rot = np.eye(k)
    if k < 2:
        return lam.copy(), rot
    crit = 0.0
    for _ in range(max_iter):
        lr = lam @ rot
        u, s, vt = np.linalg.svd(lam.T @ (lr**3 - lr @ np.diag(np.sum(lr**2, axis=0)) / p))
        rot = u @ vt
        new = float(np.sum(s))
        if new < crit * (1 + tol):
            break
        crit = new
    return lam @ rot, rot


def rotate_efa(efa: EfaParams) -> EfaParams:
    """Varimax-rotate the EFA block; nu is counter-rotated so L2 nu is unchanged."""
    lam, rot = varimax(efa.loadings)
    return EfaParams(lam, efa.uniquenesses, rot.T @ efa.factor_means)


def align_cfa(est: CfaParams, ref: CfaParams) -> CfaParams:
    """Flip CFA factor columns whose loading inner product with ``ref`` is negative."""
    signs = np.where(np.sum(est.loadings * ref.loadings, axis=0) < 0, -1.0, 1.0)
    return CfaParams(
        est.loadings * signs,
        est.factor_corr * np.outer(signs, signs),
        est.uniquenesses,
        est.factor_means * signs,
        est.means_fixed_zero,
    )


def align_efa(est: EfaParams, ref: EfaParams) -> EfaParams:
    """Greedy column matching by |inner product|, then sign alignment."""
    k = ref.k
    score = np.abs(ref.loadings.T @ est.loadings)
    order = np.full(k, -1)
    free_ref, free_est = set(range(k)), set(range(k))
    for _ in range(k):
        best = max(((score[i, j], i, j) for i in free_ref for j in free_est))
        order[best[1]] = best[2]
        free_ref.discard(best[1])
        free_est.discard(best[2])
    lam = est.loadings[:, order]
    nu = est.factor_means[order]
    signs = np.where(np.sum(lam * ref.loadings, axis=0) < 0, -1.0, 1.0)
    return EfaParams(lam * signs, est.uniquenesses, nu * signs)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

BLOCKS = ("lambda1", "theta", "phi", "mu", "lambda2", "psi", "nu", "beta")


def _param_blocks(params: MixtureParams) -> dict:
    return {
        "lambda1": params.cfa.loadings,
        "theta": params.cfa.uniquenesses[:, None],
        "phi": params.cfa.factor_corr,
        "mu": params.cfa.factor_means[:, None],
        "lambda2": params.efa.loadings,
        "psi": params.efa.uniquenesses[:, None],
        "nu": params.efa.factor_means[:, None],
        "beta": params.reg.beta[:, None],
    }


@dataclass
class BootstrapResult:
    estimate: dict
    se: dict
    n_effective: int
    n_dropped: int
    B: int

    def rows(self) -> list:
        out = []
        for block in BLOCKS:
            est, se = self.estimate[block], self.se[block]
            for (r, c), v in np.ndenumerate(est):
                out.append({"block": block, "row": r, "col": c, "estimate": float(v), "se": float(se[r, c]),
                            "n_effective_replicates": self.n_effective})
        return out


def bootstrap_se(
    data: Dataset,
    structure: FactorStructure,
    K: int,
    opts: EmOptions = EmOptions(),
    B: int = 200,
    means_fixed_zero: bool = False,
    point: Optional[FitResult] = None,
    resamples: Optional[Sequence[np.ndarray]] = None,
    max_drop_frac: float = 0.2,
    replicate_max_iter: int = 5000,
) -> BootstrapResult:
    """Nonparametric bootstrap standard errors.

    Each replicate resamples rows of (Y, X) with replacement and refits a
    single EM chain started from the point estimate. Replicates that fail or
    do not converge are dropped; more than ``max_drop_frac`` dropped is an
    error. ``resamples`` overrides the random row indices. Replicate chains
    may run up to ``replicate_max_iter`` iterations (at least
    ``opts.max_iter``): EM from a nearby optimum converges linearly and
    often needs more than the point-fit budget to meet ``tol``.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if point is None:
        point = fit_em(data, structure, K, opts, means_fixed_zero)
    ref = point.params
    rep_opts = replace(opts, max_iter=max(opts.max_iter, replicate_max_iter))
    draws = {b: [] for b in BLOCKS}
    dropped = 0
    for b in range(B):
        if resamples is not None:
            idx = np.asarray(resamples[b])
        else:
            idx = make_rng(opts.seed, start=0, replicate=b + 1).integers(data.n, size=data.n)
        try:
            fit = fit_em(data.subset(idx), structure, K, rep_opts, means_fixed_zero, init=ref)
        except (ParameterError, FitFailure, np.linalg.LinAlgError):
            dropped += 1
            continue
        if not fit.converged:
            dropped += 1
            continue
        est = MixtureParams(align_cfa(fit.params.cfa, ref.cfa), align_efa(fit.params.efa, ref.efa), fit.params.reg)
        for block, arr in _param_blocks(est).items():
            draws[block].append(arr)
    if dropped > max_drop_frac * B:
        raise RuntimeError(f"bootstrap dropped {dropped} of {B} replicates (limit {max_drop_frac:.0%})")
    kept = B - dropped
    if kept < 2:
        raise RuntimeError("fewer than two usable bootstrap replicates")
    se = {block: np.std(np.stack(v), axis=0, ddof=1) for block, v in draws.items()}
    return BootstrapResult(_param_blocks(ref), se, kept, dropped, B)
