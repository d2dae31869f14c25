"""Single-group CFA baseline with CFI/RMSEA, and per-class correlation export."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from aberrant_mix.model import CfaParams, Dataset, FactorStructure, ParameterError, assemble_cfa_cov, cholesky

SAMPLE_COV_RIDGE = 1e-6


@dataclass(frozen=True)
class FitIndices:
    chi_square: float
    df: int
    chi_square_null: float
    df_null: int
    CFI: float
    RMSEA: float
    F: float = 0.0
    n: int = 0
    n_iter: int = 0
    converged: bool = True

    def to_json(self, **kw) -> str:
        return json.dumps({k: (repr(v) if isinstance(v, float) and not np.isfinite(v) else v) for k, v in asdict(self).items()}, **kw)


def _logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def ml_discrepancy(S: np.ndarray, sigma: np.ndarray) -> float:
    """F = log|Sigma| + tr(S Sigma^-1) - log|S| - p, clipped at 0."""
    p = S.shape[0]
    c_sig = cholesky(sigma, "model covariance")
    c_s = cholesky(S, "sample covariance")
    tr = float(np.trace(cho_solve((c_sig, True), S)))
    return max(_logdet(c_sig) + tr - _logdet(c_s) - p, 0.0)


def sample_covariance(y: np.ndarray) -> np.ndarray:
    """ML (divide-by-n) covariance; ridged with a warning when singular."""
    y = np.asarray(y, dtype=float)
    yc = y - y.mean(axis=0)
    S = yc.T @ yc / y.shape[0]
    try:
        cholesky(S, "sample covariance")
    except ParameterError:
        warnings.warn("sample covariance is singular; adding a ridge", RuntimeWarning, stacklevel=2)
        S = S + SAMPLE_COV_RIDGE * max(float(np.mean(np.diag(S))), 1.0) * np.eye(S.shape[0])
    return S


def _cfa_em_from_cov(S, structure, max_iter, tol, floor, ridge):
    """EM for a zero-mean structured factor model using the sample covariance only.

    With every responsibility pinned to 1 the weighted sums of the mixture
    M-step reduce to functions of S, so no per-row work is needed.
    """
    from aberrant_mix.em import _ppca, _regress_items

    p, q = structure.p, structure.q
    lam = np.zeros((p, q))
    for k in range(q):
        items = np.flatnonzero(structure.mask[:, k])
        lam[items, k] = _ppca(S[np.ix_(items, items)], 1)[:, 0] if items.size > 1 else np.sqrt(0.5 * S[items[0], items[0]])
    diag = np.diag(S)
    theta = np.maximum(diag - np.sum(lam * lam, axis=1), np.maximum(0.1 * diag, floor))
    cfa = CfaParams(lam, np.eye(q), theta, np.zeros(q), True)
    f_old = ml_discrepancy(S, assemble_cfa_cov(cfa))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sigma = assemble_cfa_cov(cfa)
        chol = cholesky(sigma, "CFA covariance")
        lam_phi = cfa.loadings @ cfa.factor_corr
        gain = cho_solve((chol, True), lam_phi)  # Sigma^-1 L Phi
        cond_cov = cfa.factor_corr - gain.T @ lam_phi
        s_yf = S @ gain
        s_ff = cond_cov + gain.T @ S @ gain
        s_ff = 0.5 * (s_ff + s_ff.T)
        lam, theta = _regress_items(np.diag(S).copy(), s_yf, s_ff, 1.0, structure.mask, "CFA")
        theta = np.maximum(theta + ridge, floor)
        scale = np.sqrt(np.diag(s_ff))
        phi = s_ff / np.outer(scale, scale)
        phi = 0.5 * (phi + phi.T)
        np.fill_diagonal(phi, 1.0)
        cfa = CfaParams(lam * scale, phi, theta, np.zeros(q), True)
        f_new = ml_discrepancy(S, assemble_cfa_cov(cfa))
        converged = abs(f_old - f_new) < tol
        f_old = f_new
        if converged:
            break
    return cfa, f_old, it, converged


def _polish(S, cfa, structure, floor, max_iter=5000):
    """L-BFGS-B on the ML discrepancy, started from the EM estimate.

    EM crawls when a uniqueness heads for its floor; the quasi-Newton step
    finishes the job. Phi = L L' with unit-norm rows of L keeps it a
    correlation matrix without constraints.
    """
    mask = structure.mask
    p, q = structure.p, structure.q
    tril = np.tril_indices(q)
    n_lam = int(mask.sum())

    def unpack(x):
        lam = np.zeros((p, q))
        lam[mask] = x[:n_lam]
        a = np.zeros((q, q))
        a[tril] = x[n_lam : n_lam + tril[0].size]
        theta = x[n_lam + tril[0].size :]
        return lam, a, theta

    def fun(x):
        lam, a, theta = unpack(x)
        norms = np.linalg.norm(a, axis=1)
        L = a / norms[:, None]
        phi = L @ L.T
        sigma = lam @ phi @ lam.T + np.diag(theta)
        try:
            chol = cholesky(sigma, "CFA covariance")
        except ParameterError:
            return np.inf, np.zeros_like(x)
        inv = cho_solve((chol, True), np.eye(p))
        f = _logdet(chol) + float(np.sum(inv * S)) - _logdet_s - p
        G = inv - inv @ S @ inv
        g_lam = 2.0 * G @ lam @ phi
        M = lam.T @ G @ lam
        g_L = 2.0 * M @ L
        g_a = (g_L - L * np.sum(g_L * L, axis=1)[:, None]) / norms[:, None]
        return f, np.concatenate([g_lam[mask], g_a[tril], np.diag(G)])

    _logdet_s = _logdet(cholesky(S, "sample covariance"))
    a0 = np.linalg.cholesky(cfa.factor_corr)
    x0 = np.concatenate([cfa.loadings[mask], a0[tril], cfa.uniquenesses])
    bounds = [(None, None)] * (n_lam + tril[0].size) + [(floor, None)] * p
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10})
    lam, a, theta = unpack(res.x)
    L = a / np.linalg.norm(a, axis=1)[:, None]
    phi = L @ L.T
    np.fill_diagonal(phi, 1.0)
    out = CfaParams(lam, 0.5 * (phi + phi.T), theta, np.zeros(q), True)
    return out, ml_discrepancy(S, assemble_cfa_cov(out)), bool(res.success)


def fit_cfa_single(
    data: Dataset,
    structure: FactorStructure,
    opts=None,
    max_iter: int = 2000,
    tol: float = 1e-10,
) -> tuple[CfaParams, FitIndices]:
    """Maximum-likelihood structured factor fit to the full sample.

    Data are centred and factor means fixed at zero. EM supplies the start and
    a bounded quasi-Newton pass finishes. Returns the estimates and
    normal-theory fit indices: chi2 = (n - 1) F against the independence
    (diagonal) null model. A model with df <= 0 is reported as a perfect fit.
    """
    from aberrant_mix.em import EmOptions

    opts = opts or EmOptions()
    if structure.p != data.p:
        raise ParameterError(f"structure has p={structure.p}, data has p={data.p}")
    n, p, q = data.n, data.p, structure.q
    if n <= p:
        warnings.warn(f"n={n} does not exceed p={p}", RuntimeWarning, stacklevel=2)
    S = sample_covariance(data.responses)
    cfa, F, n_iter, converged = _cfa_em_from_cov(S, structure, max_iter, tol, opts.uniqueness_floor, opts.ridge)
    polished, F_pol, ok = _polish(S, cfa, structure, opts.uniqueness_floor)
    if F_pol <= F:
        cfa, F = polished, F_pol
        converged = converged or ok
    n_par = structure.n_free + p + q * (q - 1) // 2
    df = p * (p + 1) // 2 - n_par
    df_null = p * (p - 1) // 2
    chi2 = (n - 1) * F
    F_null = float(np.sum(np.log(np.diag(S)))) - _logdet(cholesky(S, "sample covariance"))
    chi2_null = (n - 1) * max(F_null, 0.0)
    if df <= 0:
        cfi, rmsea = 1.0, 0.0
    else:
        excess = max(chi2 - df, 0.0)
        den = max(chi2_null - df_null, chi2 - df, 0.0)
        cfi = 1.0 if den == 0 else 1.0 - excess / den
        rmsea = float(np.sqrt(excess / (df * (n - 1))))
    return cfa, FitIndices(float(chi2), int(df), float(chi2_null), int(df_null), float(cfi), rmsea, float(F), n, n_iter, converged)


def correlation(responses: np.ndarray) -> np.ndarray:
    """Pearson correlation with an exactly symmetric unit diagonal."""
    y = np.asarray(responses, dtype=float)
    yc = y - y.mean(axis=0)
    sd = np.sqrt(np.einsum("ij,ij->j", yc, yc))
    if np.any(sd == 0):
        raise ValueError(f"constant items: {np.flatnonzero(sd == 0).tolist()}")
    z = yc / sd
    r = z.T @ z
    r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def corr_by_class(data: Dataset, assignments, classes: Sequence[int] = (1, 0)) -> dict:
    """Correlation matrix of the rows assigned to each class (1 = CFA, 0 = aberrant)."""
    a = np.asarray(assignments)
    if a.shape != (data.n,):
        raise ValueError(f"assignments must have length {data.n}")
    out = {}
    for c in classes:
        rows = a == c
        if rows.sum() < 3:
            raise ValueError(f"class {c} has {int(rows.sum())} rows; need at least 3")
        out[c] = correlation(data.responses[rows])
    return out


def corr_to_csv(corr: np.ndarray, labels: Optional[Sequence[str]] = None) -> str:
    p = corr.shape[0]
    labels = list(labels) if labels else [f"item{j + 1}" for j in range(p)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(labels)
    for row in corr:
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()
