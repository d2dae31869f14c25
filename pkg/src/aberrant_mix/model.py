"""
Parameter/data containers and density evaluation for the CFA+EFA mixture.

The model for a response vector y (length p) is

    f(y) = pi(x) N_p(y; L1 mu, L1 Phi L1' + Theta) + (1 - pi(x)) N_p(y; L2 nu, L2 L2' + Psi)

with pi(x) = logistic(x beta). Component 1 (z = 1) is the confirmatory block
holding the hypothesized structure; component 0 (z = 0) is the free
exploratory block that absorbs aberrant respondents.

All containers are frozen dataclasses holding read-only numpy arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lapack, solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


class ParameterError(ValueError):
    """Raised when parameters or data violate a model invariant."""


class NotPositiveDefiniteError(ParameterError):
    """A covariance matrix failed its Cholesky factorization.

    ``minor`` is the 1-based order of the first leading minor that is not
    positive.
    """

    def __init__(self, minor: int, what: str = "matrix"):
        self.minor = minor
        super().__init__(f"{what} is not positive definite (leading minor of order {minor})")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def cholesky(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefiniteError naming the failing minor."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ParameterError(f"{what} must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ParameterError(f"{what} has non-finite entries")
    chol, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), what)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ParameterError(f"dpotrf argument {-info} invalid")
    return chol


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorStructure:
    """Zero pattern of the confirmatory loading matrix.

    Parameters
    ----------
    pattern : array_like, shape (p, q)
        1 marks a free loading, 0 a loading fixed at zero. Cross-loadings
        (several 1s in a row) are allowed.
    """

    pattern: np.ndarray

    def __post_init__(self):
        pat = np.asarray(self.pattern)
        if pat.ndim != 2:
            raise ParameterError("pattern must be a 2-d array")
        if not np.isin(pat, (0, 1)).all():
            raise ParameterError("pattern entries must be 0 or 1")
        p, q = pat.shape
        if q < 1 or p < 1:
            raise ParameterError("pattern must have at least one row and column")
        if q >= p:
            raise ParameterError(f"need q < p, got q={q}, p={p}")
        if (pat.sum(axis=1) == 0).any():
            raise ParameterError(f"items without a free loading: {np.flatnonzero(pat.sum(axis=1) == 0).tolist()}")
        if (pat.sum(axis=0) == 0).any():
            raise ParameterError(f"factors without a free loading: {np.flatnonzero(pat.sum(axis=0) == 0).tolist()}")
        object.__setattr__(self, "pattern", _frozen(pat, dtype=np.int8))

    @property
    def p(self) -> int:
        return self.pattern.shape[0]

    @property
    def q(self) -> int:
        return self.pattern.shape[1]

    @property
    def n_free(self) -> int:
        return int(self.pattern.sum())

    @property
    def mask(self) -> np.ndarray:
        return self.pattern.astype(bool)

    @classmethod
    def simple(cls, p: int, q: int) -> "FactorStructure":
        """Simple structure: items split into q contiguous, near-equal blocks."""
        pat = np.zeros((p, q), dtype=np.int8)
        for j, block in enumerate(np.array_split(np.arange(p), q)):
            pat[block, j] = 1
        return cls(pat)

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q, "pattern": self.pattern.astype(int).ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorStructure":
        return cls(np.asarray(d["pattern"], dtype=int).reshape(d["p"], d["q"]))


@dataclass(frozen=True)
class CfaParams:
    """Confirmatory block: loadings (p, q), factor correlations (q, q),
    uniquenesses (p,), factor means (q,)."""

    loadings: np.ndarray
    factor_corr: np.ndarray
    uniquenesses: np.ndarray
    factor_means: np.ndarray
    means_fixed_zero: bool = False

    def __post_init__(self):
        for name in ("loadings", "factor_corr", "uniquenesses", "factor_means"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "means_fixed_zero", bool(self.means_fixed_zero))

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    def validate(self, structure: Optional[FactorStructure] = None) -> None:
        p, q = self.loadings.shape
        if self.factor_corr.shape != (q, q):
            raise ParameterError(f"factor_corr must be {q}x{q}")
        if self.uniquenesses.shape != (p,) or self.factor_means.shape != (q,):
            raise ParameterError("uniquenesses/factor_means have wrong length")
        if not np.array_equal(self.factor_corr, self.factor_corr.T):
            raise ParameterError("factor_corr is not symmetric")
        if not np.all(np.diag(self.factor_corr) == 1.0):
            raise ParameterError("factor_corr must have unit diagonal")
        cholesky(self.factor_corr, "factor_corr")
        if not np.all(self.uniquenesses > 0):
            raise ParameterError("uniquenesses must be positive")
        if self.means_fixed_zero and np.any(self.factor_means != 0):
            raise ParameterError("means_fixed_zero set but factor_means nonzero")
        if structure is not None:
            if structure.pattern.shape != (p, q):
                raise ParameterError("loadings shape does not match structure")
            if np.any(self.loadings[~structure.mask] != 0):
                raise ParameterError("nonzero loading where the pattern fixes zero")

    @property
    def mean(self) -> np.ndarray:
        return self.loadings @ self.factor_means


@dataclass(frozen=True)
class EfaParams:
    """Exploratory block: loadings (p, K), uniquenesses (p,), factor means (K,).
    The factor covariance is the identity and is not stored."""

    loadings: np.ndarray
    uniquenesses: np.ndarray
    factor_means: np.ndarray

    def __post_init__(self):
        for name in ("loadings", "uniquenesses", "factor_means"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    def validate(self) -> None:
        p, k = self.loadings.shape
        if k >= p:
            raise ParameterError(f"need K < p, got K={k}, p={p}")
        if self.uniquenesses.shape != (p,) or self.factor_means.shape != (k,):
            raise ParameterError("uniquenesses/factor_means have wrong length")
        if not np.all(self.uniquenesses > 0):
            raise ParameterError("uniquenesses must be positive")

    @property
    def mean(self) -> np.ndarray:
        return self.loadings @ self.factor_means


@dataclass(frozen=True)
class MixtureReg:
    """Logit coefficients for P(z = 1 | x); ``beta[0]`` is the intercept."""

    beta: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if not np.all(np.isfinite(self.beta)):
            raise ParameterError("beta has non-finite entries")
        if self.covariate_names and len(self.covariate_names) != self.beta.size - 1:
            raise ParameterError("covariate_names must have len(beta) - 1 entries")

    @property
    def n_covariates(self) -> int:
        return self.beta.size - 1


@dataclass(frozen=True)
class MixtureParams:
    cfa: CfaParams
    efa: EfaParams
    reg: MixtureReg

    def validate(self, structure: Optional[FactorStructure] = None) -> None:
        if self.cfa.p != self.efa.p:
            raise ParameterError("cfa and efa blocks disagree on p")
        self.cfa.validate(structure)
        self.efa.validate()


@dataclass(frozen=True)
class Dataset:
    """Responses (n, p), design (n, C+1) with a leading column of ones,
    optional ground-truth memberships (1 = CFA, 0 = aberrant)."""

    responses: np.ndarray
    design: np.ndarray
    truth: Optional[np.ndarray] = None
    item_labels: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.responses, dtype=float)
        x = np.asarray(self.design, dtype=float)
        if y.ndim != 2 or y.shape[0] == 0:
            raise ParameterError("responses must be a non-empty 2-d array")
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ParameterError("design must be 2-d with one row per response")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ParameterError("missing or non-finite values are not supported")
        if not np.all(x[:, 0] == 1.0):
            raise ParameterError("first design column must be all ones")
        object.__setattr__(self, "responses", _frozen(y))
        object.__setattr__(self, "design", _frozen(x))
        if self.truth is not None:
            z = np.asarray(self.truth)
            if z.shape != (y.shape[0],) or not np.isin(z, (0, 1)).all():
                raise ParameterError("truth must be a binary vector of length n")
            object.__setattr__(self, "truth", _frozen(z, dtype=np.int8))
        object.__setattr__(self, "item_labels", tuple(self.item_labels))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def p(self) -> int:
        return self.responses.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.design.shape[1] - 1

    @classmethod
    def from_arrays(cls, responses, covariates=None, truth=None, **kw) -> "Dataset":
        """Build a Dataset, prepending the intercept column to ``covariates``."""
        y = np.asarray(responses, dtype=float)
        ones = np.ones((y.shape[0], 1))
        x = ones if covariates is None else np.hstack([ones, np.asarray(covariates, float).reshape(y.shape[0], -1)])
        return cls(y, x, truth, **kw)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        z = None if self.truth is None else self.truth[rows]
        return Dataset(self.responses[rows], self.design[rows], z, self.item_labels, self.covariate_names)

    def standardized(self) -> "Dataset":
        """Column z-scores of the responses (population sd)."""
        y = self.responses
        sd = y.std(axis=0)
        sd[sd == 0] = 1.0
        return Dataset((y - y.mean(axis=0)) / sd, self.design, self.truth, self.item_labels, self.covariate_names)


# ---------------------------------------------------------------------------
# Moments and densities
# ---------------------------------------------------------------------------


def assemble_cfa_cov(cfa: CfaParams) -> np.ndarray:
    """L1 Phi L1' + diag(Theta), symmetrized and SPD-checked."""
    lam = cfa.loadings
    cov = lam @ cfa.factor_corr @ lam.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += cfa.uniquenesses
    cholesky(cov, "CFA covariance")
    return cov


def assemble_efa_cov(efa: EfaParams) -> np.ndarray:
    """L2 L2' + diag(Psi), symmetrized and SPD-checked."""
    lam = efa.loadings
    cov = lam @ lam.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += efa.uniquenesses
    cholesky(cov, "EFA covariance")
    return cov


def _linear_predictor(design: np.ndarray, reg: MixtureReg) -> np.ndarray:
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[1] != reg.beta.size:
        raise ParameterError(f"design has {design.shape[1]} columns, beta has {reg.beta.size} entries")
    return design @ reg.beta


def mixture_weights(design: np.ndarray, reg: MixtureReg) -> np.ndarray:
    """P(z_i = 1) = logistic(x_i beta), overflow-free."""
    from scipy.special import expit

    return expit(_linear_predictor(design, reg))


def log_mixture_weights(design: np.ndarray, reg: MixtureReg) -> tuple[np.ndarray, np.ndarray]:
    """(log pi_i, log(1 - pi_i)) without forming pi_i."""
    t = _linear_predictor(design, reg)
    return -np.logaddexp(0.0, -t), -np.logaddexp(0.0, t)


def mvn_logdensity(y, mean, cov) -> float:
    """log N_p(y; mean, cov) via a Cholesky factorization."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    chol = cholesky(cov)
    return float(_logpdf_rows(y[None, :], np.asarray(mean, dtype=float), chol)[0])


def _logpdf_rows(y: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    p = y.shape[1]
    inv_chol = solve_triangular(chol, np.eye(p), lower=True, check_finite=False)
    white = (y - mean) @ inv_chol.T
    maha = np.einsum("ij,ij->i", white, white)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (p * LOG_2PI + logdet + maha)


def component_logdensities(responses: np.ndarray, params: MixtureParams) -> np.ndarray:
    """(n, 2) array: column 0 log N(y; CFA), column 1 log N(y; EFA)."""
    y = np.asarray(responses, dtype=float)
    if y.shape[1] != params.cfa.p:
        raise ParameterError(f"responses have {y.shape[1]} columns, model has p={params.cfa.p}")
    out = np.empty((y.shape[0], 2))
    out[:, 0] = _logpdf_rows(y, params.cfa.mean, cholesky(assemble_cfa_cov(params.cfa), "CFA covariance"))
    out[:, 1] = _logpdf_rows(y, params.efa.mean, cholesky(assemble_efa_cov(params.efa), "EFA covariance"))
    return out


def joint_logdensities(data: Dataset, params: MixtureParams) -> np.ndarray:
    """(n, 2) log of pi_i f1(y_i) and (1 - pi_i) f0(y_i)."""
    logpi, log1mpi = log_mixture_weights(data.design, params.reg)
    comp = component_logdensities(data.responses, params)
    comp[:, 0] += logpi
    comp[:, 1] += log1mpi
    return comp


def _normalize_log(joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    row_ll = np.logaddexp(joint[:, 0], joint[:, 1])
    resp = np.exp(joint - row_ll[:, None])
    # renormalize so rows sum to 1 to machine precision
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, row_ll


def mixture_loglik(data: Dataset, params: MixtureParams) -> float:
    """Observed-data log-likelihood, log-sum-exp per observation, pairwise sum."""
    joint = joint_logdensities(data, params)
    return float(np.sum(np.logaddexp(joint[:, 0], joint[:, 1])))


def posterior_probs(data: Dataset, params: MixtureParams) -> np.ndarray:
    """(n, 2) responsibilities: column 0 P(z=1 | y), column 1 P(z=0 | y)."""
    return _normalize_log(joint_logdensities(data, params))[0]


def classify(responsibilities: np.ndarray) -> np.ndarray:
    """1 (CFA) where P(z=1|y) >= 0.5, else 0. Ties go to the CFA component."""
    r = np.asarray(responsibilities, dtype=float)
    return (r[:, 0] >= r[:, 1]).astype(np.int8)


def count_params(
    structure: FactorStructure,
    K: int,
    C: int,
    means_fixed_zero: bool = False,
    n_free_loadings: Optional[int] = None,
) -> int:
    """Number of free parameters of the CFA+EFA model."""
    p, q = structure.p, structure.q
    n_load = structure.n_free if n_free_loadings is None else n_free_loadings
    return (
        n_load
        + p  # Theta
        + p * K  # L2
        + p  # Psi
        + K  # nu
        + (C + 1)  # beta
        + q * (q - 1) // 2  # Phi off-diagonals
        + (0 if means_fixed_zero else q)  # mu
    )


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def params_to_dict(params: MixtureParams, structure: Optional[FactorStructure] = None) -> dict:
    cfa, efa, reg = params.cfa, params.efa, params.reg
    doc = {}
    if structure is not None:
        doc["structure"] = structure.to_dict()
    doc["means_fixed_zero"] = cfa.means_fixed_zero
    doc["cfa"] = {
        "p": cfa.p,
        "q": cfa.q,
        "loadings": cfa.loadings.ravel().tolist(),
        "factor_corr": cfa.factor_corr.ravel().tolist(),
        "uniquenesses": cfa.uniquenesses.tolist(),
        "factor_means": cfa.factor_means.tolist(),
    }
    doc["efa"] = {
        "p": efa.p,
        "k": efa.k,
        "loadings": efa.loadings.ravel().tolist(),
        "uniquenesses": efa.uniquenesses.tolist(),
        "factor_means": efa.factor_means.tolist(),
    }
    doc["reg"] = {"beta": reg.beta.tolist(), "covariate_names": list(reg.covariate_names)}
    return doc


def params_from_dict(doc: dict) -> tuple[MixtureParams, Optional[FactorStructure]]:
    structure = FactorStructure.from_dict(doc["structure"]) if "structure" in doc else None
    c, e, r = doc["cfa"], doc["efa"], doc["reg"]
    p, q, k = c["p"], c["q"], e["k"]
    cfa = CfaParams(
        np.reshape(c["loadings"], (p, q)),
        np.reshape(c["factor_corr"], (q, q)),
        c["uniquenesses"],
        c["factor_means"],
        doc.get("means_fixed_zero", False),
    )
    efa = EfaParams(np.reshape(e["loadings"], (e["p"], k)), e["uniquenesses"], e["factor_means"])
    reg = MixtureReg(r["beta"], r.get("covariate_names", ()))
    return MixtureParams(cfa, efa, reg), structure


def params_to_json(params: MixtureParams, structure: Optional[FactorStructure] = None, **kw) -> str:
    # json writes floats with repr(), the shortest string that round-trips bit-exactly
    return json.dumps(params_to_dict(params, structure), **kw)


def params_from_json(text: str) -> tuple[MixtureParams, Optional[FactorStructure]]:
    return params_from_dict(json.loads(text))
