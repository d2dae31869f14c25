"""Two-component CFA+EFA factor mixture for flagging aberrant survey respondents."""

from aberrant_mix.model import (
    CfaParams,
    Dataset,
    EfaParams,
    FactorStructure,
    MixtureParams,
    MixtureReg,
    NotPositiveDefiniteError,
    ParameterError,
    assemble_cfa_cov,
    assemble_efa_cov,
    classify,
    count_params,
    mixture_loglik,
    mixture_weights,
    mvn_logdensity,
    posterior_probs,
)
from aberrant_mix.em import EmOptions, FitResult, bootstrap_se, fit_em
from aberrant_mix.selection import CriteriaReport, criteria, entropy_raw, scan

__version__ = "0.1.0"

__all__ = [
    "CfaParams",
    "CriteriaReport",
    "Dataset",
    "EfaParams",
    "EmOptions",
    "FactorStructure",
    "FitResult",
    "MixtureParams",
    "MixtureReg",
    "NotPositiveDefiniteError",
    "ParameterError",
    "assemble_cfa_cov",
    "assemble_efa_cov",
    "bootstrap_se",
    "classify",
    "count_params",
    "criteria",
    "entropy_raw",
    "fit_em",
    "mixture_loglik",
    "mixture_weights",
    "mvn_logdensity",
    "posterior_probs",
    "scan",
]
