"""Information/classification criteria and the entropy-conditioned model scan."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from aberrant_mix.model import Dataset, FactorStructure

log = logging.getLogger(__name__)

ENTROPY_BAND = 0.005
INDICES = ("AIC", "CAIC", "BIC", "ssBIC", "CLC", "ICL_BIC", "H")
SCAN_COLUMNS = ("model", "loglik", "AIC", "CAIC", "BIC", "ssBIC", "CLC", "ICL_BIC", "H", "BACC", "MCC", "SE", "SP")


def entropy_raw(responsibilities: np.ndarray) -> float:
    """EN = -sum_i sum_w z_iw log z_iw, with 0 log 0 = 0."""
    r = np.asarray(responsibilities, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r > 0, r * np.log(r), 0.0)
    return float(max(-np.sum(terms), 0.0))


@dataclass(frozen=True)
class CriteriaReport:
    loglik: float
    n_params: int
    n: int
    EN: float
    AIC: float
    CAIC: float
    BIC: float
    ssBIC: float
    CLC: float
    ICL_BIC: float
    H: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("loglik", "n_params", "n", "EN") + INDICES}


def criteria(loglik: float, n_params: int, n: int, EN: float) -> CriteriaReport:
    if n <= n_params:
        warnings.warn(f"n={n} does not exceed the parameter count {n_params}", RuntimeWarning, stacklevel=2)
    dev = -2.0 * loglik
    log_n = np.log(n)
    bic = dev + n_params * log_n
    return CriteriaReport(
        loglik=float(loglik),
        n_params=int(n_params),
        n=int(n),
        EN=float(EN),
        AIC=dev + 2.0 * n_params,
        CAIC=dev + n_params * (log_n + 1.0),
        BIC=bic,
        ssBIC=dev + n_params * np.log((n + 2.0) / 24.0),
        CLC=dev + 2.0 * EN,
        ICL_BIC=bic + 2.0 * EN,
        H=float(np.clip(1.0 - EN / (n * np.log(2.0)), 0.0, 1.0)),
    )


@dataclass
class ScanRow:
    K: int
    covariates: tuple
    report: Optional[CriteriaReport]
    metrics: Optional[dict] = None
    error: Optional[str] = None
    fit: object = field(default=None, repr=False)

    @property
    def label(self) -> str:
        return " ^ ".join([f"K={self.K}", *self.covariates])

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class ScanResult:
    rows: list
    selected: Optional[int]
    winners: dict
    entropy_band: float = ENTROPY_BAND

    @property
    def selected_row(self) -> Optional[ScanRow]:
        return None if self.selected is None else self.rows[self.selected]

    def selection_record(self) -> dict:
        sel = self.selected_row
        return {
            "selected_index": self.selected,
            "selected_model": None if sel is None else sel.label,
            "selected_K": None if sel is None else sel.K,
            "selected_covariates": None if sel is None else list(sel.covariates),
            "entropy_band": self.entropy_band,
            "index_winners": {k: (None if v is None else self.rows[v].label) for k, v in self.winners.items()},
            "failed": [r.label for r in self.rows if not r.ok],
        }

    def to_csv(self, with_metrics: Optional[bool] = None) -> str:
        if with_metrics is None:
            with_metrics = any(r.metrics for r in self.rows)
        cols = SCAN_COLUMNS if with_metrics else SCAN_COLUMNS[:9]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            rep = r.report.as_dict() if r.ok else {}
            vals = {"model": r.label, **rep, **(r.metrics or {})}
            writer.writerow([vals["model"]] + [_fmt(vals.get(c)) for c in cols[1:]])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


def select(reports: Sequence[Optional[CriteriaReport]], entropy_band: float = ENTROPY_BAND) -> tuple[Optional[int], dict]:
    """Entropy-conditioned choice plus per-index argmin winners.

    Candidates with H within ``entropy_band`` of the best H are kept and the
    one with the smallest ICL-BIC wins; ties go to the earliest row. The
    winners dict maps each index to its best row (max for H, min otherwise).
    """
    ok = [i for i, r in enumerate(reports) if r is not None]
    winners = {}
    for name in INDICES:
        if not ok:
            winners[name] = None
            continue
        vals = [getattr(reports[i], name) for i in ok]
        pick = int(np.argmax(vals)) if name == "H" else int(np.argmin(vals))
        winners[name] = ok[pick]
    if not ok:
        return None, winners
    h_max = max(reports[i].H for i in ok)
    band = [i for i in ok if reports[i].H >= h_max - entropy_band]
    chosen = min(band, key=lambda i: (reports[i].ICL_BIC, i))
    return chosen, winners


def scan(
    data: Dataset,
    structure: FactorStructure,
    K_values: Sequence[int],
    covariate_subsets: Sequence[Sequence[str]] = ((),),
    opts=None,
    means_fixed_zero: bool = False,
    entropy_band: float = ENTROPY_BAND,
    keep_fits: bool = False,
) -> ScanResult:
    """Fit every (K, covariate subset) candidate independently and select one.

    ``covariate_subsets`` name columns of ``data.covariate_names``; the
    intercept is always included.
    """
    from aberrant_mix.em import EmOptions, FitFailure, fit_em
    from aberrant_mix.model import ParameterError
    from aberrant_mix.simulation import score_classification

    if not K_values or not covariate_subsets:
        raise ValueError("K_values and covariate_subsets must be nonempty")
    opts = opts or EmOptions()
    names = list(data.covariate_names)
    rows = []
    for K in K_values:
        for subset in covariate_subsets:
            subset = tuple(subset)
            try:
                cols = [0] + [1 + names.index(c) for c in subset]
            except ValueError as exc:
                raise ValueError(f"unknown covariate in {subset}; available: {names}") from exc
            sub = Dataset(data.responses, data.design[:, cols], data.truth, data.item_labels, subset)
            try:
                fit = fit_em(sub, structure, K, opts, means_fixed_zero)
            except (FitFailure, ParameterError) as exc:
                log.warning("candidate K=%s %s failed: %s", K, subset, exc)
                rows.append(ScanRow(K, subset, None, error=str(exc)))
                continue
            rep = criteria(fit.loglik, fit.n_params, data.n, fit.entropy_raw)
            metrics = None
            if data.truth is not None:
                metrics = score_classification(data.truth, fit.assignments).metrics_dict()
            rows.append(ScanRow(K, subset, rep, metrics, fit=fit if keep_fits else None))
    chosen, winners = select([r.report for r in rows], entropy_band)
    return ScanResult(rows, chosen, winners, entropy_band)
