"""Command-line front end: ``aberrant-mix <command> [flags]``.

Every run writes ``manifest.json`` into ``--out``; failures write
``error.json`` and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

import aberrant_mix
from aberrant_mix import diagnostics, selection, simulation
from aberrant_mix.em import EmOptions, FitResult, bootstrap_se, fit_em, make_rng
from aberrant_mix.model import (
    Dataset,
    FactorStructure,
    classify,
    params_from_dict,
    posterior_probs,
)

log = logging.getLogger("aberrant_mix")

COMMANDS = ("simulate1", "simulate2", "fit", "select", "classify", "bootstrap", "cfa-baseline", "corr-by-class")
MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class IngestError(ValueError):
    """Malformed CSV input; ``row`` and ``col`` are 1-based data coordinates when known."""

    def __init__(self, path, message: str, row: Optional[int] = None, col: Optional[int] = None):
        self.path, self.row, self.col = str(path), row, col
        where = "" if row is None else f" at (row {row}, col {col})"
        super().__init__(f"{path}{where}: {message}")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# CSV ingestion and report emission
# ---------------------------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def ingest_csv(path, has_header: Optional[bool] = None) -> tuple[np.ndarray, list]:
    """Read a rectangular numeric CSV into an (n, p) array plus column labels.

    ``has_header=None`` treats the first row as a header when any of its
    cells is non-numeric. Missing cells (empty, NA, NaN, ...) are rejected
    with their coordinates; rows and columns are counted from 1, excluding
    the header.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise IngestError(path, "empty file")
    if has_header is None:
        has_header = not all(_is_number(c.strip()) for c in rows[0])
    labels = [c.strip() for c in rows[0]] if has_header else []
    body = rows[1:] if has_header else rows
    if not body:
        raise IngestError(path, "no data rows")
    width = len(labels) if has_header else len(body[0])
    out = np.empty((len(body), width))
    for i, r in enumerate(body, start=1):
        if len(r) != width:
            raise IngestError(path, f"ragged row: {len(r)} cells, expected {width}", i, len(r))
        for j, cell in enumerate(r, start=1):
            c = cell.strip()
            if c.lower() in MISSING_TOKENS:
                raise IngestError(path, f"missing value {cell!r}", i, j)
            try:
                out[i - 1, j - 1] = float(c)
            except ValueError:
                raise IngestError(path, f"non-numeric cell {cell!r}", i, j) from None
            if not np.isfinite(out[i - 1, j - 1]):
                raise IngestError(path, f"non-finite value {cell!r}", i, j)
    if not labels:
        labels = [f"V{j + 1}" for j in range(width)]
    return out, labels


def write_matrix_csv(path, matrix: np.ndarray, labels: Sequence[str]) -> None:
    """Lossless numeric CSV (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(labels))
        for row in np.atleast_2d(matrix):
            w.writerow([f"{v:.17g}" for v in row])


def _fmt_csv(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def emit_report(results, path, fmt: str = "csv", columns: Optional[Sequence[str]] = None) -> Path:
    """Write a list of row dicts as CSV (6 decimals) or any JSON-able object as JSON.

    CSV column order is ``columns`` when given, else first-seen key order; an
    empty result still gets its header when ``columns`` is known.
    """
    path = Path(path)
    try:
        if fmt == "json":
            with open(path, "w") as fh:
                json.dump(_jsonable(results), fh, indent=1)
                fh.write("\n")
        elif fmt == "csv":
            rows = list(results)
            cols = list(columns) if columns else list(dict.fromkeys(k for r in rows for k in r))
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for r in rows:
                    w.writerow(["" if r.get(c) is None else _fmt_csv(r.get(c)) for c in cols])
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj):
    # json emits floats via repr(), the shortest form that round-trips exactly
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    out: Path
    data: Optional[Path] = None
    design: Optional[Path] = None
    structure: Optional[Path] = None
    truth: Optional[Path] = None
    fit: Optional[Path] = None
    seed: Optional[int] = None
    em: EmOptions = field(default_factory=EmOptions)
    K: int = 1
    K_grid: tuple = (1,)
    covariates: Optional[tuple] = None
    bootstrap_reps: int = 200
    standardize: bool = False
    means_fixed_zero: bool = False
    study: Optional[object] = None
    reps: Optional[int] = None
    fmt: str = "csv"

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise CliError(f"unknown command {self.command!r}")
        for name in ("data", "design", "structure", "truth", "fit"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise CliError(f"--{name} path does not exist: {p}")
        if self.command in ("simulate1", "simulate2", "bootstrap") and self.seed is None:
            raise CliError(f"{self.command} requires --seed")
        if self.command in ("fit", "select", "classify", "bootstrap", "cfa-baseline", "corr-by-class") and self.data is None:
            raise CliError(f"{self.command} requires --data")
        if self.command in ("fit", "select", "bootstrap", "cfa-baseline") and self.structure is None:
            raise CliError(f"{self.command} requires --structure")
        if self.command == "classify" and self.fit is None:
            raise CliError("classify requires --fit (a FitResult JSON)")

    def echo(self) -> dict:
        d = {k: (str(v) if isinstance(v, Path) else v) for k, v in self.__dict__.items() if k not in ("em", "study")}
        d["em"] = asdict(self.em)
        d["study"] = None if self.study is None else {"study": type(self.study).__name__, **asdict(self.study)}
        return _jsonable(d)


def load_structure(path) -> FactorStructure:
    doc = json.loads(Path(path).read_text())
    return FactorStructure.from_dict(doc.get("structure", doc))


def load_dataset(cfg: RunConfig, covariates: Sequence[str] = ()) -> Dataset:
    y, labels = ingest_csv(cfg.data)
    x = None
    names: list = []
    if cfg.design is not None:
        x, names = ingest_csv(cfg.design, has_header=True)
        if x.shape[0] != y.shape[0]:
            raise CliError(f"design has {x.shape[0]} rows, data has {y.shape[0]}")
    truth = None
    if cfg.truth is not None:
        t, _ = ingest_csv(cfg.truth)
        truth = t[:, 0].astype(int)
    data = Dataset.from_arrays(y, x, truth, item_labels=labels, covariate_names=names)
    if cfg.standardize:
        data = data.standardized()
    return data


def _design_subset(data: Dataset, covariates: Sequence[str]) -> Dataset:
    names = list(data.covariate_names)
    missing = [c for c in covariates if c not in names]
    if missing:
        raise CliError(f"unknown covariates {missing}; design has {names}")
    cols = [0] + [1 + names.index(c) for c in covariates]
    return Dataset(data.responses, data.design[:, cols], data.truth, data.item_labels, tuple(covariates))


def _classification_rows(resp: np.ndarray, assign: np.ndarray) -> list:
    return [
        {"row": i + 1, "resp_cfa": float(r[0]), "resp_aberrant": float(r[1]), "assignment": int(a)}
        for i, (r, a) in enumerate(zip(resp, assign))
    ]


def _metrics_row(truth, assign) -> dict:
    score = simulation.score_classification(truth, assign)
    return {**asdict(score.counts), **score.metrics_dict()}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_simulate(cfg: RunConfig) -> list:
    study = cfg.study
    out = cfg.out
    if cfg.reps:
        rows = simulation.run_study(study, cfg.reps, cfg.em)
        emit_report(rows, out / "replications.csv")
        emit_report(simulation.summarize(rows), out / "summary.json", "json")
        return ["replications.csv", "summary.json"]
    sample = (simulation.gen_study2 if isinstance(study, simulation.Study2Config) else simulation.gen_study1)(
        study, make_rng(study.seed, start=0, replicate=0)
    )
    d = sample.data
    write_matrix_csv(out / "data.csv", d.responses, [f"item{j + 1}" for j in range(d.p)])
    write_matrix_csv(out / "design.csv", d.design[:, 1:], list(d.covariate_names))
    write_matrix_csv(out / "truth.csv", d.truth[:, None], ["z"])
    (out / "structure.json").write_text(json.dumps(sample.structure.to_dict()) + "\n")
    (out / "truth.json").write_text(json.dumps(_jsonable(sample.truth_dict())) + "\n")
    (out / "config.json").write_text(simulation.config_to_json(study) + "\n")
    return ["data.csv", "design.csv", "truth.csv", "structure.json", "truth.json", "config.json"]


def _fit_doc(fit: FitResult, cfg: RunConfig, covariates) -> dict:
    doc = fit.to_dict()
    doc["preprocess"] = {"standardize": cfg.standardize}
    doc["covariates"] = list(covariates)
    return doc


def _cmd_fit(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    covs = cfg.covariates[0] if cfg.covariates else data.covariate_names
    data = _design_subset(data, covs)
    structure = load_structure(cfg.structure)
    fit = fit_em(data, structure, cfg.K, cfg.em, cfg.means_fixed_zero)
    emit_report(_fit_doc(fit, cfg, covs), cfg.out / "fit.json", "json")
    emit_report(_classification_rows(fit.responsibilities, fit.assignments), cfg.out / "classification.csv")
    outputs = ["fit.json", "classification.csv"]
    if data.truth is not None:
        emit_report([_metrics_row(data.truth, fit.assignments)], cfg.out / "metrics.csv")
        outputs.append("metrics.csv")
    return outputs


def _cmd_select(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    structure = load_structure(cfg.structure)
    subsets = [tuple(c) for c in cfg.covariates] if cfg.covariates else [data.covariate_names]
    res = selection.scan(data, structure, list(cfg.K_grid), subsets, cfg.em, cfg.means_fixed_zero)
    if cfg.fmt == "json":
        rows = [{"model": r.label, **(r.report.as_dict() if r.ok else {}), **(r.metrics or {}), "error": r.error} for r in res.rows]
        emit_report(rows, cfg.out / "scan.json", "json")
        table = "scan.json"
    else:
        (cfg.out / "scan.csv").write_text(res.to_csv())
        table = "scan.csv"
    emit_report(res.selection_record(), cfg.out / "selection.json", "json")
    return [table, "selection.json"]


def _load_fit(path) -> tuple[dict, object, FactorStructure]:
    doc = json.loads(Path(path).read_text())
    params, structure = params_from_dict(doc)
    return doc, params, structure


def _cmd_classify(cfg: RunConfig) -> list:
    doc, params, _ = _load_fit(cfg.fit)
    cfg = replace(cfg, standardize=cfg.standardize or doc.get("preprocess", {}).get("standardize", False))
    data = _design_subset(load_dataset(cfg), doc.get("covariates", list(params.reg.covariate_names)))
    resp = posterior_probs(data, params)
    assign = classify(resp)
    emit_report(_classification_rows(resp, assign), cfg.out / "classification.csv")
    outputs = ["classification.csv"]
    if data.truth is not None:
        emit_report([_metrics_row(data.truth, assign)], cfg.out / "metrics.csv")
        outputs.append("metrics.csv")
    return outputs


def _cmd_bootstrap(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    covs = cfg.covariates[0] if cfg.covariates else data.covariate_names
    data = _design_subset(data, covs)
    structure = load_structure(cfg.structure)
    em = replace(cfg.em, seed=cfg.seed)
    point = None
    if cfg.fit is not None:
        _, params, _ = _load_fit(cfg.fit)
        point = fit_em(data, structure, params.efa.k, em, params.cfa.means_fixed_zero, init=params)
    res = bootstrap_se(data, structure, cfg.K if point is None else point.K, em, cfg.bootstrap_reps, cfg.means_fixed_zero, point)
    emit_report(res.rows(), cfg.out / "bootstrap.csv", columns=("block", "row", "col", "estimate", "se", "n_effective_replicates"))
    emit_report({"B": res.B, "n_effective": res.n_effective, "n_dropped": res.n_dropped}, cfg.out / "bootstrap_summary.json", "json")
    return ["bootstrap.csv", "bootstrap_summary.json"]


def _cmd_cfa_baseline(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    structure = load_structure(cfg.structure)
    cfa, idx = diagnostics.fit_cfa_single(data, structure, cfg.em)
    emit_report(asdict(idx), cfg.out / "fit_indices.json", "json")
    emit_report(
        {"structure": structure.to_dict(), "loadings": cfa.loadings.ravel(), "factor_corr": cfa.factor_corr.ravel(),
         "uniquenesses": cfa.uniquenesses},
        cfg.out / "cfa_params.json",
        "json",
    )
    return ["fit_indices.json", "cfa_params.json"]


def _cmd_corr_by_class(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    if cfg.fit is not None:
        assign = np.asarray(json.loads(Path(cfg.fit).read_text())["assignments"])
    elif data.truth is not None:
        assign = data.truth
    else:
        raise CliError("corr-by-class needs --fit (FitResult JSON) or --truth for the class labels")
    mats = diagnostics.corr_by_class(data, assign)
    names = {1: "corr_cfa.csv", 0: "corr_aberrant.csv"}
    for c, m in mats.items():
        (cfg.out / names[c]).write_text(diagnostics.corr_to_csv(m, data.item_labels))
    return [names[c] for c in mats]


HANDLERS = {
    "simulate1": _cmd_simulate,
    "simulate2": _cmd_simulate,
    "fit": _cmd_fit,
    "select": _cmd_select,
    "classify": _cmd_classify,
    "bootstrap": _cmd_bootstrap,
    "cfa-baseline": _cmd_cfa_baseline,
    "corr-by-class": _cmd_corr_by_class,
}


def _versions() -> dict:
    return {"aberrant_mix": aberrant_mix.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    cfg.out = Path(cfg.out)
    t0 = time.perf_counter()
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "error.json").unlink(missing_ok=True)
        cfg.validate()
        outputs = HANDLERS[cfg.command](cfg)
    except Exception as exc:  # every failure becomes a structured record
        record = {
            "command": cfg.command,
            "error_type": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(limit=5),
        }
        for attr in ("row", "col", "path", "causes"):
            if hasattr(exc, attr):
                record[attr] = _jsonable(getattr(exc, attr))
        try:
            emit_report(record, cfg.out / "error.json", "json")
        except OSError:
            pass
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": cfg.command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "outputs": outputs,
    }
    emit_report(manifest, cfg.out / "manifest.json", "json")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _int_list(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _subset(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aberrant-mix", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--data", type=Path, help="response CSV (n x p), optional header of item labels")
    ap.add_argument("--design", type=Path, help="covariate CSV with header; the intercept is added automatically")
    ap.add_argument("--structure", type=Path, help="structure JSON {p, q, pattern}")
    ap.add_argument("--truth", type=Path, help="CSV with one 0/1 column of true memberships (1 = regular)")
    ap.add_argument("--fit", type=Path, help="FitResult JSON from a previous fit")
    ap.add_argument("--out", type=Path, required=True, help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--k", type=int, default=1, help="number of EFA factors")
    ap.add_argument("--k-grid", type=_int_list, default=None, help="comma list of K values for select")
    ap.add_argument("--covariates", type=_subset, action="append",
                    help="comma list of covariate names; repeat for several subsets (select)")
    ap.add_argument("--starts", type=int, default=10)
    ap.add_argument("--tol", type=float, default=1e-6)
    ap.add_argument("--max-iter", type=int, default=500)
    ap.add_argument("--bootstrap-reps", type=int, default=200)
    ap.add_argument("--standardize", action="store_true", help="z-score the response columns before fitting")
    ap.add_argument("--means-fixed-zero", action="store_true", help="fix the CFA factor means at zero")
    ap.add_argument("--gamma", type=float, default=4.0)
    ap.add_argument("--delta", type=float, default=1.5)
    ap.add_argument("--kappa", type=float, default=1.0)
    ap.add_argument("--pi", type=float, default=None, help="share of regular respondents")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=None)
    ap.add_argument("--q", type=int, default=None, help="CFA factor count for simulations")
    ap.add_argument("--n-covariates", type=int, default=1, help="mixture covariates for simulate1 (1 or 2)")
    ap.add_argument("--reps", type=int, default=None, help="run a fitted Monte Carlo study instead of dumping one dataset")
    ap.add_argument("--format", dest="fmt", choices=("csv", "json"), default="csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    em = EmOptions(max_iter=ns.max_iter, tol=ns.tol, n_starts=ns.starts, seed=0 if ns.seed is None else ns.seed)
    study = None
    if ns.command == "simulate1" and ns.seed is not None:
        study = simulation.Study1Config(n=ns.n, p=ns.p or 30, pi=0.8 if ns.pi is None else ns.pi, q=ns.q or 1, K=ns.k,
                                        C=ns.n_covariates, seed=ns.seed)
    elif ns.command == "simulate2" and ns.seed is not None:
        study = simulation.Study2Config(n=ns.n, p=ns.p or 16, pi=0.8 if ns.pi is None else ns.pi, gamma=ns.gamma,
                                        delta=ns.delta, q=ns.q or 4, K=ns.k, kappa=ns.kappa, seed=ns.seed)
    return RunConfig(
        command=ns.command,
        out=ns.out,
        data=ns.data,
        design=ns.design,
        structure=ns.structure,
        truth=ns.truth,
        fit=ns.fit,
        seed=ns.seed,
        em=em,
        K=ns.k,
        K_grid=ns.k_grid or (ns.k,),
        covariates=tuple(ns.covariates) if ns.covariates else None,
        bootstrap_reps=ns.bootstrap_reps,
        standardize=ns.standardize,
        means_fixed_zero=ns.means_fixed_zero,
        study=study,
        reps=ns.reps,
        fmt=ns.fmt,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
    except ValueError as exc:
        Path(ns.out).mkdir(parents=True, exist_ok=True)
        emit_report({"command": ns.command, "error_type": type(exc).__name__, "message": str(exc)}, Path(ns.out) / "error.json", "json")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
