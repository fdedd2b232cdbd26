"""Best-matching components and recovery metrics against simulation truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .matrixio import sort_rows
from .simgen import COHENS_D_TRUTH

log = logging.getLogger(__name__)

R_TRUTH = {"mar_continuous": (0.5, 0.3), "mar_mixed": (0.5, None)}


@dataclass(frozen=True)
class MatchResult:
    mapping: np.ndarray
    xw_abs_corr: np.ndarray
    sign: np.ndarray | None = None
    h_abs_corr: np.ndarray | None = None


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)


def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlations between the columns of ``a`` and ``b``; NaN for constant columns."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt(np.sum(a * a, axis=0))
    nb = np.sqrt(np.sum(b * b, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (a.T @ b) / np.outer(na, nb)
    c[na == 0, :] = np.nan
    c[:, nb == 0] = np.nan
    return np.clip(c, -1.0, 1.0)


def pearson(x, y) -> float:
    return float(_pearson_matrix(np.asarray(x, float)[:, None], np.asarray(y, float)[:, None])[0, 0])


def best_match(xw_est_stacked: np.ndarray, xw_true_stacked: np.ndarray) -> MatchResult:
    """For each true map column pick the estimated column with the largest |corr|."""
    est = np.asarray(xw_est_stacked, dtype=float)
    true = np.asarray(xw_true_stacked, dtype=float)
    if est.shape[0] != true.shape[0]:
        raise ValueError("estimated and true maps have different voxel counts")
    if est.shape[1] < 2:
        raise ValueError("need at least two estimated components")
    c = np.abs(_pearson_matrix(est, true))
    valid = ~np.isnan(c).all(axis=1)
    if not valid.any():
        raise ValueError("every estimated column has zero variance")
    c = np.where(valid[:, None], c, -np.inf)
    mapping = np.argmax(c, axis=0)
    if len(set(mapping.tolist())) < mapping.size:
        log.warning("true components share a best-matching estimate: %s", mapping.tolist())
    return MatchResult(mapping=mapping, xw_abs_corr=c[mapping, np.arange(true.shape[1])])


def _subset(h: np.ndarray, subject_subset) -> np.ndarray:
    if subject_subset is None:
        return h
    return h[:, np.asarray(subject_subset, dtype=int)]


def h_metrics(h_est: np.ndarray, h_true: np.ndarray, match: MatchResult,
              subject_subset: Sequence[int] | None = None) -> np.ndarray:
    """|corr| between each true H row and its best-matching estimated row.

    ``h_est`` and ``h_true`` must have the same columns; pass
    ``subject_subset`` to restrict both to some subjects.
    """
    return np.abs(_matched_corr(h_est, h_true, match, subject_subset))


def h_signs(h_est, h_true, match: MatchResult, subject_subset=None) -> np.ndarray:
    """Sign of corr(best-matching H row, true H row)."""
    return np.where(_matched_corr(h_est, h_true, match, subject_subset) < 0, -1, 1)


def _matched_corr(h_est, h_true, match, subject_subset):
    h_est = _subset(np.asarray(h_est, dtype=float), subject_subset)
    h_true = _subset(np.asarray(h_true, dtype=float), subject_subset)
    if h_est.shape[1] != h_true.shape[1]:
        raise ValueError("h_est and h_true cover different subjects")
    if h_true.shape[1] < 3:
        raise ValueError("need at least 3 subjects for a correlation")
    return np.array([pearson(h_est[m], h_true[j]) for j, m in enumerate(match.mapping)])


def cohens_d(values, groups) -> float:
    """Standardized mean difference (group 1 minus group 0) with pooled SD."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    g1 = values[groups == 1]
    g0 = values[groups == 0]
    if g1.size + g0.size != values.size:
        raise ValueError("binary covariate must contain only 0 and 1")
    if g1.size < 1 or g0.size < 1 or g1.size + g0.size < 3:
        raise ValueError("both covariate groups must be non-empty")
    n1, n0 = g1.size, g0.size
    s1 = g1.var(ddof=1) if n1 > 1 else 0.0
    s0 = g0.var(ddof=1) if n0 > 1 else 0.0
    pooled = np.sqrt(((n1 - 1) * s1 + (n0 - 1) * s0) / (n1 + n0 - 2))
    if pooled == 0:
        raise ValueError("zero pooled standard deviation")
    return float((g1.mean() - g0.mean()) / pooled)


def covariate_bias(h_est_matched, sign: int, covariate, truth: float, kind: str = "correlation") -> float:
    """Statistic of ``sign * h_est_matched`` against the covariate, minus ``truth``."""
    h = sign * np.asarray(h_est_matched, dtype=float)
    covariate = np.asarray(covariate, dtype=float)
    if h.shape != covariate.shape:
        raise ValueError("covariate and loadings differ in length")
    if kind == "correlation":
        stat = pearson(covariate, h)
    elif kind == "cohens_d":
        stat = cohens_d(h, covariate)
    else:
        raise ValueError(f"unknown statistic {kind!r}")
    return stat - truth


def evaluate_fit(result, truth, replicate: int, missing_only: bool = False) -> list[dict]:
    """Metric rows for one fitted method on one simulated replicate.

    Completer fits are scored on their own subject subset.  With
    ``missing_only`` the H metrics use only subjects missing somewhere.
    """
    d = result.decomposition
    subjects = np.asarray(result.subjects)
    h_true = truth.h_true[:, subjects]
    match = best_match(np.vstack(d.xw), truth.xw_stacked)
    subset = None
    if missing_only:
        missing = np.concatenate(truth.missing_assign)
        subset = np.flatnonzero(np.isin(subjects, missing))
    h_abs = h_metrics(d.h, h_true, match, subset)
    signs = h_signs(d.h, h_true, match, subset)
    base = {"setting": truth.setting, "missing_pct": float(truth.missing_pct),
            "method": result.method, "replicate": int(replicate)}
    rows = []
    for j in range(h_true.shape[0]):
        rows.append(dict(base, metric="xw_abs_corr", component=j + 1, value=float(match.xw_abs_corr[j])))
        rows.append(dict(base, metric="h_abs_corr", component=j + 1, value=float(h_abs[j])))
    if truth.setting in R_TRUTH:
        h1 = _subset(d.h[match.mapping[0]][None, :], subset)[0]
        h2 = _subset(d.h[match.mapping[1]][None, :], subset)[0]
        c1 = _subset(truth.c1[subjects][None, :], subset)[0]
        c2 = _subset(truth.c2[subjects][None, :], subset)[0]
        r1, r2 = R_TRUTH[truth.setting]
        rows.append(dict(base, metric="c1_corr_bias", component=1,
                         value=covariate_bias(h1, signs[0], c1, r1, "correlation")))
        if truth.setting == "mar_continuous":
            rows.append(dict(base, metric="c2_corr_bias", component=2,
                             value=covariate_bias(h2, signs[1], c2, r2, "correlation")))
        else:
            rows.append(dict(base, metric="c2_cohens_d_bias", component=2,
                             value=covariate_bias(h2, signs[1], c2, COHENS_D_TRUTH, "cohens_d")))
    return rows


def _quantiles(values: np.ndarray):
    return np.percentile(values, [25, 50, 75])


def aggregate(rows: Iterable[dict]) -> EvalReport:
    """Mean, SD (ddof=1; 0 for a single value), and quartiles per group."""
    rows = sort_rows(rows)
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["setting"], float(r["missing_pct"]), r["method"], r["metric"], int(r["component"]))
        groups.setdefault(key, []).append(float(r["value"]))
    aggregates = {}
    for key, vals in groups.items():
        if not vals:
            raise ValueError(f"empty group {key}")
        v = np.array(vals)
        q1, med, q3 = _quantiles(v)
        aggregates[key] = {
            "n": int(v.size),
            "mean": float(v.mean()),
            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
        }
    return EvalReport(rows=rows, aggregates=aggregates)
