"""FI-LICA and the comparison strategies (complete case, zero fill, oracle)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import Decomposition, EngineError, decompose
from .matrixio import MaskedModality

log = logging.getLogger(__name__)

METHODS = ("filica", "completer", "replace0", "oracle")


@dataclass(frozen=True)
class FiLicaConfig:
    L: int = 5
    lica_iters: int = 1000
    fi_updates: int = 20
    tol_rel: float = 1e-3
    seed: int = 0
    domain: str = "spatial"
    contrast: str = "skew"
    gap_ratio: float | None = 2.0

    def __post_init__(self):
        if self.L < 1 or self.lica_iters < 1 or self.fi_updates < 1:
            raise ValueError("L, lica_iters and fi_updates must be positive")
        if not 0 < self.tol_rel < 1:
            raise ValueError("tol_rel must lie in (0, 1)")


@dataclass(frozen=True)
class FusionResult:
    decomposition: Decomposition
    method: str
    subjects: np.ndarray
    fi_deltas: tuple[dict, ...] = ()
    fi_converged: bool = False
    imputed: tuple[MaskedModality, ...] = ()
    effective_iters: int | None = None
    attempts: tuple[int, ...] = field(default=())


def standardize(m: MaskedModality) -> MaskedModality:
    """Center each voxel row over observed subjects and divide by its RMS.

    The RMS is taken over the demeaned observed values, so every row ends
    with mean 0 and RMS 1 over the observed columns.  Rows that are constant
    over the observed subjects become zero.
    """
    obs = m.observed
    if obs.sum() < 2:
        raise ValueError(f"modality {m.name!r}: fewer than 2 observed subjects")
    y = m.values[:, obs]
    if not np.all(np.isfinite(y)):
        raise ValueError(f"modality {m.name!r}: non-finite observed values")
    centered = y - y.mean(axis=1, keepdims=True)
    rms = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    scale = np.where(rms > 0, rms, 1.0)
    out = np.full(m.values.shape, np.nan)
    out[:, obs] = np.where(rms > 0, centered / scale, 0.0)
    return MaskedModality(m.name, out, obs)


def rescale_h(d: Decomposition) -> Decomposition:
    """Rescale H rows to unit standard deviation, compensating in every map.

    ``h <- D h`` and ``xw_k <- xw_k D^-1`` with ``D = diag(1 / sd(h rows))``;
    the model prediction is unchanged.
    """
    sd = np.std(d.h, axis=1, ddof=1)
    if np.any(sd == 0) or not np.all(np.isfinite(sd)):
        raise ValueError("cannot rescale a zero-variance H row")
    h = d.h / sd[:, None]
    xw = [m * sd[None, :] for m in d.xw]
    return d.with_factors(xw, h)


def crude_h(xw_others: np.ndarray, y_others: np.ndarray,
            missing_subjects: Sequence[int] | None = None) -> np.ndarray:
    """Least-squares loadings from the other modalities' maps.

    Computes ``pinv(X'X) X' Y`` on the selected columns of ``y_others``;
    the pseudoinverse yields the minimum-norm solution when ``X'X`` is singular.
    """
    xw_others = np.asarray(xw_others, dtype=float)
    y = np.asarray(y_others, dtype=float)
    if missing_subjects is not None:
        y = y[:, np.asarray(missing_subjects, dtype=int)]
    if xw_others.shape[0] != y.shape[0]:
        raise ValueError("xw_others and y_others disagree on the number of rows")
    if xw_others.shape[0] < xw_others.shape[1]:
        raise ValueError("fewer stacked voxels than components")
    if not np.all(np.isfinite(y)):
        raise ValueError("a selected subject has no data in the stacked modalities")
    gram = xw_others.T @ xw_others
    return np.linalg.pinv(gram, hermitian=True) @ (xw_others.T @ y)


def impute_missing(m: MaskedModality, xw_k: np.ndarray, h_cols: np.ndarray) -> MaskedModality:
    """Fill the missing columns of ``m`` with ``xw_k @ h_cols``.

    The returned modality keeps the original ``observed`` mask; its values
    are complete.
    """
    miss = m.missing_idx
    h_cols = np.asarray(h_cols, dtype=float)
    if h_cols.ndim != 2 or h_cols.shape[1] != miss.size:
        raise ValueError(f"h_cols has {h_cols.shape[-1]} columns for {miss.size} missing subjects")
    if xw_k.shape != (m.n_voxels, h_cols.shape[0]):
        raise ValueError(f"xw_k shape {xw_k.shape} does not fit {m.n_voxels} voxels x "
                         f"{h_cols.shape[0]} components")
    values = np.array(m.values)
    values[:, miss] = xw_k @ h_cols
    return MaskedModality(m.name, values, m.observed, imputed=True)


def _completers(modalities: Sequence[MaskedModality]) -> np.ndarray:
    return np.flatnonzero(np.all([m.observed for m in modalities], axis=0))


def _check_subjects(modalities: Sequence[MaskedModality]) -> int:
    if not modalities:
        raise ValueError("no modalities")
    n = modalities[0].n_subjects
    if any(m.n_subjects != n for m in modalities):
        raise ValueError("modalities disagree on the number of subjects")
    return n


def _fit(ys, cfg: FiLicaConfig, iters=None, init_h=None) -> Decomposition:
    d = decompose(ys, cfg.L, iters or cfg.lica_iters, init_h=init_h, seed=cfg.seed,
                  domain=cfg.domain, contrast=cfg.contrast, gap_ratio=cfg.gap_ratio)
    return rescale_h(d)


def fit_complete_case(modalities: Sequence[MaskedModality], cfg: FiLicaConfig,
                      *, prestandardized: bool = False) -> FusionResult:
    """LICA on the subjects observed in every modality."""
    _check_subjects(modalities)
    keep = _completers(modalities)
    if keep.size < max(cfg.L, 2):
        raise ValueError(f"only {keep.size} complete-case subjects for L={cfg.L}")
    std = modalities if prestandardized else [standardize(m) for m in modalities]
    d = _fit([m.values[:, keep] for m in std], cfg)
    return FusionResult(d, "completer", keep, effective_iters=cfg.lica_iters)


def _initial_h(std: Sequence[MaskedModality], cc: Decomposition, keep: np.ndarray) -> np.ndarray:
    """Complete-case H plus crude loadings for every incomplete subject.

    A subject missing in several modalities gets one estimate per modality
    loop; the estimates are averaged.
    """
    n = std[0].n_subjects
    h0 = np.zeros((cc.n_components, n))
    h0[:, keep] = cc.h
    acc = np.zeros_like(h0)
    counts = np.zeros(n)
    obs = np.array([m.observed for m in std])
    for k, m in enumerate(std):
        miss = m.missing_idx
        if miss.size == 0:
            continue
        # group subjects by which other modalities they have
        patterns: dict[tuple[int, ...], list[int]] = {}
        for j in miss:
            others = tuple(int(i) for i in np.flatnonzero(obs[:, j]) if i != k)
            if not others:
                raise ValueError(f"subject {j} has no observed modality")
            patterns.setdefault(others, []).append(int(j))
        for others, subj in patterns.items():
            xw = np.vstack([cc.xw[i] for i in others])
            y = np.vstack([std[i].values for i in others])
            acc[:, subj] += crude_h(xw, y, subj)
            counts[subj] += 1
    rec = counts > 0
    h0[:, rec] = acc[:, rec] / counts[rec]
    return h0


def fit_filica(modalities: Sequence[MaskedModality], cfg: FiLicaConfig) -> FusionResult:
    """Full-information LICA.

    Standardize, fit the complete cases, recover loadings of incomplete
    subjects from their observed modalities, then alternate warm-started
    refits and re-imputation until the relative Frobenius changes of the
    stacked maps and of H both fall below ``cfg.tol_rel``.
    """
    n = _check_subjects(modalities)
    std = [standardize(m) for m in modalities]
    cc = fit_complete_case(std, cfg, prestandardized=True)
    keep = cc.subjects
    h_prev = _initial_h(std, cc.decomposition, keep)
    xw_prev = np.vstack(cc.decomposition.xw)
    filled = [impute_missing(m, cc.decomposition.xw[k], h_prev[:, m.missing_idx])
              for k, m in enumerate(std)]

    deltas = []
    converged = False
    d = cc.decomposition
    for s in range(1, cfg.fi_updates + 1):
        d = _fit([m.values for m in filled], cfg, init_h=h_prev)
        filled = [impute_missing(m, d.xw[k], d.h[:, m.missing_idx])
                  for k, m in enumerate(std)]
        xw_now = np.vstack(d.xw)
        d_xw = float(np.linalg.norm(xw_now - xw_prev))
        d_h = float(np.linalg.norm(d.h - h_prev))
        rel_xw = d_xw / max(float(np.linalg.norm(xw_now)), np.finfo(float).tiny)
        rel_h = d_h / max(float(np.linalg.norm(d.h)), np.finfo(float).tiny)
        deltas.append({"dXw": d_xw, "dH": d_h, "rel_dXw": rel_xw, "rel_dH": rel_h})
        log.debug("fi update %d: dXw=%.4g dH=%.4g", s, d_xw, d_h)
        xw_prev, h_prev = xw_now, d.h
        if rel_xw < cfg.tol_rel and rel_h < cfg.tol_rel:
            converged = True
            break
    return FusionResult(d, "filica", np.arange(n), fi_deltas=tuple(deltas),
                        fi_converged=converged, imputed=tuple(filled),
                        effective_iters=cfg.lica_iters)


def reduced_budget(iters: int) -> int:
    """Iteration budget after a 25% cut, rounding the cut up."""
    return iters - math.ceil(0.25 * iters)


def fit_replace0(modalities: Sequence[MaskedModality], cfg: FiLicaConfig,
                 engine: Callable[..., Decomposition] | None = None) -> FusionResult:
    """Zero-fill missing columns after standardization, then fit.

    A failing engine call is retried with the budget cut by 25% until it
    succeeds or the budget drops below one iteration.
    """
    n = _check_subjects(modalities)
    std = [standardize(m) for m in modalities]
    ys = [np.where(m.observed[None, :], m.values, 0.0) for m in std]
    engine = engine or _fit
    iters = cfg.lica_iters
    attempts = []
    last_err = None
    while iters >= 1:
        attempts.append(iters)
        try:
            d = engine(ys, cfg, iters)
        except EngineError as exc:
            last_err = exc
            log.info("replace0 engine failed at %d iterations: %s", iters, exc)
            iters = reduced_budget(iters)
            continue
        return FusionResult(d, "replace0", np.arange(n), effective_iters=iters,
                            attempts=tuple(attempts))
    raise EngineError(f"replace0: iteration budget exhausted after attempts {attempts}") from last_err


def fit_oracle(full_modalities: Sequence[MaskedModality], cfg: FiLicaConfig) -> FusionResult:
    """LICA on fully observed data."""
    n = _check_subjects(full_modalities)
    for m in full_modalities:
        if not m.is_complete:
            raise ValueError(f"oracle requires complete data; modality {m.name!r} has missing subjects")
    std = [standardize(m) for m in full_modalities]
    d = _fit([m.values for m in std], cfg)
    return FusionResult(d, "oracle", np.arange(n), effective_iters=cfg.lica_iters)


def fit_method(method: str, modalities: Sequence[MaskedModality], cfg: FiLicaConfig,
               full_modalities: Sequence[MaskedModality] | None = None) -> FusionResult:
    if method == "filica":
        return fit_filica(modalities, cfg)
    if method == "completer":
        return fit_complete_case(modalities, cfg)
    if method == "replace0":
        return fit_replace0(modalities, cfg)
    if method == "oracle":
        return fit_oracle(full_modalities if full_modalities is not None else modalities, cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
