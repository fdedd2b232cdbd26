"""Reference linked-ICA engine.

Fits ``Y_k = XW_k @ H + E_k`` for K fully observed modalities that share
the subject loading matrix ``H`` (L x n_subjects).

The fit is deterministic:

1. each modality is scaled by ``1/sqrt(n_voxels_k)`` and the modalities are
   stacked row-wise;
2. a rank-L SVD gives the component subspace;
3. components are split into tiers wherever consecutive singular values
   differ by more than ``gap_ratio``, so strong components are never
   rotated together with noise-level ones;
4. within each tier a symmetric fixed-point ICA maximises non-Gaussianity
   of the spatial maps (or of the subject loadings, ``domain="subject"``);
5. ``H`` follows from the unmixing, and every ``XW_k`` is the least-squares
   solution of ``Y_k ~ XW_k @ H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "Decomposition",
    "EngineError",
    "decompose",
    "reconstruct",
    "stacked_xw",
    "DF_THRESHOLD",
]

# convergence threshold on the objective change, same units as objective_trace
DF_THRESHOLD = 0.1
UNMIXING_TOL = 1e-10
DEFAULT_GAP_RATIO = 2.0
MIN_STEP = 1.0 / 64
# E[log cosh(v)] for v ~ N(0, 1)
_GAUSS_LOGCOSH = 0.3745672075


class EngineError(RuntimeError):
    """The decomposition could not be computed."""


@dataclass(frozen=True)
class Decomposition:
    """Result of a linked-ICA fit.

    ``xw[k]`` is voxels_k x L and ``h`` is L x n_subjects.  ``weights[k]``
    holds the per-component RMS of ``xw[k]``; the unweighted maps are
    ``xw[k] / weights[k]``.
    """

    xw: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    h: np.ndarray
    noise_var: tuple[float, ...]
    objective_trace: tuple[float, ...]
    converged: bool
    n_iter: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_components(self) -> int:
        return int(self.h.shape[0])

    @property
    def n_subjects(self) -> int:
        return int(self.h.shape[1])

    @property
    def x(self) -> tuple[np.ndarray, ...]:
        return tuple(xw / w for xw, w in zip(self.xw, self.weights))

    def with_factors(self, xw: Sequence[np.ndarray], h: np.ndarray) -> "Decomposition":
        """Copy with new factors; weights are recomputed from ``xw``."""
        xw = tuple(np.asarray(m, dtype=float) for m in xw)
        return replace(self, xw=xw, h=np.asarray(h, dtype=float),
                       weights=tuple(_column_rms(m) for m in xw))


def reconstruct(d: Decomposition, k: int) -> np.ndarray:
    """Noise-free model prediction ``xw[k] @ h`` for modality ``k``."""
    if not 0 <= k < len(d.xw):
        raise IndexError(f"modality index {k} out of range for {len(d.xw)} modalities")
    return d.xw[k] @ d.h


def stacked_xw(d: Decomposition) -> np.ndarray:
    return np.vstack(d.xw)


def _column_rms(m: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(m * m, axis=0))
    return np.where(rms > 0, rms, np.finfo(float).tiny)


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    # (W W^T)^{-1/2} W
    u, _, vt = np.linalg.svd(w)
    return u @ vt


def _nonlinearity(contrast: str, s: np.ndarray):
    if contrast == "logcosh":
        g = np.tanh(s)
        return g, 1.0 - g * g
    if contrast == "skew":
        return s * s, 2.0 * s
    raise ValueError(f"unknown contrast {contrast!r}")


def _negentropy(contrast: str, s: np.ndarray) -> np.ndarray:
    if contrast == "logcosh":
        return (np.mean(np.log(np.cosh(s)), axis=1) - _GAUSS_LOGCOSH) ** 2
    return (np.mean(s ** 3, axis=1) / 3.0) ** 2


def gap_tiers(s: np.ndarray, gap_ratio: float | None) -> list[np.ndarray]:
    """Split component indices where ``s[i] / s[i+1]`` exceeds ``gap_ratio``."""
    if gap_ratio is None:
        return [np.arange(s.size)]
    cuts = [i + 1 for i in range(s.size - 1) if s[i] > gap_ratio * s[i + 1]]
    return [np.asarray(b) for b in np.split(np.arange(s.size), cuts)]


class _Tier:
    """Whitened samples of one tier plus its unmixing state."""

    def __init__(self, x: np.ndarray):
        xc = x - x.mean(axis=1, keepdims=True)
        cov = xc @ xc.T / xc.shape[1]
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() <= evals.max() * 1e-14:
            raise EngineError("degenerate tier covariance")
        self.whiten = (evecs / np.sqrt(evals)).T
        self.dewhiten = evecs * np.sqrt(evals)
        self.z = self.whiten @ xc
        self.w = None
        self.done = False


def _fixed_point(tiers: list[_Tier], contrast: str, max_iters: int):
    """Symmetric FastICA run jointly over independent tiers.

    A tier whose iterate comes back to where it was two steps earlier
    (period-2 oscillation) has its step damped: the update becomes
    ``sym((1 - mu) W + mu W_fp)`` with ``mu`` halved on each detection.
    """
    scale = float(tiers[0].z.shape[1])

    def objective():
        return scale * float(sum(np.sum(_negentropy(contrast, t.w @ t.z)) for t in tiers))

    for t in tiers:
        t.mu = 1.0
        t.w_prev = None
    trace = [objective()]
    it = 0
    for it in range(1, max_iters + 1):
        for t in tiers:
            if t.done:
                continue
            n = t.z.shape[1]
            g, g_prime = _nonlinearity(contrast, t.w @ t.z)
            w_fp = _sym_decorrelate((g @ t.z.T) / n - g_prime.mean(axis=1)[:, None] * t.w)
            if t.mu < 1.0:
                # align row signs before blending
                flip = np.where(np.sum(w_fp * t.w, axis=1) < 0, -1.0, 1.0)
                w_fp = _sym_decorrelate((1.0 - t.mu) * t.w + t.mu * flip[:, None] * w_fp)
            if not np.all(np.isfinite(w_fp)):
                raise EngineError(f"unmixing produced non-finite values at iteration {it}")
            change = np.max(np.abs(np.abs(np.sum(w_fp * t.w, axis=1)) - 1.0))
            if t.w_prev is not None and t.mu > MIN_STEP:
                back = np.max(np.abs(np.abs(np.sum(w_fp * t.w_prev, axis=1)) - 1.0))
                if back < change:
                    t.mu *= 0.5
            t.w_prev = t.w
            t.w = w_fp
            t.done = bool(change < UNMIXING_TOL)
        trace.append(objective())
        if all(t.done for t in tiers):
            break
    return trace, it


def _skewness(s: np.ndarray) -> np.ndarray:
    c = s - s.mean(axis=1, keepdims=True)
    return np.mean(c ** 3, axis=1)


def decompose(
    modalities: Sequence[np.ndarray],
    L: int,
    max_iters: int = 1000,
    init_h: np.ndarray | None = None,
    seed: int = 0,
    domain: str = "spatial",
    contrast: str = "skew",
    gap_ratio: float | None = DEFAULT_GAP_RATIO,
) -> Decomposition:
    """Fit the linked-ICA model on fully observed data.

    Parameters
    ----------
    modalities : sequence of (n_voxels_k, n_subjects) arrays
    L : int
        Number of components.
    max_iters : int
        Budget for the fixed-point iteration.
    init_h : (L, n_subjects) array, optional
        Warm start: the unmixing starts from the projection of ``init_h``
        onto the fitted subspace rather than from the PCA basis, and the
        output components keep the order and signs of ``init_h``.
    seed : int
        Seeds a small perturbation of the PCA start.  Unused with ``init_h``.
    domain : {"spatial", "subject"}
        Dimension whose samples are made maximally non-Gaussian.
    contrast : {"skew", "logcosh"}
    gap_ratio : float or None
        Tier split threshold on consecutive singular values; None rotates
        all L components together.
    """
    ys = [np.asarray(y, dtype=float) for y in modalities]
    if not ys:
        raise ValueError("at least one modality is required")
    if any(y.ndim != 2 for y in ys):
        raise ValueError("every modality must be a 2-D voxels x subjects matrix")
    n = ys[0].shape[1]
    if any(y.shape[1] != n for y in ys):
        raise ValueError("modalities disagree on the number of subjects")
    for k, y in enumerate(ys):
        if not np.all(np.isfinite(y)):
            raise ValueError(f"modality {k} contains non-finite values")
        if not np.any(y):
            raise ValueError(f"modality {k} is identically zero")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    if domain not in ("spatial", "subject"):
        raise ValueError(f"unknown ICA domain {domain!r}")
    total_voxels = sum(y.shape[0] for y in ys)
    if L < 1 or L > min(n, total_voxels):
        raise EngineError(f"L={L} exceeds the rank budget {min(n, total_voxels)}")

    z = np.vstack([y / np.sqrt(y.shape[0]) for y in ys])
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    if s[L - 1] <= s[0] * 1e-12:
        raise EngineError(f"data rank is below L={L}")
    u, s, vt = u[:, :L], s[:L], vt[:L]
    scores = s[:, None] * vt
    # ICA samples: spatial coordinates (L x voxels) or subject scores (L x n)
    samples = u.T if domain == "spatial" else vt

    # current loadings expressed in the score basis: h = coef @ scores
    coef0 = None
    if init_h is not None:
        init_h = np.asarray(init_h, dtype=float)
        if init_h.shape != (L, n):
            raise ValueError(f"init_h must have shape {(L, n)}, got {init_h.shape}")
        if np.any(np.std(init_h, axis=1) == 0):
            raise ValueError("init_h has a zero-variance row")
        coef0 = (init_h @ vt.T) / s[None, :]

    tiers = gap_tiers(s, gap_ratio)
    rng = np.random.default_rng(seed)
    states = []
    for idx in tiers:
        t = _Tier(samples[idx])
        if coef0 is not None:
            # sources = B @ samples; spatial: h = B^{-T} scores, subject: h = B diag(1/s) scores
            c = coef0[np.ix_(idx, idx)]
            if domain == "spatial":
                b0 = np.linalg.pinv(c).T
            else:
                b0 = c * s[idx][None, :]
            w0 = b0 @ t.dewhiten
        else:
            w0 = np.eye(idx.size) + 1e-3 * rng.standard_normal((idx.size, idx.size))
        t.w = _sym_decorrelate(w0)
        states.append(t)

    trace, n_iter = _fixed_point(states, contrast, max_iters)

    b = np.zeros((L, L))
    for idx, t in zip(tiers, states):
        b[np.ix_(idx, idx)] = t.w @ t.whiten
    if domain == "spatial":
        sources = b @ samples
        h = np.linalg.solve(b.T, scores)
    else:
        h = b @ samples
        sources = h
    if not np.all(np.isfinite(h)):
        raise EngineError("non-finite subject loadings")

    if coef0 is not None:
        signs = np.sign(np.sum((h - h.mean(axis=1, keepdims=True)) * init_h, axis=1))
    else:
        signs = np.sign(_skewness(sources))
    signs[signs == 0] = 1.0
    h = h * signs[:, None]

    xw = tuple(_least_squares_maps(y, h) for y in ys)
    noise_var = tuple(float(np.mean((y - m @ h) ** 2)) for y, m in zip(ys, xw))
    converged = len(trace) < 2 or abs(trace[-1] - trace[-2]) < DF_THRESHOLD
    return Decomposition(
        xw=xw,
        weights=tuple(_column_rms(m) for m in xw),
        h=h,
        noise_var=noise_var,
        objective_trace=tuple(trace),
        converged=bool(converged),
        n_iter=n_iter,
        meta={"singular_values": s, "tiers": [t.tolist() for t in tiers],
              "domain": domain, "contrast": contrast},
    )


def _least_squares_maps(y: np.ndarray, h: np.ndarray) -> np.ndarray:
    # h.T @ xw.T = y.T in the least-squares sense
    return np.linalg.lstsq(h.T, y.T, rcond=None)[0].T
