"""Simulated two-modality datasets with subject-wise missingness.

Three mechanisms are available:

``mcar``
    H ~ N(0, 1); missing subjects drawn uniformly at random.
``mar_continuous``
    (C1, C2, H1, H2) multivariate normal with corr(C1, H1) = 0.5 and
    corr(C2, H2) = 0.3; missingness ranked by a logistic score of C1, C2.
``mar_mixed``
    As above but C2 ~ Bernoulli(0.5) and H2 = 0.5 C2 + N(0, 1).

Every replicate is drawn from its own Philox stream keyed on the seed, so
replicates are reproducible independently of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrixio import MaskedModality

SETTINGS = ("mcar", "mar_continuous", "mar_mixed")
MISSING_PCTS = (0.0, 0.05, 0.10, 0.20)
N_SUBJECTS = 100
N_VOXELS = (1000, 3000)
TEMPLATE_BLOCK = 100
# logistic missingness score coefficients: intercept, C1, C2
MAR_COEF = (-0.6, 0.5, 1.2)
COHENS_D_TRUTH = 0.5

_STREAM_DATA = 0
_STREAM_MASK = 1


@dataclass(frozen=True)
class SimTruth:
    xw_true: tuple[np.ndarray, ...]
    h_true: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    missing_assign: tuple[np.ndarray, ...]
    setting: str
    missing_pct: float
    seed: int
    missing_prob: np.ndarray = field(default=None)

    @property
    def xw_stacked(self) -> np.ndarray:
        return np.vstack(self.xw_true)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "missing_pct": self.missing_pct,
            "seed": self.seed,
            "h_true": self.h_true.tolist(),
            "c1": self.c1.tolist(),
            "c2": self.c2.tolist(),
            "missing_assign": [a.tolist() for a in self.missing_assign],
            "xw_true": [x.tolist() for x in self.xw_true],
        }


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream, *extra])
    return np.random.Generator(np.random.Philox(ss))


def gen_spatial_maps(n_voxels: int, seed: int, noise_scale: float = 1.0,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Two-component map: a block of ones on voxels 0-99 (component 1) and
    100-199 (component 2), zeros elsewhere, plus N(0, noise_scale^2) noise."""
    if n_voxels < 2 * TEMPLATE_BLOCK:
        raise ValueError(f"n_voxels must be at least {2 * TEMPLATE_BLOCK}, got {n_voxels}")
    if rng is None:
        rng = _rng(seed, _STREAM_DATA)
    x = np.zeros((n_voxels, 2))
    x[:TEMPLATE_BLOCK, 0] = 1.0
    x[TEMPLATE_BLOCK:2 * TEMPLATE_BLOCK, 1] = 1.0
    return x + noise_scale * rng.standard_normal((n_voxels, 2))


def logistic_missing_prob(c1, c2):
    """Probability of missingness, ``1 / (1 + exp(-(-0.6 + 0.5 c1 + 1.2 c2)))``."""
    b0, b1, b2 = MAR_COEF
    z = b0 + b1 * np.asarray(c1, dtype=float) + b2 * np.asarray(c2, dtype=float)
    p = 1.0 / (1.0 + np.exp(-z))
    return float(p) if np.ndim(p) == 0 else p


def _standardize_rows(h: np.ndarray) -> np.ndarray:
    h = h - h.mean(axis=1, keepdims=True)
    return h / h.std(axis=1, ddof=1, keepdims=True)


def _latent(setting: str, rng: np.random.Generator, n: int):
    empty = np.zeros(0)
    if setting == "mcar":
        return rng.standard_normal((2, n)), empty, empty
    if setting == "mar_continuous":
        corr = np.array([
            [1.0, 0.0, 0.5, 0.0],
            [0.0, 1.0, 0.0, 0.3],
            [0.5, 0.0, 1.0, 0.0],
            [0.0, 0.3, 0.0, 1.0],
        ])
        draws = rng.multivariate_normal(np.zeros(4), corr, size=n, method="cholesky")
        c1, c2 = draws[:, 0], draws[:, 1]
        return _standardize_rows(draws[:, 2:].T), c1, c2
    if setting == "mar_mixed":
        pair = rng.multivariate_normal(np.zeros(2), [[1.0, 0.5], [0.5, 1.0]], size=n,
                                       method="cholesky")
        c1, h1 = pair[:, 0], pair[:, 1]
        c2 = rng.binomial(1, 0.5, size=n).astype(float)
        h2 = 0.5 * c2 + rng.standard_normal(n)
        return _standardize_rows(np.vstack([h1, h2])), c1, c2
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def alternate_assign(ranked: np.ndarray, count: int, n_modalities: int = 2):
    """Deal ranked subjects in turn to each modality until every quota is met."""
    need = count * n_modalities
    if need > ranked.size:
        raise ValueError(f"{need} missing subjects requested from {ranked.size}")
    top = ranked[:need]
    return tuple(np.sort(top[k::n_modalities]) for k in range(n_modalities))


def gen_replicate(setting: str, missing_pct: float, seed: int, n_subjects: int = N_SUBJECTS,
                  n_voxels: tuple[int, ...] = N_VOXELS):
    """Simulate one replicate.

    The complete data depend only on ``(setting, seed)``; the same complete
    dataset is masked at each missing percentage.

    Returns ``(truth, modalities, full_modalities)``.
    """
    if not any(np.isclose(missing_pct, p) for p in MISSING_PCTS):
        raise ValueError(f"missing_pct must be one of {MISSING_PCTS}, got {missing_pct}")
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    rng = _rng(seed, _STREAM_DATA, SETTINGS.index(setting))
    xs = tuple(gen_spatial_maps(v, seed, rng=rng) for v in n_voxels)
    h, c1, c2 = _latent(setting, rng, n_subjects)
    ys = [x @ h + rng.standard_normal((x.shape[0], n_subjects)) for x in xs]

    count = int(round(missing_pct * n_subjects))
    prob = None
    if setting == "mcar":
        mrng = _rng(seed, _STREAM_MASK, SETTINGS.index(setting), count)
        ranked = mrng.permutation(n_subjects)
    else:
        prob = logistic_missing_prob(c1, c2)
        # stable sort keeps ties in subject order
        ranked = np.argsort(-prob, kind="stable")
    assign = alternate_assign(ranked, count, len(xs)) if count else tuple(
        np.zeros(0, dtype=int) for _ in xs)

    full = []
    masked = []
    for k, y in enumerate(ys):
        name = f"modality{k + 1}"
        full.append(MaskedModality(name, y))
        obs = np.ones(n_subjects, dtype=bool)
        obs[assign[k]] = False
        masked.append(MaskedModality(name, y, obs))
    truth = SimTruth(xs, h, c1, c2, assign, setting, float(missing_pct), int(seed), prob)
    return truth, masked, full
