"""Reference-group participant shares from expert opinions.

Experts are partitioned by (fitted class label, binary opinion).  Within a
class, the participant share at covariates x follows from Bayes' rule applied
to the class's opinion rate and two Gaussian kernel density estimates of the
covariate distribution, one per opinion value.  Bandwidths use Scott's rule,
diagonal, per partition cell.  The share is clamped away from {0, 1} so it
can always enter a logit-style index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, SurveyDataset
from .errors import DegenerateDimension, EmptyCell, EmptyClass, SingularBandwidth

SHARE_CLAMP = 1e-6
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class OpinionSpace:
    """Per-class opinion rates, covariate point sets, and KDE bandwidths."""

    k: int
    opinion_share: np.ndarray  # (k,) within-class mean opinion p_t
    points: tuple              # points[t-1][omega] -> (m, L_x) array
    bandwidths: tuple          # bandwidths[t-1][omega] -> (L_x, L_x) or None
    empty_cells: tuple = ()    # (t, omega) pairs with < 2 experts

    def cell(self, t: int, omega: int) -> np.ndarray:
        return self.points[t - 1][omega]


def scott_bandwidth(points) -> np.ndarray:
    """Diagonal Scott-rule bandwidth matrix for an (m, L) point set.

    H_dd = (sigma_d * m**(-1/(L+4)))**2 with sigma_d the per-dimension sample
    standard deviation, floored at 1e-6 for constant dimensions.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, l_dim = pts.shape
    if m < 2:
        raise DegenerateDimension(f"need at least 2 points, got {m}")
    sigma = pts.std(axis=0, ddof=1)
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    h = sigma * m ** (-1.0 / (l_dim + 4.0))
    return np.diag(h * h)


def kde_density(points, bandwidth, x) -> float:
    """Gaussian product-kernel density estimate at ``x``.

    (1/m) (2 pi)^(-L/2) |H|^(-1/2) sum_p exp(-0.5 (p - x)' H^{-1} (p - x)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = np.asarray(bandwidth, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m, l_dim = pts.shape
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise SingularBandwidth("bandwidth matrix is not positive definite") from None
    diff = pts - x[None, :]
    y = np.linalg.solve(chol, diff.T)  # (L, m)
    quad = (y * y).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    norm = (2.0 * np.pi) ** (-l_dim / 2.0) * np.exp(-0.5 * logdet)
    return float(norm * np.exp(-0.5 * quad).sum() / m)


def _kde_many(points, bandwidth, xs) -> np.ndarray:
    """Vectorized kde_density over rows of ``xs``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = np.asarray(bandwidth, dtype=float)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    m, l_dim = pts.shape
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise SingularBandwidth("bandwidth matrix is not positive definite") from None
    inv_diag = 1.0 / np.diag(chol)  # bandwidths are diagonal here
    a = pts * inv_diag[None, :]
    b = xs * inv_diag[None, :]
    # squared Mahalanobis distances via the expanded form
    quad = (np.sum(a * a, axis=1)[None, :] + np.sum(b * b, axis=1)[:, None]
            - 2.0 * b @ a.T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    norm = (2.0 * np.pi) ** (-l_dim / 2.0) * np.exp(-0.5 * logdet)
    return norm * np.exp(-0.5 * np.maximum(quad, 0.0)).sum(axis=1) / m


def partition_opinions(labeled_survey: LabeledDataset) -> OpinionSpace:
    """Group experts by (label, opinion); attach opinion rates and bandwidths."""
    survey = labeled_survey.base
    if not isinstance(survey, SurveyDataset):
        raise EmptyClass("opinion space requires a labeled survey dataset")
    labels = labeled_survey.labels
    k = labeled_survey.k
    shares = np.zeros(k)
    points = []
    bandwidths = []
    empty_cells = []
    for t in range(1, k + 1):
        in_class = labels == t
        if not in_class.any():
            raise EmptyClass(f"no experts assigned to class {t}")
        ops = survey.opinions[in_class]
        shares[t - 1] = ops.mean()
        cell_pts = []
        cell_h = []
        for omega in (0, 1):
            pts = survey.x[in_class & (survey.opinions == omega)]
            cell_pts.append(pts)
            if len(pts) >= 2:
                cell_h.append(scott_bandwidth(pts))
            else:
                empty_cells.append((t, omega))
                cell_h.append(None)
        points.append(tuple(cell_pts))
        bandwidths.append(tuple(cell_h))
    return OpinionSpace(k=k, opinion_share=shares, points=tuple(points),
                        bandwidths=tuple(bandwidths),
                        empty_cells=tuple(empty_cells))


def participant_share(space: OpinionSpace, x, t: int) -> float:
    """Bayes share p_t f1(x) / (p_t f1(x) + (1 - p_t) f0(x)), clamped.

    Falls back to the covariate-free rate p_t when either (t, omega) cell is
    too small to support a density estimate.
    """
    return float(participant_share_many(space, np.atleast_2d(np.asarray(x, float)), t)[0])


def participant_share_many(space: OpinionSpace, xs, t: int) -> np.ndarray:
    """Vectorized participant_share over rows of ``xs``."""
    if not 1 <= t <= space.k:
        raise EmptyClass(f"class {t} outside 1..{space.k}")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    p_t = space.opinion_share[t - 1]
    pts0, pts1 = space.points[t - 1]
    h0, h1 = space.bandwidths[t - 1]
    if h0 is None or h1 is None or p_t in (0.0, 1.0):
        out = np.full(len(xs), p_t)
    else:
        f1 = _kde_many(pts1, h1, xs)
        f0 = _kde_many(pts0, h0, xs)
        num = p_t * f1
        den = num + (1.0 - p_t) * f0
        out = np.where(den > 0, num / np.maximum(den, 1e-300), p_t)
    return np.clip(out, SHARE_CLAMP, 1.0 - SHARE_CLAMP)


def export_share_grid(space: OpinionSpace, xs) -> np.ndarray:
    """(class, x-grid, share) rows for inspection; one row per (t, grid point)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    rows = []
    for t in range(1, space.k + 1):
        shares = participant_share_many(space, xs, t)
        for x_row, s in zip(xs, shares):
            rows.append([float(t), *map(float, x_row), float(s)])
    return np.asarray(rows)
