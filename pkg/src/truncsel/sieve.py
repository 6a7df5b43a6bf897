"""Transformed Cosine and Fourier series for the unknown selection-bias term.

The bias function is approximated on a bounded domain reached through a
strictly monotone C^2 transform of the single index: a scaled logistic maps
the real line into (0, 1) for the cosine family, and the equivalent scaled
tanh maps into (-1, 1) for the Fourier family.  A frozen location shifts the
index before the transform so that indexes far from zero do not saturate it;
both location and scale are data-derived once per fit and then held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

FAMILIES = ("cosine", "fourier")


@dataclass(frozen=True)
class SieveSpec:
    family: str = "fourier"
    n_terms: int = 4
    transform_scale: float = 1.0
    transform_center: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DimensionMismatch(f"unknown sieve family {self.family!r}")
        if self.n_terms < 0:
            raise DimensionMismatch("n_terms must be >= 0")
        if not self.transform_scale > 0:
            raise DimensionMismatch("transform_scale must be positive")

    @property
    def n_coeffs(self) -> int:
        """Length of the tau vector (intercept excluded)."""
        return self.n_terms if self.family == "cosine" else 2 * self.n_terms


@dataclass(frozen=True)
class SieveCoeffs:
    alpha: float
    tau: np.ndarray

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        if not (np.isfinite(self.alpha) and np.isfinite(tau).all()):
            raise DimensionMismatch("sieve coefficients must be finite")
        object.__setattr__(self, "tau", tau)


def transform_phi(b, s: float):
    """Scaled logistic map R -> (0, 1): 1 / (1 + exp(-b/s))."""
    b = np.asarray(b, dtype=float)
    out = np.empty_like(b)
    t = b / s
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def transform_zeta(b, s: float):
    """Scaled odd map R -> (-1, 1): 2*phi(b, s) - 1 = tanh(b / (2 s))."""
    return np.tanh(np.asarray(b, dtype=float) / (2.0 * s))


def _transformed(spec: SieveSpec, b):
    b = np.asarray(b, dtype=float) - spec.transform_center
    if spec.family == "cosine":
        return transform_phi(b, spec.transform_scale)
    return transform_zeta(b, spec.transform_scale)


def basis(spec: SieveSpec, b) -> np.ndarray:
    """Feature matrix of the series at index values ``b``.

    Cosine family: columns cos(phi(b) pi k), k = 1..K.  Fourier family: the K
    cosine columns in ``zeta`` followed by the K sine columns (the block order
    is part of the serialization contract).
    """
    b1 = np.atleast_1d(np.asarray(b, dtype=float))
    t = np.atleast_1d(_transformed(spec, b1))
    ks = np.arange(1, spec.n_terms + 1, dtype=float)
    ang = t[:, None] * (np.pi * ks)[None, :]
    if spec.family == "cosine":
        feats = np.cos(ang)
    else:
        feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    return feats if np.ndim(b) else feats[0]


def basis_derivative(spec: SieveSpec, b) -> np.ndarray:
    """d basis / d b, used by analytic gradients of the NLS objective."""
    b1 = np.atleast_1d(np.asarray(b, dtype=float))
    s = spec.transform_scale
    t = np.atleast_1d(_transformed(spec, b1))
    ks = np.arange(1, spec.n_terms + 1, dtype=float)
    ang = t[:, None] * (np.pi * ks)[None, :]
    if spec.family == "cosine":
        # phi' = phi (1 - phi) / s
        tprime = t * (1.0 - t) / s
        feats = -np.sin(ang) * (np.pi * ks)[None, :]
    else:
        # zeta' = (1 - zeta^2) / (2 s)
        tprime = (1.0 - t * t) / (2.0 * s)
        feats = np.concatenate([-np.sin(ang) * (np.pi * ks)[None, :],
                                np.cos(ang) * (np.pi * ks)[None, :]], axis=1)
    out = feats * tprime[:, None]
    return out if np.ndim(b) else out[0]


def evaluate(spec: SieveSpec, coeffs: SieveCoeffs, b):
    """alpha + tau . basis(spec, b)."""
    if len(coeffs.tau) != spec.n_coeffs:
        raise DimensionMismatch(
            f"tau has {len(coeffs.tau)} entries, spec wants {spec.n_coeffs}")
    feats = basis(spec, b)
    return coeffs.alpha + feats @ coeffs.tau
