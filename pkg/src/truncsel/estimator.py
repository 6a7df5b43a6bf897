"""Baseline OLS and the partially linear single-index NLS estimator.

The outcome model is linear in the substantive covariates plus an unknown
function of a single index built from the estimated participant-share
column(s), the individual-level covariates, and the contextual group
covariates.  The unknown function is a transformed cosine/Fourier series
(:mod:`truncsel.sieve`); everything is fit jointly by nonlinear least squares
using quasi-Newton descent with a backtracking line search, restarted from
seeded perturbations of a deterministic warm start.

The transform's location and scale are frozen from the warm-start index
values before optimization, which pins the index scale and prevents the
bounded transform from saturating.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, TruncatedDataset
from .errors import DimensionMismatch, RankDeficient
from .opinion import OpinionSpace, participant_share_many
from .sieve import SieveCoeffs, SieveSpec, basis, basis_derivative


def fit_ols(y, design) -> np.ndarray:
    """Least-squares coefficients via SVD; raises RankDeficient when singular."""
    y = np.asarray(y, dtype=float)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if len(y) <= design.shape[1]:
        raise RankDeficient(f"n={len(y)} rows cannot identify {design.shape[1]} "
                            "coefficients")
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficient(f"design has rank {rank} < {design.shape[1]}")
    return coef


@dataclass(frozen=True)
class DesignBundle:
    """Design pieces of the partially linear single-index regression."""

    y1: np.ndarray       # (n,)
    w: np.ndarray        # (n, L_w) substantive covariates
    shares: np.ndarray   # (n, n_share) participant-share columns
    z: np.ndarray        # (n, L_z)
    x_contextual: np.ndarray  # (n, L_xc)
    share_ks: tuple = ()      # candidate class count per share column

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=float)
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        shares = np.atleast_2d(np.asarray(self.shares, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        xc = np.atleast_2d(np.asarray(self.x_contextual, dtype=float))
        n = len(y1)
        for name, arr in (("w", w), ("shares", shares), ("z", z), ("x_contextual", xc)):
            if len(arr) != n:
                raise DimensionMismatch(f"{name} has {len(arr)} rows, expected {n}")
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "shares", shares)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x_contextual", xc)

    @property
    def n(self) -> int:
        return len(self.y1)

    @property
    def index_design(self) -> np.ndarray:
        return np.concatenate([self.shares, self.z, self.x_contextual], axis=1)

    def block_sizes(self):
        return (self.w.shape[1], self.shares.shape[1], self.z.shape[1],
                self.x_contextual.shape[1])


def build_bundle(truncated, space: OpinionSpace = None, assignments=None) -> DesignBundle:
    """Assemble the design with one share column per candidate class count.

    Pass either a :class:`LabeledDataset` over a truncated dataset together
    with its :class:`OpinionSpace` (single column), or a raw truncated dataset
    plus ``assignments`` mapping each candidate count k to its
    ``(labels, OpinionSpace)`` pair; columns are ordered by ascending k.  Each
    row's entry in column k is the share of its own fitted class evaluated at
    the row's group covariates.
    """
    if isinstance(truncated, LabeledDataset):
        base = truncated.base
        if assignments is None:
            if space is None:
                raise DimensionMismatch("an OpinionSpace is required")
            assignments = {truncated.k: (truncated.labels, space)}
    else:
        base = truncated
        if assignments is None:
            raise DimensionMismatch("assignments {k: (labels, space)} required "
                                    "for an unlabeled dataset")
    if not isinstance(base, TruncatedDataset):
        raise DimensionMismatch("bundle rows must come from a truncated dataset")
    cols = []
    ks = sorted(assignments)
    for k in ks:
        labels, sp = assignments[k]
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != base.n:
            raise DimensionMismatch(f"labels for k={k} have wrong length")
        col = np.empty(base.n)
        for t in range(1, sp.k + 1):
            rows = labels == t
            if rows.any():
                col[rows] = participant_share_many(sp, base.x[rows], t)
        cols.append(col)
    return DesignBundle(y1=base.y1, w=base.w, shares=np.column_stack(cols),
                        z=base.z, x_contextual=base.x_contextual,
                        share_ks=tuple(ks))


@dataclass(frozen=True)
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    delta: np.ndarray
    sieve_coeffs: SieveCoeffs
    objective: float
    gradient_norm: float
    converged: bool
    n_evals: int
    sieve_spec: SieveSpec = None
    objective_path: np.ndarray = field(default=None, repr=False)

    def params(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.eta, self.delta,
                               [self.sieve_coeffs.alpha], self.sieve_coeffs.tau])

    def to_json_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "eta": self.eta.tolist(),
            "delta": self.delta.tolist(),
            "sieve_alpha": float(self.sieve_coeffs.alpha),
            "sieve_tau": self.sieve_coeffs.tau.tolist(),
            "sieve_family": self.sieve_spec.family if self.sieve_spec else None,
            "sieve_n_terms": self.sieve_spec.n_terms if self.sieve_spec else None,
            "transform_scale": self.sieve_spec.transform_scale if self.sieve_spec else None,
            "transform_center": self.sieve_spec.transform_center if self.sieve_spec else None,
            "objective": float(self.objective),
            "gradient_norm": float(self.gradient_norm),
            "converged": bool(self.converged),
            "n_evals": int(self.n_evals),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)


@dataclass(frozen=True)
class PlsimConfig:
    restarts: int = 3
    max_iter: int = 2000
    tol: float = 1e-6            # gradient infinity-norm
    seed: int = 0
    freeze_transform: bool = True


def _split(params, bundle: DesignBundle, spec: SieveSpec):
    l_w, n_s, l_z, l_xc = bundle.block_sizes()
    n_tau = spec.n_coeffs
    expected = l_w + n_s + l_z + l_xc + 1 + n_tau
    params = np.asarray(params, dtype=float)
    if params.shape != (expected,):
        raise DimensionMismatch(f"params has shape {params.shape}, expected ({expected},)")
    theta = params[:l_w]
    gamma = params[l_w:l_w + n_s + l_z + l_xc]
    alpha = params[l_w + n_s + l_z + l_xc]
    tau = params[l_w + n_s + l_z + l_xc + 1:]
    return theta, gamma, alpha, tau


def residuals(params, bundle: DesignBundle, spec: SieveSpec) -> np.ndarray:
    theta, gamma, alpha, tau = _split(params, bundle, spec)
    b = bundle.index_design @ gamma
    return bundle.y1 - bundle.w @ theta - alpha - basis(spec, b) @ tau


def objective(params, bundle: DesignBundle, spec: SieveSpec) -> float:
    """Mean squared residual of the partially linear single-index model."""
    r = residuals(params, bundle, spec)
    return float(np.mean(r * r))


def gradient(params, bundle: DesignBundle, spec: SieveSpec) -> np.ndarray:
    """Exact analytic gradient of :func:`objective`."""
    theta, gamma, alpha, tau = _split(params, bundle, spec)
    s_mat = bundle.index_design
    b = s_mat @ gamma
    feats = basis(spec, b)
    r = bundle.y1 - bundle.w @ theta - alpha - feats @ tau
    n = bundle.n
    g_theta = -(2.0 / n) * (bundle.w.T @ r)
    mprime = basis_derivative(spec, b) @ tau
    g_gamma = -(2.0 / n) * (s_mat.T @ (r * mprime))
    g_alpha = -(2.0 / n) * r.sum()
    g_tau = -(2.0 / n) * (feats.T @ r)
    return np.concatenate([g_theta, g_gamma, [g_alpha], g_tau])


def _bfgs(fun_grad, x0, max_iter, tol):
    """Quasi-Newton minimizer with Armijo backtracking.

    Returns (x, f, g, history, n_evals, converged); the recorded objective
    sequence is non-increasing by construction.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    n_evals = 1
    dim = len(x)
    h_inv = np.eye(dim)
    history = [f]
    converged = np.abs(g).max() < tol
    for _ in range(max_iter):
        if converged:
            break
        p = -h_inv @ g
        slope = p @ g
        if not np.isfinite(slope) or slope >= 0:
            h_inv = np.eye(dim)
            p = -g
            slope = -(g @ g)
        step = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + step * p
            f_new, g_new = fun_grad(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s = x_new - x
        yv = g_new - g
        ys = yv @ s
        if ys > 1e-12 * np.linalg.norm(yv) * np.linalg.norm(s):
            if len(history) == 1:
                h_inv *= ys / (yv @ yv)
            rho = 1.0 / ys
            v = np.eye(dim) - rho * np.outer(s, yv)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        converged = np.abs(g).max() < tol
    return x, f, g, np.asarray(history), n_evals, converged


def _warm_start(bundle: DesignBundle):
    """Deterministic warm start: OLS theta, index slopes from the residual
    projection, falling back to a unit weight on the share block."""
    theta0 = fit_ols(bundle.y1, bundle.w)
    r0 = bundle.y1 - bundle.w @ theta0
    s_mat = bundle.index_design
    design = np.concatenate([np.ones((bundle.n, 1)), s_mat], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(design, r0, rcond=None)
    gamma0 = coef[1:]
    if np.linalg.norm(gamma0) < 1e-10:
        gamma0 = np.zeros(s_mat.shape[1])
        gamma0[: bundle.shares.shape[1]] = 1.0
    return theta0, gamma0, float(r0.mean())


def freeze_transform(spec: SieveSpec, index_values) -> SieveSpec:
    """Pin the transform location/scale to the given index sample."""
    b = np.asarray(index_values, dtype=float)
    scale = float(b.std())
    if not scale > 1e-8:
        scale = max(abs(float(b.mean())), 1.0)
    return SieveSpec(family=spec.family, n_terms=spec.n_terms,
                     transform_scale=scale, transform_center=float(b.mean()))


def _concentrated_fun_grad(bundle: DesignBundle, spec: SieveSpec):
    """Profile the linear block out of the objective.

    For fixed index coefficients gamma the model is linear in
    (theta, alpha, tau); solving that block by least squares gives the
    concentrated objective J(gamma), whose gradient is the gamma block of the
    full gradient at the profiled optimum (envelope theorem).
    """
    s_mat = bundle.index_design
    n = bundle.n
    ones = np.ones((n, 1))

    def fun_grad(gamma):
        b = s_mat @ gamma
        feats = basis(spec, b)
        design = np.concatenate([bundle.w, ones, feats], axis=1)
        lin, _, _, _ = np.linalg.lstsq(design, bundle.y1, rcond=None)
        r = bundle.y1 - design @ lin
        f = float(np.mean(r * r))
        tau = lin[bundle.w.shape[1] + 1:]
        mprime = basis_derivative(spec, b) @ tau
        g = -(2.0 / n) * (s_mat.T @ (r * mprime))
        return f, g, lin

    return fun_grad


def fit_plsim(bundle: DesignBundle, spec: SieveSpec,
              config: PlsimConfig = PlsimConfig()) -> FitResult:
    """Fit the partially linear single-index model by restarted quasi-Newton.

    The descent runs on the concentrated objective: the linear block is
    profiled out exactly at every iterate, and BFGS with backtracking moves
    only the index coefficients.  The best restart by final objective wins;
    ``converged`` reports whether its gradient met the tolerance.
    """
    l_w, n_s, l_z, l_xc = bundle.block_sizes()
    n_params = l_w + n_s + l_z + l_xc + 1 + spec.n_coeffs
    if bundle.n <= n_params:
        raise RankDeficient(f"n={bundle.n} rows cannot identify {n_params} parameters")
    theta0, gamma0, alpha0 = _warm_start(bundle)
    eff_spec = spec
    if config.freeze_transform:
        eff_spec = freeze_transform(spec, bundle.index_design @ gamma0)
    conc = _concentrated_fun_grad(bundle, eff_spec)

    def fun_grad(gamma):
        f, g, _ = conc(gamma)
        return f, g

    rng = np.random.default_rng(config.seed)
    best = None
    total_evals = 0
    for restart in range(max(1, config.restarts)):
        gamma_r = gamma0.copy()
        if restart > 0:
            gamma_r *= 1.0 + 0.5 * rng.standard_normal(len(gamma0))
        x, f, g, hist, evals, conv = _bfgs(fun_grad, gamma_r, config.max_iter,
                                           config.tol)
        total_evals += evals
        if best is None or f < best[1]:
            best = (x, f, g, hist, conv)
    gamma, f, g, hist, conv = best
    _, _, lin = conc(gamma)
    theta = lin[:l_w]
    alpha = float(lin[l_w])
    tau = lin[l_w + 1:]
    full = np.concatenate([theta, gamma, [alpha], tau])
    g_full = gradient(full, bundle, eff_spec)
    return FitResult(theta=theta, beta=gamma[:n_s], eta=gamma[n_s:n_s + l_z],
                     delta=gamma[n_s + l_z:], sieve_coeffs=SieveCoeffs(alpha, tau),
                     objective=f, gradient_norm=float(np.abs(g_full).max()),
                     converged=bool(conv), n_evals=total_evals,
                     sieve_spec=eff_spec, objective_path=hist)
