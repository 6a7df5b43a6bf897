"""SCAD-penalized selection of the number of reference groups.

The share-column coefficients of the partially linear single-index model are
penalized with the smoothly clipped absolute deviation (SCAD) function, which
is linear near zero, blends quadratically, then flattens so large
coefficients are not shrunk.  The nonconvex penalty is handled by writing it
as a difference of convex functions, h1(v) = lambda*v minus
h2(v) = lambda*v - p(v), and iterating: each outer step replaces h2 with its
affine minorant at the current magnitudes, leaving a weighted-LASSO problem
solved by proximal gradient steps with Barzilai-Borwein step sizes and a
backtracking guard, so the true penalized objective never increases.  The
positive/negative split of each penalized coefficient is recovered exactly
from the soft-threshold structure (one side of the split is always zero).

An alternative inner update enumerates sign vectors and solves the penalized
second-order conditions directly (modified soft-thresholding); it is capped
at 12 penalized coordinates since the enumeration is 3^dim.

Tuning values are compared with a BIC-style criterion
log(MSE) + (log n / n) * df and ties prefer the sparser (larger lambda) fit.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, NegativeInput, NonPositiveMse,
                     SingularSystem)
from .estimator import (DesignBundle, PlsimConfig, FitResult, SieveCoeffs,
                        fit_plsim, gradient, objective, residuals)
from .sieve import SieveSpec, basis, basis_derivative

ZERO_THRESHOLD = 1e-8


class DegenerateSelection(UserWarning):
    """The selected tuning value zeroes every share coefficient."""


@dataclass(frozen=True)
class ScadParams:
    lam: float
    a: float = 3.7

    def __post_init__(self):
        if self.lam < 0:
            raise NegativeInput("lambda must be nonnegative")
        if self.a <= 2:
            raise NegativeInput("a must exceed 2")


def scad(v, params: ScadParams):
    """SCAD penalty at magnitude v >= 0."""
    v = np.asarray(v, dtype=float)
    if (v < 0).any():
        raise NegativeInput("scad is defined for magnitudes v >= 0")
    lam, a = params.lam, params.a
    linear = lam * v
    middle = -(v * v - 2.0 * a * lam * v + lam * lam) / (2.0 * (a - 1.0))
    flat = (a + 1.0) * lam * lam / 2.0
    out = np.where(v <= lam, linear, np.where(v < a * lam, middle, flat))
    return float(out) if out.ndim == 0 else out


def scad_derivative(v, params: ScadParams):
    """Derivative of the SCAD penalty; handles signed input via sign(v)."""
    v = np.asarray(v, dtype=float)
    lam, a = params.lam, params.a
    sign = np.sign(v)
    av = np.abs(v)
    inner = lam * sign
    middle = (a * lam * sign - v) / (a - 1.0)
    out = np.where(av <= lam, inner, np.where(av <= a * lam, middle, 0.0))
    return float(out) if out.ndim == 0 else out


def dc_parts(v, params: ScadParams):
    """Convex pair (h1, h2) with h1 - h2 = scad(|v|)."""
    av = np.abs(np.asarray(v, dtype=float))
    h1 = params.lam * av
    h2 = h1 - scad(av, params)
    if np.ndim(v) == 0:
        return float(h1), float(h2)
    return h1, h2


def soft_threshold(u, a):
    """sign(u) * max(|u| - a, 0); a >= 0."""
    u = np.asarray(u, dtype=float)
    out = np.sign(u) * np.maximum(np.abs(u) - a, 0.0)
    return float(out) if out.ndim == 0 else out


def bb_step(grad_k, grad_prev, x_k, x_prev) -> float:
    """Barzilai-Borwein curvature estimate dg.dx / dx.dx, fallback 1.0."""
    dx = np.asarray(x_k, dtype=float) - np.asarray(x_prev, dtype=float)
    dg = np.asarray(grad_k, dtype=float) - np.asarray(grad_prev, dtype=float)
    denom = dx @ dx
    if denom <= 0:
        return 1.0
    alpha = (dg @ dx) / denom
    if not np.isfinite(alpha) or alpha <= 0:
        return 1.0
    return float(alpha)


def proximal_step(params, grad, alpha: float, lambda_tilde) -> np.ndarray:
    """Weighted-LASSO proximal update: soft(params - grad/alpha, lt/alpha)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    lt = np.asarray(lambda_tilde, dtype=float)
    if (lt < 0).any():
        raise NegativeInput("lambda_tilde must be nonnegative")
    u = params - grad / alpha
    return soft_threshold(u, lt / alpha)


def modified_soft_threshold_step(beta, grad, hessian, params: ScadParams,
                                 cap: int = 12) -> np.ndarray:
    """Sign-search update for the penalized quadratic model.

    Enumerates sign vectors g in {-1, 0, 1}^dim; coordinates with g_k = 0 are
    pinned at zero and the others solve the stationarity system
    beta - [H - R]^{-1} (grad - lam * r o g) restricted to the support, where
    R and r encode the SCAD derivative branches at the current magnitudes.  A
    candidate is kept only when its solved signs reproduce g; among the kept
    candidates (the all-zero one is always self-consistent) the minimizer of
    the quadratic model plus the SCAD penalty wins.
    """
    beta = np.asarray(beta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    hess = np.atleast_2d(np.asarray(hessian, dtype=float))
    dim = len(beta)
    if dim > cap:
        raise DimensionMismatch(f"sign search enumerates 3^dim; dim={dim} > cap={cap}")
    lam, a = params.lam, params.a
    av = np.abs(beta)
    middle = (av > lam) & (av <= a * lam)
    r_vec = (av <= lam).astype(float) + (a / (a - 1.0)) * middle
    big_r = np.diag(middle.astype(float) / (a - 1.0))
    system = hess - big_r

    best = None
    for sign_vec in itertools.product((-1.0, 0.0, 1.0), repeat=dim):
        g = np.asarray(sign_vec)
        support = g != 0
        cand = np.zeros(dim)
        if support.any():
            sub = system[np.ix_(support, support)]
            rhs = grad[support] - lam * (r_vec * g)[support]
            try:
                sol = np.linalg.solve(sub, rhs)
            except np.linalg.LinAlgError:
                raise SingularSystem(
                    "hessian minus R is singular; jitter lambda and retry") from None
            cand[support] = beta[support] - sol
            if not np.array_equal(np.sign(cand[support]), g[support]):
                continue
        step = cand - beta
        score = (grad @ step + 0.5 * step @ hess @ step
                 + scad(np.abs(cand), params).sum())
        if best is None or score < best[0]:
            best = (score, cand)
    return best[1]


def bic(mse: float, n: int, df) -> float:
    """log(MSE) + (log n / n) * df."""
    if not mse > 0:
        raise NonPositiveMse(f"mse must be positive, got {mse}")
    return float(np.log(mse) + (np.log(n) / n) * df)


@dataclass(frozen=True)
class PathEntry:
    lam: float
    params: np.ndarray
    beta: np.ndarray
    mse: float
    df: int
    bic: float
    converged: bool
    outer_objectives: np.ndarray = field(default=None, repr=False)

    @property
    def beta_plus(self) -> np.ndarray:
        return np.maximum(self.beta, 0.0)

    @property
    def beta_minus(self) -> np.ndarray:
        return np.maximum(-self.beta, 0.0)

    @property
    def n_nonzero(self) -> int:
        return int((np.abs(self.beta) > ZERO_THRESHOLD).sum())


@dataclass(frozen=True)
class SolutionPath:
    entries: tuple
    selected_index: int
    base_fit: FitResult = None
    sieve_spec: SieveSpec = None

    @property
    def selected(self) -> PathEntry:
        return self.entries[self.selected_index]

    def to_rows(self):
        """lambda, mse, df, bic, beta... rows for CSV export."""
        return [[e.lam, e.mse, e.df, e.bic, *e.beta.tolist()] for e in self.entries]


@dataclass(frozen=True)
class PathConfig:
    n_lambdas: int = 25
    lambda_ratio: float = 1e-3      # lambda_min = ratio * lambda_max
    outer_tol: float = 1e-6
    max_outer: int = 50
    inner_tol: float = 1e-8
    max_inner: int = 400
    warm_mode: str = "sequential-warm"   # or "parallel-cold"
    solver: str = "proximal"             # or "sign-search"
    sign_search_cap: int = 12
    plsim: PlsimConfig = PlsimConfig()


def _beta_slice(bundle: DesignBundle):
    l_w, n_s, _, _ = bundle.block_sizes()
    return slice(l_w, l_w + n_s)


def _penalized_objective(params, bundle, spec, scad_params):
    """(1/n) * [f + n * sum scad] = mean-square/2-free scale used internally."""
    bsl = _beta_slice(bundle)
    f = 0.5 * objective(params, bundle, spec)          # = (1/n) * (1/2)||r||^2
    return f + scad(np.abs(params[bsl]), scad_params).sum()


def _solve_entry(lam, start, bundle, spec, config, n_unpenalized):
    """DC outer loop around the weighted-LASSO inner solver for one lambda."""
    n = bundle.n
    bsl = _beta_slice(bundle)
    scad_params = ScadParams(lam)

    def smooth_grad(p):
        return 0.5 * gradient(p, bundle, spec)   # gradient of f/n

    def smooth_val(p):
        return 0.5 * objective(p, bundle, spec)

    params = np.asarray(start, dtype=float).copy()
    outer_objs = [_penalized_objective(params, bundle, spec, scad_params)]
    converged = False
    use_signs = (config.solver == "sign-search"
                 and (bsl.stop - bsl.start) <= config.sign_search_cap)
    for _ in range(config.max_outer):
        prev = params.copy()
        lt = np.zeros_like(params)
        lt[bsl] = np.abs(scad_derivative(np.abs(params[bsl]), scad_params))
        if use_signs:
            params = _inner_sign_search(params, bundle, spec, scad_params, config, bsl)
        else:
            params = _inner_proximal(params, bundle, spec, lt, config,
                                     smooth_val, smooth_grad)
        outer_objs.append(_penalized_objective(params, bundle, spec, scad_params))
        if np.abs(params - prev).max() < config.outer_tol:
            converged = True
            break
    beta = params[bsl].copy()
    mse = objective(params, bundle, spec)
    df = int((np.abs(beta) > ZERO_THRESHOLD).sum()) + n_unpenalized
    return PathEntry(lam=lam, params=params, beta=beta, mse=mse, df=df,
                     bic=bic(mse, n, df), converged=converged,
                     outer_objectives=np.asarray(outer_objs))


def _inner_proximal(params, bundle, spec, lambda_tilde, config, smooth_val,
                    smooth_grad):
    """Monotone proximal gradient with BB steps on f/n + sum lt_j |beta_j|."""
    def total(p):
        return smooth_val(p) + np.abs(lambda_tilde * p).sum()

    x = params.copy()
    g = smooth_grad(x)
    f_cur = total(x)
    x_prev, g_prev = None, None
    for _ in range(config.max_inner):
        alpha = 1.0 if x_prev is None else bb_step(g, g_prev, x, x_prev)
        accepted = None
        for _ in range(60):
            cand = proximal_step(x, g, alpha, lambda_tilde)
            f_new = total(cand)
            if f_new <= f_cur + 1e-12 * max(1.0, abs(f_cur)):
                accepted = (cand, f_new)
                break
            alpha *= 2.0
        if accepted is None:
            break
        cand, f_new = accepted
        if np.abs(cand - x).max() < config.inner_tol:
            x, f_cur = cand, f_new
            break
        x_prev, g_prev = x, g
        x, f_cur = cand, f_new
        g = smooth_grad(x)
    return x


def _inner_sign_search(params, bundle, spec, scad_params, config, bsl):
    """Alternate a smooth-block gradient pass with the sign-search beta update.

    The beta-block Hessian uses the Gauss-Newton approximation of f/n, which
    keeps the second-order model positive semidefinite.
    """
    x = params.copy()
    n = bundle.n
    for _ in range(config.max_inner // 10 + 1):
        prev = x.copy()
        # smooth coordinates: a few backtracked gradient steps
        zero_lt = np.zeros_like(x)
        cfg_small = PathConfig(max_inner=20, inner_tol=config.inner_tol)
        mask = np.ones_like(x, dtype=bool)
        mask[bsl] = False

        def val(p):
            return 0.5 * objective(p, bundle, spec)

        def grd(p):
            g = 0.5 * gradient(p, bundle, spec)
            g[~mask] = 0.0
            return g

        x = _inner_proximal(x, bundle, spec, zero_lt, cfg_small, val, grd)
        # beta block: modified soft-threshold on the Gauss-Newton model of f/n
        theta_len = bsl.start
        s_mat = bundle.index_design
        gamma = x[theta_len:theta_len + s_mat.shape[1]]
        b = s_mat @ gamma
        mprime = (basis_derivative(spec, b) @ x[-spec.n_coeffs:]
                  if spec.n_coeffs else np.zeros(n))
        jac = -(mprime[:, None] * bundle.shares)
        r = residuals(x, bundle, spec)
        grad_beta = (jac.T @ r) / n
        hess_beta = (jac.T @ jac) / n
        beta_new = modified_soft_threshold_step(x[bsl], grad_beta, hess_beta,
                                                scad_params,
                                                cap=config.sign_search_cap)
        x[bsl] = beta_new
        if np.abs(x - prev).max() < config.inner_tol:
            break
    return x


def find_lambda_max(bundle: DesignBundle, spec: SieveSpec, config: PathConfig,
                    start) -> float:
    """Smallest lambda that zeroes every penalized coefficient, by bisection."""
    bsl = _beta_slice(bundle)

    def all_zero(lam):
        entry = _solve_entry(lam, start, bundle, spec, config, 0)
        return entry.n_nonzero == 0

    probe = np.asarray(start, dtype=float).copy()
    probe[bsl] = 0.0
    g0 = np.abs(0.5 * gradient(probe, bundle, spec)[bsl]).max()
    hi = max(g0, 1e-8)
    for _ in range(40):
        if all_zero(hi):
            break
        hi *= 2.0
    lo = hi / 2.0
    for _ in range(40):
        if not all_zero(lo):
            break
        hi = lo
        lo /= 2.0
    else:
        return hi
    while hi / lo > 1.05:
        mid = np.sqrt(hi * lo)
        if all_zero(mid):
            hi = mid
        else:
            lo = mid
    return hi


def default_lambda_grid(lambda_max: float, config: PathConfig) -> np.ndarray:
    """Log-spaced grid from lambda_max/ratio^-1 up to lambda_max, ascending."""
    return np.geomspace(lambda_max * config.lambda_ratio, lambda_max,
                        config.n_lambdas)


def fit_penalized_path(bundle: DesignBundle, spec: SieveSpec,
                       lambda_grid=None,
                       config: PathConfig = PathConfig()) -> SolutionPath:
    """Solve the SCAD path over the tuning grid and pick the BIC minimizer.

    The path is anchored at the unpenalized fit; in the default
    sequential-warm mode each tuning value starts from the previous solution
    (ascending lambda), while parallel-cold starts every value at the anchor.
    Ties in BIC prefer the larger lambda (sparser) entry.
    """
    base = fit_plsim(bundle, spec, config.plsim)
    eff_spec = base.sieve_spec
    start = base.params()
    n_unpen = len(start) - bundle.shares.shape[1]
    if lambda_grid is None:
        lam_max = find_lambda_max(bundle, eff_spec, config, start)
        lambda_grid = default_lambda_grid(lam_max, config)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if len(lambda_grid) == 0 or (np.diff(lambda_grid) <= 0).any():
        raise DimensionMismatch("lambda_grid must be nonempty and strictly increasing")

    entries = []
    current = start
    for lam in lambda_grid:
        entry = _solve_entry(float(lam), current, bundle, eff_spec, config, n_unpen)
        entries.append(entry)
        if config.warm_mode == "sequential-warm":
            current = entry.params
    best_idx = 0
    for i, e in enumerate(entries):
        if e.bic <= entries[best_idx].bic:
            best_idx = i
    return SolutionPath(entries=tuple(entries), selected_index=best_idx,
                        base_fit=base, sieve_spec=eff_spec)


def select_class_count(path: SolutionPath) -> int:
    """Number of nonzero share coefficients at the BIC-selected entry."""
    count = path.selected.n_nonzero
    if count == 0:
        warnings.warn("selected entry zeroes every share coefficient",
                      DegenerateSelection, stacklevel=2)
    return count
