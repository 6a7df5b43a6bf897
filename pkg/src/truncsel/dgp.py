"""Monte Carlo data generation for the truncated selection model.

Each reference group is a combination of continuous group covariates and a
latent class.  A target participant share per group comes from a logistic
band within class-specific ranges.  The individual covariate z is drawn from
a finite mixture over a fixed dictionary of densities whose weights solve the
group's equilibrium condition: the expected participation probability under
the mixture must equal the target share.  Disturbance pairs share a Clayton
copula over non-normal mixture marginals (two normals plus a gamma, zero
mean).  Selection follows the latent utility difference: a row is observed
when its selection index minus the selection disturbance is nonnegative.

Group-level weights are solved per quantized (x, x_c, class) key (grid step
0.01) and reused across identical keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammainc, ndtr

from .data import SurveyDataset, TruncatedDataset
from .errors import EmptySelection, InfeasibleTarget, NonFiniteInput, QuadratureNotConverged
from .lca import PriorParams, prior_probs

QUANT_STEP = 0.01
WEIGHT_RESIDUAL_TOL = 1e-4
MIXTURE_WEIGHTS = (0.4, 0.5, 0.1)

# Response frequencies of the seven manifest categorical variables, one block
# of rows per class; zero-padded to the widest variable (4 categories).
MANIFEST_FREQS = (
    # class 1                class 2                  class 3
    (((0.6, 0.1, 0.3, 0.0), (0.4, 0.4, 0.2, 0.0), (0.3, 0.1, 0.6, 0.0))),
    (((0.2, 0.8, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0), (0.7, 0.3, 0.0, 0.0))),
    (((0.3, 0.6, 0.1, 0.0), (0.1, 0.4, 0.5, 0.0), (0.7, 0.2, 0.1, 0.0))),
    (((0.1, 0.6, 0.2, 0.1), (0.5, 0.3, 0.1, 0.1), (0.3, 0.1, 0.1, 0.5))),
    (((0.1, 0.1, 0.8, 0.0), (0.6, 0.3, 0.1, 0.0), (0.8, 0.1, 0.1, 0.0))),
    (((0.9, 0.02, 0.08, 0.0), (0.02, 0.08, 0.9, 0.0), (0.08, 0.9, 0.02, 0.0))),
    (((0.95, 0.05, 0.0, 0.0), (0.05, 0.95, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0))),
)


@dataclass(frozen=True)
class DisturbanceParams:
    """0.4 N(mu, sa^2) + 0.5 N(-mu, sb^2) + 0.1 Gamma(shape=mu*phi, rate=phi).

    The gamma reading (shape, rate) = (mu*phi, phi) gives mean mu and standard
    deviation sqrt(mu/phi), so the mixture mean is exactly zero.
    """

    mu: float = 4.0
    sigma_a: float = 3.5
    sigma_b: float = 2.5
    phi: float = 2.0


@dataclass(frozen=True)
class DictionaryDensity:
    """One mixture component for the individual covariate z."""

    family: str   # normal | gamma | reflected_lognormal
    mean: float
    sd: float

    def __post_init__(self):
        if self.family not in ("normal", "gamma", "reflected_lognormal"):
            raise NonFiniteInput(f"unknown density family {self.family!r}")
        if self.sd <= 0:
            raise NonFiniteInput("density sd must be positive")
        if self.family == "gamma" and self.mean <= 0:
            raise NonFiniteInput("gamma mean must be positive")
        if self.family == "reflected_lognormal" and self.mean >= 0:
            raise NonFiniteInput("reflected lognormal mean must be negative")

    def _lognormal_params(self):
        m, s = -self.mean, self.sd
        sig2 = np.log(1.0 + (s / m) ** 2)
        return np.log(m) - 0.5 * sig2, sig2

    def pdf(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.family == "normal":
            u = (z - self.mean) / self.sd
            return np.exp(-0.5 * u * u) / (self.sd * np.sqrt(2.0 * np.pi))
        if self.family == "gamma":
            shape = (self.mean / self.sd) ** 2
            rate = self.mean / self.sd ** 2
            out = np.zeros_like(z)
            pos = z > 0
            from scipy.stats import gamma as _gamma
            out[pos] = _gamma.pdf(z[pos], shape, scale=1.0 / rate)
            return out
        mu_log, sig2 = self._lognormal_params()
        out = np.zeros_like(z)
        neg = z < 0
        y = -z[neg]
        out[neg] = (np.exp(-(np.log(y) - mu_log) ** 2 / (2.0 * sig2))
                    / (y * np.sqrt(2.0 * np.pi * sig2)))
        return out

    def support(self):
        lo, hi = self.mean - 10.0 * self.sd, self.mean + 10.0 * self.sd
        if self.family == "gamma":
            lo = max(lo, 1e-12)
        if self.family == "reflected_lognormal":
            hi = min(hi, -1e-12)
        return lo, hi

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "normal":
            return rng.normal(self.mean, self.sd, size)
        if self.family == "gamma":
            shape = (self.mean / self.sd) ** 2
            return rng.gamma(shape, self.sd ** 2 / self.mean, size)
        mu_log, sig2 = self._lognormal_params()
        return -np.exp(rng.normal(mu_log, np.sqrt(sig2), size))


def default_dictionary() -> tuple:
    """Twelve densities spanning the z range the equilibrium can require."""
    normals = [(-1.5, 0.38), (-0.9, 0.25), (-0.25, 0.19), (0.4, 0.19),
               (1.0, 0.25), (1.5, 0.38)]
    gammas = [(2.25, 0.25), (3.5, 0.25), (5.0, 0.25)]
    rlogns = [(-0.63, 0.13), (-1.25, 0.25), (-2.25, 0.44)]
    return tuple([DictionaryDensity("normal", m, s) for m, s in normals]
                 + [DictionaryDensity("gamma", m, s) for m, s in gammas]
                 + [DictionaryDensity("reflected_lognormal", m, s) for m, s in rlogns])


def _extended_dictionary(dictionary) -> tuple:
    """Fallback entries pushing further into both tails."""
    return tuple(dictionary) + (DictionaryDensity("gamma", 7.5, 0.4),
                                DictionaryDensity("reflected_lognormal", -4.0, 0.8))


@dataclass(frozen=True)
class DgpSpec:
    n_population: int = 2000
    n_experts: int = 10000
    alpha: float = -30.0
    beta: float = 25.0
    delta: float = 1.5
    eta: float = 12.0
    theta1: float = 2.0
    theta2: float = 4.0
    class_count: int = 3
    share_ranges: tuple = ((0.05, 0.40), (0.40, 0.75), (0.65, 0.95))
    disturbances: DisturbanceParams = DisturbanceParams()
    copula_theta: float = 4.0
    density_dictionary: tuple = field(default_factory=default_dictionary)
    covariate_cov: tuple = ((2.0, 0.5 * np.sqrt(6.0)), (0.5 * np.sqrt(6.0), 3.0))
    manifest_freqs: tuple = MANIFEST_FREQS
    true_prior: PriorParams = None
    seed: int = 0

    def __post_init__(self):
        if self.true_prior is None:
            object.__setattr__(self, "true_prior", PriorParams(
                np.array([0.3, -0.2]), np.array([[0.8, -0.5], [-0.4, 0.6]])))
        if len(self.share_ranges) != self.class_count:
            raise NonFiniteInput("share_ranges must list one (low, high) per class")
        for lo, hi in self.share_ranges:
            if not (0.0 < lo < hi < 1.0):
                raise NonFiniteInput(f"share range ({lo}, {hi}) outside (0,1)")
        if self.copula_theta <= 0:
            raise NonFiniteInput("copula_theta must be positive")
        cov = np.asarray(self.covariate_cov, dtype=float)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise NonFiniteInput("covariate_cov must be positive definite")
        freqs = np.asarray(self.manifest_freqs, dtype=float)
        if freqs.shape[1] != self.class_count:
            raise NonFiniteInput("manifest_freqs classes != class_count")

    @property
    def category_counts(self) -> np.ndarray:
        freqs = np.asarray(self.manifest_freqs, dtype=float)
        return (freqs > 0).any(axis=1).sum(axis=1).astype(np.int64)

    def to_json_dict(self) -> dict:
        return {
            "n_population": self.n_population,
            "n_experts": self.n_experts,
            "alpha": self.alpha, "beta": self.beta, "delta": self.delta,
            "eta": self.eta, "theta1": self.theta1, "theta2": self.theta2,
            "class_count": self.class_count,
            "share_ranges": [list(r) for r in self.share_ranges],
            "disturbances": {"mu": self.disturbances.mu,
                             "sigma_a": self.disturbances.sigma_a,
                             "sigma_b": self.disturbances.sigma_b,
                             "phi": self.disturbances.phi},
            "copula_theta": self.copula_theta,
            "density_dictionary": [[d.family, d.mean, d.sd]
                                   for d in self.density_dictionary],
            "covariate_cov": np.asarray(self.covariate_cov).tolist(),
            "manifest_freqs": np.asarray(self.manifest_freqs).tolist(),
            "true_prior_intercepts": self.true_prior.intercepts.tolist(),
            "true_prior_slopes": self.true_prior.slopes.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DgpSpec":
        kwargs = {}
        for key in ("n_population", "n_experts", "alpha", "beta", "delta", "eta",
                    "theta1", "theta2", "class_count", "copula_theta", "seed"):
            if key in d:
                kwargs[key] = d[key]
        if "share_ranges" in d:
            kwargs["share_ranges"] = tuple(tuple(r) for r in d["share_ranges"])
        if "disturbances" in d:
            kwargs["disturbances"] = DisturbanceParams(**d["disturbances"])
        if "density_dictionary" in d:
            kwargs["density_dictionary"] = tuple(
                DictionaryDensity(f, m, s) for f, m, s in d["density_dictionary"])
        if "covariate_cov" in d:
            kwargs["covariate_cov"] = tuple(tuple(r) for r in d["covariate_cov"])
        if "manifest_freqs" in d:
            kwargs["manifest_freqs"] = tuple(
                tuple(tuple(c) for c in j) for j in d["manifest_freqs"])
        if "true_prior_intercepts" in d:
            kwargs["true_prior"] = PriorParams(
                np.asarray(d["true_prior_intercepts"], dtype=float),
                np.asarray(d["true_prior_slopes"], dtype=float))
        return cls(**kwargs)


@dataclass(frozen=True)
class MixtureWeights:
    w: np.ndarray
    residual: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if (w < -1e-12).any() or abs(w.sum() - 1.0) > 1e-10:
            raise NonFiniteInput("weights must lie on the simplex")
        object.__setattr__(self, "w", np.maximum(w, 0.0))


# --- disturbance mixture -------------------------------------------------------

def mixture_cdf(v, params: DisturbanceParams = DisturbanceParams()) -> np.ndarray:
    """Analytic CDF of the three-component disturbance mixture."""
    v = np.asarray(v, dtype=float)
    wa, wb, wg = MIXTURE_WEIGHTS
    shape = params.mu * params.phi
    out = (wa * ndtr((v - params.mu) / params.sigma_a)
           + wb * ndtr((v + params.mu) / params.sigma_b))
    pos = v > 0
    if np.any(pos):
        out = out + wg * np.where(pos, gammainc(shape, params.phi * np.clip(v, 0, None)), 0.0)
    return out


def mixture_quantile(u, params: DisturbanceParams = DisturbanceParams(),
                     tol: float = 1e-10) -> np.ndarray:
    """Quantile of the disturbance mixture by bisection on the analytic CDF."""
    u = np.asarray(u, dtype=float)
    lo = np.full(u.shape, params.mu - 14.0 * max(params.sigma_a, params.sigma_b) - abs(params.mu) * 4)
    hi = np.full(u.shape, params.mu + 14.0 * max(params.sigma_a, params.sigma_b) + abs(params.mu) * 4)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid, params) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if (hi - lo).max() < tol:
            break
    return 0.5 * (lo + hi)


def sample_clayton(n: int, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Clayton pairs by conditional inversion; returns an (n, 2) array."""
    if theta <= 0:
        raise NonFiniteInput("theta must be positive")
    u1 = rng.random(n)
    t = rng.random(n)
    u2 = ((t ** (-theta / (1.0 + theta)) - 1.0) * u1 ** (-theta) + 1.0) ** (-1.0 / theta)
    return np.column_stack([u1, u2])


def sample_disturbances(n: int, spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    """(n, 2) disturbance pairs: Clayton uniforms through the mixture quantile."""
    uu = sample_clayton(n, spec.copula_theta, rng)
    eps = mixture_quantile(uu.ravel(), spec.disturbances).reshape(n, 2)
    return eps


# --- equilibrium targets and weights ------------------------------------------

def target_share(x, x_c, t, ranges=None):
    """Class-t participant share target at group covariates (x, x_c)."""
    if ranges is None:
        ranges = ((0.05, 0.40), (0.40, 0.75), (0.65, 0.95))
    lo, hi = ranges[t - 1] if np.ndim(t) == 0 else (None, None)
    if np.ndim(t) != 0:
        ranges_arr = np.asarray(ranges, dtype=float)
        lo = ranges_arr[np.asarray(t) - 1, 0]
        hi = ranges_arr[np.asarray(t) - 1, 1]
    s = np.sqrt(ndtr(np.asarray(x, dtype=float)) * ndtr(np.asarray(x_c, dtype=float)))
    arg = -2.0 + 3.6 * s
    logistic = np.where(arg >= 0, 1.0 / (1.0 + np.exp(-arg)),
                        np.exp(arg) / (1.0 + np.exp(arg)))
    out = lo + (hi - lo) * logistic
    return float(out) if np.ndim(out) == 0 else out


def q_value(p, z, spec: DgpSpec, x_c=0.0) -> np.ndarray:
    """1 - F(alpha + beta*p + delta*x_c + eta*z) under the disturbance mixture."""
    arg = spec.alpha + spec.beta * np.asarray(p, dtype=float) \
        + spec.delta * np.asarray(x_c, dtype=float) \
        + spec.eta * np.asarray(z, dtype=float)
    out = 1.0 - mixture_cdf(arg, spec.disturbances)
    return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=64)
def _leggauss(n_nodes: int):
    return np.polynomial.legendre.leggauss(n_nodes)


@lru_cache(maxsize=512)
def _gl_nodes(density: DictionaryDensity, n_nodes: int):
    xs, ws = _leggauss(n_nodes)
    lo, hi = density.support()
    z = 0.5 * (hi - lo) * xs + 0.5 * (hi + lo)
    wt = 0.5 * (hi - lo) * ws * density.pdf(z)
    return z, wt


def _moment_rows(c_values, spec: DgpSpec, dictionary, n_nodes: int = 64) -> np.ndarray:
    """rows[i, l] = integral of (1 - F(c_i + eta z)) d density_l(z)."""
    c_values = np.asarray(c_values, dtype=float)
    out = np.empty((len(c_values), len(dictionary)))
    for l, dens in enumerate(dictionary):
        z, wt = _gl_nodes(dens, n_nodes)
        q = 1.0 - mixture_cdf(c_values[:, None] + spec.eta * z[None, :],
                              spec.disturbances)
        out[:, l] = q @ wt
    return out


# node ladder: start at the 64/128 pair and escalate while the refinement
# disagrees (steep participation curves need finer rules at large eta)
_NODE_LADDER = ((64, 128), (256, 512), (768, 1536))


def _select_nodes(c_probe, spec, dictionary) -> int:
    for base, check in _NODE_LADDER:
        mb = _moment_rows(c_probe, spec, dictionary, base)
        mc = _moment_rows(c_probe, spec, dictionary, check)
        if np.abs(mb - mc).max() <= 1e-8:
            return base
    raise QuadratureNotConverged(
        f"quadrature disagreement above 1e-8 even at {_NODE_LADDER[-1][0]} nodes")


def mixture_moment_matrix(spec: DgpSpec, targets, x, x_c) -> np.ndarray:
    """(class_count, L) matrix of expected participation per dictionary density.

    Gauss-Legendre over each density's effective support, verified against a
    doubled-node refinement (error <= 1e-8) with automatic escalation.
    """
    targets = np.asarray(targets, dtype=float)
    c = spec.alpha + spec.beta * targets + spec.delta * float(x_c)
    nodes = _select_nodes(c, spec, spec.density_dictionary)
    return _moment_rows(c, spec, spec.density_dictionary, nodes)


def _project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection of each row onto the probability simplex."""
    n, dim = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, dim + 1)
    cond = u - css / idx > 0
    rho = dim - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


def _solve_weights_batch(m_rows: np.ndarray, targets: np.ndarray,
                         tol: float = 1e-10, max_iter: int = 20000):
    """Projected gradient on 0.5*(m.w - target)^2 per row, batched.

    Stops when the gradient mapping (scaled step-to-projection displacement)
    falls below ``tol`` for every row.
    """
    n, dim = m_rows.shape
    w = np.full((n, dim), 1.0 / dim)
    lip = np.maximum(np.einsum("ij,ij->i", m_rows, m_rows), 1e-12)
    active = np.ones(n, dtype=bool)
    for it in range(max_iter):
        sub = np.flatnonzero(active)
        if len(sub) == 0:
            break
        ws = w[sub]
        ms = m_rows[sub]
        resid = np.einsum("ij,ij->i", ms, ws) - targets[sub]
        grad = resid[:, None] * ms
        w_new = _project_simplex_rows(ws - grad / lip[sub, None])
        move = np.abs(w_new - ws).max(axis=1) * lip[sub]
        w[sub] = w_new
        if it % 10 == 9 or it == max_iter - 1:
            active[sub] = move > tol
    final_resid = np.abs(np.einsum("ij,ij->i", m_rows, w) - targets)
    return w, final_resid


def solve_mixture_weights(m_matrix, targets, enforce_uniqueness: bool = False,
                          uniqueness_margin: float = 0.05) -> MixtureWeights:
    """Simplex-constrained least squares for the mixture weights.

    Minimizes the squared gap between achieved and target shares by projected
    gradient with exact simplex projection.  Optional inequality rows
    (targets perturbed by ``uniqueness_margin``) are handled as one-sided
    quadratic penalties.  Raises InfeasibleTarget when the residual exceeds
    1e-4.
    """
    m_matrix = np.atleast_2d(np.asarray(m_matrix, dtype=float))
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    n_rows, dim = m_matrix.shape
    if not enforce_uniqueness and n_rows == 1:
        w, resid = _solve_weights_batch(m_matrix, targets)
        weights = MixtureWeights(w[0], float(resid[0]))
    else:
        lower = targets - uniqueness_margin if enforce_uniqueness else None
        upper = targets + uniqueness_margin if enforce_uniqueness else None
        w = np.full(dim, 1.0 / dim)
        lip = float(np.sum(m_matrix * m_matrix)) + (2.0 if enforce_uniqueness else 0.0)
        for _ in range(50000):
            resid = m_matrix @ w - targets
            grad = m_matrix.T @ resid
            if enforce_uniqueness:
                viol_lo = np.minimum(m_matrix @ w - lower, 0.0)
                viol_hi = np.maximum(m_matrix @ w - upper, 0.0)
                grad = grad + m_matrix.T @ (viol_lo + viol_hi)
            w_new = _project_simplex_rows((w - grad / lip)[None, :])[0]
            if np.abs(w_new - w).max() * lip < 1e-10:
                w = w_new
                break
            w = w_new
        weights = MixtureWeights(w, float(np.linalg.norm(m_matrix @ w - targets)))
    if weights.residual > WEIGHT_RESIDUAL_TOL:
        raise InfeasibleTarget(
            f"dictionary cannot reach targets {targets} (residual "
            f"{weights.residual:.3e}); enlarge the density dictionary")
    return weights


# --- dataset generation ---------------------------------------------------------

@dataclass(frozen=True)
class PopulationData:
    """Complete pre-truncation sample, including latent pieces."""

    x: np.ndarray           # (N, 2) group covariates [x, x_c]
    classes: np.ndarray     # (N,) true class in 1..class_count
    shares: np.ndarray      # (N,) target participant share of the row's group
    z: np.ndarray           # (N,) individual covariate
    w: np.ndarray           # (N,) substantive covariate
    d: np.ndarray           # (N,) binary substantive covariate
    y1_star: np.ndarray     # (N,) latent outcomes
    y2_star: np.ndarray     # (N,) latent selection utilities
    responses: np.ndarray   # (N, J) manifest codes
    eps1: np.ndarray
    eps2: np.ndarray
    category_counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y1_star)

    def substantive_design(self) -> np.ndarray:
        return np.column_stack([self.w, self.d])


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=float) / QUANT_STEP).astype(np.int64)


def _draw_classes(spec: DgpSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lam = prior_probs(spec.true_prior, x, spec.class_count)
    u = rng.random(len(x))
    return (u[:, None] > np.cumsum(lam, axis=1)).sum(axis=1).astype(np.int64) + 1


def _draw_responses(spec: DgpSpec, classes: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    freqs = np.asarray(spec.manifest_freqs, dtype=float)
    n = len(classes)
    J = freqs.shape[0]
    out = np.empty((n, J), dtype=np.int64)
    u = rng.random((n, J))
    for j in range(J):
        cdf = np.cumsum(freqs[j], axis=1)          # (classes, K_max)
        row_cdf = cdf[classes - 1]                 # (n, K_max)
        out[:, j] = (u[:, j][:, None] > row_cdf).sum(axis=1) + 1
    return out


class WeightCache:
    """Idempotent map from quantized (x, x_c, class) keys to mixture weights.

    Cached values are deterministic functions of the key, so a cache may be
    shared across replications (and duplicated across workers) without
    changing any result.  Also memoizes the quadrature node count chosen for
    the dictionary it serves.
    """

    def __init__(self):
        self._store = {}
        self.n_nodes = None

    def __len__(self):
        return len(self._store)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        self._store.setdefault(key, value)


def weight_cache_key(spec: DgpSpec) -> tuple:
    """Spec fields the equilibrium weights depend on (for cache sharing)."""
    return (spec.alpha, spec.beta, spec.delta, spec.eta, spec.class_count,
            tuple(spec.share_ranges), spec.disturbances,
            tuple(spec.density_dictionary))


def _group_weights(spec: DgpSpec, x: np.ndarray, classes: np.ndarray,
                   cache: WeightCache, dictionary):
    """Solve (or reuse) equilibrium weights for every row's quantized group key.

    Returns (weights (N, L), residuals (N,), quantized targets (N,)).
    """
    qx = _quantize(x[:, 0])
    qxc = _quantize(x[:, 1])
    keys = np.stack([qx, qxc, classes], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_keys = len(uniq)
    l_dim = len(dictionary)
    w_keys = np.empty((n_keys, l_dim))
    resid_keys = np.empty(n_keys)
    target_keys = np.empty(n_keys)
    todo = []
    for i in range(n_keys):
        key = tuple(int(v) for v in uniq[i])
        hit = cache.get(key)
        if hit is not None:
            w_keys[i], resid_keys[i], target_keys[i] = hit
        else:
            todo.append(i)
    if todo:
        todo = np.asarray(todo)
        xs = uniq[todo, 0] * QUANT_STEP
        xcs = uniq[todo, 1] * QUANT_STEP
        ts = uniq[todo, 2]
        targets = target_share(xs, xcs, ts, spec.share_ranges)
        c = spec.alpha + spec.beta * targets + spec.delta * xcs
        # pick the node count on a probe spanning the index range, then reuse
        if cache.n_nodes is None:
            lo_c = spec.alpha + spec.beta * min(r[0] for r in spec.share_ranges) - 20.0
            hi_c = spec.alpha + spec.beta * max(r[1] for r in spec.share_ranges) + 20.0
            probe = np.linspace(lo_c, hi_c, 64)
            cache.n_nodes = _select_nodes(probe, spec, dictionary)
        n_nodes = cache.n_nodes
        chunk = 8192
        for lo in range(0, len(todo), chunk):
            sl = slice(lo, lo + chunk)
            rows64 = _moment_rows(c[sl], spec, dictionary, n_nodes)
            feas_lo = rows64.min(axis=1) - 1e-9
            feas_hi = rows64.max(axis=1) + 1e-9
            tg = targets[sl]
            bad = (tg < feas_lo) | (tg > feas_hi)
            if bad.any():
                i = int(np.argmax(bad))
                raise InfeasibleTarget(
                    f"target {tg[i]:.4f} outside achievable "
                    f"[{feas_lo[i]:.4f}, {feas_hi[i]:.4f}] for key "
                    f"(x={xs[sl][i]:.2f}, x_c={xcs[sl][i]:.2f}, class={ts[sl][i]})")
            ws, rs = _solve_weights_batch(rows64, tg)
            if rs.max() > WEIGHT_RESIDUAL_TOL:
                i = int(np.argmax(rs))
                raise InfeasibleTarget(
                    f"weight residual {rs.max():.2e} for key "
                    f"(x={xs[sl][i]:.2f}, x_c={xcs[sl][i]:.2f}, class={ts[sl][i]})")
            idx = todo[sl]
            w_keys[idx] = ws
            resid_keys[idx] = rs
            target_keys[idx] = tg
            for jj, i_key in enumerate(idx):
                key = tuple(int(v) for v in uniq[i_key])
                cache.put(key, (ws[jj].copy(), float(rs[jj]), float(tg[jj])))
    return w_keys[inverse], resid_keys[inverse], target_keys[inverse]


def _sample_mixture(weights: np.ndarray, dictionary, rng: np.random.Generator) -> np.ndarray:
    """One z draw per row from its own mixture weights."""
    n = len(weights)
    u = rng.random(n)
    comp = (u[:, None] > np.cumsum(weights, axis=1)).sum(axis=1)
    comp = np.clip(comp, 0, len(dictionary) - 1)
    # reproducible per-component draws: fixed component order, stable row order
    z = np.empty(n)
    for l, dens in enumerate(dictionary):
        rows = np.flatnonzero(comp == l)
        if len(rows):
            z[rows] = dens.sample(rng, len(rows))
    return z


def generate_survey(spec: DgpSpec, rng: np.random.Generator) -> SurveyDataset:
    """Expert sample: covariates, class-conditional responses, opinions.

    Opinions are independent Bernoulli draws with the expert's own group
    target share as success probability.
    """
    cov = np.asarray(spec.covariate_cov, dtype=float)
    x = rng.multivariate_normal([0.0, 0.0], cov, size=spec.n_experts)
    classes = _draw_classes(spec, x, rng)
    responses = _draw_responses(spec, classes, rng)
    shares = target_share(x[:, 0], x[:, 1], classes, spec.share_ranges)
    opinions = (rng.random(spec.n_experts) < shares).astype(np.int64)
    return SurveyDataset(x=x, responses=responses, opinions=opinions,
                         category_counts=spec.category_counts)


def generate_population(spec: DgpSpec, rng: np.random.Generator,
                        cache: WeightCache = None) -> PopulationData:
    """Complete (pre-truncation) sample per the selection model.

    The selection utility is the index alpha + beta*share + eta*z + delta*x_c
    minus the selection disturbance, so a draw participates when its
    disturbance falls below the index.  If the stock dictionary cannot reach
    some group's target share the dictionary is enlarged once with two
    further-tail entries before giving up.
    """
    if cache is None:
        cache = WeightCache()
    cov = np.asarray(spec.covariate_cov, dtype=float)
    n = spec.n_population
    x = rng.multivariate_normal([0.0, 0.0], cov, size=n)
    classes = _draw_classes(spec, x, rng)
    responses = _draw_responses(spec, classes, rng)
    dictionary = spec.density_dictionary
    try:
        weights, _, _ = _group_weights(spec, x, classes, cache, dictionary)
    except InfeasibleTarget:
        dictionary = _extended_dictionary(dictionary)
        weights, _, _ = _group_weights(spec, x, classes, WeightCache(), dictionary)
    z = _sample_mixture(weights, dictionary, rng)
    eps = sample_disturbances(n, spec, rng)
    shares = target_share(x[:, 0], x[:, 1], classes, spec.share_ranges)
    index = spec.alpha + spec.beta * shares + spec.eta * z + spec.delta * x[:, 1]
    y2_star = index - eps[:, 1]
    w = rng.normal(z, 1.0)
    d = (rng.random(n) < ndtr(z / 2.0)).astype(float)
    y1_star = spec.theta1 * w + spec.theta2 * d + eps[:, 0]
    return PopulationData(x=x, classes=classes, shares=shares, z=z, w=w, d=d,
                          y1_star=y1_star, y2_star=y2_star, responses=responses,
                          eps1=eps[:, 0], eps2=eps[:, 1],
                          category_counts=spec.category_counts)


def truncate(population: PopulationData) -> TruncatedDataset:
    """Keep rows whose latent selection utility is nonnegative."""
    keep = population.y2_star >= 0.0
    if not keep.any():
        raise EmptySelection("no rows satisfy the selection rule")
    return TruncatedDataset(
        y1=population.y1_star[keep],
        w=np.column_stack([population.w[keep], population.d[keep]]),
        z=population.z[keep][:, None],
        x=population.x[keep],
        responses=population.responses[keep],
        x_contextual_idx=(1,),
        category_counts=population.category_counts,
    )
