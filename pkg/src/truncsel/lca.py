"""Latent class analysis with covariate-dependent class priors, fit by EM.

The class membership prior is a multinomial logit in the group-level
covariates (the last class is the reference with a zero linear index), so
assignment into classes is non-random.  Manifest categorical responses are
conditionally independent given the class, each governed by a per-class
recruitment (response) probability table.  The E step computes posterior
membership probabilities by Bayes' rule; the M step re-estimates the
recruitment tables in closed form and the prior logit by Newton ascent on the
posterior-weighted multinomial-logit objective.  The latter reduces to the
plain posterior average when the slopes are held at zero.

Label switching across restarts is resolved by reordering classes by
descending within-class mean expert opinion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import SurveyDataset
from .errors import (DegenerateRow, EmptyClass, NonFiniteInput, NoConvergence,
                     OutOfRangeCategory, SeparationDetected)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class PriorParams:
    """Multinomial-logit parameters for classes 1..k-1 (class k is reference)."""

    intercepts: np.ndarray  # (k-1,)
    slopes: np.ndarray      # (k-1, L_x)

    def __post_init__(self):
        icpt = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        slp = np.asarray(self.slopes, dtype=float)
        if slp.ndim == 1:
            slp = slp.reshape(len(icpt), -1) if len(icpt) else slp.reshape(0, 0)
        if not (np.isfinite(icpt).all() and np.isfinite(slp).all()):
            raise NonFiniteInput("prior parameters must be finite")
        object.__setattr__(self, "intercepts", icpt)
        object.__setattr__(self, "slopes", slp)

    @property
    def k(self) -> int:
        return len(self.intercepts) + 1


@dataclass(frozen=True)
class PosteriorMatrix:
    values: np.ndarray  # (n, k), rows on the simplex

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if (v < -1e-12).any() or (v > 1 + 1e-12).any():
            raise NonFiniteInput("posterior entries outside [0, 1]")
        if np.abs(v.sum(axis=1) - 1.0).max() > 1e-10:
            raise NonFiniteInput("posterior rows must sum to 1 within 1e-10")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class LcaModel:
    k: int
    prior_params: PriorParams
    recruitment: np.ndarray          # (J, k, K_max), rows padded with zeros
    category_counts: np.ndarray      # (J,)
    log_likelihood: float
    n_iterations: int
    converged: bool
    loglik_path: np.ndarray = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "k": int(self.k),
            "prior_intercepts": self.prior_params.intercepts.tolist(),
            "prior_slopes": self.prior_params.slopes.tolist(),
            "recruitment": self.recruitment.tolist(),
            "category_counts": self.category_counts.tolist(),
            "log_likelihood": float(self.log_likelihood),
            "n_iterations": int(self.n_iterations),
            "converged": bool(self.converged),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LcaModel":
        return cls(
            k=int(d["k"]),
            prior_params=PriorParams(np.asarray(d["prior_intercepts"], dtype=float),
                                     np.asarray(d["prior_slopes"], dtype=float)),
            recruitment=np.asarray(d["recruitment"], dtype=float),
            category_counts=np.asarray(d["category_counts"], dtype=np.int64),
            log_likelihood=float(d["log_likelihood"]),
            n_iterations=int(d["n_iterations"]),
            converged=bool(d["converged"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LcaModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class LcaConfig:
    max_iter: int = 1000
    tol: float = 1e-8
    seed: int = 0
    n_restarts: int = 5


def prior_probs(prior_params: PriorParams, x, k: int = None) -> np.ndarray:
    """Multinomial-logit class prior at covariate vector(s) ``x``.

    Class k is the reference with linear index zero; the output rows sum to 1.
    """
    if k is None:
        k = prior_params.k
    if k != prior_params.k:
        raise NonFiniteInput(f"prior_params describe k={prior_params.k}, not {k}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if not np.isfinite(x2).all():
        raise NonFiniteInput("covariates must be finite")
    if k == 1:
        out = np.ones((len(x2), 1))
        return out[0] if single else out
    lin = prior_params.intercepts[None, :] + x2 @ prior_params.slopes.T
    lin = np.concatenate([lin, np.zeros((len(x2), 1))], axis=1)
    lin -= lin.max(axis=1, keepdims=True)
    e = np.exp(lin)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if single else out


def _log_recruitment(recruitment: np.ndarray) -> np.ndarray:
    return np.log(np.clip(recruitment, PROB_FLOOR, 1.0 - PROB_FLOOR))


def _class_conditional_logprob(recruitment, category_counts, responses) -> np.ndarray:
    """(n, k) matrix of log P(response pattern | class)."""
    responses = np.atleast_2d(np.asarray(responses, dtype=np.int64))
    n, J = responses.shape
    k = recruitment.shape[1]
    logpi = _log_recruitment(recruitment)
    out = np.zeros((n, k))
    for j in range(J):
        codes = responses[:, j]
        bad = (codes < 1) | (codes > category_counts[j])
        if bad.any():
            i = int(np.argmax(bad))
            raise OutOfRangeCategory(i, f"m{j + 1}", int(codes[i]),
                                     f"[1, {category_counts[j]}]")
        out += logpi[j, :, codes - 1]
    return out


def class_conditional_prob(recruitment, responses_row, t: int,
                           category_counts=None) -> float:
    """P(pattern | class t) as the product over manifest variables; t is 1-based."""
    recruitment = np.asarray(recruitment, dtype=float)
    if category_counts is None:
        category_counts = np.full(recruitment.shape[0], recruitment.shape[2],
                                  dtype=np.int64)
    logp = _class_conditional_logprob(recruitment, category_counts, responses_row)
    return float(np.exp(logp[0, t - 1]))


def e_step(model: LcaModel, survey: SurveyDataset) -> PosteriorMatrix:
    """Posterior class membership: prior times class-conditional, normalized."""
    post, _ = _posterior_and_loglik(model.prior_params, model.recruitment,
                                    model.category_counts, survey.responses, survey.x,
                                    model.k)
    return PosteriorMatrix(post)


def _posterior_and_loglik(prior_params, recruitment, category_counts,
                          responses, x, k):
    logc = _class_conditional_logprob(recruitment, category_counts, responses)
    lam = prior_probs(prior_params, x, k)
    logjoint = logc + np.log(np.clip(lam, PROB_FLOOR, 1.0))
    mx = logjoint.max(axis=1, keepdims=True)
    if not np.isfinite(mx).all():
        raise DegenerateRow(f"row {int(np.argmax(~np.isfinite(mx)))} has zero "
                            "likelihood under every class")
    e = np.exp(logjoint - mx)
    denom = e.sum(axis=1, keepdims=True)
    loglik = float((mx[:, 0] + np.log(denom[:, 0])).sum())
    return e / denom, loglik


def m_step_recruitment(posteriors, survey: SurveyDataset) -> np.ndarray:
    """Posterior-weighted response frequencies, renormalized per (j, t)."""
    post = posteriors.values if isinstance(posteriors, PosteriorMatrix) else np.asarray(posteriors)
    n, k = post.shape
    counts = survey.category_counts
    J = survey.n_manifest
    mass = post.sum(axis=0)
    if mass.min() < 1e-12:
        raise EmptyClass(f"class {int(np.argmin(mass)) + 1} has posterior mass "
                         f"{mass.min():.3e}")
    k_max = int(counts.max())
    recruitment = np.zeros((J, k, k_max))
    for j in range(J):
        codes = survey.responses[:, j] - 1
        for t in range(k):
            w = np.bincount(codes, weights=post[:, t], minlength=counts[j])
            recruitment[j, t, :counts[j]] = w / mass[t]
        # guard against accumulated rounding
        rs = recruitment[j, :, :counts[j]].sum(axis=1, keepdims=True)
        recruitment[j, :, :counts[j]] /= rs
    return recruitment


def m_step_prior(posteriors, x, max_iter: int = 100, tol: float = 1e-8,
                 start: PriorParams = None) -> PriorParams:
    """Posterior-weighted multinomial-logit fit by Newton ascent.

    Maximizes sum_i sum_t post(i, t) * ln lambda_t(x_i) over the logit
    parameters; converges when the mean-gradient norm drops below ``tol``.
    Reduces to matching the posterior means when x carries no signal.
    """
    post = posteriors.values if isinstance(posteriors, PosteriorMatrix) else np.asarray(posteriors)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, k = post.shape
    l_x = x.shape[1]
    if k == 1:
        return PriorParams(np.zeros(0), np.zeros((0, l_x)))
    design = np.concatenate([np.ones((n, 1)), x], axis=1)  # (n, 1+L)
    p = l_x + 1
    if start is not None and start.k == k:
        params = np.concatenate([start.intercepts[:, None], start.slopes],
                                axis=1).ravel()
    else:
        params = np.zeros(((k - 1) * p,))

    def q_value(vec):
        pp = PriorParams(vec.reshape(k - 1, p)[:, 0], vec.reshape(k - 1, p)[:, 1:])
        lam = prior_probs(pp, x, k)
        return float(np.sum(post * np.log(np.clip(lam, PROB_FLOOR, 1.0)))) / n

    for _ in range(max_iter):
        pp = PriorParams(params.reshape(k - 1, p)[:, 0], params.reshape(k - 1, p)[:, 1:])
        lam = prior_probs(pp, x, k)
        resid = post[:, :k - 1] - lam[:, :k - 1]          # (n, k-1)
        grad = (design.T @ resid).T.ravel() / n            # (k-1, p) flattened
        if np.linalg.norm(grad) < tol:
            break
        # Fisher information of the multinomial logit (negated Hessian)
        hess = np.zeros(((k - 1) * p, (k - 1) * p))
        for t in range(k - 1):
            for s in range(t, k - 1):
                wts = lam[:, t] * ((t == s) - lam[:, s])
                block = (design * wts[:, None]).T @ design / n
                hess[t * p:(t + 1) * p, s * p:(s + 1) * p] = block
                if s != t:
                    hess[s * p:(s + 1) * p, t * p:(t + 1) * p] = block
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(len(hess)), grad)
        except np.linalg.LinAlgError:
            step = grad
        # backtrack so the concave objective never decreases
        q0 = q_value(params)
        scale = 1.0
        for _ in range(40):
            trial = params + scale * step
            if q_value(trial) >= q0 - 1e-14:
                break
            scale *= 0.5
        params = params + scale * step
        if np.abs(params).max() > 1e4:
            raise SeparationDetected("prior logit parameters diverged "
                                     f"(|param| > 1e4)")
    return PriorParams(params.reshape(k - 1, p)[:, 0], params.reshape(k - 1, p)[:, 1:])


def _pooled_recruitment(survey: SurveyDataset, k: int) -> np.ndarray:
    counts = survey.category_counts
    k_max = int(counts.max())
    rec = np.zeros((len(counts), k, k_max))
    for j in range(len(counts)):
        freq = np.bincount(survey.responses[:, j] - 1,
                           minlength=counts[j]).astype(float)
        rec[j, :, :counts[j]] = freq / freq.sum()
    return rec


def _reorder_classes(prior_params, recruitment, post, opinions):
    """Sort classes by descending posterior-weighted mean opinion."""
    k = post.shape[1]
    mass = post.sum(axis=0)
    means = (post * opinions[:, None]).sum(axis=0) / np.maximum(mass, 1e-300)
    order = np.argsort(-means, kind="stable")
    if np.array_equal(order, np.arange(k)):
        return prior_params, recruitment, post
    rec = recruitment[:, order, :]
    post2 = post[:, order]
    if k == 1:
        return prior_params, rec, post2
    # re-express the logit with the new last class as reference
    a_icpt = np.concatenate([prior_params.intercepts, [0.0]])[order]
    a_slope = np.concatenate([prior_params.slopes,
                              np.zeros((1, prior_params.slopes.shape[1]))])[order]
    new = PriorParams(a_icpt[:-1] - a_icpt[-1], a_slope[:-1] - a_slope[-1])
    return new, rec, post2


def fit_lca(survey: SurveyDataset, k: int, config: LcaConfig = LcaConfig()):
    """Fit a k-class model by EM; returns (LcaModel, PosteriorMatrix).

    Restarts from seeded Dirichlet(1,..,1) posterior draws and keeps the run
    with the best final log-likelihood.  Classes are relabeled in decreasing
    order of within-class mean expert opinion so repeated fits are comparable.
    The log-likelihood is checked to be non-decreasing at every iteration
    (1e-8 numerical slack).
    """
    if k < 1:
        raise NonFiniteInput("k must be >= 1")
    if survey.n_experts <= k:
        raise EmptyClass(f"need more than k={k} experts, have {survey.n_experts}")
    counts = survey.category_counts
    l_x = survey.x.shape[1]

    if k == 1:
        rec = _pooled_recruitment(survey, 1)
        prior = PriorParams(np.zeros(0), np.zeros((0, l_x)))
        post, ll = _posterior_and_loglik(prior, rec, counts, survey.responses,
                                         survey.x, 1)
        model = LcaModel(k=1, prior_params=prior, recruitment=rec,
                         category_counts=counts, log_likelihood=ll,
                         n_iterations=1, converged=True,
                         loglik_path=np.array([ll]))
        return model, PosteriorMatrix(post)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    best = None
    for restart in range(config.n_restarts):
        rng = np.random.default_rng(seeds[restart])
        post = rng.dirichlet(np.ones(k), size=survey.n_experts)
        prior = m_step_prior(post, survey.x)
        rec = m_step_recruitment(post, survey)
        ll_prev = -np.inf
        path = []
        converged = False
        it = 0
        for it in range(1, config.max_iter + 1):
            post, ll = _posterior_and_loglik(prior, rec, counts, survey.responses,
                                             survey.x, k)
            if ll < ll_prev - 1e-8:
                raise AssertionError(
                    f"EM log-likelihood decreased: {ll_prev} -> {ll}")
            path.append(ll)
            if abs(ll - ll_prev) < config.tol:
                converged = True
                break
            ll_prev = ll
            rec = m_step_recruitment(post, survey)
            prior = m_step_prior(post, survey.x, start=prior)
        cand = (ll, prior, rec, post, it, converged, np.asarray(path))
        if best is None or cand[0] > best[0]:
            best = cand

    ll, prior, rec, post, it, converged, path = best
    prior, rec, post = _reorder_classes(prior, rec, post, survey.opinions.astype(float))
    model = LcaModel(k=k, prior_params=prior, recruitment=rec,
                     category_counts=counts, log_likelihood=ll, n_iterations=it,
                     converged=converged, loglik_path=path)
    if not converged:
        # best iterate still returned; callers inspect model.converged
        pass
    return model, PosteriorMatrix(post)


def assign_labels(model: LcaModel, responses, x) -> np.ndarray:
    """Hard labels: argmax posterior class, ties to the lowest class index."""
    post, _ = _posterior_and_loglik(model.prior_params, model.recruitment,
                                    model.category_counts, responses,
                                    np.atleast_2d(np.asarray(x, dtype=float)),
                                    model.k)
    return np.argmax(post, axis=1) + 1
