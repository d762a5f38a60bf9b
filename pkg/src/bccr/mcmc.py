"""Posterior sampler: conjugate Gibbs blocks plus Metropolis random-walk blocks.

Sweep order per iteration: labels (scanned with the random effects integrated
out) -> (k, weights) -> cluster coefficients and their hypers (also
marginalized over the random effects) -> random effects -> response precision
-> overall variance -> covariance mixing weights (MH, w-integrated target) ->
kernel ranges (MH) -> MFM rate (MH). Greedy exploration heuristics run only
during the discarded burn-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import cholesky_pd
from .mfm import (MixtureWeights, Partition, canonical_labels, conditional_k_sample,
                  conditional_weights, k_prior_logpmf)
from .model import (CovStructure, Hyperparameters, ModelState, SpatialDataset,
                    initial_state, per_obs_predictive_loglik, residuals)

PRECISION_FLOOR = 1e-12
ALPHA_FLOOR = 1e-10


@dataclass
class ChainConfig:
    n_iter: int = 25_000
    thin: int = 2
    burn_in: int = 9_500          # counted in retained (post-thinning) samples
    seed: int = 0
    proposal_scales: dict[str, float] = field(
        default_factory=lambda: {"alpha": 0.5, "kappa": 0.5, "lambda": 0.5})
    k_max: int = 20
    adapt: bool = True            # Robbins-Monro scale adaptation during burn-in
    prior_only: bool = False      # disable the likelihood (sampler validation)

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thinning interval must be >= 1")
        if self.n_iter // self.thin <= self.burn_in:
            raise ValueError("n_iter/thin must exceed burn_in")

    @property
    def n_retained(self) -> int:
        return self.n_iter // self.thin - self.burn_in


@dataclass
class ChainOutput:
    states: list[ModelState]
    per_obs_logdens: np.ndarray   # (T, n)
    acceptance: dict[str, float]

    @property
    def n_draws(self) -> int:
        return len(self.states)

    def label_draws(self) -> np.ndarray:
        return np.array([s.partition.labels for s in self.states])

    def site_beta_draws(self) -> np.ndarray:
        """(T, n, p) per-site coefficient draws, label-switching invariant."""
        return np.array([s.site_betas() for s in self.states])


def _draw_fresh_cluster(p: int, hyper: Hyperparameters, rng: np.random.Generator):
    mu = rng.normal(hyper.mu0, 1.0 / math.sqrt(hyper.tau0), size=p)
    tau = np.maximum(rng.gamma(hyper.tau_shape, 1.0 / hyper.tau_rate, size=p),
                     PRECISION_FLOOR)
    beta = rng.normal(mu, 1.0 / np.sqrt(tau))
    return beta, mu, tau


def update_labels(data: SpatialDataset, state: ModelState, hyper: Hyperparameters,
                  rng: np.random.Generator, prior_only: bool = False,
                  marg_prec: np.ndarray | None = None) -> None:
    """Sample each site's cluster label given (k, weights) and the likelihood.

    When ``marg_prec`` (the inverse of the marginal response covariance
    Sigma_w + tau_y^{-1} I) is supplied, the random effects are integrated out
    and the labels are scanned sequentially under the joint marginal; the
    caller must redraw the random effects immediately afterwards. Otherwise
    the update conditions on the current random effects. Unoccupied slots
    receive fresh coefficient draws from the base prior; the partition is
    compacted and relabeled afterwards.
    """
    k = state.weights.k
    p = data.p
    t = state.partition.k_active
    betas = np.empty((k, p))
    mus = np.empty((k, p))
    taus = np.empty((k, p))
    betas[:t], mus[:t], taus[:t] = state.betas, state.mus, state.taus
    for h in range(t, k):
        betas[h], mus[h], taus[h] = _draw_fresh_cluster(p, hyper, rng)

    logpi = np.log(state.weights.pi)
    if prior_only or marg_prec is None:
        logp = logpi[None, :].repeat(data.n, axis=0)
        if not prior_only:
            mean = data.x @ betas.T + state.w[:, None]      # (n, k)
            logp = logp + 0.5 * math.log(state.tau_y / (2.0 * math.pi)) \
                - 0.5 * state.tau_y * (data.y[:, None] - mean) ** 2
        if not np.all(np.isfinite(np.max(logp, axis=1))):
            raise FloatingPointError("non-finite label log-probabilities")
        # Gumbel-max categorical draw per site
        gumbel = -np.log(-np.log(rng.random(logp.shape)))
        raw = np.argmax(logp + gumbel, axis=1)
    else:
        # collapsed scan: only site i's mean changes, so the marginal
        # log-density shift is delta * (P r)_i - delta^2 P_ii / 2
        mean = data.x @ betas.T                             # (n, k)
        mu_cur = mean[np.arange(data.n), state.partition.labels]
        r = data.y - mu_cur
        pr = marg_prec @ r
        pdiag = np.diag(marg_prec)
        raw = np.empty(data.n, dtype=int)
        gumbel = -np.log(-np.log(rng.random((data.n, k))))
        for i in range(data.n):
            delta = mean[i] - mu_cur[i]
            logp_i = logpi + delta * pr[i] - 0.5 * delta**2 * pdiag[i]
            if not np.isfinite(logp_i.max()):
                raise FloatingPointError("non-finite label log-probabilities")
            raw[i] = int(np.argmax(logp_i + gumbel[i]))
            d = mean[i, raw[i]] - mu_cur[i]
            if d != 0.0:
                pr -= d * marg_prec[:, i]
                mu_cur[i] = mean[i, raw[i]]

    new_labels = canonical_labels(raw)
    order = []
    seen = set()
    for lab in raw:
        if lab not in seen:
            seen.add(lab)
            order.append(lab)
    order = np.array(order, dtype=int)
    state.partition = Partition(new_labels)
    state.betas = betas[order]
    state.mus = mus[order]
    state.taus = taus[order]


def _guided_moves(data: SpatialDataset, state: ModelState,
                  rng: np.random.Generator, marg_prec: np.ndarray) -> None:
    """Burn-in heuristic: try a two-plane split of each active cluster and a
    least-squares merge of each cluster pair; apply the best candidate only
    if it improves a penalized marginal fit.

    Fresh clusters drawn from the base prior rarely land near a distant
    coefficient plane, which can trap the chain in an under-clustered mode,
    while weak per-site evidence lets single-site scans shard clusters.
    Candidates are scored by the quadratic form of the w-integrated
    likelihood (its log-determinant does not depend on labels or
    coefficients) with a BIC-style per-cluster penalty, so destructive moves
    are never applied. Not a valid MCMC move; must only run during discarded
    burn-in.
    """
    labels = state.partition.labels
    p = data.p
    k = state.partition.k_active
    mu_cur = np.einsum("ij,ij->i", data.x, state.betas[labels])
    r0 = data.y - mu_cur
    score0 = -0.5 * float(r0 @ marg_prec @ r0)
    penalty = 0.5 * p * math.log(data.n)
    best = None

    def score_of(mu_cand, dk):
        rc = data.y - mu_cand
        return -0.5 * float(rc @ marg_prec @ rc) - penalty * dk

    for h in range(k if k < 8 else 0):
        members = np.flatnonzero(labels == h)
        if len(members) < max(2 * (p + 1), 8):
            continue
        xm = data.x[members]
        ym = data.y[members]

        def ols(mask):
            xg = xm[mask]
            fit, *_ = np.linalg.lstsq(xg.T @ xg + 1e-8 * np.eye(p),
                                      xg.T @ ym[mask], rcond=None)
            return fit

        # two-plane refinement (hard-EM mixture of regressions): seed by
        # residual sign, then alternate nearest-plane assignment and refit
        r = ym - xm @ state.betas[h]
        upper = r > np.median(r)
        if not upper.any() or upper.all():
            continue
        for _ in range(10):
            b1, b2 = ols(upper), ols(~upper)
            new_upper = np.abs(ym - xm @ b1) <= np.abs(ym - xm @ b2)
            if new_upper.sum() < p + 2 or (~new_upper).sum() < p + 2:
                break
            if np.array_equal(new_upper, upper):
                break
            upper = new_upper
        b1, b2 = ols(upper), ols(~upper)
        mu_cand = mu_cur.copy()
        mu_cand[members[upper]] = xm[upper] @ b1
        mu_cand[members[~upper]] = xm[~upper] @ b2
        score = score_of(mu_cand, 1)
        if score > score0 and (best is None or score > best[0]):
            raw = labels.copy()
            raw[members[~upper]] = k
            best = (score, raw, {h: b1, k: b2})

    for g in range(k - 1):
        for h in range(g + 1, k):
            idx = np.flatnonzero((labels == g) | (labels == h))
            xg = data.x[idx]
            fit, *_ = np.linalg.lstsq(xg.T @ xg + 1e-8 * np.eye(p),
                                      xg.T @ data.y[idx], rcond=None)
            mu_cand = mu_cur.copy()
            mu_cand[idx] = xg @ fit
            score = score_of(mu_cand, -1)
            if score > score0 and (best is None or score > best[0]):
                raw = labels.copy()
                raw[raw == h] = g
                best = (score, raw, {g: fit})

    if best is None:
        return
    _, raw, fits = best

    order = []
    seen = set()
    for lab in raw:
        if lab not in seen:
            seen.add(lab)
            order.append(lab)
    k_new = len(order)
    betas = np.empty((k_new, p))
    mus = np.empty((k_new, p))
    taus = np.empty((k_new, p))
    for new_lab, old_lab in enumerate(order):
        if old_lab in fits:
            betas[new_lab] = fits[old_lab]
            mus[new_lab] = fits[old_lab]
            taus[new_lab] = 1.0
        else:
            betas[new_lab] = state.betas[old_lab]
            mus[new_lab] = state.mus[old_lab]
            taus[new_lab] = state.taus[old_lab]
    state.partition = Partition(canonical_labels(raw))
    state.betas, state.mus, state.taus = betas, mus, taus
    state.weights = MixtureWeights(np.full(k_new, 1.0 / k_new), k_new)


def _guided_reanchor(data: SpatialDataset, state: ModelState, sweep,
                     rng: np.random.Generator) -> None:
    """Burn-in heuristic: propose whole-state packages (k-plane partition,
    least-squares coefficients, residual-matched precisions, nugget-heavy
    mixing weights) and adopt the best only if it beats the current state
    under a penalized w-integrated posterior score.

    Blocked Gibbs cannot jump between (merged labels, inflated variance) and
    (separated labels, small variance) in one step because every block
    conditions on the others; this move proposes that transition jointly.
    The current state is scored identically and candidates are only adopted
    on improvement. Not a valid MCMC move; must only run during discarded
    burn-in.
    """
    from .model import _kplane_fit
    hy = sweep.hyper
    p = data.p
    eye = np.eye(data.n)
    penalty = 0.5 * p * math.log(data.n)

    def score(labels_c, betas_c, sigma2_c, tau_y_c, alphas_c, k_c):
        """Profile marginal score: the overall covariance scale is optimized
        in closed form so states are compared on structure, not on how well
        their running scale happens to be adapted."""
        mu = np.einsum("ij,ij->i", data.x, betas_c[labels_c])
        r = data.y - mu
        h = sweep._mix(alphas_c) if sweep.bases else sweep.h
        try:
            c_chol = cholesky_pd(sigma2_c * h + eye / tau_y_c)
        except Exception:
            return -np.inf, 1.0
        u = solve_triangular(c_chol, r, lower=True, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(c_chol))))
        scale = float(np.clip((u @ u) / data.n, 1e-3, 1e3))
        lp = -0.5 * (data.n * (math.log(2.0 * math.pi) + math.log(scale) + 1.0)
                     + logdet)
        tau_s = tau_y_c / scale
        sig_s = sigma2_c * scale
        lp += hy.a1 * math.log(tau_s) - hy.b1 * tau_s
        lp += -(hy.a2 + 1.0) * math.log(sig_s) - hy.b2 / sig_s
        lp += k_prior_logpmf(k_c, state.lam)
        return lp - penalty * k_c, scale

    current, _ = score(state.partition.labels, state.betas, state.sigma2,
                       state.tau_y, state.alphas, state.partition.k_active)
    alpha_sets = [state.alphas]
    if sweep.cov.sample_alpha and len(state.alphas) > 1:
        nug = np.full(len(state.alphas), 0.15 / (len(state.alphas) - 1))
        nug[0] = 0.85
        alpha_sets.append(nug)
    best = None
    for k_c in (2, 3, 4):
        labels_c = canonical_labels(_kplane_fit(data, rng, k_c,
                                                restarts=3, max_iter=15)[0])
        k_eff = int(labels_c.max()) + 1
        betas_c = np.empty((k_eff, p))
        ok = True
        for g in range(k_eff):
            m = labels_c == g
            if m.sum() < p + 1:
                ok = False
                break
            xg = data.x[m]
            betas_c[g], *_ = np.linalg.lstsq(xg.T @ xg + 1e-8 * np.eye(p),
                                             xg.T @ data.y[m], rcond=None)
        if not ok:
            continue
        resid = data.y - np.einsum("ij,ij->i", data.x, betas_c[labels_c])
        v = max(float(np.var(resid)), 1e-4)
        for alphas_c in alpha_sets:
            sc, scale = score(labels_c, betas_c, v / 2.0, 2.0 / v,
                              alphas_c, k_eff)
            if sc > current and (best is None or sc > best[0]):
                best = (sc, labels_c, betas_c, v * scale, alphas_c, k_eff)
    if best is None:
        return
    _, labels_c, betas_c, v, alphas_c, k_eff = best
    state.partition = Partition(labels_c)
    state.betas = betas_c
    state.mus = betas_c.copy()
    state.taus = np.ones((k_eff, p))
    state.weights = MixtureWeights(np.full(k_eff, 1.0 / k_eff), k_eff)
    state.sigma2 = v / 2.0
    state.tau_y = 2.0 / v
    if alphas_c is not state.alphas:
        state.alphas = alphas_c.copy()
        sweep.refresh(state)


def update_k_and_weights(state: ModelState, hyper: Hyperparameters,
                         rng: np.random.Generator) -> None:
    cfg = hyper.mfm
    k = conditional_k_sample(state.partition, cfg, rng, lam=state.lam)
    state.weights = conditional_weights(k, state.partition, cfg.gamma, rng)


def update_cluster_coefficients(data: SpatialDataset, state: ModelState,
                                hyper: Hyperparameters, rng: np.random.Generator,
                                prior_only: bool = False) -> None:
    """Coordinate-wise conjugate Normal updates for cluster coefficients,
    followed by Normal/Gamma updates of their cluster-level hypers."""
    labels = state.partition.labels
    for h in range(state.partition.k_active):
        members = np.flatnonzero(labels == h)
        xh = data.x[members]
        yh = data.y[members] - state.w[members]
        for l in range(data.p):
            if prior_only or len(members) == 0:
                prec = state.taus[h, l]
                mean = state.mus[h, l]
            else:
                others = yh - xh @ state.betas[h] + xh[:, l] * state.betas[h, l]
                prec = state.taus[h, l] + state.tau_y * np.sum(xh[:, l] ** 2)
                mean = (state.taus[h, l] * state.mus[h, l]
                        + state.tau_y * np.sum(xh[:, l] * others)) / prec
            state.betas[h, l] = rng.normal(mean, 1.0 / math.sqrt(prec))
    # hyper-means and hyper-precisions, conjugate given the coefficients
    prec0 = hyper.tau0 + state.taus
    mean0 = (hyper.tau0 * hyper.mu0 + state.taus * state.betas) / prec0
    state.mus = rng.normal(mean0, 1.0 / np.sqrt(prec0))
    shape = hyper.tau_shape + 0.5
    rate = hyper.tau_rate + 0.5 * (state.betas - state.mus) ** 2
    state.taus = np.maximum(rng.gamma(shape, 1.0 / rate), PRECISION_FLOOR)


def update_cluster_coefficients_marginal(data: SpatialDataset, state: ModelState,
                                         hyper: Hyperparameters,
                                         rng: np.random.Generator,
                                         marg_prec: np.ndarray) -> None:
    """Coordinate-wise conjugate coefficient updates with the random effects
    integrated out: y | z, beta ~ N(X beta_z, Sigma_w + tau_y^{-1} I), whose
    inverse is ``marg_prec``. The caller must redraw the random effects before
    any later block conditions on them. Cluster-level hypers update as usual."""
    labels = state.partition.labels
    mean_site = np.einsum("ij,ij->i", data.x, state.site_betas())
    for h in range(state.partition.k_active):
        mask = labels == h
        for l in range(data.p):
            v = np.where(mask, data.x[:, l], 0.0)
            pv = marg_prec @ v
            r_tilde = data.y - mean_site + v * state.betas[h, l]
            prec = state.taus[h, l] + float(v @ pv)
            mean = (state.taus[h, l] * state.mus[h, l] + float(pv @ r_tilde)) / prec
            new = rng.normal(mean, 1.0 / math.sqrt(prec))
            mean_site += v * (new - state.betas[h, l])
            state.betas[h, l] = new
    prec0 = hyper.tau0 + state.taus
    mean0 = (hyper.tau0 * hyper.mu0 + state.taus * state.betas) / prec0
    state.mus = rng.normal(mean0, 1.0 / np.sqrt(prec0))
    shape = hyper.tau_shape + 0.5
    rate = hyper.tau_rate + 0.5 * (state.betas - state.mus) ** 2
    state.taus = np.maximum(rng.gamma(shape, 1.0 / rate), PRECISION_FLOOR)


def update_random_effects(data: SpatialDataset, state: ModelState, h: np.ndarray,
                          h_chol: np.ndarray, rng: np.random.Generator,
                          prior_only: bool = False) -> None:
    """Draw the random-effect vector from its Gaussian full conditional.

    Uses the prior-draw-plus-correction (Matheron) identity so only one
    factorization of (Sigma_w + tau_y^{-1} I) is needed per call. ``h`` is the
    unit-variance mixture matrix with lower Cholesky factor ``h_chol``.
    """
    n = data.n
    sig = math.sqrt(state.sigma2)
    w_prior = sig * (h_chol @ rng.standard_normal(n))
    if prior_only:
        state.w = w_prior
        return
    resid = data.y - np.einsum("ij,ij->i", data.x, state.site_betas())
    noise = rng.standard_normal(n) / math.sqrt(state.tau_y)
    cov_w = state.sigma2 * h
    l_sum = cholesky_pd(cov_w + np.eye(n) / state.tau_y)
    correction = cho_solve((l_sum, True), resid - w_prior - noise, check_finite=False)
    state.w = w_prior + cov_w @ correction


def update_precisions(data: SpatialDataset, state: ModelState, h_chol: np.ndarray,
                      hyper: Hyperparameters, rng: np.random.Generator,
                      prior_only: bool = False) -> None:
    """Conjugate Gamma / InverseGamma updates of the response precision and
    the overall random-effect variance."""
    if prior_only:
        state.tau_y = max(rng.gamma(hyper.a1, 1.0 / hyper.b1), PRECISION_FLOOR)
    else:
        r = residuals(data, state)
        shape = hyper.a1 + 0.5 * data.n
        rate = hyper.b1 + 0.5 * float(r @ r)
        state.tau_y = max(rng.gamma(shape, 1.0 / rate), PRECISION_FLOOR)
    u = solve_triangular(h_chol, state.w, lower=True)
    shape2 = hyper.a2 + 0.5 * data.n
    scale2 = hyper.b2 + 0.5 * float(u @ u)
    state.sigma2 = max(scale2 / rng.gamma(shape2, 1.0), PRECISION_FLOOR)


def metropolis_step(log_target, current: np.ndarray, scale: float,
                    rng: np.random.Generator,
                    lp_current: float | None = None):
    """One Gaussian random-walk Metropolis step on an unconstrained block.

    ``log_target`` must include any change-of-variables Jacobian. Returns
    (value, accepted, log-target at value). Non-finite proposal densities are
    auto-rejected.
    """
    current = np.atleast_1d(np.asarray(current, dtype=float))
    if lp_current is None:
        lp_current = log_target(current)
    proposal = current + scale * rng.standard_normal(len(current))
    lp_prop = log_target(proposal)
    if np.isfinite(lp_prop) and math.log(rng.random() + 1e-300) < lp_prop - lp_current:
        return proposal, True, lp_prop
    return current, False, lp_current


def _softmax0(u: np.ndarray) -> np.ndarray:
    v = np.concatenate(([0.0], u))
    v -= v.max()
    e = np.exp(v)
    return e / e.sum()


def _floor_simplex(a: np.ndarray) -> np.ndarray:
    a = np.clip(a, ALPHA_FLOOR, None)
    return a / a.sum()


class _Sweep:
    """Per-chain caches for the covariance structure and MH bookkeeping."""

    def __init__(self, data, hyper, cov, cfg, state):
        self.data = data
        self.hyper = hyper
        self.cov = cov
        self.cfg = cfg
        self.scales = dict(cfg.proposal_scales)
        self.accepts = {"alpha": 0, "kappa": 0, "lambda": 0}
        self.attempts = dict(self.accepts)
        self.bases = cov.bases(state.kappas)
        self.refresh(state)

    def refresh(self, state):
        self.h = self.cov.unit_mixture(state.alphas, state.kappas) \
            if not self.bases else self._mix(state.alphas)
        self.h_chol = cholesky_pd(self.h)

    def _mix(self, alphas):
        if self.cov.kind in ("exponential", "gaussian"):
            return self.bases[0]
        n = self.cov.n
        h = alphas[0] * np.eye(n)
        for a, b in zip(alphas[1:], self.bases):
            h += a * b
        return h

    def _w_logdens(self, state, h=None, h_chol=None):
        """log MVN(w; 0, sigma2 * H) using a cached factor when available."""
        n = len(state.w)
        if h_chol is None:
            h_chol = cholesky_pd(h)
        u = solve_triangular(h_chol, state.w, lower=True, check_finite=False)
        logdet = n * math.log(state.sigma2) + 2.0 * float(np.sum(np.log(np.diag(h_chol))))
        return -0.5 * (n * math.log(2.0 * math.pi) + logdet + (u @ u) / state.sigma2)

    def _log_invgamma(self, x):
        a, b = self.hyper.kappa_shape, 1.0 / self.hyper.kappa_rate
        return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x

    def update_alpha(self, state, rng):
        if not self.cov.sample_alpha:
            return
        nu = self.hyper.nu_for(len(self.bases))

        def target(u, cached=None):
            a = _floor_simplex(_softmax0(u))
            try:
                if cached is not None:
                    lp = cached
                else:
                    lp = self._w_logdens(state, h=self._mix(a))
            except Exception:
                return -np.inf
            return lp + float(np.sum(nu * np.log(a)))  # Dirichlet kernel + Jacobian

        a0 = _floor_simplex(state.alphas)
        u0 = np.log(a0[1:]) - math.log(a0[0])
        lp_cur = target(u0, cached=self._w_logdens(state, h_chol=self.h_chol))
        u1, acc, _ = metropolis_step(target, u0, self.scales["alpha"], rng,
                                     lp_current=lp_cur)
        self.attempts["alpha"] += 1
        if acc:
            self.accepts["alpha"] += 1
            state.alphas = _floor_simplex(_softmax0(u1))
            self.refresh(state)
        return acc

    def update_kappas(self, state, rng):
        if self.cov.n_kappas == 0:
            return
        for j in range(self.cov.n_kappas):
            def target(logk, j=j, cached=None):
                kappa = max(float(np.exp(logk[0])), PRECISION_FLOOR)
                try:
                    if cached is not None:
                        lp = cached
                    else:
                        bases = list(self.bases)
                        bases[j] = self.cov.base_j(j, kappa)
                        lp = self._w_logdens(state, h=self._mix_with(state.alphas, bases))
                except Exception:
                    return -np.inf
                # inverse-gamma prior on kappa plus log-scale Jacobian
                return lp + self._log_invgamma(kappa) + math.log(kappa)

            cur = np.array([math.log(state.kappas[j])])
            lp_cur = target(cur, cached=self._w_logdens(state, h_chol=self.h_chol))
            new, acc, _ = metropolis_step(target, cur, self.scales["kappa"], rng,
                                          lp_current=lp_cur)
            self.attempts["kappa"] += 1
            if acc:
                self.accepts["kappa"] += 1
                state.kappas[j] = max(float(np.exp(new[0])), PRECISION_FLOOR)
                self.bases[j] = self.cov.base_j(j, state.kappas[j])
                self.refresh(state)

    def _mix_with(self, alphas, bases):
        if self.cov.kind in ("exponential", "gaussian"):
            return bases[0]
        n = self.cov.n
        h = alphas[0] * np.eye(n)
        for a, b in zip(alphas[1:], bases):
            h += a * b
        return h

    def _marg_logdens(self, r, h, sigma2, tau_y):
        """log MVN(r; 0, sigma2 H + I / tau_y): likelihood with w integrated out."""
        c_chol = cholesky_pd(sigma2 * h + np.eye(len(r)) / tau_y)
        u = solve_triangular(c_chol, r, lower=True, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(c_chol))))
        return -0.5 * (len(r) * math.log(2.0 * math.pi) + logdet + u @ u)

    def update_alpha_marg(self, state, r, rng):
        """MH on the mixing weights against the w-integrated likelihood.

        Conditioning alpha on a drawn w is self-reinforcing: a w realized
        under smooth kernels looks smooth, which keeps alpha smooth even when
        the regression residuals are plainly independent. The marginal target
        sees the residuals directly.
        """
        if not self.cov.sample_alpha:
            return

        nu = self.hyper.nu_for(len(self.bases))

        def target(u):
            a = _floor_simplex(_softmax0(u))
            try:
                lp = self._marg_logdens(r, self._mix(a), state.sigma2,
                                        state.tau_y)
            except Exception:
                return -np.inf
            return lp + float(np.sum(nu * np.log(a)))  # Dirichlet + Jacobian

        a0 = _floor_simplex(state.alphas)
        u0 = np.log(a0[1:]) - math.log(a0[0])
        u1, acc, _ = metropolis_step(target, u0, self.scales["alpha"], rng)
        self.attempts["alpha"] += 1
        if acc:
            self.accepts["alpha"] += 1
            state.alphas = _floor_simplex(_softmax0(u1))
            self.refresh(state)

    def update_kappas_marg(self, state, r, rng):
        if self.cov.n_kappas == 0:
            return
        for j in range(self.cov.n_kappas):
            def target(logk, j=j):
                kappa = max(float(np.exp(logk[0])), PRECISION_FLOOR)
                try:
                    bases = list(self.bases)
                    bases[j] = self.cov.base_j(j, kappa)
                    lp = self._marg_logdens(r, self._mix_with(state.alphas,
                                                              bases),
                                            state.sigma2, state.tau_y)
                except Exception:
                    return -np.inf
                return lp + self._log_invgamma(kappa) + math.log(kappa)

            cur = np.array([math.log(state.kappas[j])])
            new, acc, _ = metropolis_step(target, cur, self.scales["kappa"],
                                          rng)
            self.attempts["kappa"] += 1
            if acc:
                self.accepts["kappa"] += 1
                state.kappas[j] = max(float(np.exp(new[0])), PRECISION_FLOOR)
                self.bases[j] = self.cov.base_j(j, state.kappas[j])
                self.refresh(state)

    def update_lambda(self, state, rng):
        if not self.hyper.mfm.learn_lambda:
            return
        k = state.weights.k
        mu, sd = self.hyper.lambda_mu, self.hyper.lambda_sd

        def target(loglam):
            lam = max(float(np.exp(loglam[0])), PRECISION_FLOOR)
            logl = math.log(lam)
            lp = -logl - math.log(sd) - 0.5 * math.log(2.0 * math.pi) \
                - 0.5 * ((logl - mu) / sd) ** 2
            lp += k_prior_logpmf(k, lam)
            return lp + logl  # log-scale Jacobian
        cur = np.array([math.log(state.lam)])
        new, acc, _ = metropolis_step(target, cur, self.scales["lambda"], rng)
        self.attempts["lambda"] += 1
        if acc:
            self.accepts["lambda"] += 1
            state.lam = max(float(np.exp(new[0])), PRECISION_FLOOR)

    def adapt(self, iteration):
        # Robbins-Monro toward ~0.3 acceptance; burn-in only
        step = (iteration + 1) ** -0.6
        for block in self.scales:
            if self.attempts[block] == 0:
                continue
            rate = self.accepts[block] / self.attempts[block]
            self.scales[block] = float(np.clip(
                self.scales[block] * math.exp(step * (rate - 0.3)), 1e-4, 50.0))


def run_chain(data: SpatialDataset, hyper: Hyperparameters, cfg: ChainConfig,
              cov: CovStructure | None = None,
              rng: np.random.Generator | None = None) -> ChainOutput:
    """Run one MCMC chain and return thinned post-burn-in draws.

    Fully reproducible from ``cfg.seed`` (unless an explicit generator is
    supplied, e.g. by the replicate harness).
    """
    if cov is None:
        cov = CovStructure("acac", data)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    hyper.mfm.k_max = cfg.k_max

    state = initial_state(data, hyper, cov, rng)
    sweep = _Sweep(data, hyper, cov, cfg, state)

    states: list[ModelState] = []
    logdens_rows: list[np.ndarray] = []
    burn_iters = cfg.burn_in * cfg.thin
    eye = np.eye(data.n)
    for it in range(cfg.n_iter):
        try:
            if cfg.prior_only:
                marg_prec = None
            else:
                c_chol = cholesky_pd(state.sigma2 * sweep.h + eye / state.tau_y)
                marg_prec = cho_solve((c_chol, True), eye, check_finite=False)
            # with weak per-site evidence a single scan mixes slowly; a few
            # consecutive scans of the same conditional are still exact Gibbs
            for _ in range(1 if marg_prec is None else 3):
                update_labels(data, state, hyper, rng,
                              prior_only=cfg.prior_only, marg_prec=marg_prec)
            update_k_and_weights(state, hyper, rng)
            if marg_prec is None:
                update_cluster_coefficients(data, state, hyper, rng,
                                            prior_only=cfg.prior_only)
                update_random_effects(data, state, sweep.h, sweep.h_chol, rng,
                                      prior_only=cfg.prior_only)
                update_precisions(data, state, sweep.h_chol, hyper, rng,
                                  prior_only=cfg.prior_only)
                sweep.update_alpha(state, rng)
                sweep.update_kappas(state, rng)
            else:
                # labels and coefficients are drawn with w integrated out; w
                # is redrawn before anything downstream conditions on it
                update_cluster_coefficients_marginal(data, state, hyper, rng,
                                                     marg_prec)
                update_random_effects(data, state, sweep.h, sweep.h_chol, rng)
                update_precisions(data, state, sweep.h_chol, hyper, rng)
                r = data.y - np.einsum(
                    "ij,ij->i", data.x, state.betas[state.partition.labels])
                sweep.update_alpha_marg(state, r, rng)
                sweep.update_kappas_marg(state, r, rng)
            sweep.update_lambda(state, rng)
        except Exception as exc:
            raise RuntimeError(f"chain failed at iteration {it}: {exc}") from exc
        if cfg.adapt and it < burn_iters:
            sweep.adapt(it)
            # exploration heuristic confined to the discarded early burn-in
            if not cfg.prior_only and (it + 1) % 10 == 0:
                _guided_moves(data, state, rng, marg_prec)
                if (it + 1) % 100 == 0:
                    _guided_reanchor(data, state, sweep, rng)
        if (it + 1) % cfg.thin == 0:
            retained_idx = (it + 1) // cfg.thin - 1
            if retained_idx >= cfg.burn_in:
                states.append(state.copy())
                logdens_rows.append(
                    per_obs_predictive_loglik(data, state, sweep.h))

    acceptance = {
        block: (sweep.accepts[block] / sweep.attempts[block]
                if sweep.attempts[block] else float("nan"))
        for block in sweep.accepts
    }
    return ChainOutput(states=states,
                       per_obs_logdens=np.array(logdens_rows),
                       acceptance=acceptance)
