"""Posterior summarization: modal partition, HPD intervals, CPO and LPML."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import logsumexp

from .mfm import canonical_labels
from .mcmc import ChainOutput


def cpo_estimate(per_obs_logdens: np.ndarray) -> np.ndarray:
    """Harmonic-mean conditional predictive ordinate per observation.

    CPO_i = [ mean_t exp(-logdens_ti) ]^{-1}, evaluated in the log domain.
    """
    ld = np.asarray(per_obs_logdens, dtype=float)
    if ld.ndim != 2 or ld.shape[0] < 1:
        raise ValueError("need a (T, n) matrix of log-densities with T >= 1")
    t = ld.shape[0]
    out = np.empty(ld.shape[1])
    for i in range(ld.shape[1]):
        col = ld[:, i]
        if np.any(np.isneginf(col)):
            warnings.warn(f"observation {i} has a zero density draw; CPO set to 0",
                          RuntimeWarning)
            out[i] = 0.0
        else:
            out[i] = math.exp(-(logsumexp(-col) - math.log(t)))
    return out


def lpml(cpo: np.ndarray) -> float:
    """Log pseudo-marginal likelihood: sum of log CPOs. Larger is better."""
    cpo = np.asarray(cpo, dtype=float)
    if np.any(cpo <= 0):
        warnings.warn("zero CPO encountered; LPML is -inf", RuntimeWarning)
        return float("-inf")
    return float(np.sum(np.log(cpo)))


def modal_partition(label_draws: np.ndarray) -> np.ndarray:
    """Least-squares consensus partition (Dahl): the sampled partition whose
    co-clustering indicator is closest to the posterior co-clustering matrix.

    Invariant to label switching since only co-clustering indicators enter;
    always returns one of the sampled partitions, so the summary is coherent.
    Ties break to the earliest draw.
    """
    draws = np.asarray(label_draws, dtype=int)
    t, n = draws.shape
    psi = np.zeros((n, n))
    for row in draws:
        psi += row[:, None] == row[None, :]
    psi /= t
    best = draws[0]
    best_loss = np.inf
    for row in draws:
        delta = row[:, None] == row[None, :]
        loss = float(((delta - psi) ** 2).sum())
        if loss < best_loss:
            best_loss = loss
            best = row
    return canonical_labels(best)


def hpd_interval(draws: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Chen-Shao empirical HPD: the shortest window covering ``level`` mass."""
    draws = np.sort(np.asarray(draws, dtype=float))
    t = len(draws)
    if t < 20:
        raise ValueError(f"need at least 20 draws for an HPD interval, got {t}")
    if not (0.0 < level <= 1.0):
        raise ValueError("level must be in (0, 1]")
    m = min(t, int(math.ceil(level * t)))
    if m == t:
        return float(draws[0]), float(draws[-1])
    widths = draws[m:] - draws[: t - m]
    j = int(np.argmin(widths))
    return float(draws[j]), float(draws[j + m])


def _scalar_summary(draws: np.ndarray, level: float = 0.95) -> dict:
    lo, hi = hpd_interval(draws, level)
    return {"mean": float(np.mean(draws)), "sd": float(np.std(draws, ddof=1)),
            "hpd_lower": lo, "hpd_upper": hi}


@dataclass
class FitReport:
    """Posterior summaries of one fitted chain."""

    modal_labels: list[int]
    k_posterior: dict[int, int]
    beta_summary: list[list[dict]]     # [cluster][coordinate] summaries
    site_beta_mean: list[list[float]]  # (n, p) label-invariant posterior means
    alpha_summary: list[dict]
    sigma2_summary: dict
    tau_y_summary: dict
    lambda_summary: dict
    lpml: float
    acceptance: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


def summarize_chain(out: ChainOutput, level: float = 0.95) -> FitReport:
    """Build a FitReport from retained draws.

    Per-site coefficient means use the label-invariant per-site draws; the
    cluster-level table aligns every draw's clusters to the modal partition by
    maximal overlap.
    """
    labels = out.label_draws()
    modal = modal_partition(labels)
    k_modal = int(modal.max()) + 1
    site_betas = out.site_beta_draws()          # (T, n, p)
    t, n, p = site_betas.shape

    k_draws = np.array([s.partition.k_active for s in out.states])
    k_hist = {int(k): int(c) for k, c in zip(*np.unique(k_draws, return_counts=True))}

    # cluster-level draws: per draw, take the coefficients of the draw cluster
    # with maximal membership overlap with each modal cluster
    cluster_draws = np.empty((t, k_modal, p))
    modal_members = [modal == h for h in range(k_modal)]
    for ti, s in enumerate(out.states):
        dl = s.partition.labels
        for h in range(k_modal):
            overlap = np.bincount(dl[modal_members[h]], minlength=s.partition.k_active)
            cluster_draws[ti, h] = s.betas[int(np.argmax(overlap))]

    beta_summary = [[_scalar_summary(cluster_draws[:, h, l], level) for l in range(p)]
                    for h in range(k_modal)]
    site_beta_mean = site_betas.mean(axis=0)

    alphas = np.array([s.alphas for s in out.states])
    alpha_summary = [_scalar_summary(alphas[:, j], level) for j in range(alphas.shape[1])]

    cpo = cpo_estimate(out.per_obs_logdens)
    return FitReport(
        modal_labels=[int(v) for v in modal],
        k_posterior=k_hist,
        beta_summary=beta_summary,
        site_beta_mean=[[float(v) for v in row] for row in site_beta_mean],
        alpha_summary=alpha_summary,
        sigma2_summary=_scalar_summary(np.array([s.sigma2 for s in out.states]), level),
        tau_y_summary=_scalar_summary(np.array([s.tau_y for s in out.states]), level),
        lambda_summary=_scalar_summary(np.array([s.lam for s in out.states]), level),
        lpml=lpml(cpo),
        acceptance=out.acceptance,
    )
