"""Mixture-of-finite-mixtures prior over partitions, plus a DP baseline.

The component count k follows 1 + Poisson(lambda); given k the weights are
symmetric Dirichlet(gamma). The stick-breaking construction draws Exp(lambda)
increments until they sum past 1, which reproduces the same law on k when
gamma = 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import poisson


@dataclass
class MfmConfig:
    gamma: float = 1.0
    lam: float = 1.0
    k_max: int = 20
    learn_lambda: bool = True

    def __post_init__(self):
        if self.gamma <= 0 or self.lam <= 0:
            raise ValueError("gamma and lambda must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")


@dataclass
class MixtureWeights:
    pi: np.ndarray
    k: int

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if len(self.pi) != self.k:
            raise ValueError("weight vector length must equal k")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")


@dataclass
class Partition:
    """Cluster labels for n sites, 0-based, compact, first-appearance order."""

    labels: np.ndarray
    k_active: int = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.labels = canonical_labels(self.labels)
        self.k_active = int(self.labels.max()) + 1 if len(self.labels) else 0
        self.counts = np.bincount(self.labels, minlength=self.k_active)

    @property
    def n(self) -> int:
        return len(self.labels)


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters by order of first appearance; idempotent."""
    labels = np.asarray(labels, dtype=int)
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def k_prior_pmf(k: int, lam: float) -> float:
    """pmf of 1 + Poisson(lam) at k."""
    if k < 1:
        raise ValueError(f"component count must be >= 1, got {k}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return float(poisson.pmf(k - 1, lam))


def k_prior_logpmf(k: int, lam: float) -> float:
    if k < 1:
        raise ValueError(f"component count must be >= 1, got {k}")
    # Poisson(lam) log-pmf at k-1, written out to avoid scipy dispatch overhead
    return float((k - 1) * np.log(lam) - lam - gammaln(k))


def mfm_stick_breaking(lam: float, rng: np.random.Generator,
                       increments: np.ndarray | None = None) -> tuple[int, MixtureWeights]:
    """Constructive draw of (k, weights) from the MFM prior with gamma = 1.

    Exp(lam) increments are accumulated until their sum reaches 1; the last
    weight closes the simplex. ``increments`` can be injected for testing.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    etas: list[float] = []
    total = 0.0
    i = 0
    while total < 1.0:
        if increments is not None:
            eta = float(increments[i])
            i += 1
        else:
            eta = rng.exponential(scale=1.0 / lam)
        etas.append(eta)
        total += eta
    k = len(etas)
    pi = np.array(etas)
    pi[-1] = 1.0 - pi[:-1].sum()
    return k, MixtureWeights(pi=pi, k=k)


def dp_stick_breaking(alpha_conc: float, truncation: int, rng: np.random.Generator,
                      fractions: np.ndarray | None = None) -> MixtureWeights:
    """Truncated Dirichlet-process stick-breaking weights.

    Beta(1, alpha_conc) fractions; the final weight absorbs the remainder.
    """
    if alpha_conc <= 0:
        raise ValueError("concentration must be positive")
    if truncation < 1:
        raise ValueError("truncation must be at least 1")
    if fractions is None:
        fractions = rng.beta(1.0, alpha_conc, size=truncation - 1)
    pi = np.empty(truncation)
    remaining = 1.0
    for h in range(truncation - 1):
        pi[h] = fractions[h] * remaining
        remaining *= 1.0 - fractions[h]
    pi[-1] = remaining
    return MixtureWeights(pi=pi, k=truncation)


def conditional_k_logweights(t: int, n: int, cfg: MfmConfig, lam: float) -> np.ndarray:
    """Unnormalized log p(k | partition) on the truncated support t..k_max."""
    ks = np.arange(t, cfg.k_max + 1)
    logw = (
        (ks - 1) * np.log(lam) - lam - gammaln(ks)
        + gammaln(ks + 1.0)
        - gammaln(ks - t + 1.0)
        + gammaln(cfg.gamma * ks)
        - gammaln(cfg.gamma * ks + n)
    )
    return logw - logsumexp(logw)


def conditional_k_sample(part: Partition, cfg: MfmConfig, rng: np.random.Generator,
                         lam: float | None = None) -> int:
    """Draw the component count given the partition, weights marginalized out."""
    t = part.k_active
    if cfg.k_max < t:
        raise ValueError(f"k_max={cfg.k_max} below the {t} occupied clusters")
    lam = cfg.lam if lam is None else lam
    logw = conditional_k_logweights(t, part.n, cfg, lam)
    cdf = np.cumsum(np.exp(logw))
    k = int(t + np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, cfg.k_max)
    if k == cfg.k_max:
        warnings.warn(
            f"sampled component count hit the truncation level k_max={cfg.k_max}; "
            "results may be truncation-biased",
            RuntimeWarning,
        )
    return k


def conditional_weights(k: int, part: Partition, gamma: float,
                        rng: np.random.Generator) -> MixtureWeights:
    """Dirichlet draw of mixture weights given k and the occupancy counts."""
    if k < part.k_active:
        raise ValueError(f"k={k} below the {part.k_active} occupied clusters")
    conc = np.full(k, gamma)
    conc[: part.k_active] += part.counts
    pi = rng.dirichlet(conc)
    # guard exact zeros from the gamma sampler at tiny concentrations
    pi = np.clip(pi, 1e-300, None)
    pi /= pi.sum()
    return MixtureWeights(pi=pi, k=k)
