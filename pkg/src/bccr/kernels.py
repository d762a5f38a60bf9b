"""Great-circle distances, similarity kernels, and the mixed covariance matrix.

The spatial random effect covariance is a convex combination of the identity
and a set of unit-diagonal base matrices (similarity kernels over auxiliary
covariates and/or a distance kernel), scaled by an overall variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0088


class NumericalError(RuntimeError):
    """Raised when a matrix factorization fails beyond the jitter guard."""


@dataclass(frozen=True)
class Location:
    """A site on the sphere, identified by id with coordinates in degrees."""

    id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90] for site {self.id!r}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180] for site {self.id!r}")


def great_circle_distance(a: Location, b: Location) -> float:
    """Haversine distance in kilometers between two locations."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(locs: list[Location]) -> np.ndarray:
    """Pairwise great-circle distance matrix (km) for a list of locations.

    Vectorized haversine over all pairs; ids must be unique.
    """
    if len(locs) == 0:
        raise ValueError("need at least one location")
    ids = [loc.id for loc in locs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate location ids")
    lat = np.radians([loc.lat for loc in locs])
    lon = np.radians([loc.lon for loc in locs])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return 0.5 * (d + d.T)


def weighting_scheme(kind: str, d: np.ndarray, phi: float = 1.0) -> np.ndarray:
    """Distance-based correlation matrix under the unity/exponential/gaussian scheme.

    unity ignores ``d`` and ``phi``; the other two decay with distance over
    bandwidth ``phi``. All outputs have unit diagonal.
    """
    if kind == "unity":
        return np.eye(d.shape[0])
    if phi <= 0:
        raise ValueError(f"bandwidth must be positive, got {phi}")
    if kind == "exponential":
        h = np.exp(-d / phi)
    elif kind == "gaussian":
        h = np.exp(-((d / phi) ** 2))
    else:
        raise ValueError(f"unknown weighting scheme {kind!r}")
    np.fill_diagonal(h, 1.0)
    return h


def similarity_matrix(z: np.ndarray, kappa: float) -> np.ndarray:
    """Exponential-decay similarity matrix exp(-kappa * |z_l - z_m|)."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("auxiliary covariate contains non-finite values")
    if kappa <= 0:
        raise ValueError(f"range parameter must be positive, got {kappa}")
    w = np.exp(-kappa * np.abs(z[:, None] - z[None, :]))
    np.fill_diagonal(w, 1.0)
    return w


@dataclass
class CovarianceSpec:
    """Declarative description of the random-effect covariance.

    The covariance is sigma2 * (alphas[0] * I + sum_j alphas[j] * bases[j-1]),
    with alphas on the simplex and each base symmetric positive definite with
    unit diagonal.
    """

    sigma2: float
    alphas: np.ndarray
    bases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if len(self.alphas) != len(self.bases) + 1:
            raise ValueError(
                f"need {len(self.bases) + 1} mixing weights for {len(self.bases)} bases, "
                f"got {len(self.alphas)}"
            )
        if np.any(self.alphas < -1e-12) or np.any(self.alphas > 1 + 1e-12):
            raise ValueError("mixing weights must lie in [0, 1]")
        if abs(self.alphas.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixing weights must sum to 1, got {self.alphas.sum()!r}")
        n = None
        for b in self.bases:
            if n is None:
                n = b.shape[0]
            if b.shape != (n, n):
                raise ValueError("base matrices must be square and share one dimension")


def mixture_matrix(alphas: np.ndarray, bases: list[np.ndarray], n: int | None = None) -> np.ndarray:
    """Unit-variance convex combination alpha0*I + sum_j alpha_j * B_j."""
    if n is None:
        if not bases:
            raise ValueError("need either a base matrix or an explicit dimension")
        n = bases[0].shape[0]
    h = alphas[0] * np.eye(n)
    for a, b in zip(alphas[1:], bases):
        if b.shape != (n, n):
            raise ValueError("base matrix dimension mismatch")
        h += a * b
    return h


def acac_covariance(spec: CovarianceSpec, n: int | None = None) -> np.ndarray:
    """Assemble the full covariance sigma2 * (alpha0*I + sum alpha_j B_j).

    Positive definiteness is guaranteed for simplex weights with positive
    identity share and positive-definite bases; checked via Cholesky.
    """
    sigma = spec.sigma2 * mixture_matrix(spec.alphas, spec.bases, n=n)
    cholesky_pd(sigma)  # fail fast on indefiniteness
    return sigma


def cholesky_pd(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a single jitter retry on failure."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    n = mat.shape[0]
    jitter = 1e-10 * np.trace(mat) / n
    try:
        return np.linalg.cholesky(mat + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(mat)
        raise NumericalError(
            f"Cholesky failed even with jitter {jitter:.3e}; "
            f"eigenvalue range [{eigs.min():.3e}, {eigs.max():.3e}]"
        )


def mvn_logdensity(x: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                   chol: np.ndarray | None = None) -> float:
    """Multivariate normal log-density via Cholesky.

    An already-computed lower Cholesky factor of ``cov`` may be passed to skip
    refactorization.
    """
    from scipy.linalg import solve_triangular

    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if chol is None:
        chol = cholesky_pd(np.asarray(cov, dtype=float))
    u = solve_triangular(chol, x - mean, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (len(x) * math.log(2.0 * math.pi) + logdet + u @ u))


def mvn_sample(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator,
               chol: np.ndarray | None = None) -> np.ndarray:
    """Draw from MVN(mean, cov) as mean + L u with L the Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    if chol is None:
        chol = cholesky_pd(np.asarray(cov, dtype=float))
    u = rng.standard_normal(len(mean))
    return mean + chol @ u
