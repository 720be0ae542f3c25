"""Closed-form ground truths for Gaussian transport and barycenters.

Everything here is exact up to dense eigendecompositions: PSD matrix roots,
the affine optimal transport map between Gaussians, the Bures-Wasserstein
metric, the fixed-point location-scatter barycenter, 1-D quantile transport
cost, and Haar-random rotations.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConvergenceError, SingularityError

_SYM_TOL = 1e-10


def _check_symmetric(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolation(f"{name}: expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > _SYM_TOL * scale:
        raise ContractViolation(f"{name}: matrix is not symmetric within {_SYM_TOL}")
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class GaussianDist:
    """Mean vector and symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = _check_symmetric("GaussianDist.cov", self.cov)
        if cov.shape[0] != mean.shape[0]:
            raise ContractViolation(
                f"GaussianDist: mean dim {mean.shape[0]} != cov dim {cov.shape[0]}"
            )
        if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ContractViolation("GaussianDist: covariance has a significantly negative eigenvalue")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def total_variance(self) -> float:
        """Trace of the covariance; the UVP denominator."""
        return float(np.trace(self.cov))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        root = sqrtm_psd(self.cov)
        return self.mean + rng.standard_normal((n, self.d)) @ root


@dataclass(frozen=True)
class AffineMap:
    """x -> A x + u with, for location-scatter use, symmetric PD A."""

    matrix: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        u = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != u.shape[0]:
            raise ContractViolation(f"AffineMap: inconsistent shapes {a.shape} and {u.shape}")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "shift", u)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.matrix.T + self.shift


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues within roundoff are clipped to zero.
    """
    m = _check_symmetric("sqrtm_psd", m)
    w, q = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.T


def _inv_sqrtm_pd(name: str, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(m^{1/2}, m^{-1/2}) for a PD matrix; raises on singular input."""
    m = _check_symmetric(name, m)
    w, q = np.linalg.eigh(m)
    if w.min() <= 1e-12 * max(1.0, w.max()):
        raise SingularityError(f"{name}: matrix is singular (min eigenvalue {w.min():.3e})")
    sw = np.sqrt(w)
    return (q * sw) @ q.T, (q / sw) @ q.T


def gaussian_ot_map(src: GaussianDist, dst: GaussianDist) -> tuple[AffineMap, float]:
    """Optimal transport map between Gaussians and its squared cost.

    The map is x -> A x + u with
    A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}, u = m2 - A m1,
    and the squared cost is |m1-m2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}).
    """
    if src.d != dst.d:
        raise ContractViolation(f"gaussian_ot_map: dimension mismatch {src.d} vs {dst.d}")
    root, inv_root = _inv_sqrtm_pd("gaussian_ot_map: source covariance", src.cov)
    middle = sqrtm_psd(root @ dst.cov @ root)
    a = inv_root @ middle @ inv_root
    a = 0.5 * (a + a.T)
    u = dst.mean - a @ src.mean
    dm = src.mean - dst.mean
    w2 = float(dm @ dm + np.trace(src.cov) + np.trace(dst.cov) - 2.0 * np.trace(middle))
    return AffineMap(a, u), max(w2, 0.0)


def bures_w2(a: GaussianDist, b: GaussianDist) -> float:
    """Squared Bures-Wasserstein distance between two Gaussians."""
    if a.d != b.d:
        raise ContractViolation(f"bures_w2: dimension mismatch {a.d} vs {b.d}")
    ra = sqrtm_psd(a.cov)
    cross = np.trace(sqrtm_psd(ra @ b.cov @ ra))
    dm = a.mean - b.mean
    val = float(dm @ dm + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(val, 0.0)


def ls_barycenter_fixed_point(
    covs,
    weights,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> tuple[np.ndarray, int]:
    """Barycenter covariance of centered Gaussians by fixed-point iteration.

    Iterates S <- S^{-1/2} (sum_s w_s (S^{1/2} C_s S^{1/2})^{1/2})^2 S^{-1/2}
    from S = I until the Frobenius update norm drops below ``tol``.  Returns
    the fixed point and the number of iterations performed.
    """
    covs = [_check_symmetric("ls_barycenter_fixed_point: input", c) for c in covs]
    weights = np.asarray(weights, dtype=np.float64)
    if len(covs) == 0 or weights.shape != (len(covs),):
        raise ContractViolation("ls_barycenter_fixed_point: need one weight per covariance")
    if weights.min() < 0 or abs(weights.sum() - 1.0) > 1e-9:
        raise ContractViolation("ls_barycenter_fixed_point: weights must be non-negative and sum to 1")
    for c in covs:
        if np.linalg.eigvalsh(c).min() <= 0:
            raise ContractViolation("ls_barycenter_fixed_point: inputs must be positive definite")

    d = covs[0].shape[0]
    cur = np.eye(d)
    residual = np.inf
    for it in range(1, max_iter + 1):
        root, inv_root = _inv_sqrtm_pd("ls_barycenter_fixed_point: iterate", cur)
        mix = np.zeros_like(cur)
        for w, c in zip(weights, covs):
            mix += w * sqrtm_psd(root @ c @ root)
        nxt = inv_root @ (mix @ mix) @ inv_root
        nxt = 0.5 * (nxt + nxt.T)
        residual = float(np.linalg.norm(nxt - cur, ord="fro"))
        cur = nxt
        if residual < tol:
            return cur, it
    raise ConvergenceError(
        f"ls_barycenter_fixed_point: no convergence in {max_iter} iterations", residual
    )


def _empirical_quantile(sorted_samples: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Linear interpolation of order statistics at plotting positions (i-1/2)/n."""
    n = sorted_samples.shape[0]
    positions = (np.arange(n) + 0.5) / n
    return np.interp(u, positions, sorted_samples)


def quantile_ot_1d(samples_mu, samples_nu, p: float = 2.0) -> float:
    """Empirical 1-D transport cost from quantile alignment.

    Evaluates both empirical quantile functions on the midpoint grid
    u_i = (i - 1/2)/n for n = max(len(mu), len(nu)) and averages
    |q_mu(u_i) - q_nu(u_i)|^p.
    """
    a = np.sort(np.asarray(samples_mu, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(samples_nu, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ContractViolation("quantile_ot_1d: sample sets must be non-empty")
    n = max(a.size, b.size)
    u = (np.arange(n) + 0.5) / n
    qa = _empirical_quantile(a, u)
    qb = _empirical_quantile(b, u)
    return float(np.mean(np.abs(qa - qb) ** p))


def haar_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly from SO(d).

    QR of a Gaussian matrix with the R-diagonal sign correction; if the
    result has determinant -1, one column is negated.
    """
    if d < 1:
        raise ContractViolation(f"haar_rotation: d must be >= 1, got {d}")
    if d == 1:
        return np.ones((1, 1))
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
