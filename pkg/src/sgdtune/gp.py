"""Gaussian-process regression with a squared-exponential ARD kernel.

Hyperparameters are chosen by exhaustive search of the log marginal
likelihood over a fixed log-spaced grid: first an isotropic sweep over
(length scale, signal variance, noise variance), then one coordinate pass
refining each input dimension's length scale jointly with the two variances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTER_FLOOR = 1e-9
MAX_JITTER = 1e-4
GRID_SIZE = 7

# grids are relative: length scales in standardized input units,
# variances in units of the (scaled) target variance
LENGTH_GRID = np.geomspace(0.1, 10.0, GRID_SIZE)
SIGNAL_GRID = np.geomspace(0.01, 100.0, GRID_SIZE)
NOISE_GRID = np.geomspace(1e-9, 1.0, GRID_SIZE)


class GpError(ValueError):
    pass


@dataclass(frozen=True)
class GpHyperparams:
    length_scales: tuple[float, ...]
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        if min(self.length_scales, default=1.0) <= 0 or self.signal_variance <= 0:
            raise GpError("hyperparameters must be strictly positive")
        if self.noise_variance < JITTER_FLOOR:
            raise GpError(f"noise variance below jitter floor {JITTER_FLOOR}")


@dataclass(frozen=True, eq=False)
class GpPosterior:
    xs: np.ndarray          # (n, d) training inputs
    ys: np.ndarray          # (n,) training targets
    hyper: GpHyperparams
    mean: float             # constant prior mean
    chol: np.ndarray        # lower Cholesky factor of K + noise I
    alpha: np.ndarray       # (K + noise I)^-1 (ys - mean)

    @property
    def dim(self) -> int:
        return len(self.hyper.length_scales)

    @property
    def n(self) -> int:
        return len(self.ys)

    @classmethod
    def prior(cls, dim: int, mean: float, signal_variance: float,
              length_scale: float = 1.0) -> "GpPosterior":
        """A GP with no observations."""
        hyper = GpHyperparams((length_scale,) * dim, signal_variance, JITTER_FLOOR)
        return cls(np.empty((0, dim)), np.empty(0), hyper, float(mean),
                   np.empty((0, 0)), np.empty(0))


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel(a: np.ndarray, b: np.ndarray, hyper: GpHyperparams) -> np.ndarray:
    ls = np.asarray(hyper.length_scales)
    return hyper.signal_variance * np.exp(-0.5 * sq_dist(a / ls, b / ls))


def _as_points(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim in (None, 1) else x.reshape(1, -1)
    if dim is not None and x.shape[1] != dim:
        raise GpError(f"expected {dim}-dimensional inputs, got {x.shape[1]}")
    return x


def _log_ml_batch(r: np.ndarray, y: np.ndarray, eye: np.ndarray) -> np.ndarray:
    """Log marginal likelihood for every (length scale, signal, noise) combination.

    ``r`` stacks correlation matrices, one per length-scale candidate.
    Returns an array of shape (len(r), len(SIGNAL_GRID), len(NOISE_GRID)).
    """
    n = len(y)
    k = (SIGNAL_GRID[None, :, None, None, None] * r[:, None, None]
         + NOISE_GRID[None, None, :, None, None] * eye)
    shape = k.shape[:3]
    k = k.reshape(-1, n, n)
    out = np.full(len(k), -np.inf)
    try:
        chol = np.linalg.cholesky(k)
        good = np.ones(len(k), dtype=bool)
    except np.linalg.LinAlgError:
        chol = np.zeros_like(k)
        good = np.zeros(len(k), dtype=bool)
        for i, ki in enumerate(k):
            try:
                chol[i] = np.linalg.cholesky(ki)
                good[i] = True
            except np.linalg.LinAlgError:
                pass
    c = chol[good]
    z = np.linalg.solve(c, np.broadcast_to(y, (len(c), n))[..., None])[..., 0]
    logdet = np.log(np.diagonal(c, axis1=1, axis2=2)).sum(axis=1)
    out[good] = -0.5 * (z * z).sum(axis=1) - logdet - 0.5 * n * np.log(2 * np.pi)
    return out.reshape(shape)


def fit(xs, ys, zero_mean: bool = False) -> GpPosterior:
    """Fit a GP to ``xs`` (n points of dimension d) and targets ``ys``.

    The prior mean is the target average, or zero with ``zero_mean``.
    """
    x = _as_points(xs)
    y = np.asarray(ys, dtype=float).ravel()
    if len(y) == 0 or len(x) != len(y):
        raise GpError("need at least one point and matching xs/ys")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise GpError("non-finite training data")
    n, d = x.shape

    x_scale = x.std(axis=0)
    x_scale[x_scale <= 0] = 1.0
    xn = (x - x.mean(axis=0)) / x_scale
    y_mean = 0.0 if zero_mean else float(y.mean())
    y_scale = float(np.sqrt(np.mean((y - y_mean) ** 2)))
    if y_scale <= 1e-12 * max(abs(y_mean), 1e-300):
        y_scale = 0.1 * abs(y_mean) if y_mean != 0 else 1.0
    yn = (y - y_mean) / y_scale
    eye = np.eye(n)

    sq = [np.subtract.outer(xn[:, j], xn[:, j]) ** 2 for j in range(d)]
    total = np.sum(sq, axis=0)
    scores = _log_ml_batch(np.exp(-0.5 * total[None] / LENGTH_GRID[:, None, None] ** 2), yn, eye)
    li, si, ni = np.unravel_index(np.argmax(scores), scores.shape)
    best = scores[li, si, ni]
    ls = np.full(d, LENGTH_GRID[li])

    if d > 1:
        for j in range(d):
            others = sum(sq[i] / ls[i] ** 2 for i in range(d) if i != j)
            r = np.exp(-0.5 * (others[None] + sq[j][None] / LENGTH_GRID[:, None, None] ** 2))
            s = _log_ml_batch(r, yn, eye)
            lj, sj, nj = np.unravel_index(np.argmax(s), s.shape)
            if s[lj, sj, nj] > best:
                best = s[lj, sj, nj]
                ls[j] = LENGTH_GRID[lj]
                si, ni = sj, nj

    hyper = GpHyperparams(
        length_scales=tuple(float(v) for v in ls * x_scale),
        signal_variance=float(SIGNAL_GRID[si] * y_scale ** 2),
        noise_variance=float(max(NOISE_GRID[ni] * y_scale ** 2, JITTER_FLOOR)),
    )
    return condition(x, y, hyper, y_mean)


def condition(xs, ys, hyper: GpHyperparams, mean: float | None = None) -> GpPosterior:
    """Posterior for fixed hyperparameters (constant prior mean defaults to mean(ys))."""
    x = _as_points(xs, len(hyper.length_scales))
    y = np.asarray(ys, dtype=float).ravel()
    if mean is None:
        mean = float(y.mean()) if len(y) else 0.0
    k = kernel(x, x, hyper) + hyper.noise_variance * np.eye(len(y))
    chol = _cholesky(k, hyper.signal_variance)
    alpha = _chol_solve(chol, y - mean)
    return GpPosterior(x, y, hyper, float(mean), chol, alpha)


def _chol_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cho_solve((chol, True), b)


def _cholesky(k: np.ndarray, scale: float) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(k + jitter * scale * np.eye(len(k)))
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10
            if jitter > MAX_JITTER:
                raise GpError("covariance not positive definite even with jitter") from None


def predict(post: GpPosterior, x, include_noise: bool = False):
    """Posterior mean and variance of the latent function at ``x``.

    A single point gives floats; several points give arrays.
    """
    pts = _as_points(x, post.dim)
    single = np.ndim(x) == 0 or (np.ndim(x) == 1 and post.dim > 1)
    mean = np.full(len(pts), post.mean)
    var = np.full(len(pts), post.hyper.signal_variance)
    if post.n:
        ks = kernel(pts, post.xs, post.hyper)
        mean = mean + ks @ post.alpha
        v = solve_triangular(post.chol, ks.T, lower=True)
        var = np.maximum(var - np.einsum("ij,ij->j", v, v), 0.0)
    if include_noise:
        var = var + post.hyper.noise_variance
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def predict_cov(post: GpPosterior, x) -> tuple[np.ndarray, np.ndarray]:
    pts = _as_points(x, post.dim)
    mean = np.full(len(pts), post.mean)
    cov = kernel(pts, pts, post.hyper)
    if post.n:
        ks = kernel(pts, post.xs, post.hyper)
        mean = mean + ks @ post.alpha
        v = solve_triangular(post.chol, ks.T, lower=True)
        cov = cov - v.T @ v
    return mean, cov


def sample_joint(post: GpPosterior, xs, rng: np.random.Generator, size: int | None = None):
    """Draw from the joint posterior of the latent function at ``xs``.

    Returns shape ``(len(xs),)``, or ``(size, len(xs))`` when ``size`` is given.
    Identical inputs receive identical values.
    """
    pts = _as_points(xs, post.dim)
    if len(pts) == 0:
        raise GpError("need at least one point")
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    mean, cov = predict_cov(post, uniq)
    cov = 0.5 * (cov + cov.T)
    chol = _cholesky(cov + 1e-12 * post.hyper.signal_variance * np.eye(len(uniq)),
                     post.hyper.signal_variance)
    z = rng.standard_normal((1 if size is None else size, len(uniq)))
    draws = (mean + z @ chol.T)[:, inverse]
    return draws[0] if size is None else draws


def log_marginal_likelihood(post: GpPosterior) -> float:
    r = post.ys - post.mean
    return float(-0.5 * r @ post.alpha - np.log(np.diag(post.chol)).sum()
                 - 0.5 * post.n * np.log(2 * np.pi))
