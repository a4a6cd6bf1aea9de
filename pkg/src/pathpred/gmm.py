"""Bivariate Gaussian mixtures: density, translation, aggregation, sampling.

Mixtures are stored as flat component arrays (means, per-axis stds,
correlations, weights). Covariances use the (std_x, std_y, corr)
parameterization; sampling factors each 2x2 covariance through its
lower-triangular square root.

All operations are pure: they never mutate their inputs and take an
explicit ``numpy.random.Generator`` where randomness is involved.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

# Weight sums drifting by more than this are a caller bug, not float noise.
WEIGHT_SUM_TOL = 1e-6
# Drift below this is left untouched.
WEIGHT_EXACT_TOL = 1e-12

_LOG_2PI = float(np.log(2.0 * np.pi))

SAMPLING_STRATEGIES = ("multinomial", "stratified")


def normalize_weights(weights: np.ndarray) -> np.ndarray:
    """Renormalize weights whose sum drifted from 1 by float error.

    Sums within ``WEIGHT_EXACT_TOL`` of 1 pass through unchanged; drift up
    to ``WEIGHT_SUM_TOL`` is renormalized; anything larger raises.
    """
    total = float(np.sum(weights))
    if abs(total - 1.0) <= WEIGHT_EXACT_TOL:
        return weights
    if abs(total - 1.0) < WEIGHT_SUM_TOL:
        return weights / total
    raise ValueError(f"weights sum to {total}, outside the {WEIGHT_SUM_TOL} drift budget")


@dataclass
class GaussianMixture2D:
    """Weighted mixture of bivariate Gaussians.

    Attributes:
        means: (K, 2) component means in meters.
        stds: (K, 2) per-axis standard deviations, strictly positive.
        corrs: (K,) correlations, each in the open interval (-1, 1).
        weights: (K,) nonnegative, summing to 1 within 1e-9.
    """

    means: np.ndarray
    stds: np.ndarray
    corrs: np.ndarray
    weights: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.corrs = np.asarray(self.corrs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.validate:
            self._check()

    def _check(self):
        k = self.means.shape[0]
        if k < 1:
            raise EmptyInput("mixture needs at least one component")
        if self.means.shape != (k, 2) or self.stds.shape != (k, 2):
            raise ValueError("means and stds must have shape (K, 2)")
        if self.corrs.shape != (k,) or self.weights.shape != (k,):
            raise ValueError("corrs and weights must have shape (K,)")
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite component mean")
        if not (np.all(self.stds > 0.0) and np.all(np.isfinite(self.stds))):
            raise ValueError("stds must be positive and finite")
        if not np.all(np.abs(self.corrs) < 1.0):
            raise ValueError("corr must lie strictly inside (-1, 1)")
        if np.any(self.weights < 0.0):
            raise ValueError("negative component weight")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("component weights must sum to 1 within 1e-9")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def single(cls, mean, std_x: float, std_y: float, corr: float = 0.0) -> "GaussianMixture2D":
        """One-component mixture, convenient in tests and construction."""
        return cls(
            means=np.asarray(mean, dtype=np.float64).reshape(1, 2),
            stds=np.array([[std_x, std_y]], dtype=np.float64),
            corrs=np.array([corr], dtype=np.float64),
            weights=np.array([1.0]),
        )


if _HAVE_NUMBA:

    @njit(cache=True)
    def _density_kernel(px, py, mx, my, inv_sx, inv_sy, corr, coef, qh):
        n = px.shape[0]
        k = mx.shape[0]
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(k):
                u = (px[i] - mx[j]) * inv_sx[j]
                v = (py[i] - my[j]) * inv_sy[j]
                z = u * u + v * v - 2.0 * corr[j] * u * v
                acc += coef[j] * np.exp(qh[j] * z)
            out[i] = acc
        return out


def _density_numpy(px, py, mx, my, inv_sx, inv_sy, corr, coef, qh):
    u = (px[:, None] - mx[None, :]) * inv_sx
    v = (py[:, None] - my[None, :]) * inv_sy
    z = u * u + v * v - 2.0 * corr * u * v
    return (coef * np.exp(qh * z)).sum(axis=1)


def density_many(mix: GaussianMixture2D, points: np.ndarray) -> np.ndarray:
    """Mixture density at each of the given points, shape (N,)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inv_sx = 1.0 / mix.stds[:, 0]
    inv_sy = 1.0 / mix.stds[:, 1]
    q = 1.0 / (1.0 - mix.corrs**2)
    coef = mix.weights * inv_sx * inv_sy * np.sqrt(q) / (2.0 * np.pi)
    qh = -0.5 * q
    args = (
        np.ascontiguousarray(points[:, 0]),
        np.ascontiguousarray(points[:, 1]),
        np.ascontiguousarray(mix.means[:, 0]),
        np.ascontiguousarray(mix.means[:, 1]),
        inv_sx,
        inv_sy,
        mix.corrs,
        coef,
        qh,
    )
    if _HAVE_NUMBA and points.shape[0] * mix.num_components >= 4096:
        return _density_kernel(*args)
    return _density_numpy(*args)


def density(mix: GaussianMixture2D, point) -> float:
    """Mixture density at a single 2-D point."""
    return float(density_many(mix, np.asarray(point, dtype=np.float64).reshape(1, 2))[0])


def log_density_many(mix: GaussianMixture2D, points: np.ndarray) -> np.ndarray:
    """Log mixture density via log-sum-exp, safe against underflow."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dx = points[:, 0:1] - mix.means[None, :, 0]
    dy = points[:, 1:2] - mix.means[None, :, 1]
    u = dx / mix.stds[:, 0]
    v = dy / mix.stds[:, 1]
    q = 1.0 / (1.0 - mix.corrs**2)
    z = u * u + v * v - 2.0 * mix.corrs * u * v
    with np.errstate(divide="ignore"):
        log_w = np.log(mix.weights)
    log_comp = (
        log_w
        - _LOG_2PI
        - np.log(mix.stds[:, 0])
        - np.log(mix.stds[:, 1])
        + 0.5 * np.log(q)
        - 0.5 * q * z
    )
    peak = log_comp.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(log_comp - peak).sum(axis=1, keepdims=True)))[:, 0]


def shift_means(mix: GaussianMixture2D, anchor) -> GaussianMixture2D:
    """Translate every component mean by ``anchor``; shapes unchanged."""
    anchor = np.asarray(anchor, dtype=np.float64).reshape(2)
    return GaussianMixture2D(
        means=mix.means + anchor,
        stds=mix.stds.copy(),
        corrs=mix.corrs.copy(),
        weights=mix.weights.copy(),
    )


def aggregate(mixes: list, weights) -> GaussianMixture2D:
    """Combine mixtures into one, scaling each mixture's weights by its own.

    Component order is mixture-major: all components of ``mixes[0]`` first.
    """
    if len(mixes) == 0:
        raise EmptyInput("aggregate needs at least one mixture")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(mixes),):
        raise ValueError("one weight per mixture required")
    normalize_weights(weights)  # validates the drift budget
    out_w = np.concatenate([w * m.weights for w, m in zip(weights, mixes)])
    return GaussianMixture2D(
        means=np.concatenate([m.means for m in mixes]),
        stds=np.concatenate([m.stds for m in mixes]),
        corrs=np.concatenate([m.corrs for m in mixes]),
        weights=normalize_weights(out_w),
    )


def aggregate_arrays(means, stds, corrs, comp_weights, mix_weights) -> GaussianMixture2D:
    """Array fast path of :func:`aggregate` for (M, K, ...) batches."""
    m, k = comp_weights.shape
    out_w = (mix_weights[:, None] * comp_weights).reshape(m * k)
    return GaussianMixture2D(
        means=means.reshape(m * k, 2),
        stds=stds.reshape(m * k, 2),
        corrs=corrs.reshape(m * k),
        weights=normalize_weights(out_w),
    )


def select_multinomial(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent component draws with probabilities ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    u = rng.random(count)
    return np.searchsorted(cum, u, side="right").astype(np.intp)


def select_stratified(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified component selection: one uniform draw per cumulative bin.

    Bin j covers [j/count, (j+1)/count) on the cumulative weight axis, so
    each component k is selected n_k times with ``|n_k - count*w_k| <= 2``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    u = (np.arange(count) + rng.random(count)) / count
    return np.searchsorted(cum, u, side="right").astype(np.intp)


def draw_from_components(mix: GaussianMixture2D, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one point from the selected component for each index.

    Uses the lower-triangular square root of each covariance:
    x = mx + sx*z1, y = my + sy*(corr*z1 + sqrt(1-corr^2)*z2).
    """
    z = rng.standard_normal((len(indices), 2))
    mean = mix.means[indices]
    std = mix.stds[indices]
    corr = mix.corrs[indices]
    x = mean[:, 0] + std[:, 0] * z[:, 0]
    y = mean[:, 1] + std[:, 1] * (corr * z[:, 0] + np.sqrt(1.0 - corr**2) * z[:, 1])
    return np.column_stack([x, y])


def sample(
    mix: GaussianMixture2D,
    count: int,
    strategy: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``count`` points: select components per strategy, then draw."""
    points, _ = sample_with_indices(mix, count, strategy, rng)
    return points


def sample_with_indices(mix, count, strategy, rng):
    """Like :func:`sample` but also returns the chosen component indices."""
    if strategy == "multinomial":
        idx = select_multinomial(mix.weights, count, rng)
    elif strategy == "stratified":
        idx = select_stratified(mix.weights, count, rng)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return draw_from_components(mix, idx, rng), idx
