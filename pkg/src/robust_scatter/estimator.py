"""Fixed-point solvers for the reweighted scatter estimator.

The central object is the pair (mu, V) solving the weighted moment equations

    mu = sum_i pi_i w_i x_i / sum_i pi_i w_i
    V  = p * sum_i pi_i w_i (x_i - mu)(x_i - mu)^T / sum_i pi_i w_i d_i

with w_i = weight(d_i) evaluated at the squared Mahalanobis distance
d_i = d(x_i, mu, V), and pi_i the observation weights (uniform 1/n unless the
data carries explicit weights).  The solver iterates this map from an initial
(mu_tilde, a * V_tilde); the initialization scale ``a`` selects which member
of the solution family the iteration converges to.

A plain Tyler-type baseline (``fit_tme``), a ridge-blended variant for p > n
(``fit_regularized``), the robust initializer (column medians and tau-scales),
and the eigendecomposition used for PCA output live here as well.

For stability at large p, squared distances can be computed against the
diagonal of V instead of the full matrix (``diag_approx``, on by default).
The scatter update itself always produces the full matrix.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateScale,
    DegenerateStep,
    EmptyActiveSet,
    SingularScatter,
)
from .weights import WeightSpec, weight

# Population value of the raw tau-scale at the standard Gaussian, computed by
# Gauss quadrature of s0^2 * E[min((X/s0)^2, c2^2)] with s0 the normal MAD
# (see tests/test_estimator.py, which re-derives it to 1e-10).  Dividing by
# this makes the tau-scale consistent for the Gaussian standard deviation.
TAU_SCALE_GAUSSIAN_CONSISTENCY = 0.9616212311383993

TAU_SCALE_C1 = 4.5
TAU_SCALE_C2 = 3.0


@dataclass(frozen=True)
class DataSet:
    """An n x p observation matrix with optional per-row weights."""

    X: np.ndarray
    obs_weights: np.ndarray | None = None
    column_names: list[str] | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        n, p = X.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        object.__setattr__(self, "X", X)
        if self.obs_weights is not None:
            w = np.asarray(self.obs_weights, dtype=float)
            if w.shape != (n,):
                raise ValueError(f"obs_weights must have shape ({n},), got {w.shape}")
            if np.any(w < 0):
                raise ValueError("obs_weights must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("obs_weights must sum to 1 within 1e-12")
            object.__setattr__(self, "obs_weights", w)
        if self.column_names is not None and len(self.column_names) != p:
            raise ValueError("column_names length does not match p")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def effective_weights(self) -> np.ndarray:
        if self.obs_weights is not None:
            return self.obs_weights
        return np.full(self.n, 1.0 / self.n)


@dataclass(frozen=True)
class LocationScatter:
    """A location vector plus symmetric positive-definite scatter matrix."""

    mu: np.ndarray
    V: np.ndarray
    diag_approx: bool = False

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if mu.ndim != 1 or V.shape != (mu.size, mu.size):
            raise ValueError(f"shape mismatch: mu {mu.shape}, V {V.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(V))):
            raise ValueError("mu and V must be finite")
        scale = max(np.abs(V).max(), 1.0)
        if np.abs(V - V.T).max() > 1e-10 * scale:
            raise ValueError("V must be symmetric within 1e-10 relative")
        if self.diag_approx:
            if np.any(np.diag(V) <= 0):
                raise SingularScatter("diagonal of V must be strictly positive")
        else:
            try:
                scipy.linalg.cholesky(V, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise SingularScatter("V is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "V", V)

    @property
    def p(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class FitResult:
    """Converged (or flagged) state of one fixed-point run."""

    ls: LocationScatter
    a: float
    active_mask: np.ndarray
    active_ratio: float
    iterations: int
    converged: bool
    residual: float
    error: str | None = None


@dataclass(frozen=True)
class PCAModel:
    """Top-k eigenpairs of a scatter matrix, descending and sign-normalized."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    k: int


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 500
    diag_approx: bool = True


def _squared_distances(diff: np.ndarray, V: np.ndarray, diag_approx: bool) -> np.ndarray:
    """Row-wise (x - mu)^T V^{-1} (x - mu) for pre-centered rows ``diff``."""
    if diag_approx:
        dv = np.diag(V)
        if np.any(dv <= 0):
            raise SingularScatter("diagonal of V has non-positive entries")
        return np.einsum("ij,ij->i", diff, diff / dv)
    try:
        cho = scipy.linalg.cho_factor(V, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularScatter("scatter matrix is singular") from exc
    solved = scipy.linalg.cho_solve(cho, diff.T, check_finite=False)
    return np.einsum("ij,ji->i", diff, solved)


def mahalanobis(x, ls: LocationScatter) -> float:
    """Squared Mahalanobis distance of one point from ``ls``.

    Uses only the diagonal of V when ``ls.diag_approx`` is set.  Solves a
    linear system instead of forming an explicit inverse.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != ls.mu.shape:
        raise ValueError(f"dimension mismatch: x {x.shape}, mu {ls.mu.shape}")
    diff = (x - ls.mu)[None, :]
    return float(_squared_distances(diff, ls.V, ls.diag_approx)[0])


def active_mask(data: DataSet, ls: LocationScatter, spec: WeightSpec) -> np.ndarray:
    """Boolean mask of observations with positive weight under ``ls``."""
    d = _squared_distances(data.X - ls.mu, ls.V, ls.diag_approx)
    if spec.kind == "unit":
        return np.ones(data.n, dtype=bool)
    return d < spec.cutoff


def _step(X, pi, mu, V, spec, diag_approx, tau=0.0):
    """One application of the fixed-point map; returns (mu_new, V_new)."""
    diff = X - mu
    d = _squared_distances(diff, V, diag_approx)
    w = weight(d, spec)
    pw = pi * w
    sw = pw.sum()
    if sw <= 0.0:
        raise EmptyActiveSet("all observations have zero weight")
    swd = float(pw @ d)
    if swd <= 0.0:
        raise DegenerateStep("all active observations coincide with the location")
    p = X.shape[1]
    mu_new = (pw @ X) / sw
    V_new = (p / swd) * (diff.T @ (diff * pw[:, None]))
    V_new = 0.5 * (V_new + V_new.T)
    if tau > 0.0:
        V_new = V_new / (1.0 + tau) + (tau / (1.0 + tau)) * np.eye(p)
    return mu_new, V_new


def fixed_point_step(data: DataSet, current: LocationScatter, spec: WeightSpec) -> LocationScatter:
    """One fixed-point update of (mu, V) from ``current``.

    The scatter numerator is centered at the current mu; distances honor
    ``current.diag_approx``.  Raises EmptyActiveSet when every observation is
    trimmed, DegenerateStep when the weighted distance sum vanishes.
    """
    mu_new, V_new = _step(
        data.X, data.effective_weights(), current.mu, current.V, spec, current.diag_approx
    )
    return LocationScatter(mu_new, V_new, diag_approx=current.diag_approx)


def _relative_change(mu_new, mu, V_new, V) -> float:
    r_mu = np.linalg.norm(mu_new - mu) / (1.0 + np.linalg.norm(mu))
    r_v = np.linalg.norm(V_new - V, "fro") / (1.0 + np.linalg.norm(V, "fro"))
    return max(r_mu, r_v)


def _finish(data, mu, V, a, spec, opts, iterations, converged, residual) -> FitResult:
    ls = LocationScatter(mu, V, diag_approx=opts.diag_approx)
    mask = active_mask(data, ls, spec)
    pi = data.effective_weights()
    return FitResult(
        ls=ls,
        a=a,
        active_mask=mask,
        active_ratio=min(1.0, max(0.0, float(pi @ mask))),
        iterations=iterations,
        converged=converged,
        residual=residual,
    )


def _fit_loop(data, a, init, spec, opts, tau=0.0) -> FitResult:
    X = data.X
    pi = data.effective_weights()
    mu, V = init.mu.copy(), init.V.copy()
    residual = np.inf
    for it in range(1, opts.max_iter + 1):
        try:
            mu_new, V_new = _step(X, pi, mu, V, spec, opts.diag_approx, tau=tau)
        except (EmptyActiveSet, DegenerateStep) as exc:
            raise type(exc)(f"{exc} (iteration {it})") from exc
        residual = _relative_change(mu_new, mu, V_new, V)
        mu, V = mu_new, V_new
        if residual <= opts.tol:
            return _finish(data, mu, V, a, spec, opts, it, True, residual)
    return _finish(data, mu, V, a, spec, opts, opts.max_iter, False, residual)


def fit_sppca(
    data: DataSet,
    a: float,
    init: LocationScatter | None = None,
    spec: WeightSpec = WeightSpec(),
    opts: FitOptions = FitOptions(),
) -> FitResult:
    """Run the fixed-point iteration from (mu_tilde, a * V_tilde).

    Parameters
    ----------
    data : DataSet
    a : initialization scale, in squared-distance units (order O(p)).
    init : optional explicit initial state; by default the robust initial
        estimate scaled by ``a``.
    spec, opts : weight family and solver controls.

    Returns a FitResult; non-convergence is flagged (``converged=False``),
    not raised, so a whole solution path can be assembled.  EmptyActiveSet
    and DegenerateStep propagate with the offending iteration index.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if init is None:
        base = initial_estimate(data)
        init = LocationScatter(base.mu, a * base.V, diag_approx=opts.diag_approx)
    elif init.diag_approx != opts.diag_approx:
        init = LocationScatter(init.mu, init.V, diag_approx=opts.diag_approx)
    return _fit_loop(data, a, init, spec, opts)


def fit_regularized(
    data: DataSet,
    a: float,
    tau: float,
    spec: WeightSpec = WeightSpec(),
    opts: FitOptions = FitOptions(),
    init: LocationScatter | None = None,
) -> FitResult:
    """Ridge-blended variant: each scatter update is shrunk toward the
    identity, V <- V_fp / (1 + tau) + tau / (1 + tau) * I.

    With tau = 0 the iterates are identical to ``fit_sppca``.  The blend
    keeps V positive definite when p > n, where the plain update is rank
    deficient and the full-matrix distance computation fails.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if a <= 0:
        raise ValueError("a must be positive")
    if init is None:
        base = initial_estimate(data)
        init = LocationScatter(base.mu, a * base.V, diag_approx=opts.diag_approx)
    elif init.diag_approx != opts.diag_approx:
        init = LocationScatter(init.mu, init.V, diag_approx=opts.diag_approx)
    return _fit_loop(data, a, init, spec, opts, tau=tau)


def solution_set(
    data: DataSet,
    grid,
    spec: WeightSpec = WeightSpec(),
    opts: FitOptions = FitOptions(),
    workers: int = 1,
) -> list[FitResult]:
    """One fit per grid scale, each cold-started at (mu_tilde, a * V_tilde).

    Failed fits (empty active set, degenerate step, singular scatter) are
    recorded in-place with ``converged=False`` and the error message instead
    of aborting the path.  Results are ordered by grid index regardless of
    worker scheduling.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    base = initial_estimate(data)  # raises before any fit on degenerate data

    def run(a: float) -> FitResult:
        init = LocationScatter(base.mu, a * base.V, diag_approx=opts.diag_approx)
        try:
            return _fit_loop(data, a, init, spec, opts)
        except (EmptyActiveSet, DegenerateStep, SingularScatter) as exc:
            mask = np.zeros(data.n, dtype=bool)
            return FitResult(
                ls=init,
                a=a,
                active_mask=mask,
                active_ratio=0.0,
                iterations=0,
                converged=False,
                residual=np.inf,
                error=f"{type(exc).__name__}: {exc}",
            )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, grid))
    return [run(a) for a in grid]


def tau_scale(x: np.ndarray) -> float:
    """Robust scale of a univariate sample, consistent for the Gaussian sd.

    Truncated-standard-deviation construction: MAD as the auxiliary scale, a
    bisquare-weighted location (tuning constant 4.5), then the square root of
    the truncated second moment (tuning constant 3.0), divided by the
    Gaussian consistency factor.
    """
    x = np.asarray(x, dtype=float)
    med = np.median(x)
    s0 = np.median(np.abs(x - med))
    if s0 < 1e-12:
        return 0.0
    z = (x - med) / s0
    wloc = np.where(np.abs(z) <= TAU_SCALE_C1, (1.0 - (z / TAU_SCALE_C1) ** 2) ** 2, 0.0)
    mu = float(wloc @ x) / float(wloc.sum())
    r2 = ((x - mu) / s0) ** 2
    raw = s0 * np.sqrt(np.mean(np.minimum(r2, TAU_SCALE_C2**2)))
    return float(raw) / TAU_SCALE_GAUSSIAN_CONSISTENCY


def initial_estimate(data: DataSet) -> LocationScatter:
    """Column medians plus a diagonal of squared per-column tau-scales."""
    med = np.median(data.X, axis=0)
    scales = np.array([tau_scale(data.X[:, j]) for j in range(data.p)])
    bad = np.nonzero(scales < 1e-12)[0]
    if bad.size:
        names = (
            [data.column_names[j] for j in bad]
            if data.column_names is not None
            else [str(j) for j in bad]
        )
        raise DegenerateScale(f"zero robust scale in column(s): {', '.join(names)}")
    return LocationScatter(med, np.diag(scales**2), diag_approx=True)


def fit_tme(
    data: DataSet,
    mu: np.ndarray,
    opts: FitOptions = FitOptions(),
) -> LocationScatter:
    """Distribution-free scatter baseline for a fixed, externally supplied mu.

    Iterates V <- p * sum_i pi_i (x_i - mu)(x_i - mu)^T / d_i with the trace
    renormalized to p each step (the equation only identifies shape).
    Observations at exactly mu are excluded from that iteration's sums, with
    a warning carrying the count.  Non-convergence is flagged by a warning.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (data.p,):
        raise ValueError(f"mu must have shape ({data.p},)")
    X = data.X
    pi = data.effective_weights()
    p = data.p
    diff = X - mu
    V = np.eye(p)
    dropped = 0
    converged = False
    for _ in range(opts.max_iter):
        d = _squared_distances(diff, V, opts.diag_approx)
        keep = d > 0.0
        n_dropped = int((~keep).sum())
        if n_dropped:
            dropped = max(dropped, n_dropped)
        if not np.any(keep):
            raise DegenerateStep("every observation coincides with mu")
        scaled = diff[keep] * (pi[keep] / d[keep])[:, None]
        V_new = p * (scaled.T @ diff[keep])
        V_new = 0.5 * (V_new + V_new.T)
        V_new *= p / np.trace(V_new)
        delta = np.linalg.norm(V_new - V, "fro") / np.linalg.norm(V, "fro")
        V = V_new
        if delta <= opts.tol:
            converged = True
            break
    if dropped:
        warnings.warn(f"excluded {dropped} observation(s) at zero distance from mu")
    if not converged:
        warnings.warn(f"scatter baseline did not converge in {opts.max_iter} iterations")
    return LocationScatter(mu, V, diag_approx=opts.diag_approx)


def pca(ls: LocationScatter, k: int) -> PCAModel:
    """Top-k eigenpairs of the scatter, descending, sign-normalized.

    Sign convention: each eigenvector's largest-magnitude entry is positive.
    """
    p = ls.p
    if not 1 <= k <= p:
        raise ValueError(f"k must be in [1, {p}], got {k}")
    vals, vecs = np.linalg.eigh(ls.V)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order][:k], vecs[:, order][:, :k]
    for j in range(k):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return PCAModel(eigenvalues=vals, eigenvectors=vecs, k=k)


def estimating_equation_residual(
    data: DataSet, fit: FitResult, spec: WeightSpec = WeightSpec()
) -> float:
    """Relative residual of the moment equations at a fitted state.

    Applies the fixed-point map once at (mu_hat, V_hat) and measures the
    relative change; at an exact solution both components are zero.
    """
    ls = fit.ls
    mu_new, V_new = _step(
        data.X, data.effective_weights(), ls.mu, ls.V, spec, ls.diag_approx
    )
    return _relative_change(mu_new, ls.mu, V_new, ls.V)
