"""Active-ratio curve construction and data-adaptive scale selection.

The active ratio AR(a) is the weighted fraction of observations left inside
the trimming ball of the fit initialized at scale ``a``.  Scanned over a grid
of scales it traces an increasing curve whose slope dips where the main data
cloud has been absorbed but a secondary (contaminating) cloud has not yet
entered; the selector returns the first strict local minimum of that slope,
read from a cubic smoothing-spline fit of the curve.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_smoothing_spline

from .errors import GridNotFound
from .estimator import (
    DataSet,
    FitOptions,
    FitResult,
    LocationScatter,
    active_mask,
    fit_sppca,
    initial_estimate,
)
from .weights import WeightSpec

# scan range for grid-endpoint location, in units of p
_SCAN_LO = 0.05
_SCAN_HI = 50.0
_SCAN_POINTS = 25
_BISECT_REL_TOL = 0.01


@dataclass(frozen=True)
class ARCurve:
    """Raw and smoothed active-ratio values over an ascending scale grid."""

    grid: np.ndarray
    ar_raw: np.ndarray
    ar_smooth: np.ndarray
    slope: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        m = g.size
        for name in ("ar_raw", "ar_smooth", "slope"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (m,):
                raise ValueError(f"{name} must have length {m}")
            object.__setattr__(self, name, arr)
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        for name in ("ar_raw", "ar_smooth"):
            arr = getattr(self, name)
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "grid", g)


@dataclass(frozen=True)
class TuningResult:
    a_star: float
    candidates: np.ndarray
    fallback_used: bool
    ar_at_a_star: float


def active_ratio(fit: FitResult, data: DataSet, spec: WeightSpec = WeightSpec()) -> float:
    """Weighted fraction of observations inside the fitted trimming ball."""
    mask = active_mask(data, fit.ls, spec)
    return min(1.0, max(0.0, float(data.effective_weights() @ mask)))


def _probe_ar(data, base, a, spec, opts, cache):
    """AR of a full fit at scale ``a``; failed fits count as AR = 0."""
    if a not in cache:
        init = LocationScatter(base.mu, a * base.V, diag_approx=opts.diag_approx)
        try:
            cache[a] = fit_sppca(data, a, init=init, spec=spec, opts=opts).active_ratio
        except Exception:
            cache[a] = 0.0
    return cache[a]


def _bisect_crossing(data, base, lo, hi, level, spec, opts, cache):
    """Smallest scale in (lo, hi] with AR >= level, to 1% relative precision."""
    while hi - lo > _BISECT_REL_TOL * lo:
        mid = 0.5 * (lo + hi)
        if _probe_ar(data, base, mid, spec, opts, cache) >= level:
            hi = mid
        else:
            lo = mid
    return hi


def build_grid(
    data: DataSet,
    ell: float = 0.2,
    m: int | None = None,
    spec: WeightSpec = WeightSpec(),
    opts: FitOptions = FitOptions(),
):
    """Equally spaced scale grid spanning AR values from ``ell`` up to 1.

    Locates a_min = min{a : AR(a) >= ell} and a_max = min{a : AR(a) = 1} by a
    coarse geometric scan over [0.05 p, 50 p] followed by bisection to 1%
    relative precision (every probe is a full fit), then returns ``m``
    equally spaced points on [a_min, a_max].  ``m`` defaults to n/5 rounded,
    with a floor of 10.
    """
    if not 0.0 < ell < 1.0:
        raise ValueError("ell must be in (0, 1)")
    if m is None:
        m = max(10, round(data.n / 5))
    if m < 2:
        raise ValueError("m must be at least 2")
    p = data.p
    full = 1.0 - 1e-12
    base = initial_estimate(data)  # errors on degenerate data before any probe
    scan = np.geomspace(_SCAN_LO * p, _SCAN_HI * p, _SCAN_POINTS)
    cache: dict[float, float] = {}
    ars = [_probe_ar(data, base, a, spec, opts, cache) for a in scan]

    idx_min = next((i for i, v in enumerate(ars) if v >= ell), None)
    if idx_min is None:
        raise GridNotFound(f"AR never reached {ell} on the scan range [{scan[0]:g}, {scan[-1]:g}]")
    if idx_min == 0:
        a_min = scan[0]
    else:
        a_min = _bisect_crossing(data, base, scan[idx_min - 1], scan[idx_min], ell,
                                 spec, opts, cache)

    idx_max = next((i for i, v in enumerate(ars) if v >= full), None)
    if idx_max is None:
        raise GridNotFound(f"AR never reached 1 on the scan range [{scan[0]:g}, {scan[-1]:g}]")
    if idx_max == 0:
        a_max = scan[0]
    else:
        a_max = _bisect_crossing(data, base, scan[idx_max - 1], scan[idx_max], full,
                                 spec, opts, cache)

    if not a_max > a_min:
        raise GridNotFound(f"degenerate grid range [{a_min:g}, {a_max:g}]")
    return np.linspace(a_min, a_max, m)


MAX_SMOOTHER_DOF = 8


def _penalty_eigensystem(x):
    """Eigendecomposition of the curvature penalty of the natural cubic
    smoothing spline with knots ``x``.

    The fitted values at penalty lam are (I + lam K)^{-1} y with
    K = Q R^{-1} Q^T built from the knot spacings, the same convention as
    scipy's smoothing spline, so residuals and the smoother trace follow by
    diagonal shrinkage of the eigenvalues.
    """
    m = x.size
    h = np.diff(x)
    R = np.zeros((m - 2, m - 2))
    for i in range(m - 2):
        R[i, i] = (h[i] + h[i + 1]) / 3.0
        if i + 1 < m - 2:
            R[i, i + 1] = R[i + 1, i] = h[i + 1] / 6.0
    Q = np.zeros((m, m - 2))
    for i in range(1, m - 1):
        Q[i - 1, i - 1] = 1.0 / h[i - 1]
        Q[i, i - 1] = -1.0 / h[i - 1] - 1.0 / h[i]
        Q[i + 1, i - 1] = 1.0 / h[i]
    K = Q @ np.linalg.solve(R, Q.T)
    d, U = np.linalg.eigh(0.5 * (K + K.T))
    return np.maximum(d, 0.0), U


def _gcv_penalty(x, y, max_dof):
    """Penalty minimizing generalized cross-validation, with the smoother
    trace bounded by ``max_dof``."""
    m = x.size
    d, U = _penalty_eigensystem(x)
    z = U.T @ y
    pos = d[d > 0]
    lams = np.geomspace(1e-8 / pos.max(), 1e8 / pos.min(), 121)

    def edof(lam):
        return float(np.sum(1.0 / (1.0 + lam * d)))

    def gcv(lam):
        shrink = lam * d / (1.0 + lam * d)
        rss = float(np.sum((shrink * z) ** 2))
        return m * rss / (m - edof(lam)) ** 2

    cap = min(max_dof, m - 2)
    admissible = [lam for lam in lams if edof(lam) <= cap]
    if not admissible:
        admissible = [lams[-1]]
    return min(admissible, key=gcv)


def _edof_penalty(x, target):
    """Penalty whose smoother trace equals ``target`` degrees of freedom."""
    d, _ = _penalty_eigensystem(x)
    pos = d[d > 0]
    lo, hi = 1e-10 / pos.max(), 1e10 / pos.min()
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if np.sum(1.0 / (1.0 + mid * d)) > target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-9:
            break
    return np.sqrt(lo * hi)


def smooth_curve(grid, ar_raw, lam: float | None = None):
    """Cubic smoothing spline through the raw curve.

    The penalty is chosen by generalized cross-validation unless ``lam`` is
    supplied; the search is bounded so the smoother uses at most
    min(8, m - 2) effective degrees of freedom, since active-ratio curves
    are staircases with strongly dependent increments for which
    unconstrained cross-validation degenerates to interpolation.  Returns
    fitted values at the grid points (clipped into [0, 1]) and the spline's
    analytic first derivative there.  If the cross-validation search fails,
    falls back to that fixed-dof limit with a warning; for m == 4 the limit
    is the least-squares line.
    """
    x = np.asarray(grid, dtype=float)
    y = np.asarray(ar_raw, dtype=float)
    m = x.size
    if m < 4:
        raise ValueError("need at least 4 grid points to smooth")
    if lam is None and m >= 5:
        try:
            lam = _gcv_penalty(x, y, MAX_SMOOTHER_DOF)
        except Exception as exc:
            target = min(MAX_SMOOTHER_DOF, m - 2)
            warnings.warn(f"cross-validation failed ({exc}); using fixed {target}-dof fit")
            try:
                lam = _edof_penalty(x, target)
            except Exception:
                lam = None
    if lam is None or m < 5:  # scipy's spline needs at least 5 knots; 2-dof limit
        coef = np.polyfit(x, y, 1)
        return np.clip(np.polyval(coef, x), 0.0, 1.0), np.full(m, coef[0])
    spl = make_smoothing_spline(x, y, lam=lam)
    fitted = np.clip(spl(x), 0.0, 1.0)
    slope = spl.derivative()(x)
    return fitted, slope


def select_a_star(curve: ARCurve, literal_ar_minima: bool = False) -> TuningResult:
    """First strict local minimum of the smoothed curve's slope.

    Collects interior grid points whose slope is strictly below both
    neighbors and returns the smallest; plateaus do not qualify.  When no
    such point exists (e.g. a concave curve on clean data) the largest grid
    scale is returned with ``fallback_used`` set.  ``literal_ar_minima``
    applies the same test to the smoothed curve values themselves instead of
    the slope (kept for comparison; almost always empty since the curve is
    non-decreasing).
    """
    seq = curve.ar_smooth if literal_ar_minima else curve.slope
    idx = [j for j in range(1, len(seq) - 1) if seq[j] < seq[j - 1] and seq[j] < seq[j + 1]]
    candidates = curve.grid[idx]
    if idx:
        pick = idx[0]
        return TuningResult(
            a_star=float(curve.grid[pick]),
            candidates=candidates,
            fallback_used=False,
            ar_at_a_star=float(curve.ar_raw[pick]),
        )
    return TuningResult(
        a_star=float(curve.grid[-1]),
        candidates=candidates,
        fallback_used=True,
        ar_at_a_star=float(curve.ar_raw[-1]),
    )
