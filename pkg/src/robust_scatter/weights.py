"""Observation weight family and the trimming-ball predicate.

The estimator downweights observations by ``w(u) = e^{-u}`` and trims them
entirely once ``e^{-u}`` falls to a threshold ``alpha``, i.e. once the squared
Mahalanobis distance ``u`` reaches ``ln(1/alpha)``.  The product ``w(u) * u``
is the effective per-observation factor in the reweighted scatter update; it
is bounded by ``1/e`` and vanishes outside the trimming ball, which is what
keeps the influence of far-away points bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HARD_THRESHOLD_EXPONENTIAL = "hard-threshold-exponential"
UNIT = "unit"

_KINDS = (HARD_THRESHOLD_EXPONENTIAL, UNIT)


@dataclass(frozen=True)
class WeightSpec:
    """Weight-family configuration.

    alpha : trimming threshold in (0, 1); weights below it are set to zero.
    kind  : ``"hard-threshold-exponential"`` (default) or ``"unit"``.
            The unit kind gives ``w == 1`` everywhere and exists so the same
            solver code path reproduces the unweighted moment equations in
            oracle tests.
    """

    alpha: float = 0.05
    kind: str = HARD_THRESHOLD_EXPONENTIAL

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}; expected one of {_KINDS}")

    @property
    def cutoff(self) -> float:
        """Trimming-ball radius ``ln(1/alpha)`` in squared-distance units."""
        return math.log(1.0 / self.alpha)


def weight(u, spec: WeightSpec = WeightSpec()):
    """Evaluate the weight at squared distance ``u`` (scalar or array).

    For the hard-threshold kind this is ``e^{-u}`` while ``u < ln(1/alpha)``
    and exactly 0 from the boundary on (strict inequality, no epsilon band).
    The comparison is done in log space so that it agrees bit-for-bit with
    the trimming-ball predicate.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("squared distance u must be nonnegative")
    if spec.kind == UNIT:
        out = np.ones_like(u)
    else:
        out = np.where(u < spec.cutoff, np.exp(-u), 0.0)
    return out if out.ndim else float(out)


def weight_product(u, spec: WeightSpec = WeightSpec()):
    """The product ``weight(u) * u``: bounded by 1/e, zero outside the ball."""
    u = np.asarray(u, dtype=float)
    out = weight(u, spec) * u
    return out if np.ndim(out) else float(out)


def in_ball(x, ls, spec: WeightSpec = WeightSpec()) -> bool:
    """True iff ``x`` lies strictly inside the trimming ball of ``ls``.

    Equivalent to ``weight(d(x, mu, V), spec) > 0`` for the hard-threshold
    kind; always true for the unit kind.
    """
    from .estimator import mahalanobis  # deferred to avoid a cycle

    if spec.kind == UNIT:
        return True
    return mahalanobis(x, ls) < spec.cutoff
