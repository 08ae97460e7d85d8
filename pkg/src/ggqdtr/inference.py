"""Large-sample inference for fitted Q-function weights.

The fit solves the moment condition D(theta) = 0 where D stacks per-subject
sums of TD residuals times features.  Standard Z-estimator asymptotics give

    sqrt(n) (theta_hat - theta*)  ->  N(0, Gamma' Sigma Gamma)

with Sigma the second moment of the per-subject moment vector and Gamma a
function of the feature cross-moments W = E[sum phi phi'] and
C = E[sum phi*(s') phi(s,a)'] evaluated at the greedy successor action.

Two interchangeable expressions for Gamma are provided:

* "plain":    Gamma = (W - gamma C)^{-1}, the direct inverse-Jacobian form;
* "bracket":  Gamma = (I - gamma W^{-1} C)' B^{-1} with
              B = W + gamma^2 C W^{-1} C' - 2 gamma C',
  an expanded form that matches "plain" whenever C is symmetric and
  commutes with W, and always at gamma = 0.

Monte Carlo calibration favors "plain" for asymmetric C, so it is the
default; see tests for the head-to-head check.

The greedy successor action makes C (hence Gamma) discontinuous in theta
wherever two actions tie.  When near-ties occur at sample points the
intervals are only approximate; a warning with the tie count is issued.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .compiled import (
    CompiledDataset,
    as_compiled,
    per_trajectory_moments,
    td_residuals,
)
from .ggq import compute_W_hat, cross_moment, stabilize_second_moment
from .mdp import ConfigurationError, DomainError, NumericalError, State

__all__ = [
    "GAMMA_VARIANTS", "Interval", "InferenceResult", "estimate_sigma",
    "estimate_gamma_matrix", "infer", "ci_theta", "ci_q_contrast",
    "save_inference", "load_inference",
]

GAMMA_VARIANTS = ("plain", "bracket")
TIE_GAP = 1e-8


@dataclass(frozen=True)
class Interval:
    estimate: float
    se: float
    lower: float
    upper: float
    level: float


@dataclass(frozen=True, eq=False)
class InferenceResult:
    """Point estimate with its sandwich covariance on the original scale
    (already divided by the number of subjects)."""

    theta: np.ndarray
    covariance: np.ndarray
    sigma: np.ndarray
    gamma_matrix: np.ndarray
    n_subjects: int
    gamma: float
    level: float
    tie_count: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(_checked_diag(self.covariance))


def _checked_diag(cov: np.ndarray) -> np.ndarray:
    """Covariance diagonal with negatives rejected.

    Rounding dust within 1e-12 of the diagonal scale is treated as an exact
    zero (a degenerate interval); anything more negative means the assembled
    sandwich is indefinite and no interval exists.
    """
    d = np.diag(cov)
    dust = 1e-12 * max(float(np.abs(d).max(initial=0.0)), np.finfo(float).tiny)
    bad = np.flatnonzero(d < -dust)
    if bad.size:
        j = int(bad[0])
        raise NumericalError(
            f"covariance diagonal is negative at coordinate {j} ({d[j]:.3e}); "
            "the sandwich estimate is numerically indefinite"
        )
    return np.clip(d, 0.0, None)


def estimate_sigma(cd: CompiledDataset, theta: np.ndarray, gamma: float) -> np.ndarray:
    """Second moment of the per-subject moment vector sum_t delta_t phi_t."""
    delta = td_residuals(cd, np.asarray(theta, dtype=float), gamma)
    v = per_trajectory_moments(cd, delta)
    return v.T @ v / v.shape[0]


def _tied_rows(cd: CompiledDataset, theta: np.ndarray) -> np.ndarray:
    """Transition rows whose successor has a near-tied greedy action."""
    q = cd.next_phi @ theta
    q = np.where(cd.next_mask, q, -np.inf)
    real = cd.next_mask.sum(axis=1) > 1
    if not real.any():
        return np.empty(0, dtype=int)
    top2 = np.sort(q[real], axis=1)[:, -2:]
    gaps = top2[:, 1] - top2[:, 0]
    tied = np.isfinite(gaps) & (gaps < TIE_GAP)
    return np.flatnonzero(real)[tied]


def estimate_gamma_matrix(W: np.ndarray, C: np.ndarray, gamma: float,
                          variant: str = "plain") -> np.ndarray:
    """The Gamma factor of the sandwich; see module docstring for variants."""
    if variant not in GAMMA_VARIANTS:
        raise ConfigurationError(
            f"unknown gamma-matrix variant {variant!r}; choose from {GAMMA_VARIANTS}"
        )
    p = W.shape[0]
    eye = np.eye(p)
    if variant == "plain":
        system = W - gamma * C
        label = "moment Jacobian W - gamma C"
    else:
        try:
            WinvC = np.linalg.solve(W, C)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"second-moment matrix is singular: {exc}") from exc
        system = W + gamma ** 2 * (C @ WinvC.T) - 2.0 * gamma * C.T
        label = "inner bracket"
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(
            f"{label} is numerically singular (condition number {cond:.3e})"
        )
    try:
        if variant == "plain":
            return np.linalg.solve(system, eye)
        return np.linalg.solve(system.T, eye - gamma * WinvC).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"gamma-matrix system is singular: {exc}") from exc


def infer(data, fmap, theta: np.ndarray, gamma: float, level: float = 0.95,
          variant: str = "plain") -> InferenceResult:
    """Sandwich covariance of the fitted weights.

    Args:
        data: Dataset or CompiledDataset.
        fmap: feature map used for the fit.
        theta: fitted weight vector.
        gamma: discount used for the fit.
        level: two-sided confidence level for derived intervals.
        variant: which algebraic form of Gamma to use.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    theta = np.asarray(theta, dtype=float)
    cd = as_compiled(data, fmap)
    if theta.shape != (cd.dim,):
        raise ConfigurationError(
            f"theta has shape {theta.shape}, feature map needs ({cd.dim},)"
        )
    # The same stabilized second-moment matrix the fit used; without the
    # ridge, features that never fire in the data make every factor of the
    # sandwich exactly singular.
    W = stabilize_second_moment(compute_W_hat(cd, fmap))
    C = cross_moment(cd, theta)
    sigma = estimate_sigma(cd, theta, gamma)
    gmat = estimate_gamma_matrix(W, C, gamma, variant)
    tied = _tied_rows(cd, theta)
    if tied.size:
        shown = ", ".join(str(i) for i in tied[:5])
        more = "" if tied.size <= 5 else f" (+{tied.size - 5} more)"
        warnings.warn(
            f"{tied.size} successor states have a near-tied greedy action "
            f"(gap < {TIE_GAP:g}) at transition rows {shown}{more}; "
            "intervals may be unstable there",
            stacklevel=2,
        )
    cov = gmat.T @ sigma @ gmat / cd.n
    cov = (cov + cov.T) / 2.0
    return InferenceResult(theta=theta, covariance=cov, sigma=sigma,
                           gamma_matrix=gmat, n_subjects=cd.n, gamma=gamma,
                           level=level, tie_count=int(tied.size))


def _z(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


def ci_theta(result: InferenceResult, index: int | None = None):
    """Wald interval(s) for the weight coordinates.

    With an index, returns one Interval; otherwise a list over coordinates.
    """
    z = _z(result.level)
    se = result.se

    def one(j: int) -> Interval:
        est = float(result.theta[j])
        return Interval(estimate=est, se=float(se[j]),
                        lower=float(est - z * se[j]),
                        upper=float(est + z * se[j]),
                        level=result.level)

    if index is not None:
        if not 0 <= index < result.theta.size:
            raise DomainError(f"coordinate {index} out of range")
        return one(index)
    return [one(j) for j in range(result.theta.size)]


def ci_q_contrast(result: InferenceResult, fmap, state: State,
                  action_hi: int, action_lo: int) -> Interval:
    """Interval for Q(state, action_hi) - Q(state, action_lo).

    The contrast is linear in the weights, so the delta method is exact:
    the variance is c' Cov c for c the feature difference.
    """
    c = fmap.features(state, action_hi) - fmap.features(state, action_lo)
    est = float(c @ result.theta)
    var = float(c @ result.covariance @ c)
    diag = np.diag(result.covariance)
    dust = 1e-12 * max(float(np.abs(diag).max(initial=0.0)), np.finfo(float).tiny)
    if var < -dust * max(float(c @ c), 1.0):
        raise NumericalError(
            f"contrast variance is negative ({var:.3e}); "
            "the sandwich estimate is numerically indefinite"
        )
    se = float(np.sqrt(max(var, 0.0)))
    z = _z(result.level)
    return Interval(estimate=est, se=se, lower=est - z * se,
                    upper=est + z * se, level=result.level)


def save_inference(result: InferenceResult, path: str) -> None:
    """Write one row per coordinate: index, estimate, se, lower, upper."""
    intervals = ci_theta(result)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coordinate", "estimate", "se", "lower", "upper",
                         "level", "n_subjects"])
        for j, iv in enumerate(intervals):
            writer.writerow([j, repr(iv.estimate), repr(iv.se),
                             repr(iv.lower), repr(iv.upper),
                             repr(iv.level), result.n_subjects])


def load_inference(path: str) -> list[Interval]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["coordinate", "estimate", "se",
                                            "lower", "upper"]:
            raise ConfigurationError(f"{path} is not an inference table")
        out = []
        for row in reader:
            out.append(Interval(estimate=float(row[1]), se=float(row[2]),
                                lower=float(row[3]), upper=float(row[4]),
                                level=float(row[5])))
    return out
