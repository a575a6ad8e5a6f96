"""Predicting the shape of log-rank power over follow-up.

The weighted average hazard difference is

    A(tau) = int_0^tau w(t) {h1(t) - h0(t)} dt,
    w(t)   = G(t) * 2 S0(t) S1(t) / (S0(t) + S1(t)),

with G the censoring survival function.  Under balanced allocation with n
subjects per arm, the expected log-rank score is approximately
(n / 2) * A(tau); a power curve tends to follow the shape of |A|.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy import integrate

from .datagen import FollowUpSpec
from .distributions import MixtureCureArm, TwoArmDesign

QUAD_EPSABS = 1e-8
SHAPE_TOL = 1e-9


@dataclass(frozen=True)
class CensoringLaw:
    """Censoring survival G(t).

    By default uniform on ``[tau_start, tau_end]``: G = 1 before tau_start,
    linear down to 0 at tau_end.  Any other law can be given through
    ``survival_fn``; ``tau_end`` then marks where G reaches 0 (may be inf).
    """

    tau_start: float
    tau_end: float
    survival_fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.tau_start < 0:
            raise ValueError("tau_start must be non-negative")
        if not self.tau_end > self.tau_start:
            raise ValueError("tau_end must exceed tau_start")
        if self.survival_fn is None and not math.isfinite(self.tau_end):
            raise ValueError("uniform censoring needs a finite tau_end")

    @classmethod
    def from_followup(cls, spec: FollowUpSpec) -> "CensoringLaw":
        return cls(spec.tau_accrual, spec.tau)

    def survival(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.survival_fn is not None:
            return np.asarray(self.survival_fn(t), dtype=np.float64)
        g = (self.tau_end - t) / (self.tau_end - self.tau_start)
        return np.clip(np.where(t < self.tau_start, 1.0, g), 0.0, 1.0)


def trial_censoring(control: MixtureCureArm, level: float = 0.999, rounding: float | None = 0.25) -> CensoringLaw:
    """Uniform censoring from the accrual time to the ``level`` follow-up of the control arm."""
    return CensoringLaw.from_followup(FollowUpSpec.from_control(control, level, rounding))


def weight_function(design: TwoArmDesign, censoring: CensoringLaw, t):
    s0 = design.control.survival(t)
    s1 = design.treatment.survival(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        hm = np.where(s0 + s1 > 0, 2.0 * s0 * s1 / (s0 + s1), 0.0)
    return censoring.survival(t) * hm


def hazard_difference(design: TwoArmDesign, t):
    if design.is_null:
        return np.zeros_like(np.asarray(t, dtype=np.float64))
    with np.errstate(invalid="ignore"):
        return design.treatment.hazard(t) - design.control.hazard(t)


def integrand(design: TwoArmDesign, censoring: CensoringLaw, t):
    """w(t) * (h1(t) - h0(t)); zero wherever the weight vanishes."""
    w = weight_function(design, censoring, t)
    dh = hazard_difference(design, t)
    return np.where(w > 0, w * np.nan_to_num(dh, nan=0.0, posinf=0.0, neginf=0.0), 0.0)


def delta_cumulative_hazard(design: TwoArmDesign, t):
    return design.treatment.cumulative_hazard(t) - design.control.cumulative_hazard(t)


class Shape(str, Enum):
    MONOTONE = "Monotone"
    NON_MONOTONE = "NonMonotone"


def classify_shape(values, tol: float = SHAPE_TOL) -> tuple[Shape, int]:
    """Monotone if the sequence never moves against its overall direction by more than ``tol``.

    Returns the shape and the index of the largest ``|value|``.
    """
    a = np.asarray(values, dtype=np.float64)
    diffs = np.diff(a)
    arg = int(np.argmax(np.abs(a))) if a.size else 0
    if np.all(diffs <= tol) or np.all(diffs >= -tol):
        return Shape.MONOTONE, arg
    return Shape.NON_MONOTONE, arg


@dataclass
class AProfile:
    tau: np.ndarray
    quantile_level: np.ndarray
    A: np.ndarray
    delta_h: np.ndarray
    classification: Shape
    extremum_index: int

    @property
    def extremum_tau(self) -> float:
        return float(self.tau[self.extremum_index])

    @property
    def extremum_quantile(self) -> float:
        return float(self.quantile_level[self.extremum_index])

    @property
    def extremum_value(self) -> float:
        return float(self.A[self.extremum_index])

    def at(self, tau: float) -> float:
        """A at ``tau`` by linear interpolation on the grid."""
        return float(np.interp(tau, self.tau, self.A))

    def verdict(self) -> str:
        if self.classification is Shape.MONOTONE:
            return "Monotone"
        return (f"NonMonotone at tau={self.extremum_tau:.6g}, "
                f"quantile={self.extremum_quantile:.6g}, A={self.extremum_value:.6g}")

    def to_csv(self, path=None, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (header or {}).items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "quantileLevel", "A", "deltaH"])
        for row in zip(self.tau, self.quantile_level, self.A, self.delta_h):
            w.writerow([f"{x:.15g}" for x in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def default_grid(design: TwoArmDesign, censoring: CensoringLaw, n: int = 400) -> np.ndarray:
    """Follow-up times for a profile.

    Equal steps in control-uncured quantile level from 0.001 to 0.9999,
    merged with equal time steps up to ``tau_end`` when it is finite, plus
    extra points crowding toward ``tau_end`` where G drops to zero.
    """
    levels = np.linspace(0.001, 0.9999, n)
    t = design.control.uncured_quantile(levels)
    end = censoring.tau_end
    if math.isfinite(end):
        t = t[t < end]
        span = end - censoring.tau_start
        near_end = end - span * np.geomspace(0.05, 1e-4, 24)
        t = np.concatenate((t, np.linspace(0.0, end, n + 1)[1:], near_end, [end]))
    t = np.unique(t[t > 0])
    return np.concatenate(([0.0], t))


def cumulative_integral(fn: Callable, breaks: np.ndarray, epsabs: float = QUAD_EPSABS) -> np.ndarray:
    """Integral of a vectorized ``fn`` from breaks[0] to each break.

    All panels are integrated together by one adaptive Gauss-Kronrod call on
    the unit interval; interior nodes only, so integrable endpoint
    singularities are tolerated.
    """
    breaks = np.asarray(breaks, dtype=np.float64)
    if breaks.size < 2:
        return np.zeros(breaks.size)
    left = breaks[:-1]
    width = np.diff(breaks)

    def panels(u):
        return fn(left + u * width) * width

    vals, _err = integrate.quad_vec(panels, 0.0, 1.0, epsabs=epsabs, epsrel=1e-12, norm="max",
                                    limit=2000)
    return np.concatenate(([0.0], np.cumsum(vals)))


def compute_a_profile(design: TwoArmDesign, censoring: CensoringLaw, grid=None,
                      tol: float = SHAPE_TOL) -> AProfile:
    """A(tau) on a grid of follow-up times under one fixed censoring law."""
    tau = default_grid(design, censoring) if grid is None else np.asarray(grid, dtype=np.float64)
    if tau.size == 0 or np.any(np.diff(tau) <= 0) or tau[0] < 0:
        raise ValueError("grid must be non-empty, non-negative and strictly increasing")
    if tau[0] > 0:
        tau = np.concatenate(([0.0], tau))
    extra = [x for x in (censoring.tau_start, censoring.tau_end)
             if math.isfinite(x) and 0 < x < tau[-1]]
    breaks = np.unique(np.concatenate((tau, extra)))
    if design.is_null:
        a_all = np.zeros(breaks.size)
    else:
        a_all = cumulative_integral(lambda t: integrand(design, censoring, t), breaks)
    a = a_all[np.searchsorted(breaks, tau)]
    with np.errstate(divide="ignore"):
        q = design.control.uncured.cdf(tau)
        dh = delta_cumulative_hazard(design, tau)
    shape, arg = classify_shape(a, tol)
    return AProfile(tau, np.asarray(q), a, np.asarray(dh), shape, arg)


def a_at_followup(design: TwoArmDesign, spec: FollowUpSpec) -> float:
    """A at the end of follow-up when censoring is uniform on [accrual, tau]."""
    prof = compute_a_profile(design, CensoringLaw.from_followup(spec), [spec.tau])
    return float(prof.A[-1])


def expected_log_rank_score(design: TwoArmDesign, spec: FollowUpSpec, n_per_arm: int) -> float:
    """Large-sample mean of the unweighted log-rank score U: (n / 2) * A(tau)."""
    return 0.5 * n_per_arm * a_at_followup(design, spec)
