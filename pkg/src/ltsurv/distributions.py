"""Latency distributions and the two-arm mixture cure model.

Every survival, density, hazard and quantile computation in the package goes
through this module.  Functions accept scalars or arrays and return numpy
values of matching shape.

Families and their two parameters:

==============  =============================  ==========================
family          param1                         param2
==============  =============================  ==========================
``weibull``     shape k                        scale lambda
``gamma``       shape alpha                    rate lambda
``loglogistic`` shape beta                     scale alpha
``lognormal``   mu (mean of log time)          sigma (sd of log time)
==============  =============================  ==========================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import special, stats


class Family(str, Enum):
    WEIBULL = "weibull"
    GAMMA = "gamma"
    LOGLOGISTIC = "loglogistic"
    LOGNORMAL = "lognormal"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"ll": "loglogistic", "lnorm": "lognormal", "weib": "weibull"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown distribution family {value!r}") from None


def _as_float_array(t):
    return np.asarray(t, dtype=np.float64)


@dataclass(frozen=True)
class ParametricDistribution:
    """A proper latency law for the uncured subpopulation."""

    family: Family
    param1: float
    param2: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        p1, p2 = float(self.param1), float(self.param2)
        if not (math.isfinite(p1) and math.isfinite(p2)):
            raise ValueError("distribution parameters must be finite")
        if self.family is not Family.LOGNORMAL and p1 <= 0:
            raise ValueError(f"{self.family.value} shape must be positive, got {p1}")
        if p2 <= 0:
            raise ValueError(f"{self.family.value} second parameter must be positive, got {p2}")
        object.__setattr__(self, "param1", p1)
        object.__setattr__(self, "param2", p2)

    # constructors ---------------------------------------------------------

    @classmethod
    def weibull(cls, shape: float, scale: float) -> "ParametricDistribution":
        return cls(Family.WEIBULL, shape, scale)

    @classmethod
    def gamma(cls, shape: float, rate: float) -> "ParametricDistribution":
        return cls(Family.GAMMA, shape, rate)

    @classmethod
    def loglogistic(cls, shape: float, scale: float) -> "ParametricDistribution":
        return cls(Family.LOGLOGISTIC, shape, scale)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "ParametricDistribution":
        return cls(Family.LOGNORMAL, mu, sigma)

    # core functions -------------------------------------------------------

    def log_survival(self, t):
        t = _as_float_array(t)
        a, b = self.param1, self.param2
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family is Family.WEIBULL:
                out = -np.power(t / b, a)
            elif self.family is Family.GAMMA:
                out = stats.gamma.logsf(t, a, scale=1.0 / b)
            elif self.family is Family.LOGLOGISTIC:
                out = -np.log1p(np.power(t / b, a))
            else:
                z = (np.log(t) - a) / b
                out = special.log_ndtr(-z)
        return np.where(t <= 0, 0.0, out)

    def survival(self, t):
        return np.exp(self.log_survival(t))

    def cdf(self, t):
        return -np.expm1(self.log_survival(t))

    def log_density(self, t):
        t = _as_float_array(t)
        a, b = self.param1, self.param2
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family is Family.WEIBULL:
                out = np.log(a / b) + (a - 1) * np.log(t / b) - np.power(t / b, a)
            elif self.family is Family.GAMMA:
                out = stats.gamma.logpdf(t, a, scale=1.0 / b)
            elif self.family is Family.LOGLOGISTIC:
                out = np.log(a / b) + (a - 1) * np.log(t / b) - 2 * np.log1p(np.power(t / b, a))
            else:
                z = (np.log(t) - a) / b
                out = -0.5 * z * z - 0.5 * np.log(2 * np.pi) - np.log(b * t)
        return np.where(t < 0, -np.inf, out)

    def density(self, t):
        return np.exp(self.log_density(t))

    def log_hazard(self, t):
        """Log hazard; ``+inf`` at t=0 for shapes below one, ``-inf`` where the hazard is 0."""
        t = _as_float_array(t)
        a, b = self.param1, self.param2
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family is Family.WEIBULL:
                out = np.log(a / b) + (a - 1) * np.log(t / b)
            elif self.family is Family.LOGLOGISTIC:
                out = np.log(a / b) + (a - 1) * np.log(t / b) - np.log1p(np.power(t / b, a))
            else:
                out = self.log_density(t) - self.log_survival(t)
            if self.family is Family.GAMMA:
                # gamma hazard at 0 follows the shape, like the Weibull
                out = np.where(t == 0, np.log(b) if a == 1 else (np.inf if a < 1 else -np.inf), out)
            elif self.family is Family.LOGNORMAL:
                out = np.where(t == 0, -np.inf, out)
        return out

    def hazard(self, t):
        return np.exp(self.log_hazard(t))

    def cumulative_hazard(self, t):
        return -self.log_survival(t)

    def quantile(self, p):
        """Time t with F(t) = p for p in (0, 1)."""
        p = _as_float_array(p)
        if np.any((p <= 0) | (p >= 1) | np.isnan(p)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        return self._quantile_unchecked(p)

    def _quantile_unchecked(self, p):
        a, b = self.param1, self.param2
        if self.family is Family.WEIBULL:
            return b * np.power(-np.log1p(-p), 1.0 / a)
        if self.family is Family.GAMMA:
            return special.gammaincinv(a, p) / b
        if self.family is Family.LOGLOGISTIC:
            return b * np.power(p / (1 - p), 1.0 / a)
        return np.exp(a + b * special.ndtri(p))

    def mean(self) -> float:
        a, b = self.param1, self.param2
        if self.family is Family.WEIBULL:
            return b * math.gamma(1 + 1 / a)
        if self.family is Family.GAMMA:
            return a / b
        if self.family is Family.LOGLOGISTIC:
            if a <= 1:
                return math.inf
            return b * (math.pi / a) / math.sin(math.pi / a)
        return math.exp(a + b * b / 2)

    def scaled(self, factor: float) -> "ParametricDistribution":
        """Law of ``factor * T``; used for time-unit changes and AFT effects."""
        if factor <= 0:
            raise ValueError("time scaling factor must be positive")
        a, b = self.param1, self.param2
        if self.family is Family.GAMMA:
            return ParametricDistribution(self.family, a, b / factor)
        if self.family is Family.LOGNORMAL:
            return ParametricDistribution(self.family, a + math.log(factor), b)
        return ParametricDistribution(self.family, a, b * factor)

    def to_dict(self) -> dict:
        return {"family": self.family.value, "param1": self.param1, "param2": self.param2}


class EffectKind(str, Enum):
    NONE = "none"
    HAZARD_RATIO = "hazard_ratio"
    TIME_RATIO = "time_ratio"


@dataclass(frozen=True)
class UncuredEffect:
    """Effect on the uncured law relative to a reference arm.

    ``HAZARD_RATIO`` gives S(t) = S_ref(t) ** value; ``TIME_RATIO`` gives
    S(t) = S_ref(t / value).
    """

    kind: EffectKind = EffectKind.NONE
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", EffectKind(self.kind))
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"effect size must be positive and finite, got {self.value}")

    @classmethod
    def hazard_ratio(cls, hr: float) -> "UncuredEffect":
        return cls(EffectKind.HAZARD_RATIO, hr)

    @classmethod
    def time_ratio(cls, tr: float) -> "UncuredEffect":
        return cls(EffectKind.TIME_RATIO, tr)

    @property
    def is_identity(self) -> bool:
        return self.kind is EffectKind.NONE or self.value == 1.0


NO_EFFECT = UncuredEffect()


@dataclass(frozen=True)
class MixtureCureArm:
    """One arm: S(t) = pi + (1 - pi) * S_u(t)."""

    cure_fraction: float
    uncured: ParametricDistribution
    effect: UncuredEffect = NO_EFFECT

    def __post_init__(self):
        pi = float(self.cure_fraction)
        if not 0.0 <= pi <= 1.0:
            raise ValueError(f"cure fraction must lie in [0, 1], got {pi}")
        object.__setattr__(self, "cure_fraction", pi)

    # uncured subpopulation ------------------------------------------------

    def uncured_log_survival(self, t):
        t = _as_float_array(t)
        e = self.effect
        if e.kind is EffectKind.HAZARD_RATIO:
            return e.value * self.uncured.log_survival(t)
        if e.kind is EffectKind.TIME_RATIO:
            return self.uncured.log_survival(t / e.value)
        return self.uncured.log_survival(t)

    def uncured_survival(self, t):
        return np.exp(self.uncured_log_survival(t))

    def uncured_log_hazard(self, t):
        t = _as_float_array(t)
        e = self.effect
        if e.kind is EffectKind.HAZARD_RATIO:
            return math.log(e.value) + self.uncured.log_hazard(t)
        if e.kind is EffectKind.TIME_RATIO:
            return self.uncured.log_hazard(t / e.value) - math.log(e.value)
        return self.uncured.log_hazard(t)

    def uncured_log_density(self, t):
        return self.uncured_log_hazard(t) + self.uncured_log_survival(t)

    def uncured_density(self, t):
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.exp(self.uncured_log_density(t))
        return np.nan_to_num(out, nan=0.0)

    def uncured_quantile(self, p):
        p = _as_float_array(p)
        if np.any((p <= 0) | (p >= 1) | np.isnan(p)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        e = self.effect
        if e.kind is EffectKind.HAZARD_RATIO:
            # S_ref(t)**hr = 1 - p
            p_ref = -np.expm1(np.log1p(-p) / e.value)
            return self.uncured._quantile_unchecked(p_ref)
        if e.kind is EffectKind.TIME_RATIO:
            return e.value * self.uncured._quantile_unchecked(p)
        return self.uncured._quantile_unchecked(p)

    # mixture --------------------------------------------------------------

    def log_survival(self, t):
        pi = self.cure_fraction
        lsu = self.uncured_log_survival(t)
        if pi == 0.0:
            return lsu
        if pi == 1.0:
            return np.zeros_like(lsu)
        return np.logaddexp(math.log(pi), math.log1p(-pi) + lsu)

    def survival(self, t):
        pi = self.cure_fraction
        return pi + (1.0 - pi) * self.uncured_survival(t)

    def log_hazard(self, t):
        """log h(t) = log(1 - pi) + log f_u(t) - log S(t)."""
        pi = self.cure_fraction
        if pi == 0.0:
            return self.uncured_log_hazard(t)
        t = _as_float_array(t)
        if pi == 1.0:
            return np.full(t.shape, -np.inf)
        with np.errstate(invalid="ignore"):
            out = math.log1p(-pi) + self.uncured_log_density(t) - self.log_survival(t)
        return np.where(np.isnan(out), -np.inf, out)

    def hazard(self, t):
        with np.errstate(over="ignore"):
            return np.exp(self.log_hazard(t))

    def cumulative_hazard(self, t):
        return -self.log_survival(t)

    def density(self, t):
        return (1.0 - self.cure_fraction) * self.uncured_density(t)

    def to_dict(self) -> dict:
        return {
            "cure_fraction": self.cure_fraction,
            "uncured": self.uncured.to_dict(),
            "effect": {"kind": self.effect.kind.value, "value": self.effect.value},
        }


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def expit(x: float) -> float:
    return float(special.expit(x))


def cure_fraction_from_odds_ratio(pi0: float, odds_ratio: float) -> float:
    """pi1 with logit(pi1) - logit(pi0) = log(OR)."""
    if odds_ratio <= 0:
        raise ValueError("odds ratio must be positive")
    if pi0 in (0.0, 1.0):
        return pi0
    odds = odds_ratio * pi0 / (1.0 - pi0)
    return odds / (1.0 + odds)


def time_ratio_from_hazard_ratio(hr: float, shape: float = 2.0) -> float:
    """Time ratio matching a Weibull hazard ratio: (1/hr) ** (1/shape).

    With the reference shape 2 this reproduces the tabulated pairs
    0.9 -> 1.05, 0.75 -> 1.15 and 0.5 -> 1.41.
    """
    if hr <= 0 or shape <= 0:
        raise ValueError("hazard ratio and shape must be positive")
    return (1.0 / hr) ** (1.0 / shape)


@dataclass(frozen=True)
class TwoArmDesign:
    control: MixtureCureArm
    treatment: MixtureCureArm
    odds_ratio: float = 1.0
    linkage: dict = field(default_factory=dict, compare=False)

    @property
    def is_null(self) -> bool:
        return self.control == self.treatment or (
            self.control.cure_fraction == self.treatment.cure_fraction
            and self.control.uncured == self.treatment.uncured
            and self.control.effect.is_identity
            and self.treatment.effect.is_identity
        )

    def arm(self, group: int) -> MixtureCureArm:
        return self.treatment if group == 1 else self.control

    def swapped(self) -> "TwoArmDesign":
        odds = self.odds_ratio
        return TwoArmDesign(self.treatment, self.control, 1.0 / odds if odds else odds,
                            {**self.linkage, "swapped": True})

    def to_dict(self) -> dict:
        return {
            "control": self.control.to_dict(),
            "treatment": self.treatment.to_dict(),
            "odds_ratio": self.odds_ratio,
            "linkage": dict(self.linkage),
        }


def apply_effects(
    control: MixtureCureArm,
    odds_ratio: float = 1.0,
    effect: UncuredEffect = NO_EFFECT,
    treatment_cure_fraction: float | None = None,
) -> TwoArmDesign:
    """Derive the treatment arm from the control arm.

    The cure fraction moves on the logit scale by ``log(odds_ratio)``;
    ``effect`` acts on the uncured law.  With ``pi0 = 0`` the logit is
    undefined, so a non-unit odds ratio needs ``treatment_cure_fraction``.
    """
    if odds_ratio <= 0:
        raise ValueError("odds ratio must be positive")
    if not control.effect.is_identity:
        raise ValueError("control arm must be the reference (no uncured effect)")
    pi0 = control.cure_fraction
    if treatment_cure_fraction is not None:
        pi1 = float(treatment_cure_fraction)
        linkage = "explicit"
    elif pi0 in (0.0, 1.0) and odds_ratio != 1.0:
        raise ValueError(
            f"odds ratio {odds_ratio} cannot move a cure fraction of {pi0}; "
            "supply the treatment cure fraction directly"
        )
    else:
        pi1 = cure_fraction_from_odds_ratio(pi0, odds_ratio)
        linkage = "odds_ratio"
    treatment = MixtureCureArm(pi1, control.uncured, effect)
    return TwoArmDesign(
        control,
        treatment,
        odds_ratio,
        {"cure": linkage, "uncured": effect.kind.value, "effect_size": effect.value},
    )
