"""Parametric mixture cure models fitted by maximum likelihood.

Right-censored log-likelihood for one arm with cure fraction pi and uncured
law (f_u, S_u)::

    sum over events    log[(1 - pi) f_u(t)]
    sum over censored  log[pi + (1 - pi) S_u(t)]

Parameters are optimized on an unconstrained scale: logit(pi); for the
log-location-scale families (Weibull, log-logistic, log-normal) the location
mu and log(sigma) of log T; for the gamma family log(shape) and log(rate).
The two-group model adds log(OR) on the cure logit and a latency effect:
log(HR) for the Weibull (proportional hazards), log(TR) otherwise
(accelerated failure time).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .datagen import SurvivalSample
from .distributions import (Family, MixtureCureArm, ParametricDistribution, TwoArmDesign,
                            UncuredEffect)
from .estimators import kaplan_meier
from .results import Method, TestResult

log = logging.getLogger(__name__)

_LOC_SCALE = (Family.WEIBULL, Family.LOGLOGISTIC, Family.LOGNORMAL)
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

PARAM_NAMES = {
    Family.WEIBULL: ("shape", "scale"),
    Family.GAMMA: ("shape", "rate"),
    Family.LOGLOGISTIC: ("shape", "scale"),
    Family.LOGNORMAL: ("mu", "sigma"),
}

ETA_BOUND = 20.0
GTOL = 1e-8
ACCEPT_GTOL = 1e-4


class FitError(RuntimeError):
    """Raised when no start reaches a converged maximum."""


class InsufficientDataError(ValueError):
    pass


class TimeUnitMismatch(ValueError):
    pass


# standardized error laws of log T ------------------------------------------

def _std_logsf(family, z):
    if family is Family.WEIBULL:
        return -np.exp(z)
    if family is Family.LOGLOGISTIC:
        return -np.logaddexp(0.0, z)
    return special.log_ndtr(-z)


def _std_logpdf(family, z):
    if family is Family.WEIBULL:
        return z - np.exp(z)
    if family is Family.LOGLOGISTIC:
        return z - 2.0 * np.logaddexp(0.0, z)
    return -0.5 * z * z - _HALF_LOG_2PI


def _std_hazard(family, z):
    if family is Family.WEIBULL:
        return np.exp(z)
    if family is Family.LOGLOGISTIC:
        return special.expit(z)
    return np.exp(_std_logpdf(family, z) - special.log_ndtr(-z))


def _std_score(family, z):
    """d/dz log f_W(z)."""
    if family is Family.WEIBULL:
        return 1.0 - np.exp(z)
    if family is Family.LOGLOGISTIC:
        return 1.0 - 2.0 * special.expit(z)
    return -z


def _gamma_logsf(shape, x):
    with np.errstate(divide="ignore"):
        out = np.log(special.gammaincc(shape, x))
    tiny = ~np.isfinite(out)
    if np.any(tiny):
        out = np.where(tiny, stats.gamma.logsf(x, shape), out)
    return out


# parameter transforms ----------------------------------------------------------

def to_internal(family: Family, p1: float, p2: float) -> tuple[float, float]:
    if family is Family.LOGNORMAL:
        return p1, math.log(p2)
    if family is Family.GAMMA:
        return math.log(p1), math.log(p2)
    return math.log(p2), -math.log(p1)  # mu = log scale, log sigma = -log shape


def to_natural(family: Family, a: float, b: float) -> tuple[float, float]:
    if family is Family.LOGNORMAL:
        return a, math.exp(b)
    if family is Family.GAMMA:
        return math.exp(a), math.exp(b)
    return math.exp(-b), math.exp(a)


def _natural_jacobian(family: Family, a: float, b: float) -> np.ndarray:
    """d(natural p1, p2) / d(internal a, b)."""
    p1, p2 = to_natural(family, a, b)
    if family is Family.LOGNORMAL:
        return np.array([[1.0, 0.0], [0.0, p2]])
    if family is Family.GAMMA:
        return np.array([[p1, 0.0], [0.0, p2]])
    return np.array([[0.0, -p1], [p2, 0.0]])


def default_effect(family: Family) -> str:
    return "hazard_ratio" if family is Family.WEIBULL else "time_ratio"


class MixtureLikelihood:
    """Log-likelihood of one- or two-group mixture cure data.

    ``joint=False``: theta = (eta, a, b), groups ignored.
    ``joint=True``:  theta = (eta0, log_or, a, b, log_effect).
    """

    def __init__(self, time, event, group, family, joint: bool):
        self.family = Family.parse(family)
        self.t = np.asarray(time, dtype=np.float64)
        self.ev = np.asarray(event).astype(bool)
        self.g = np.asarray(group, dtype=np.float64)
        self.joint = joint
        self.logt = np.log(np.maximum(self.t, 1e-300))
        if np.any(self.t[self.ev] <= 0):
            raise ValueError("event times must be positive")

    @property
    def n_params(self) -> int:
        return 5 if self.joint else 3

    def _unpack(self, theta):
        if self.joint:
            eta0, lor, a, b, c = theta
            eta = eta0 + lor * self.g
        else:
            eta, a, b = theta
            c = 0.0
        return eta, a, b, c

    def loglik(self, theta) -> float:
        return float(self.loglik_terms(theta).sum())

    def loglik_terms(self, theta) -> np.ndarray:
        eta, a, b, c = self._unpack(theta)
        log_pi = special.log_expit(eta)
        log_1mpi = special.log_expit(-np.asarray(eta))
        if self.family in _LOC_SCALE:
            sigma = math.exp(b)
            if self.family is Family.WEIBULL:
                mu = a - sigma * c * self.g
            else:
                mu = a + c * self.g
            z = (self.logt - mu) / sigma
            logf = _std_logpdf(self.family, z) - b - self.logt
            logs = _std_logsf(self.family, z)
        else:
            shape = math.exp(a)
            log_rate = b - c * self.g
            x = np.exp(log_rate) * self.t
            logf = shape * log_rate + (shape - 1.0) * self.logt - x - special.gammaln(shape)
            logs = _gamma_logsf(shape, x)
        with np.errstate(invalid="ignore"):
            cens = np.logaddexp(log_pi, log_1mpi + logs)
        return np.where(self.ev, log_1mpi + logf, cens)

    def gradient(self, theta) -> np.ndarray:
        if self.family not in _LOC_SCALE:
            return self._numeric_gradient(theta)
        eta, a, b, c = self._unpack(theta)
        fam, ev, g = self.family, self.ev, self.g
        eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), self.t.shape)
        pi = special.expit(eta)
        log_pi = special.log_expit(eta)
        log_1mpi = special.log_expit(-eta)
        sigma = math.exp(b)
        mu = a - sigma * c * g if fam is Family.WEIBULL else a + c * g
        z = (self.logt - mu) / sigma
        logs = _std_logsf(fam, z)
        log_l = np.logaddexp(log_pi, log_1mpi + logs)
        q = np.exp(log_1mpi + logs - log_l)  # (1-pi)S/L
        r = np.exp(log_pi - log_l)  # pi/L
        d_eta = np.where(ev, -pi, (1.0 - pi) * r - pi * q)
        d_z = np.where(ev, _std_score(fam, z), -q * _std_hazard(fam, z))
        d_mu = -d_z / sigma
        d_logsig = -d_z * z - ev
        if not self.joint:
            return np.array([d_eta.sum(), d_mu.sum(), d_logsig.sum()])
        if fam is Family.WEIBULL:
            d_c = d_z * g
            d_logsig = d_logsig + d_z * c * g
        else:
            d_c = d_mu * g
        return np.array([d_eta.sum(), (d_eta * g).sum(), d_mu.sum(), d_logsig.sum(), d_c.sum()])

    def _numeric_gradient(self, theta, h=1e-6) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        out = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            out[i] = (self.loglik(theta + e) - self.loglik(theta - e)) / (2 * h)
        return out

    def hessian(self, theta, h=1e-5) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        k = theta.size
        hmat = np.empty((k, k))
        step = 1e-4 if self.family not in _LOC_SCALE else h
        for i in range(k):
            e = np.zeros(k)
            e[i] = step
            hmat[:, i] = (self.gradient(theta + e) - self.gradient(theta - e)) / (2 * step)
        return 0.5 * (hmat + hmat.T)

    def arms(self, theta) -> tuple[MixtureCureArm, MixtureCureArm]:
        """Fitted control and treatment arms."""
        eta, a, b, c = self._unpack(theta)
        eta0 = theta[0]
        p1, p2 = to_natural(self.family, a, b)
        base = ParametricDistribution(self.family, p1, p2)
        control = MixtureCureArm(float(special.expit(eta0)), base)
        if not self.joint:
            return control, control
        eta1 = theta[0] + theta[1]
        if self.family is Family.WEIBULL:
            eff = UncuredEffect.hazard_ratio(math.exp(c))
        else:
            eff = UncuredEffect.time_ratio(math.exp(c))
        return control, MixtureCureArm(float(special.expit(eta1)), base, eff)


# starting values -----------------------------------------------------------------

def _latency_start(family: Family, t_events: np.ndarray) -> tuple[float, float]:
    lt = np.log(t_events)
    m = float(lt.mean())
    s = float(lt.std()) if lt.size > 1 else 0.5
    s = min(max(s, 0.05), 5.0)
    if family is Family.WEIBULL:
        sigma = s * math.sqrt(6.0) / math.pi
        return m + 0.5772156649 * sigma, math.log(sigma)
    if family is Family.LOGLOGISTIC:
        return m, math.log(s * math.sqrt(3.0) / math.pi)
    if family is Family.LOGNORMAL:
        return m, math.log(s)
    mean = float(t_events.mean())
    var = float(t_events.var()) if t_events.size > 1 else mean * mean
    var = max(var, 1e-8 * mean * mean)
    return math.log(mean * mean / var), math.log(mean / var)


def _km_plateau(time, event) -> float:
    s = SurvivalSample(time, event, np.zeros(len(time)))
    return kaplan_meier(s).last_event_value


def start_points(time, event, family: Family) -> list[np.ndarray]:
    """Three starts: moment-style, KM-plateau cure fraction, and a perturbation."""
    t_ev = np.asarray(time)[np.asarray(event) == 1]
    a, b = _latency_start(family, t_ev)
    plateau = min(max(_km_plateau(time, event), 0.02), 0.95)
    censored_share = min(max(1.0 - t_ev.size / len(time), 0.02), 0.95)
    pi_mom = 0.5 * censored_share
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    return [
        np.array([logit(pi_mom), a, b]),
        np.array([logit(plateau), a, b]),
        np.array([logit(plateau) - 0.75, a + 0.3 * math.exp(b), b + 0.25]),
    ]


def _bounds(joint: bool):
    eta = (-ETA_BOUND, ETA_BOUND)
    if joint:
        return [eta, (-ETA_BOUND, ETA_BOUND), (None, None), (-8.0, 4.0), (-10.0, 10.0)]
    return [eta, (None, None), (-8.0, 4.0)]


def _projected_grad(theta, grad, bounds) -> np.ndarray:
    pg = np.array(grad, dtype=np.float64)
    for i, (lo, hi) in enumerate(bounds):
        # grad here is of the objective being minimized
        if lo is not None and theta[i] <= lo + 1e-9 and pg[i] > 0:
            pg[i] = 0.0
        if hi is not None and theta[i] >= hi - 1e-9 and pg[i] < 0:
            pg[i] = 0.0
    return pg


@dataclass
class _Optimum:
    theta: np.ndarray
    loglik: float
    grad_norm: float
    converged: bool
    n_starts: int
    start_logliks: list


def maximize(lik: MixtureLikelihood, starts) -> _Optimum:
    n = max(lik.t.size, 1)
    bounds = _bounds(lik.joint)

    def objective(theta):
        val = lik.loglik(theta)
        if not np.isfinite(val):
            return 1e10, np.zeros_like(theta)
        return -val / n, -lik.gradient(theta) / n

    best = None
    start_ll = []
    for x0 in starts:
        x0 = np.clip(np.asarray(x0, dtype=np.float64),
                     [lo if lo is not None else -np.inf for lo, _ in bounds],
                     [hi if hi is not None else np.inf for _, hi in bounds])
        ll0 = lik.loglik(x0)
        start_ll.append(ll0)
        if not np.isfinite(ll0):
            continue
        with np.errstate(all="ignore"):
            res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 1000, "ftol": 1e-15, "gtol": GTOL})
        ll = -res.fun * n
        if not np.isfinite(ll):
            continue
        if best is None or ll > best[1]:
            best = (res.x, ll)
    if best is None:
        return _Optimum(np.full(lik.n_params, np.nan), -np.inf, np.inf, False, len(start_ll), start_ll)
    theta, ll = best
    pg = _projected_grad(theta, -lik.gradient(theta) / n, bounds)
    gnorm = float(np.max(np.abs(pg)))
    return _Optimum(theta, ll, gnorm, gnorm <= ACCEPT_GTOL, len(start_ll), start_ll)


# single-arm fits ---------------------------------------------------------------------

@dataclass
class MCMFit:
    """Maximum-likelihood mixture cure fit for one arm."""

    arm: str
    family: str
    cure_fraction: float
    cure_fraction_se: float
    params: dict
    params_se: dict
    loglik: float
    n: int
    n_events: int
    converged: bool
    grad_norm: float
    n_starts: int
    boundary: bool
    time_unit: str | None = None
    start_logliks: list = field(default_factory=list)

    @property
    def distribution(self) -> ParametricDistribution:
        names = PARAM_NAMES[Family.parse(self.family)]
        return ParametricDistribution(self.family, self.params[names[0]], self.params[names[1]])

    @property
    def arm_model(self) -> MixtureCureArm:
        return MixtureCureArm(self.cure_fraction, self.distribution)

    @property
    def aic(self) -> float:
        return 2 * 3 - 2 * self.loglik

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_logliks"] = [float(x) if np.isfinite(x) else None for x in self.start_logliks]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MCMFit":
        d = dict(d)
        d["start_logliks"] = [(-math.inf if x is None else x) for x in d.get("start_logliks", [])]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MCMFit":
        return cls.from_dict(json.loads(text))


def fit_arm(sample: SurvivalSample, family, group: int | None = None, arm: str | None = None,
            time_unit: str | None = None, min_events: int = 5) -> MCMFit:
    """Fit a one-arm mixture cure model.

    ``group`` selects one arm of a two-group sample; with ``group=None`` all
    records are treated as a single arm.
    """
    family = Family.parse(family)
    if group is not None:
        sample = sample.arm(group)
    n_events = int(sample.event.sum())
    if n_events < min_events:
        raise InsufficientDataError(
            f"{n_events} events; at least {min_events} are needed for a stable cure model fit")
    lik = MixtureLikelihood(sample.time, sample.event, np.zeros(len(sample)), family, joint=False)
    opt = maximize(lik, start_points(sample.time, sample.event, family))
    if not opt.converged:
        raise FitError(f"no start converged (best projected gradient {opt.grad_norm:.3g}, "
                       f"{opt.n_starts} starts)")
    eta, a, b = opt.theta
    p1, p2 = to_natural(family, a, b)
    pi = float(special.expit(eta))
    boundary = abs(eta) >= ETA_BOUND - 1e-6
    se_pi = se1 = se2 = math.nan
    try:
        cov = np.linalg.inv(-lik.hessian(opt.theta))
        if np.all(np.diag(cov) > 0):
            se_eta = math.sqrt(cov[0, 0])
            se_pi = pi * (1 - pi) * se_eta
            jac = _natural_jacobian(family, a, b)
            cov_nat = jac @ cov[1:, 1:] @ jac.T
            se1, se2 = math.sqrt(cov_nat[0, 0]), math.sqrt(cov_nat[1, 1])
    except np.linalg.LinAlgError:
        pass
    if boundary:
        log.warning("cure fraction estimate pinned at the boundary (pi=%.3g)", pi)
    names = PARAM_NAMES[family]
    return MCMFit(
        arm=arm if arm is not None else (str(group) if group is not None else "pooled"),
        family=family.value,
        cure_fraction=pi,
        cure_fraction_se=se_pi,
        params={names[0]: p1, names[1]: p2},
        params_se={names[0]: se1, names[1]: se2},
        loglik=opt.loglik,
        n=len(sample),
        n_events=n_events,
        converged=opt.converged,
        grad_norm=opt.grad_norm,
        n_starts=opt.n_starts,
        boundary=bool(boundary),
        time_unit=time_unit,
        start_logliks=list(opt.start_logliks),
    )


def fit_to_design(fit0: MCMFit, fit1: MCMFit) -> TwoArmDesign:
    """Treat two arm fits as the data-generating mechanism."""
    if not (fit0.converged and fit1.converged):
        raise FitError("both fits must have converged")
    if fit0.time_unit != fit1.time_unit:
        raise TimeUnitMismatch(f"time units differ: {fit0.time_unit!r} vs {fit1.time_unit!r}")
    c, t = fit0.arm_model, fit1.arm_model
    odds = math.nan
    if 0 < c.cure_fraction < 1 and 0 < t.cure_fraction < 1:
        odds = (t.cure_fraction / (1 - t.cure_fraction)) / (c.cure_fraction / (1 - c.cure_fraction))
    return TwoArmDesign(c, t, odds, {"cure": "fitted", "uncured": "fitted",
                                     "time_unit": fit0.time_unit})


def family_report(sample: SurvivalSample, group: int | None = None,
                  families=tuple(Family)) -> dict:
    """AIC of each family for one arm; no family is chosen automatically."""
    out = {}
    for fam in families:
        try:
            fit = fit_arm(sample, fam, group)
            out[fam.value] = {"aic": fit.aic, "loglik": fit.loglik, "cure_fraction": fit.cure_fraction}
        except (FitError, InsufficientDataError) as exc:
            out[fam.value] = {"error": str(exc)}
    return out


def cure_report(sample: SurvivalSample, group: int | None = None) -> dict:
    """Descriptive follow-up ingredients: KM plateau and the tail beyond the last event."""
    if group is not None:
        sample = sample.arm(group)
    km = kaplan_meier(sample)
    ev_times = sample.time[sample.event == 1]
    last_event = float(ev_times.max()) if ev_times.size else math.nan
    last_time = float(sample.time.max())
    return {
        "n": len(sample),
        "n_events": int(sample.event.sum()),
        "km_plateau": km.last_event_value,
        "last_event_time": last_event,
        "last_followup_time": last_time,
        "tail_gap": last_time - last_event if ev_times.size else math.nan,
        "n_censored_after_last_event": int(np.sum((sample.time > last_event) & (sample.event == 0)))
        if ev_times.size else int(len(sample)),
    }


# likelihood-ratio test --------------------------------------------------------------

def mcm_lrt(sample: SurvivalSample, family) -> TestResult:
    """Likelihood-ratio test of a group effect on both the cure logit and the latency.

    Null: shared cure fraction and latency.  Alternative adds log(OR) and the
    latency effect; the statistic is referred to chi-squared with 2 df.
    """
    family = Family.parse(family)
    method = Method.MCM_LRT
    d0, d1 = sample.events_per_group
    n0, n1 = sample.n_per_group
    if n0 == 0 or n1 == 0:
        return TestResult.failed_result(method, "one group has no records")
    if d0 == 0 or d1 == 0:
        return TestResult.failed_result(method, f"zero events in a group (events {d0}, {d1})")
    null = MixtureLikelihood(sample.time, sample.event, sample.group, family, joint=False)
    alt = MixtureLikelihood(sample.time, sample.event, sample.group, family, joint=True)
    opt0 = maximize(null, start_points(sample.time, sample.event, family))
    if not opt0.converged:
        return TestResult.failed_result(method, "null model did not converge",
                                        grad_norm=opt0.grad_norm)
    e0, a0, b0 = opt0.theta
    alt_starts = [np.array([e0, 0.0, a0, b0, 0.0])]
    # a second start from the group-0 moment fit guards against a poor null optimum
    s = start_points(sample.time, sample.event, family)[1]
    alt_starts.append(np.array([s[0], 0.0, s[1], s[2], 0.0]))
    opt1 = maximize(alt, alt_starts)
    if not opt1.converged:
        return TestResult.failed_result(method, "alternative model did not converge",
                                        grad_norm=opt1.grad_norm)
    stat = max(2.0 * (opt1.loglik - opt0.loglik), 0.0)
    p = float(stats.chi2.sf(stat, 2))
    eta0, lor, a, b, c = opt1.theta
    p1, p2 = to_natural(family, a, b)
    names = PARAM_NAMES[family]
    aux = {
        "df": 2,
        "loglik_null": float(opt0.loglik),
        "loglik_alt": float(opt1.loglik),
        "pi0": float(special.expit(eta0)),
        "pi1": float(special.expit(eta0 + lor)),
        names[0]: float(p1),
        names[1]: float(p2),
        default_effect(family): float(math.exp(c)),
        "boundary": bool(abs(eta0) >= ETA_BOUND - 1e-6 or abs(eta0 + lor) >= ETA_BOUND - 1e-6
                         or abs(opt0.theta[0]) >= ETA_BOUND - 1e-6),
        "grad_norm": max(opt0.grad_norm, opt1.grad_norm),
    }
    return TestResult(method, statistic=float(stat), p_value=p, auxiliary=aux)
