"""Two-sample tests of S_0 = S_1 for right-censored data.

Group 1 is the treatment arm.  Rank statistics use the convention
U = sum_i w_i (d1_i - Y1_i d_i / Y_i), so U < 0 when the treatment arm has
fewer events than expected.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special, stats

from .datagen import SurvivalSample
from .distributions import Family, TwoArmDesign
from .estimators import KMCurve, RiskTable, build_risk_table
from .mcm import mcm_lrt
from .results import Method, TestResult


@dataclass(frozen=True)
class FHWeights:
    """Fleming-Harrington G(rho, gamma) weights S(t-)^rho (1 - S(t-))^gamma."""

    rho: float
    gamma: float

    def __post_init__(self):
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("Fleming-Harrington parameters must be non-negative")

    def __call__(self, s_left):
        s_left = np.asarray(s_left, dtype=np.float64)
        return np.power(s_left, self.rho) * np.power(1.0 - s_left, self.gamma)


EARLY = FHWeights(1.0, 0.0)
LATE = FHWeights(0.0, 1.0)


def fh_weight_function(pooled_km: KMCurve, fh: FHWeights) -> Callable:
    """Weight at time t from the left limit of the pooled KM curve."""
    return lambda t: fh(pooled_km.left_limit(t))


def _two_sided_p(z: float) -> float:
    return float(min(1.0, 2.0 * special.ndtr(-abs(z))))


def _precheck(sample: SurvivalSample, method: Method) -> TestResult | None:
    n0, n1 = sample.n_per_group
    if n0 == 0 or n1 == 0:
        return TestResult.failed_result(method, "both groups must be present")
    if sample.event.sum() == 0:
        return TestResult.failed_result(method, "no events in either group")
    return None


def weighted_score(table: RiskTable, w) -> tuple[float, float]:
    """U and its null variance V for per-event-time weights ``w``."""
    w = np.asarray(w, dtype=np.float64)
    u = float(np.sum(w * table.observed_minus_expected()))
    v = float(np.sum(w * w * table.hypergeometric_variance()))
    return u, v


def weighted_log_rank(sample: SurvivalSample, weights=None,
                      method: Method = Method.LR, table: RiskTable | None = None) -> TestResult:
    """Weighted log-rank test.

    ``weights`` may be None (all ones), an array aligned with the event times
    of the risk table, an :class:`FHWeights`, or a callable of the risk table
    returning such an array.
    """
    method = Method.parse(method)
    bad = _precheck(sample, method)
    if bad is not None:
        return bad
    table = build_risk_table(sample) if table is None else table
    if weights is None:
        w = np.ones(len(table))
    elif isinstance(weights, FHWeights):
        w = weights(table.pooled_km_left())
    elif callable(weights):
        w = weights(table)
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != table.time.shape:
        raise ValueError("weights must align with the distinct event times")
    u, v = weighted_score(table, w)
    d0, d1 = int(table.d0.sum()), int(table.d1.sum())
    aux = {"events": [d0, d1]}
    if isinstance(weights, FHWeights):
        aux.update(rho=weights.rho, gamma=weights.gamma)
    if not (v > 0 and math.isfinite(v)):
        reason = "zero null variance"
        if d0 == 0 or d1 == 0:
            reason += f" (zero events in a group: {d0}, {d1})"
        return TestResult(method, score=u, variance=v, auxiliary=aux, failure=reason)
    z = u / math.sqrt(v)
    return TestResult(method, statistic=z, p_value=_two_sided_p(z), variance=v, score=u, auxiliary=aux)


def log_rank(sample: SurvivalSample) -> TestResult:
    return weighted_log_rank(sample, None, Method.LR)


def early_wlr(sample: SurvivalSample) -> TestResult:
    return weighted_log_rank(sample, EARLY, Method.EARLY_WLR)


def late_wlr(sample: SurvivalSample) -> TestResult:
    return weighted_log_rank(sample, LATE, Method.LATE_WLR)


# optimal weights ------------------------------------------------------------

def oracle_log_hazard_ratio(design: TwoArmDesign, t) -> np.ndarray:
    """log(h1/h0) from the true design; NaN where undefined."""
    with np.errstate(invalid="ignore"):
        lhr = design.treatment.log_hazard(t) - design.control.log_hazard(t)
    return np.where(np.isfinite(lhr), lhr, np.nan)


def inverse_km_weights(table: RiskTable) -> np.ndarray:
    """1 / S(t-) from the pooled KM curve, the G(-1, 0) weight."""
    return 1.0 / table.pooled_km_left()


def optimal_log_rank(sample: SurvivalSample) -> TestResult:
    """Weighted log-rank with weight 1 / S(t-) (Fleming-Harrington rho = -1, gamma = 0).

    The weight grows as the pooled KM curve falls, which targets hazard
    ratios that move away from one late in follow-up.  Without a cure
    plateau the last few event times receive very large weights, so the
    normal reference is less accurate with long follow-up.
    """
    res = weighted_log_rank(sample, inverse_km_weights, Method.OPTIMAL_LR)
    res.auxiliary.update(rho=-1.0, gamma=0.0, weights="inverse pooled KM")
    return res


def oracle_log_rank(sample: SurvivalSample, design: TwoArmDesign) -> TestResult:
    """Weighted log-rank with weights equal to the true log hazard ratio.

    The overall sign is chosen so most weights are positive, which makes the
    test identical to the log-rank test up to a positive factor under
    proportional hazards.  A null design has no informative weight and falls
    back to the log-rank test.
    """
    method = Method.OPTIMAL_LR
    bad = _precheck(sample, method)
    if bad is not None:
        return bad
    table = build_risk_table(sample)
    lhr = np.nan_to_num(oracle_log_hazard_ratio(design, table.time), nan=0.0)
    if not np.any(np.abs(lhr) > 1e-12):
        res = weighted_log_rank(sample, None, method, table)
        res.auxiliary.update(weights="oracle", fallback="log-rank (no hazard difference in design)")
        return res
    sign = -1.0 if np.sum(np.sign(lhr)) < 0 else 1.0
    res = weighted_log_rank(sample, sign * lhr, method, table)
    res.auxiliary.update(weights="oracle", weight_sign=sign)
    return res


# Yang-Prentice ----------------------------------------------------------------

def _yp_terms(beta, table: RiskTable, s0_left):
    """Pseudo partial log-likelihood and gradient in (log thetaE, log thetaL).

    The treatment-to-control hazard ratio at time t is
    1 / (S0(t-) / thetaE + (1 - S0(t-)) / thetaL).
    """
    b1, b2 = beta
    with np.errstate(divide="ignore"):
        la = np.log(s0_left) - b1
        lb = np.log1p(-s0_left) - b2
    log_den = np.logaddexp(la, lb)
    log_r = -log_den
    pa = np.exp(la - log_den)
    pb = 1.0 - pa
    y0, y1, d1, d = table.y0, table.y1, table.d1, table.d
    log_risk = np.logaddexp(_safe_log(y0), _safe_log(y1) + log_r)
    ll = float(np.sum(d1 * log_r - d * log_risk))
    frac = np.exp(_safe_log(y1) + log_r - log_risk)
    resid = d1 - d * frac
    return ll, np.array([np.sum(resid * pa), np.sum(resid * pb)])


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def _yp_s0_left(sample: SurvivalSample, table: RiskTable) -> np.ndarray:
    """Control-arm KM S0(t-) at the pooled event times."""
    f = 1.0 - np.divide(table.d0, table.y0, out=np.zeros(len(table)), where=table.y0 > 0)
    return np.concatenate(([1.0], np.cumprod(f)[:-1]))


YP_BOUND = 12.0


def adaptive_yp(sample: SurvivalSample) -> TestResult:
    """Short- and long-term hazard ratio test.

    Fits (thetaE, thetaL) by maximizing the pseudo partial likelihood in
    which the baseline hazard is profiled out and the control survival is
    replaced by its Kaplan-Meier estimate, then tests thetaE = thetaL = 1
    with the pseudo-likelihood ratio against chi-squared(2).
    """
    method = Method.ADAPTIVE_YP
    bad = _precheck(sample, method)
    if bad is not None:
        return bad
    d0, d1 = sample.events_per_group
    if d0 < 2 or d1 < 2:
        return TestResult.failed_result(method, f"each group needs at least 2 events (got {d0}, {d1})")
    table = build_risk_table(sample)
    s0 = np.clip(_yp_s0_left(sample, table), 0.0, 1.0)

    def objective(beta):
        ll, g = _yp_terms(beta, table, s0)
        return -ll, -g

    ll_null = _yp_terms((0.0, 0.0), table, s0)[0]
    bounds = [(-YP_BOUND, YP_BOUND)] * 2
    best = None
    for x0 in ((0.0, 0.0), (0.5, -0.5), (-0.5, 0.5)):
        res = optimize.minimize(objective, np.array(x0), jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-14, "gtol": 1e-9, "maxiter": 500})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        return TestResult.failed_result(method, "optimizer returned no finite value")
    beta = best.x
    inference = "pseudo-likelihood ratio"
    hess = _yp_hessian(beta, table, s0)
    ill = (not np.all(np.isfinite(hess))) or np.linalg.cond(hess) > 1e10 or np.any(
        np.abs(beta) >= YP_BOUND - 1e-6)
    ll_max = -best.fun
    if ill:
        ll_prof = _yp_profile_max(table, s0)
        if ll_prof > ll_max:
            ll_max = ll_prof
        inference = "profile pseudo-likelihood"
    stat = max(2.0 * (ll_max - ll_null), 0.0)
    grad_norm = float(np.max(np.abs(_yp_terms(beta, table, s0)[1])))
    aux = {
        "theta_E": float(math.exp(beta[0])),
        "theta_L": float(math.exp(beta[1])),
        "inference": inference,
        "df": 2,
        "grad_norm": grad_norm,
    }
    if grad_norm > 1e-3 and not ill:
        return TestResult(method, score=math.nan, auxiliary=aux,
                          failure=f"optimizer did not converge (gradient {grad_norm:.3g})")
    return TestResult(method, statistic=float(stat), p_value=float(stats.chi2.sf(stat, 2)),
                      auxiliary=aux)


def _yp_hessian(beta, table, s0, h=1e-5):
    hm = np.empty((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        hm[:, i] = -(_yp_terms(beta + e, table, s0)[1] - _yp_terms(beta - e, table, s0)[1]) / (2 * h)
    return 0.5 * (hm + hm.T)


def _yp_profile_max(table, s0) -> float:
    best = -np.inf
    for b1 in np.linspace(-YP_BOUND, YP_BOUND, 49):
        res = optimize.minimize_scalar(lambda b2: -_yp_terms((b1, b2), table, s0)[0],
                                       bounds=(-YP_BOUND, YP_BOUND), method="bounded",
                                       options={"xatol": 1e-8})
        best = max(best, -res.fun)
    return best


# two-stage ----------------------------------------------------------------------

DEFAULT_CANDIDATES: tuple[FHWeights, ...] = (LATE, EARLY, FHWeights(1.0, 1.0))


@dataclass(frozen=True)
class TwoStageConfig:
    alpha: float = 0.05
    alpha1: float = 0.04
    candidates: tuple = DEFAULT_CANDIDATES
    n_boot: int = 500

    @property
    def alpha2(self) -> float:
        """Stage-two level so that alpha1 + (1 - alpha1) * alpha2 = alpha."""
        return (self.alpha - self.alpha1) / (1.0 - self.alpha1)


class _SortedData:
    """Time-sorted data with tie blocks, for vectorized bootstrap tabulation."""

    def __init__(self, sample: SurvivalSample):
        order = np.lexsort((np.arange(len(sample)), sample.time))
        self.time = sample.time[order]
        self.event = sample.event[order].astype(np.float64)
        self.group = sample.group[order].astype(np.float64)
        uniq, start = np.unique(self.time, return_index=True)
        end = np.append(start[1:], self.time.size)
        has_event = np.add.reduceat(self.event, start) > 0
        self.start, self.end = start[has_event], end[has_event]

    def tabulate(self, m):
        """Risk tables for multiplicity rows ``m`` (B x n): d0, d1, y0, y1 as B x K."""
        m = np.atleast_2d(m)
        m1 = m * self.group
        m0 = m - m1
        out = []
        for mg in (m0, m1):
            at_risk = np.cumsum(mg[:, ::-1], axis=1)[:, ::-1]
            ev = np.cumsum(mg * self.event, axis=1)
            ev = np.concatenate((np.zeros((m.shape[0], 1)), ev), axis=1)
            out.append((ev[:, self.end] - ev[:, self.start], at_risk[:, self.start]))
        (d0, y0), (d1, y1) = out
        return d0, d1, y0, y1


def _stage_two_stats(d0, d1, y0, y1, candidates):
    """Z of each FH candidate made orthogonal to the log-rank score (rows = resamples)."""
    d, y = d0 + d1, y0 + y1
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(y > 0, d / y, 0.0)
        s_left = np.concatenate((np.ones((d.shape[0], 1)), np.cumprod(1.0 - frac, axis=1)[:, :-1]), axis=1)
        oe = np.where(y > 0, d1 - y1 * frac, 0.0)
        v = np.where(y > 1, y0 * y1 * d * (y - d) / (y * y * (y - 1.0)), 0.0)
    u0 = oe.sum(axis=1)
    v0 = v.sum(axis=1)
    zs = []
    for fh in candidates:
        w = fh(s_left)
        uk = (w * oe).sum(axis=1)
        vk = (w * w * v).sum(axis=1)
        ck = (w * v).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            beta = np.where(v0 > 0, ck / v0, 0.0)
            u_perp = uk - beta * u0
            v_perp = vk - beta * ck
            z = np.where(v_perp > 1e-12 * np.maximum(vk, 1e-300), u_perp / np.sqrt(v_perp), np.nan)
        zs.append(z)
    return np.stack(zs, axis=1)


def _data_seed(sample: SurvivalSample) -> np.random.SeedSequence:
    # label-free digest, so exchanging the groups reuses the same resamples
    order = np.lexsort((sample.event, sample.time))
    h = hashlib.sha256(sample.time[order].tobytes() + sample.event[order].tobytes()).digest()
    return np.random.SeedSequence(int.from_bytes(h[:16], "little"))


def two_stage(sample: SurvivalSample, config: TwoStageConfig = TwoStageConfig(),
              rng: np.random.Generator | None = None) -> TestResult:
    """Log-rank first, then a bootstrap-selected Fleming-Harrington statistic.

    Stage 1 rejects when the log-rank p-value is below ``alpha1``.  Otherwise
    each candidate weighted score is made orthogonal to the log-rank score,
    so it is asymptotically independent of the stage-1 statistic under the
    null.  The candidate with the highest bootstrap rejection frequency is
    tested at ``alpha2`` with a Bonferroni factor for the selection.  The
    reported p-value is p1 when stage 1 decides, else
    alpha1 + (1 - alpha1) * p2, so p < alpha exactly when the procedure
    rejects.
    """
    method = Method.TWO_STAGE
    bad = _precheck(sample, method)
    if bad is not None:
        return bad
    stage1 = weighted_log_rank(sample, None, Method.LR)
    if stage1.failed:
        return TestResult(method, auxiliary={"stage": 1}, failure=stage1.failure)
    aux = {"stage": 1, "alpha1": config.alpha1, "alpha2": config.alpha2,
           "z_logrank": stage1.statistic, "n_boot": config.n_boot}
    if stage1.p_value < config.alpha1:
        return TestResult(method, statistic=stage1.statistic, p_value=stage1.p_value,
                          variance=stage1.variance, score=stage1.score, auxiliary=aux)
    data = _SortedData(sample)
    n = len(sample)
    z_obs = _stage_two_stats(*data.tabulate(np.ones((1, n))), config.candidates)[0]
    if rng is None:
        rng = np.random.Generator(np.random.Philox(_data_seed(sample)))
    k = len(config.candidates)
    level = config.alpha2 / k
    crit = special.ndtri(1.0 - level / 2.0)
    m = rng.multinomial(n, np.full(n, 1.0 / n), size=config.n_boot).astype(np.float64)
    zb = _stage_two_stats(*data.tabulate(m), config.candidates)
    ok = np.all(np.isfinite(zb), axis=1)
    aux.update(stage=2, n_boot_used=int(ok.sum()))
    if not ok.any() or not np.any(np.isfinite(z_obs)):
        return TestResult(method, auxiliary=aux, failure="all bootstrap resamples degenerate")
    power = np.mean(np.abs(zb[ok]) > crit, axis=0)
    finite = np.isfinite(z_obs)
    power = np.where(finite, power, -1.0)
    pick = int(np.argmax(power))
    z2 = float(z_obs[pick])
    p2 = min(1.0, k * _two_sided_p(z2))
    fh = config.candidates[pick]
    aux.update(rho=fh.rho, gamma=fh.gamma, bootstrap_power=[float(x) for x in power], p2=p2)
    p = config.alpha1 + (1.0 - config.alpha1) * p2
    return TestResult(method, statistic=z2, p_value=float(p), auxiliary=aux)


# dispatch ------------------------------------------------------------------------

OPTIMAL_WEIGHTS = ("inverse_km", "oracle")


class OracleRequired(ValueError):
    """Oracle OptimalLR weights need the data-generating design."""


def run_test(sample: SurvivalSample, method, design: TwoArmDesign | None = None,
             family=Family.WEIBULL, two_stage_config: TwoStageConfig = TwoStageConfig(),
             rng: np.random.Generator | None = None, optimal_weights: str = "inverse_km") -> TestResult:
    m = Method.parse(method)
    if m is Method.LR:
        return log_rank(sample)
    if m is Method.EARLY_WLR:
        return early_wlr(sample)
    if m is Method.LATE_WLR:
        return late_wlr(sample)
    if m is Method.OPTIMAL_LR:
        if optimal_weights == "inverse_km":
            return optimal_log_rank(sample)
        if optimal_weights != "oracle":
            raise ValueError(f"optimal_weights must be one of {OPTIMAL_WEIGHTS}")
        if design is None:
            raise OracleRequired("oracle OptimalLR weights use the true hazards and need a design; "
                                 "they are not available for real data")
        return oracle_log_rank(sample, design)
    if m is Method.ADAPTIVE_YP:
        return adaptive_yp(sample)
    if m is Method.TWO_STAGE:
        return two_stage(sample, two_stage_config, rng)
    return mcm_lrt(sample, family)


def run_tests(sample: SurvivalSample, methods: Sequence, **kwargs) -> list[TestResult]:
    return [run_test(sample, m, **kwargs) for m in methods]
