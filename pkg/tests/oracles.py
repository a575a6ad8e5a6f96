"""Independent reference computations used only by the test suite.

Written with plain loops and scipy.stats so they share no code with the
package under test.
"""

import math

import numpy as np
from scipy import optimize, stats


def brute_force_weighted_logrank(time, event, group, weight_of_left_km=None):
    """U and V by walking every distinct event time and building the 2x2 table.

    ``weight_of_left_km`` maps the pooled KM value just before the event time
    to a weight; None means unit weights.
    """
    time = [float(t) for t in time]
    event = [int(e) for e in event]
    group = [int(g) for g in group]
    event_times = sorted({t for t, e in zip(time, event) if e == 1})
    u = v = 0.0
    km = 1.0
    for s in event_times:
        at_risk = [i for i in range(len(time)) if time[i] >= s]
        y = len(at_risk)
        y1 = sum(1 for i in at_risk if group[i] == 1)
        d = sum(1 for i in at_risk if time[i] == s and event[i] == 1)
        d1 = sum(1 for i in at_risk if time[i] == s and event[i] == 1 and group[i] == 1)
        w = 1.0 if weight_of_left_km is None else weight_of_left_km(km)
        u += w * (d1 - y1 * d / y)
        if y > 1:
            v += w * w * d * (y1 / y) * (1 - y1 / y) * (y - d) / (y - 1)
        km *= 1 - d / y
    return u, v


def product_limit(time, event):
    """List of (event time, S) from the product-limit formula computed directly."""
    out = []
    s = 1.0
    for t in sorted({float(t) for t, e in zip(time, event) if e == 1}):
        y = sum(1 for x in time if x >= t)
        d = sum(1 for x, e in zip(time, event) if x == t and e == 1)
        s *= 1 - d / y
        out.append((t, s))
    return out


def scipy_law(family, p1, p2):
    if family == "weibull":
        return stats.weibull_min(c=p1, scale=p2)
    if family == "gamma":
        return stats.gamma(a=p1, scale=1.0 / p2)
    if family == "loglogistic":
        return stats.fisk(c=p1, scale=p2)
    if family == "lognormal":
        return stats.lognorm(s=p2, scale=math.exp(p1))
    raise ValueError(family)


def mixture_loglik_terms(time, event, pi, law):
    """sum over events of log[(1 - pi) f(t)] plus censored log[pi + (1 - pi) S(t)]."""
    total = 0.0
    for t, e in zip(time, event):
        if e:
            total += math.log(1 - pi) + float(law.logpdf(t))
        else:
            total += math.log(pi + (1 - pi) * float(law.sf(t)))
    return total


def bisection_quantile(survival, p, hi=1.0):
    """t with 1 - S(t) = p by bracketing and bisection."""
    while 1 - survival(hi) < p:
        hi *= 2
    return optimize.bisect(lambda t: 1 - survival(t) - p, 0.0, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
