from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum


class Method(str, Enum):
    LR = "LR"
    EARLY_WLR = "EarlyWLR"
    LATE_WLR = "LateWLR"
    OPTIMAL_LR = "OptimalLR"
    ADAPTIVE_YP = "AdaptiveYP"
    TWO_STAGE = "TwoStage"
    MCM_LRT = "MCM-LRT"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for m in cls:
            if m.value.lower().replace("-", "") == key:
                return m
        raise ValueError(f"unknown method {value!r}; choose from {[m.value for m in cls]}")


ALL_METHODS = tuple(Method)


def _round15(x):
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        return float(f"{x:.15g}")
    if isinstance(x, dict):
        return {k: _round15(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round15(v) for v in x]
    return x


@dataclass
class TestResult:
    """Outcome of one two-sample test on one dataset.

    For rank tests ``statistic`` is the standardized Z = U / sqrt(V), with
    ``score`` = U and ``variance`` = V.  For the likelihood-ratio test
    ``statistic`` is 2 * (loglik_alt - loglik_null).  On failure the numeric
    fields are NaN and ``failure`` carries the reason.
    """

    __test__ = False  # not a pytest class

    method: Method
    statistic: float = math.nan
    p_value: float = math.nan
    variance: float = math.nan
    score: float = math.nan
    auxiliary: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def rejects(self, alpha: float = 0.05) -> bool:
        return (not self.failed) and self.p_value < alpha

    @classmethod
    def failed_result(cls, method: Method, reason: str, **aux) -> "TestResult":
        return cls(Method.parse(method), failure=reason, auxiliary=aux)

    def to_dict(self) -> dict:
        return {
            "method": Method.parse(self.method).value,
            "statistic": _round15(float(self.statistic)),
            "score": _round15(float(self.score)),
            "variance": _round15(float(self.variance)),
            "p_value": _round15(float(self.p_value)),
            "auxiliary": _round15(self.auxiliary),
            "failure": self.failure,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
