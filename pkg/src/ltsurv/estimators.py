"""Risk-set tabulation and Kaplan-Meier curves."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .datagen import SurvivalSample


@dataclass(frozen=True)
class RiskTable:
    """Events and numbers at risk by group at each distinct event time.

    At a tied time, records censored there still count as at risk.
    """

    time: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    @property
    def d(self) -> np.ndarray:
        return self.d0 + self.d1

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.y1

    def __len__(self):
        return self.time.size

    def pooled_km_left(self) -> np.ndarray:
        """Pooled Kaplan-Meier S(t-) just before each event time."""
        factors = 1.0 - self.d / self.y
        return np.concatenate(([1.0], np.cumprod(factors)[:-1]))

    def hypergeometric_variance(self) -> np.ndarray:
        """Null variance of d1 at each time, with the tie correction."""
        y, d = self.y.astype(np.float64), self.d.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            v = self.y0 * self.y1 * d * (y - d) / (y * y * (y - 1.0))
        return np.where(y > 1, v, 0.0)

    def observed_minus_expected(self) -> np.ndarray:
        return self.d1 - self.y1 * self.d / self.y


def build_risk_table(sample: SurvivalSample) -> RiskTable:
    if len(sample) == 0:
        raise ValueError("cannot tabulate an empty sample")
    ev = sample.event == 1
    times = np.unique(sample.time[ev])
    d, y = [], []
    for g in (0, 1):
        in_g = sample.group == g
        tg = np.sort(sample.time[in_g])
        y.append(tg.size - np.searchsorted(tg, times, side="left"))
        et = np.sort(sample.time[in_g & ev])
        d.append(np.searchsorted(et, times, side="right") - np.searchsorted(et, times, side="left"))
    return RiskTable(times, d[0], d[1], y[0], y[1])


@dataclass(frozen=True)
class KMCurve:
    """Right-continuous product-limit step function, one row per event time."""

    time: np.ndarray
    survival: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray

    def __call__(self, t):
        """S(t)."""
        idx = np.searchsorted(self.time, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate(([1.0], self.survival))[idx]

    def left_limit(self, t):
        """S(t-)."""
        idx = np.searchsorted(self.time, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate(([1.0], self.survival))[idx]

    @property
    def last_event_value(self) -> float:
        return float(self.survival[-1]) if self.survival.size else 1.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "survival", "n_risk", "n_event"])
        w.writerow([0.0, 1.0, "", ""])
        for row in zip(self.time, self.survival, self.n_risk, self.n_event):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def kaplan_meier(sample: SurvivalSample, group: int | None = None) -> KMCurve:
    """Kaplan-Meier estimate, pooled over both groups when ``group`` is None."""
    if len(sample) == 0:
        raise ValueError("cannot estimate survival from an empty sample")
    if group is not None:
        sample = sample.arm(group)
        if len(sample) == 0:
            raise ValueError(f"group {group} has no records")
    ev = sample.event == 1
    times = np.unique(sample.time[ev])
    all_sorted = np.sort(sample.time)
    n_risk = all_sorted.size - np.searchsorted(all_sorted, times, side="left")
    et = np.sort(sample.time[ev])
    n_event = np.searchsorted(et, times, side="right") - np.searchsorted(et, times, side="left")
    surv = np.cumprod(1.0 - n_event / n_risk)
    return KMCurve(times, surv, n_risk, n_event)
