"""Simulated trial data under staggered accrual and administrative censoring."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import MixtureCureArm, TwoArmDesign

FOLLOWUP_LEVELS = (0.75, 0.9, 0.95, 0.99, 0.999)
ACCRUAL_REFERENCE_LEVEL = 0.75


def round_to_quarter(x: float) -> float:
    """Nearest quarter, halves rounded up."""
    return math.floor(4.0 * x + 0.5) / 4.0


@dataclass(frozen=True)
class FollowUpSpec:
    """End of follow-up and accrual window, both in the design's time unit.

    Censoring times are uniform on ``[tau_accrual, tau]``.
    """

    quantile_level: float
    tau_raw: float
    tau: float
    tau_accrual: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"follow-up must be positive, got tau={self.tau}")
        if not 0 <= self.tau_accrual < self.tau:
            raise ValueError(
                f"accrual time {self.tau_accrual} must be non-negative and below tau={self.tau}"
            )

    @classmethod
    def from_control(cls, control: MixtureCureArm, level: float, rounding: float | None = 0.25):
        """Follow-up at the ``level`` quantile of the control uncured law.

        Accrual is half of the 0.75 quantile; both are rounded to the nearest
        ``rounding`` unit (a quarter-year by default) when ``rounding`` is set.
        """
        tau_raw = float(control.uncured_quantile(level))
        acc_raw = 0.5 * float(control.uncured_quantile(ACCRUAL_REFERENCE_LEVEL))
        if rounding:
            snap = lambda x: math.floor(x / rounding + 0.5) * rounding  # noqa: E731
            tau, acc = snap(tau_raw), snap(acc_raw)
        else:
            tau, acc = tau_raw, acc_raw
        return cls(level, tau_raw, tau, acc)

    @classmethod
    def fixed(cls, tau: float, tau_accrual: float) -> "FollowUpSpec":
        return cls(float("nan"), tau, tau, tau_accrual)


@dataclass
class SurvivalSample:
    """Observed (time, event, group) triples for one dataset."""

    time: np.ndarray
    event: np.ndarray
    group: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=np.int8)
        self.group = np.asarray(self.group, dtype=np.int8)
        if not (self.time.shape == self.event.shape == self.group.shape) or self.time.ndim != 1:
            raise ValueError("time, event and group must be 1-d arrays of equal length")
        if np.any(~np.isfinite(self.time)) or np.any(self.time < 0):
            raise ValueError("observed times must be finite and non-negative")
        if np.any((self.event != 0) & (self.event != 1)):
            raise ValueError("event indicator must be 0 or 1")
        if np.any((self.group != 0) & (self.group != 1)):
            raise ValueError("group must be 0 or 1")

    def __len__(self):
        return self.time.size

    @property
    def n_per_group(self) -> tuple[int, int]:
        return int(np.sum(self.group == 0)), int(np.sum(self.group == 1))

    @property
    def events_per_group(self) -> tuple[int, int]:
        return (int(np.sum(self.event[self.group == 0])),
                int(np.sum(self.event[self.group == 1])))

    def arm(self, group: int) -> "SurvivalSample":
        keep = self.group == group
        return SurvivalSample(self.time[keep], self.event[keep], self.group[keep],
                              {**self.metadata, "arm": group})

    def swapped(self) -> "SurvivalSample":
        return SurvivalSample(self.time, self.event, 1 - self.group, dict(self.metadata))

    def scaled(self, factor: float) -> "SurvivalSample":
        return SurvivalSample(self.time * factor, self.event, self.group, dict(self.metadata))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "event", "group"])
        for t, e, g in zip(self.time, self.event, self.group):
            writer.writerow([repr(float(t)), int(e), int(g)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "SurvivalSample":
        """Read the ``time,event,group`` format from a path or a text stream.

        Lines starting with ``#`` are ignored.  Raises ``ValueError`` with the
        offending line number on malformed input.
        """
        if isinstance(source, (str, Path)):
            text = Path(source).read_text()
        else:
            text = source.read()
        lines = [(i, ln) for i, ln in enumerate(text.splitlines(), 1)
                 if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines:
            raise ValueError("dataset is empty")
        header = [h.strip().lower() for h in lines[0][1].split(",")]
        try:
            cols = [header.index(c) for c in ("time", "event", "group")]
        except ValueError:
            raise ValueError(f"line {lines[0][0]}: header must contain time,event,group") from None
        rows = []
        for lineno, ln in lines[1:]:
            parts = ln.split(",")
            try:
                t, e, g = (parts[c].strip() for c in cols)
                t, e, g = float(t), int(float(e)), int(float(g))
            except (IndexError, ValueError):
                raise ValueError(f"line {lineno}: cannot parse {ln!r}") from None
            if not (t >= 0 and math.isfinite(t)) or e not in (0, 1) or g not in (0, 1):
                raise ValueError(f"line {lineno}: values out of range in {ln!r}")
            rows.append((t, e, g))
        if not rows:
            raise ValueError("dataset has a header but no records")
        arr = np.array(rows, dtype=np.float64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


# random streams ------------------------------------------------------------

def scenario_key(scenario_id: str) -> int:
    return int.from_bytes(hashlib.sha256(scenario_id.encode()).digest()[:8], "little")


def replicate_seed_sequence(master_seed: int, scenario_id: str, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(scenario_key(scenario_id), int(replicate)))


def replicate_rng(master_seed: int, scenario_id: str, replicate: int) -> np.random.Generator:
    """Counter-based stream owned by one (scenario, replicate) pair."""
    return np.random.Generator(np.random.Philox(replicate_seed_sequence(master_seed, scenario_id, replicate)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(seed))


# sampling -----------------------------------------------------------------

def sample_event_times(arm: MixtureCureArm, rng, size: int | None = None):
    """Latent event times by the inverse-CDF method; cured subjects get ``inf``.

    Two uniforms are consumed per subject (cure indicator, then latency) so
    the stream position does not depend on the cure outcome.
    """
    rng = _as_rng(rng)
    n = 1 if size is None else int(size)
    cured = rng.random(n) < arm.cure_fraction
    u = rng.random(n)
    # inverse CDF needs u in (0, 1); Generator.random can return exactly 0
    u = np.where(u > 0.0, u, np.nextafter(0.0, 1.0))
    t = np.where(cured, np.inf, arm.uncured_quantile(u))
    return float(t[0]) if size is None else t


def sample_censoring(spec: FollowUpSpec, rng, size: int | None = None):
    rng = _as_rng(rng)
    n = 1 if size is None else int(size)
    c = rng.uniform(spec.tau_accrual, spec.tau, n)
    return float(c[0]) if size is None else c


def generate_latent(design: TwoArmDesign, n_per_arm: int, spec: FollowUpSpec, seed):
    """Latent (T, C, group) arrays; control block first, then treatment."""
    if int(n_per_arm) < 1:
        raise ValueError(f"n_per_arm must be a positive integer, got {n_per_arm}")
    rng = _as_rng(seed)
    ts, cs, gs = [], [], []
    for g, arm in enumerate((design.control, design.treatment)):
        ts.append(sample_event_times(arm, rng, n_per_arm))
        cs.append(sample_censoring(spec, rng, n_per_arm))
        gs.append(np.full(n_per_arm, g, dtype=np.int8))
    return np.concatenate(ts), np.concatenate(cs), np.concatenate(gs)


def generate_trial(design: TwoArmDesign, n_per_arm: int, spec: FollowUpSpec, seed,
                   metadata: dict | None = None) -> SurvivalSample:
    """One simulated two-arm dataset with T_obs = min(T, C) and delta = 1{T <= C}."""
    t, c, g = generate_latent(design, n_per_arm, spec, seed)
    event = (t <= c).astype(np.int8)
    return SurvivalSample(np.minimum(t, c), event, g, dict(metadata or {}))
