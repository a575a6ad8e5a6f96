"""Factorial Monte Carlo engine for rejection rates.

Every replicate draws from its own counter-based stream keyed by
(master seed, scenario id, replicate id), so results do not depend on the
number of workers or on the order in which replicates run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import FOLLOWUP_LEVELS, FollowUpSpec, generate_trial, replicate_rng
from .distributions import (Family, MixtureCureArm, ParametricDistribution, TwoArmDesign,
                            UncuredEffect, apply_effects)
from .results import Method
from .twosample import OPTIMAL_WEIGHTS, TwoStageConfig, run_test

log = logging.getLogger(__name__)

ALPHA = 0.05
DEFAULT_REPLICATES = 2000
FULL_REPLICATES = 10_000
DESK_METHODS = ("LR", "OptimalLR", "AdaptiveYP", "MCM-LRT")

REFERENCE_DOMAINS = {
    "odds_ratio": (1.0, 1.1, 1.25, 1.5),
    "hazard_ratio": (1.0, 0.9, 0.75, 0.5),
    "time_ratio": (1.0, 1.05, 1.15, 1.41),
    "pi0": (0.0, 0.1, 0.2, 0.5, 0.8, 0.95),
    "n_per_arm": (25, 50, 100, 500),
    "followup_quantile": FOLLOWUP_LEVELS,
}
ONE_ARM_CURE_PI1 = 0.2
REFERENCE_FAMILIES = {
    "weibull": (2.0, 1.0, "hazard_ratio"),
    "loglogistic": (2.0, 1.0, "time_ratio"),
    "gamma": (2.0, 1.0, "time_ratio"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    family: str = "weibull"
    param1: float = 2.0
    param2: float = 1.0
    pi0: float = 0.0
    odds_ratio: float = 1.0
    hazard_ratio: float | None = None
    time_ratio: float | None = None
    pi1: float | None = None
    n_per_arm: int = 100
    followup_quantile: float = 0.999
    replicates: int = DEFAULT_REPLICATES
    master_seed: int = 20250101
    methods: tuple = DESK_METHODS
    n_boot: int = 500
    rounding: float | None = 0.25
    optimal_weights: str = "inverse_km"

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family).value)
        object.__setattr__(self, "methods", tuple(Method.parse(m).value for m in self.methods))
        if self.hazard_ratio is not None and self.time_ratio is not None:
            raise ConfigError("give either hazard_ratio or time_ratio, not both")
        if self.optimal_weights not in OPTIMAL_WEIGHTS:
            raise ConfigError(f"optimal_weights must be one of {OPTIMAL_WEIGHTS}")

    @property
    def scenario_id(self) -> str:
        """Stable identifier of the data-generating cell (independent of methods and replicates)."""
        parts = [f"{self.family}({self.param1:g},{self.param2:g})", f"pi0={self.pi0:g}"]
        if self.pi1 is not None:
            parts.append(f"pi1={self.pi1:g}")
        parts.append(f"or={self.odds_ratio:g}")
        if self.hazard_ratio is not None:
            parts.append(f"hr={self.hazard_ratio:g}")
        if self.time_ratio is not None:
            parts.append(f"tr={self.time_ratio:g}")
        parts += [f"n={self.n_per_arm}", f"q={self.followup_quantile:g}"]
        if self.rounding != 0.25:
            parts.append(f"round={self.rounding}")
        return "_".join(parts)

    @property
    def effect(self) -> UncuredEffect:
        if self.hazard_ratio is not None:
            return UncuredEffect.hazard_ratio(self.hazard_ratio)
        if self.time_ratio is not None:
            return UncuredEffect.time_ratio(self.time_ratio)
        return UncuredEffect()

    def design(self) -> TwoArmDesign:
        control = MixtureCureArm(self.pi0, ParametricDistribution(self.family, self.param1, self.param2))
        return apply_effects(control, self.odds_ratio, self.effect, self.pi1)

    def followup(self) -> FollowUpSpec:
        return FollowUpSpec.from_control(self.design().control, self.followup_quantile, self.rounding)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# grid expansion -------------------------------------------------------------

GRID_SETTINGS = ("replicates", "master_seed", "methods", "n_boot", "rounding", "optimal_weights")
GRID_FACTORS = ("pi0", "pi1", "odds_ratio", "hazard_ratio", "time_ratio", "n_per_arm",
                "followup_quantile")


def _as_list(v):
    if v is None:
        return [None]
    return list(v) if isinstance(v, (list, tuple)) else [v]


def exclusion_reason(cfg: ScenarioConfig) -> str | None:
    """Why a cell is left out of the grid, or None."""
    if cfg.pi1 is not None and cfg.odds_ratio != 1.0:
        return "both an explicit pi1 and an odds ratio were given"
    if cfg.pi1 is None and cfg.pi0 in (0.0, 1.0) and cfg.odds_ratio != 1.0:
        return f"odds ratio cannot act on pi0={cfg.pi0:g} (logit undefined) and no pi1 override"
    e = cfg.effect
    benefit_latency = (e.kind.value == "hazard_ratio" and e.value < 1) or (
        e.kind.value == "time_ratio" and e.value > 1)
    harm_latency = (e.kind.value == "hazard_ratio" and e.value > 1) or (
        e.kind.value == "time_ratio" and e.value < 1)
    pi1 = cfg.pi1
    benefit_cure = cfg.odds_ratio > 1 or (pi1 is not None and pi1 > cfg.pi0)
    harm_cure = cfg.odds_ratio < 1 or (pi1 is not None and pi1 < cfg.pi0)
    if (benefit_cure and harm_latency) or (harm_cure and benefit_latency):
        return "cure and latency effects point in opposite directions"
    return None


def expand_block(block: dict, defaults: dict) -> list[ScenarioConfig]:
    merged = {**defaults, **block}
    fixed = {k: v for k, v in merged.items() if k not in GRID_FACTORS}
    # factors missing from the block keep their ScenarioConfig defaults
    names = [k for k in GRID_FACTORS if k in merged]
    out = []
    for combo in itertools.product(*(_as_list(merged[k]) for k in names)):
        kw = dict(zip(names, combo))
        try:
            out.append(ScenarioConfig(**fixed, **kw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return out


def expand_grid(grid_spec: dict) -> tuple[list[ScenarioConfig], list[dict]]:
    """Cartesian product of each block in ``grid_spec['scenarios']`` minus excluded cells.

    Returns the kept configurations (follow-up quantile varies fastest) and
    a log of excluded cells with reasons.
    """
    mode = grid_spec.get("grid", "custom")
    defaults = {k: grid_spec[k] for k in GRID_SETTINGS if k in grid_spec}
    if mode in ("paper", "reference"):
        blocks = reference_blocks(grid_spec)
    elif mode == "custom":
        blocks = grid_spec.get("scenarios") or []
    else:
        raise ConfigError(f"grid must be 'reference' (alias 'paper') or 'custom', got {mode!r}")
    kept, excluded, seen = [], [], set()
    for block in blocks:
        for cfg in expand_block(block, defaults):
            if cfg.scenario_id in seen:
                continue
            seen.add(cfg.scenario_id)
            reason = exclusion_reason(cfg)
            if reason:
                excluded.append({"scenario_id": cfg.scenario_id, "reason": reason})
                log.info("excluded %s: %s", cfg.scenario_id, reason)
            else:
                kept.append(cfg)
    if not kept:
        raise ConfigError("the grid is empty after exclusions")
    return kept, excluded


def reference_blocks(grid_spec: dict) -> list[dict]:
    """Blocks of the published factorial design, optionally restricted to subsets."""
    families = grid_spec.get("families", list(REFERENCE_FAMILIES))
    blocks = []
    for fam in _as_list(families):
        key = Family.parse(fam).value
        if key not in REFERENCE_FAMILIES:
            raise ConfigError(f"family {fam!r} is not part of the reference grid")
        p1, p2, effect = REFERENCE_FAMILIES[key]
        block = {"family": key, "param1": p1, "param2": p2}
        for factor in ("pi0", "odds_ratio", "n_per_arm", "followup_quantile", effect):
            values = _as_list(grid_spec.get(factor, REFERENCE_DOMAINS[factor]))
            bad = [v for v in values if v not in REFERENCE_DOMAINS[factor]]
            if bad:
                raise ConfigError(f"{factor} values {bad} are outside the reference grid "
                                  f"{list(REFERENCE_DOMAINS[factor])}")
            block[factor] = values
        blocks.append(block)
        if grid_spec.get("one_arm_cure", True) and 0.0 in block["pi0"]:
            # no cure under control, fixed cure fraction under treatment
            blocks.append({**block, "pi0": [0.0], "pi1": [ONE_ARM_CURE_PI1], "odds_ratio": [1.0]})
    return blocks


# running ------------------------------------------------------------------------

@dataclass
class MethodSummary:
    n_run: int = 0
    n_failed: int = 0
    rejections: int = 0

    @property
    def rate(self) -> float | None:
        return estimate_rejection_rate(self.rejections, self.n_run)[0] if self.n_run else None

    @property
    def se(self) -> float | None:
        return estimate_rejection_rate(self.rejections, self.n_run)[1] if self.n_run else None

    @property
    def failure_rate(self) -> float:
        total = self.n_run + self.n_failed
        return self.n_failed / total if total else math.nan


def estimate_rejection_rate(rejections: int, n_run: int) -> tuple[float, float]:
    """Rejection proportion and its binomial standard error."""
    if n_run < 1:
        raise ValueError("no successful replicates to estimate a rejection rate from")
    rate = rejections / n_run
    return rate, math.sqrt(rate * (1.0 - rate) / n_run)


@dataclass
class ScenarioSummary:
    scenario_id: str
    config: ScenarioConfig
    methods: dict
    failures: list = field(default_factory=list)
    p_values: dict | None = None

    def rate(self, method) -> float | None:
        return self.methods[Method.parse(method).value].rate

    def se(self, method) -> float | None:
        return self.methods[Method.parse(method).value].se

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "config": self.config.to_dict(),
            "methods": {m: asdict(s) for m, s in self.methods.items()},
            "failures": self.failures,
            "p_values": self.p_values,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSummary":
        cfg = ScenarioConfig(**{**d["config"], "methods": tuple(d["config"]["methods"])})
        methods = {m: MethodSummary(**s) for m, s in d["methods"].items()}
        return cls(d["scenario_id"], cfg, methods, d.get("failures", []), d.get("p_values"))


def run_replicate(cfg: ScenarioConfig, replicate: int, design: TwoArmDesign | None = None,
                  spec: FollowUpSpec | None = None) -> dict:
    """All configured tests on one simulated dataset."""
    design = cfg.design() if design is None else design
    spec = cfg.followup() if spec is None else spec
    sid = cfg.scenario_id
    sample = generate_trial(design, cfg.n_per_arm, spec, replicate_rng(cfg.master_seed, sid, replicate),
                            {"scenario_id": sid, "replicate": replicate, "seed": cfg.master_seed})
    ts_cfg = TwoStageConfig(n_boot=cfg.n_boot)
    out = {}
    for m in cfg.methods:
        rng = replicate_rng(cfg.master_seed, sid + "/bootstrap", replicate) if m == "TwoStage" else None
        try:
            res = run_test(sample, m, design=design, family=cfg.family, two_stage_config=ts_cfg,
                           rng=rng, optimal_weights=cfg.optimal_weights)
            failure = res.failure
            p = res.p_value
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            failure, p = f"{type(exc).__name__}: {exc}", math.nan
        if failure is None and not (0.0 <= p <= 1.0):
            failure = f"invalid p-value {p!r}"
        entry = {"p": None if failure else float(p), "failure": failure}
        if failure:
            entry["data"] = {"time": sample.time.tolist(), "event": sample.event.tolist(),
                             "group": sample.group.tolist()}
        out[m] = entry
    return out


def _run_chunk(args):
    cfg, reps = args
    design, spec = cfg.design(), cfg.followup()
    return [(r, run_replicate(cfg, r, design, spec)) for r in reps]


def run_scenario(cfg: ScenarioConfig, workers: int = 1, keep_p_values: bool = False,
                 chunk_size: int = 100, executor=None) -> ScenarioSummary:
    if cfg.replicates < 1:
        raise ValueError("replicates must be at least 1")
    cfg.followup()  # validate before fanning out
    chunks = [(cfg, range(i, min(i + chunk_size, cfg.replicates)))
              for i in range(0, cfg.replicates, chunk_size)]
    if executor is not None:
        parts = list(executor.map(_run_chunk, chunks))
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    results = dict(item for part in parts for item in part)
    return summarize(cfg, results, keep_p_values)


def summarize(cfg: ScenarioConfig, results: dict, keep_p_values: bool = False) -> ScenarioSummary:
    methods = {m: MethodSummary() for m in cfg.methods}
    failures = []
    pv = {m: [] for m in cfg.methods} if keep_p_values else None
    for r in sorted(results):
        for m, entry in results[r].items():
            s = methods[m]
            if entry["failure"]:
                s.n_failed += 1
                failures.append({"scenario_id": cfg.scenario_id, "replicate": r, "method": m,
                                 "master_seed": cfg.master_seed, "error": entry["failure"],
                                 "data": entry.get("data")})
            else:
                s.n_run += 1
                s.rejections += int(entry["p"] < ALPHA)
            if pv is not None:
                pv[m].append(entry["p"])
    return ScenarioSummary(cfg.scenario_id, cfg, methods, failures, pv)


# grid runs with checkpoints ------------------------------------------------------------

SUMMARY_COLUMNS = ("scenario_id", "family", "param1", "param2", "pi0", "pi1", "odds_ratio",
                   "effect", "effect_size", "n_per_arm", "followup_quantile", "tau", "tau_accrual",
                   "method", "n_run", "n_failed", "rate", "se")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.15g}" if math.isfinite(x) else ""
    return str(x)


def summary_rows(summary: ScenarioSummary) -> list[dict]:
    cfg = summary.config
    design = cfg.design()
    spec = cfg.followup()
    rows = []
    for m in cfg.methods:
        s = summary.methods[m]
        rows.append({
            "scenario_id": summary.scenario_id, "family": cfg.family, "param1": cfg.param1,
            "param2": cfg.param2, "pi0": cfg.pi0, "pi1": design.treatment.cure_fraction,
            "odds_ratio": cfg.odds_ratio, "effect": cfg.effect.kind.value,
            "effect_size": cfg.effect.value, "n_per_arm": cfg.n_per_arm,
            "followup_quantile": cfg.followup_quantile, "tau": spec.tau,
            "tau_accrual": spec.tau_accrual, "method": m, "n_run": s.n_run, "n_failed": s.n_failed,
            "rate": s.rate, "se": s.se,
        })
    return rows


def write_summary_csv(summaries, path, header: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        for row in summary_rows(s):
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _checkpoint_path(root: Path, cfg: ScenarioConfig) -> Path:
    return root / f"{cfg.config_hash()}.json"


def run_grid(configs, out_dir, workers: int = 1, keep_p_values: bool = False,
             header: dict | None = None) -> list[ScenarioSummary]:
    """Run scenarios in order, reusing checkpoints of already-finished cells.

    Writes ``summary.csv`` and ``failures.json`` into ``out_dir``.
    """
    out = Path(out_dir)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    summaries = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for cfg in configs:
            path = _checkpoint_path(ckpt, cfg)
            if path.exists():
                summary = ScenarioSummary.from_dict(json.loads(path.read_text()))
                log.info("reused checkpoint for %s", cfg.scenario_id)
            else:
                summary = run_scenario(cfg, keep_p_values=keep_p_values, executor=executor)
                path.write_text(json.dumps(summary.to_dict(), sort_keys=True))
                log.info("finished %s", cfg.scenario_id)
            summaries.append(summary)
    finally:
        if executor is not None:
            executor.shutdown()
    write_summary_csv(summaries, out / "summary.csv", header)
    ledger = [f for s in summaries for f in s.failures]
    (out / "failures.json").write_text(json.dumps(
        {"header": header or {}, "failures": ledger}, indent=1, sort_keys=True))
    return summaries


__all__ = [
    "ConfigError", "DESK_METHODS", "MethodSummary", "ScenarioConfig", "ScenarioSummary",
    "estimate_rejection_rate", "expand_grid", "run_grid", "run_replicate", "run_scenario",
    "summarize", "write_summary_csv", "__version__",
]
