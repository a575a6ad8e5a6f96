"""Command-line entry point.

Subcommands::

    ltsurv simulate --config grid.yaml --out runs/desk
    ltsurv predict  --design design.yaml [--out DIR]
    ltsurv fit      data.csv --family weibull [--out DIR]
    ltsurv test     data.csv --methods LR,AdaptiveYP [--out DIR]
    ltsurv report   runs/desk [--out DIR]

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datagen import FollowUpSpec, SurvivalSample
from .distributions import (Family, MixtureCureArm, ParametricDistribution, TwoArmDesign,
                            UncuredEffect, apply_effects)
from .mcm import (FitError, InsufficientDataError, MCMFit, TimeUnitMismatch, cure_report,
                  family_report, fit_arm, fit_to_design)
from .predictor import CensoringLaw, compute_a_profile, default_grid
from .results import Method
from .simharness import (GRID_FACTORS, GRID_SETTINGS, REFERENCE_DOMAINS, ConfigError, expand_grid,
                         run_grid)
from .twosample import OPTIMAL_WEIGHTS, OracleRequired, TwoStageConfig, run_test

log = logging.getLogger("ltsurv")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_VERSION = 1

GRID_TOP_KEYS = {"version", "grid", "families", "scenarios", "one_arm_cure", *GRID_SETTINGS,
                 *REFERENCE_DOMAINS}
BLOCK_KEYS = {"family", "param1", "param2", *GRID_FACTORS}


class UsageError(Exception):
    pass


# configuration files -------------------------------------------------------------

def _key_lines(text: str) -> dict:
    """Map key paths of a YAML mapping tree to 1-based line numbers."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                lines[path + (i,)] = v.start_mark.line + 1
                walk(v, path + (i,))

    walk(yaml.compose(text), ())
    return lines


def load_yaml(path) -> tuple[dict, dict, str]:
    """Parsed mapping, key line numbers and the raw text of a YAML file."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    text = p.read_text()
    try:
        data = yaml.safe_load(text)
        lines = _key_lines(text) if data else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigError(f"{path}: {where}{getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: line 1: expected a mapping at the top level")
    return data, lines, text


def _where(path, lines, key_path) -> str:
    line = lines.get(tuple(key_path))
    return f"{path}: line {line}: " if line else f"{path}: "


def load_grid_config(path) -> tuple[dict, dict]:
    """Read and validate a simulation grid file; returns (spec, key lines)."""
    data, lines, _ = load_yaml(path)
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{_where(path, lines, ['version'])}unsupported config version {version!r}")
    for k in data:
        if k not in GRID_TOP_KEYS:
            raise ConfigError(f"{_where(path, lines, [k])}unknown key {k!r}")
    if data.get("grid", "custom") == "custom":
        blocks = data.get("scenarios")
        if not isinstance(blocks, list) or not blocks:
            raise ConfigError(f"{_where(path, lines, ['scenarios'])}custom grids need a non-empty "
                              "'scenarios' list")
        for i, block in enumerate(blocks):
            if not isinstance(block, dict):
                raise ConfigError(f"{_where(path, lines, ['scenarios', i])}scenario block must be a mapping")
            for k in block:
                if k not in BLOCK_KEYS:
                    raise ConfigError(f"{_where(path, lines, ['scenarios', i, k])}unknown key {k!r}")
    return data, lines


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def artifact_header(cfg_hash: str, seed) -> dict:
    return {"tool": "ltsurv", "version": __version__, "config_hash": cfg_hash, "master_seed": seed}


def _prepare_out(out, force: bool, names) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise UsageError(f"{out}: {', '.join(clash)} already exist; pass --force to overwrite")
    return out


def _parse_methods(text) -> list[str]:
    if text is None:
        return None
    try:
        return [Method.parse(m).value for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# simulate ------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec, _ = load_grid_config(args.config)
    if args.grid is not None:
        spec["grid"] = args.grid
    if args.seed is not None:
        spec["master_seed"] = args.seed
    if args.replicates is not None:
        spec["replicates"] = args.replicates
    methods = _parse_methods(args.methods)
    if methods:
        spec["methods"] = methods
    if args.optimal_weights:
        spec["optimal_weights"] = args.optimal_weights
    configs, excluded = expand_grid(spec)
    for cfg in configs:
        try:
            cfg.followup()
        except ValueError as exc:
            raise ConfigError(f"{args.config}: scenario {cfg.scenario_id}: {exc}") from None
        if cfg.replicates < 1:
            raise ConfigError(f"{args.config}: replicates must be at least 1")
    out = _prepare_out(args.out, args.force, ["summary.csv", "failures.json"])
    if args.force and (out / "checkpoints").exists():
        shutil.rmtree(out / "checkpoints")
    cfg_hash = config_hash({k: v for k, v in spec.items()})
    header = artifact_header(cfg_hash, configs[0].master_seed)
    (out / "exclusions.json").write_text(json.dumps({"header": header, "excluded": excluded}, indent=1))
    log.info("%d scenarios, %d excluded", len(configs), len(excluded))
    run_grid(configs, out, workers=args.threads, keep_p_values=args.keep_p_values, header=header)
    print(f"wrote {out / 'summary.csv'} ({len(configs)} scenarios)")
    return EXIT_OK


# predict ------------------------------------------------------------------------------

def _arm_from_mapping(d: dict, where: str) -> tuple[MixtureCureArm, str | None]:
    try:
        dist = ParametricDistribution(d["family"], float(d["param1"]), float(d["param2"]))
        return MixtureCureArm(float(d.get("cure_fraction", 0.0)), dist), d.get("time_unit")
    except KeyError as exc:
        raise ConfigError(f"{where}missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


def design_from_config(path) -> tuple[TwoArmDesign, dict, str | None, dict]:
    """Design, censoring block, time unit and raw data from a design file."""
    data, lines, _ = load_yaml(path)
    allowed = {"version", "control", "treatment", "effects", "censoring", "time_unit", "points"}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{_where(path, lines, [k])}unknown key {k!r}")
    if "control" not in data:
        raise ConfigError(f"{path}: missing 'control' arm")
    control, unit0 = _arm_from_mapping(data["control"], _where(path, lines, ["control"]))
    unit = data.get("time_unit", unit0)
    if "treatment" in data and "effects" in data:
        raise ConfigError(f"{_where(path, lines, ['effects'])}give either 'treatment' or 'effects'")
    if "treatment" in data:
        treat, unit1 = _arm_from_mapping(data["treatment"], _where(path, lines, ["treatment"]))
        if unit0 != unit1:
            raise TimeUnitMismatch(f"{path}: arms use different time units ({unit0!r} vs {unit1!r})")
        design = TwoArmDesign(control, treat, math.nan, {"cure": "explicit", "uncured": "explicit"})
    else:
        eff = data.get("effects") or {}
        where = _where(path, lines, ["effects"])
        if "hazard_ratio" in eff and "time_ratio" in eff:
            raise ConfigError(f"{where}give either hazard_ratio or time_ratio")
        effect = (UncuredEffect.hazard_ratio(eff["hazard_ratio"]) if "hazard_ratio" in eff else
                  UncuredEffect.time_ratio(eff["time_ratio"]) if "time_ratio" in eff else UncuredEffect())
        try:
            design = apply_effects(control, float(eff.get("odds_ratio", 1.0)), effect, eff.get("pi1"))
        except ValueError as exc:
            raise ConfigError(f"{where}{exc}") from None
    return design, data.get("censoring") or {}, unit, {"data": data, "lines": lines}


def censoring_from_block(block: dict, design: TwoArmDesign, where: str = "") -> CensoringLaw:
    try:
        if "followup_quantile" in block:
            spec = FollowUpSpec.from_control(design.control, float(block["followup_quantile"]),
                                             block.get("rounding", 0.25))
            return CensoringLaw.from_followup(spec)
        return CensoringLaw(float(block.get("start", 0.0)), float(block["end"]))
    except KeyError:
        raise ConfigError(f"{where}censoring needs 'end' (or 'followup_quantile')") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


def cmd_predict(args) -> int:
    if bool(args.design) == bool(args.fits):
        raise UsageError("give exactly one of --design or --fits")
    if args.design:
        design, cens_block, unit, raw = design_from_config(args.design)
        if args.censoring:
            cens_block = {"start": args.censoring[0], "end": args.censoring[1]}
        censoring = censoring_from_block(cens_block, design, f"{args.design}: ")
        points = int(raw["data"].get("points", args.points))
        provenance = {"design": Path(args.design).read_text()}
    else:
        fits = []
        for p in args.fits:
            try:
                fits.append(MCMFit.from_json(Path(p).read_text()))
            except (OSError, ValueError, TypeError) as exc:
                raise UsageError(f"{p}: not a readable fit report ({exc})") from None
        design = fit_to_design(*fits)
        unit = fits[0].time_unit
        if not args.censoring:
            raise UsageError("--fits needs --censoring START END")
        censoring = CensoringLaw(*args.censoring)
        points = args.points
        provenance = {"fits": [f.to_dict() for f in fits]}
    grid = default_grid(design, censoring, points)
    profile = compute_a_profile(design, censoring, grid)
    header = artifact_header(config_hash({**provenance, "censoring": [censoring.tau_start,
                                                                       censoring.tau_end]}), None)
    if unit:
        header["time_unit"] = unit
    verdict = profile.verdict()
    if args.out:
        out = _prepare_out(args.out, args.force, ["a_profile.csv"])
        profile.to_csv(out / "a_profile.csv", header)
        print(verdict)
    else:
        sys.stdout.write(profile.to_csv(None, header))
        print(verdict, file=sys.stderr)
    return EXIT_OK


# datasets --------------------------------------------------------------------------------

def read_dataset(path) -> SurvivalSample:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    try:
        return SurvivalSample.from_csv(p)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _require_two_groups(sample: SurvivalSample, path):
    n0, n1 = sample.n_per_group
    if n0 == 0 or n1 == 0:
        raise UsageError(f"{path}: both groups 0 and 1 must be present (sizes {n0}, {n1})")


def cmd_fit(args) -> int:
    sample = read_dataset(args.data)
    families = [f.strip() for f in args.family.split(",")]
    groups = [None] if args.group == "all" else [0, 1] if args.group == "both" else [int(args.group)]
    if args.group == "both":
        _require_two_groups(sample, args.data)
    if len(families) == 1:
        families = families * len(groups)
    if len(families) != len(groups):
        raise UsageError("give one family, or one per fitted group")
    try:
        families = [Family.parse(f) for f in families]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    header = artifact_header(config_hash({"data": sample.to_csv(), "family": args.family}), None)
    records = {}
    for g, fam in zip(groups, families):
        label = "pooled" if g is None else f"group{g}"
        try:
            fit = fit_arm(sample, fam, g, label, args.time_unit)
        except (InsufficientDataError, FitError) as exc:
            print(f"error: {label}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        rec = {"fit": fit.to_dict(), "follow_up": cure_report(sample, g)}
        if args.family_report:
            rec["family_aic"] = family_report(sample, g)
        records[label] = rec
    text = json.dumps({"meta": header, "arms": records}, indent=2, sort_keys=True, default=_json_default)
    if args.out:
        names = [f"fit_{k}.json" for k in records] + ["fit_report.json"]
        out = _prepare_out(args.out, args.force, names)
        (out / "fit_report.json").write_text(text)
        for k, rec in records.items():
            (out / f"fit_{k}.json").write_text(json.dumps(rec["fit"], indent=2, sort_keys=True,
                                                          default=_json_default))
        print(f"wrote {out / 'fit_report.json'}")
    else:
        print(text)
    return EXIT_OK


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


def cmd_test(args) -> int:
    sample = read_dataset(args.data)
    _require_two_groups(sample, args.data)
    methods = _parse_methods(args.methods) or [m.value for m in Method]
    design = design_from_config(args.design)[0] if args.design else None
    if args.optimal_weights == "oracle" and Method.OPTIMAL_LR.value in methods and design is None:
        raise UsageError("oracle OptimalLR weights come from the true hazards of a known design and "
                         "are refused for real data; supply --design for simulated data or use "
                         "--optimal-weights inverse_km")
    rng = np.random.default_rng(args.seed) if args.seed is not None else None
    meta = artifact_header(config_hash({"data": sample.to_csv(), "methods": methods}), args.seed)
    lines = []
    for m in methods:
        try:
            res = run_test(sample, m, design=design, family=args.family,
                           two_stage_config=TwoStageConfig(n_boot=args.n_boot), rng=rng,
                           optimal_weights=args.optimal_weights)
        except OracleRequired as exc:
            raise UsageError(str(exc)) from None
        rec = res.to_dict()
        rec["meta"] = meta
        lines.append(json.dumps(rec, sort_keys=True, default=_json_default))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _prepare_out(args.out, args.force, ["tests.jsonl"])
        (out / "tests.jsonl").write_text(text)
        print(f"wrote {out / 'tests.jsonl'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# report -----------------------------------------------------------------------------------

REPORT_COLUMNS = ("panel", "curve_id", "family", "pi0", "pi1", "odds_ratio", "effect", "effect_size",
                  "n_per_arm", "method", "followup_quantile", "tau", "rate", "se", "lower", "upper",
                  "n_run", "n_failed")


def panel_of(row: dict) -> str:
    """Layout group of a power curve, by where long-term survivors appear."""
    pi0, pi1 = float(row["pi0"]), float(row["pi1"])
    effect_size = float(row["effect_size"]) if row["effect_size"] else 1.0
    if pi0 == 0 and pi1 == 0:
        return "no_cure"
    if pi0 == 0 or pi1 == 0:
        return "one_arm_cure"
    if effect_size == 1.0:
        return "both_cure_same_uncured"
    return "both_cure_uncured_effect"


def read_summary_csv(path) -> tuple[list[dict], dict]:
    text = Path(path).read_text()
    header = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            header[k.strip()] = v.strip()
        else:
            body.append(line)
    return list(csv.DictReader(body)), header


def cmd_report(args) -> int:
    rows, headers = [], []
    for src in args.summaries:
        p = Path(src)
        p = p / "summary.csv" if p.is_dir() else p
        if not p.is_file():
            raise UsageError(f"{src}: no summary.csv found")
        r, h = read_summary_csv(p)
        rows += r
        headers.append(h)
    panels = set(args.panel.split(",")) if args.panel else None
    out_rows = []
    for r in rows:
        r = dict(r)
        r["panel"] = panel_of(r)
        if panels and r["panel"] not in panels:
            continue
        r["curve_id"] = r["scenario_id"].rsplit("_q=", 1)[0] + f"|{r['method']}"
        if r["rate"]:
            rate, se = float(r["rate"]), float(r["se"])
            r["lower"], r["upper"] = f"{max(rate - 1.96 * se, 0.0):.15g}", f"{min(rate + 1.96 * se, 1.0):.15g}"
        else:
            r["lower"] = r["upper"] = ""
        out_rows.append(r)
    order = {m.value: i for i, m in enumerate(Method)}
    out_rows.sort(key=lambda r: (r["panel"], r["family"], float(r["pi0"]), float(r["pi1"]),
                                 float(r["odds_ratio"]), r["effect"], float(r["effect_size"] or 1),
                                 int(r["n_per_arm"]), order.get(r["method"], 99),
                                 float(r["followup_quantile"])))
    buf = io.StringIO()
    header = artifact_header(config_hash(headers), ",".join(sorted({h.get("master_seed", "") for h in headers})))
    for k, v in header.items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in out_rows:
        w.writerow([r.get(c, "") for c in REPORT_COLUMNS])
    if args.out:
        out = _prepare_out(args.out, args.force, ["report.csv"])
        (out / "report.csv").write_text(buf.getvalue())
        print(f"wrote {out / 'report.csv'} ({len(out_rows)} rows)")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltsurv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--out", required=out_required, help="output directory (created if absent)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("simulate", help="run a scenario grid and write rejection-rate tables")
    p.add_argument("--config", required=True, help="YAML grid file")
    common(p, out_required=True)
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--replicates", type=int, help="override replicates per scenario")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--methods", help="comma-separated methods, e.g. LR,MCM-LRT")
    p.add_argument("--grid", choices=["reference", "paper", "custom"], help="override the grid mode")
    p.add_argument("--optimal-weights", choices=OPTIMAL_WEIGHTS, help="OptimalLR weight form")
    p.add_argument("--keep-p-values", action="store_true", help="store per-replicate p-values")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="A(tau) profile and monotonicity verdict for a design")
    p.add_argument("--design", "--config", dest="design", help="YAML design file")
    p.add_argument("--fits", nargs=2, metavar=("FIT0", "FIT1"), help="two fit JSON files")
    p.add_argument("--censoring", nargs=2, type=float, metavar=("START", "END"),
                   help="uniform censoring window")
    p.add_argument("--points", type=int, default=400, help="grid resolution")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fit", help="mixture cure fit per arm of a CSV dataset")
    p.add_argument("data", help="CSV with header time,event,group")
    p.add_argument("--family", default="weibull", help="family, or FAMILY0,FAMILY1 per group")
    p.add_argument("--group", default="both", choices=["both", "all", "0", "1"])
    p.add_argument("--time-unit", help="label stored with the fits")
    p.add_argument("--family-report", action="store_true", help="add AIC for every family")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="two-sample tests on a CSV dataset")
    p.add_argument("data", help="CSV with header time,event,group")
    p.add_argument("--methods", help="comma-separated methods (default: all seven)")
    p.add_argument("--family", default="weibull", help="latency family for MCM-LRT")
    p.add_argument("--optimal-weights", choices=OPTIMAL_WEIGHTS, default="inverse_km",
                   help="OptimalLR weights: 1/S(t-) from the data, or the true log hazard ratio")
    p.add_argument("--design", help="YAML design of simulated data (needed for oracle weights)")
    p.add_argument("--seed", type=int, help="bootstrap seed for TwoStage")
    p.add_argument("--n-boot", type=int, default=500)
    common(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("report", help="long-format power curves from simulation summaries")
    p.add_argument("summaries", nargs="+", help="summary.csv files or run directories")
    p.add_argument("--panel", help="comma-separated panels: no_cure, one_arm_cure, "
                                   "both_cure_same_uncured, both_cure_uncured_effect")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TimeUnitMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, then mapped to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
