"""Command-line pipeline: simulate, prepare, estimate, aggregate, twfe, match,
describe.

Each command reads a ``key = value`` config, writes delimited tables into the
output folder and records a ``<command>_manifest.json`` with the resolved
settings, input checksums, output checksums and library versions. Everything
that may differ between identical runs (timings, worker count, output
folder) sits under the manifest's ``runtime`` block.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 estimation
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .aggregate import AggregationScheme
from .config import RunConfig, load_config
from .did import TreatmentSpec, estimate_all_cells
from .errors import ConfigError, DataError, StaggerError
from .inference import BootstrapSpec, bootstrap_event_study
from .matching import MatchSpec, matched_event_estimates, run_matching
from .panel import (
    CohortTable,
    FilterSpec,
    assign_cohorts,
    death_proximity_table,
    load_panel,
    load_wage_index,
    sample_means,
    write_panel,
    write_table,
)
from .synth import DgpConfig, parse_effect, simulate_panel
from .twfe import TwfeSpec, compare_pretrends, estimate_dynamic_twfe

log = logging.getLogger("staggerdid")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Output folder, timers and manifest of one command."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, workers: int):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.inputs = {}
        self.outputs = []
        self.results = {}
        self.timings = {}
        self._t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def delim(self) -> str:
        return self.cfg["delimiter"]

    def track_input(self, key: str, path: Path) -> None:
        given = self.cfg.get(key)
        # files picked up from the output folder are recorded by name only
        label = str(given) if given is not None else path.name
        self.inputs[key] = {"path": label, "sha256": _sha256(path)}

    def write(self, name: str, frame: pd.DataFrame) -> None:
        write_table(frame, self.out / name, self.delim())
        self.outputs.append(name)

    def timed(self, label: str, fn, *args, **kwargs):
        t = time.perf_counter()
        value = fn(*args, **kwargs)
        self.timings[label] = round(time.perf_counter() - t, 6)
        return value

    def manifest(self) -> None:
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        config = self.cfg.as_text_dict()
        for key in ("workers", "out_dir"):
            config.pop(key, None)
        doc = {
            "command": self.command,
            "seed": self.cfg["seed"],
            "config": config,
            "inputs": self.inputs,
            "outputs": {name: _sha256(self.out / name) for name in self.outputs},
            "results": self.results,
            "versions": {
                "staggerdid": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "scipy": scipy.__version__,
            },
            "runtime": {
                "timings_seconds": self.timings,
                "workers": self.workers,
                "out_dir": str(self.out),
            },
        }
        path = self.out / f"{self.command}_manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Shared loaders
# --------------------------------------------------------------------------


def _filter_spec(cfg) -> FilterSpec:
    return FilterSpec(
        birth_year_range=(cfg["birth_year_min"], cfg["birth_year_max"]),
        death_window=cfg["death_window"],
        one_off=cfg["one_off"],
        small_gift_allowance=cfg["small_gift_allowance"],
        death_set_selector=cfg["death_set"],
        exclude_ever_self_employed=cfg["exclude_ever_self_employed"],
    )


def _treatment_spec(cfg) -> TreatmentSpec:
    return TreatmentSpec(
        delta=cfg["delta"], ref_offset=cfg["ref_offset"],
        control_strategy=cfg["control_strategy"], nearest_n=cfg["nearest_n"],
        category=cfg["category"], covariates=cfg["covariates"])


def _input_path(run: Run, key: str, default_name: str = None) -> Path:
    path = run.cfg.path(key)
    if path is None and default_name is not None:
        path = run.out / default_name
    if path is None:
        raise ConfigError(f"missing required key '{key}'")
    if not path.exists():
        raise DataError(f"input file for '{key}' not found: {path}")
    run.track_input(key, path)
    return path


def _load_panel(run: Run):
    panel_path = _input_path(run, "panel", "panel.csv")
    deaths = run.cfg.path("deaths")
    if deaths is not None:
        deaths = _input_path(run, "deaths")
    return run.timed("load_panel", load_panel, panel_path, run.cfg["schema"],
                     deaths, run.delim())


def _load_index(run: Run):
    return load_wage_index(_input_path(run, "wage_index", "wage_index.csv"),
                           run.delim())


def _load_cohorts(run: Run, panel) -> CohortTable:
    """The cohort table artifact written by ``prepare``."""
    path = _input_path(run, "cohorts", "cohorts.csv")
    table = CohortTable.from_csv(path, run.delim())
    known = set(panel.persons.tolist())
    listed = set(table.frame["person"].tolist())
    if known != listed:
        raise DataError("cohort table and panel list different persons; "
                        "rerun prepare on this panel")
    return table


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(run: Run) -> None:
    cfg = run.cfg
    if cfg["tau_table"] is not None:
        path = _input_path(run, "tau_table")
        fr = pd.read_csv(path, sep=run.delim())
        for col in ("g", "s", "tau"):
            if col not in fr.columns:
                raise DataError(f"tau table lacks column '{col}'")
        tau = {(int(g), int(s)): float(v) for g, s, v in
               zip(fr["g"], fr["s"], fr["tau"])}
    else:
        tau = parse_effect(cfg.require("tau"))
    cohorts = {g: cfg["sim_cohort_size"]
               for g in range(cfg["sim_cohort_min"], cfg["sim_cohort_max"] + 1)}
    dgp = DgpConfig(
        years=(cfg["sim_first_year"], cfg["sim_last_year"]), cohorts=cohorts,
        never_treated=cfg["sim_never_treated"], tau=tau,
        anticipation=cfg["sim_anticipation"],
        birth_years=(cfg["sim_birth_min"], cfg["sim_birth_max"]),
        person_sd=cfg["sim_person_sd"], noise_sd=cfg["sim_noise_sd"],
        year_trend=cfg["sim_year_trend"],
        selection_sex=cfg["sim_selection_sex"],
        selection_education=cfg["sim_selection_education"],
        category=cfg["sim_category"], death_offset=cfg["sim_death_offset"],
        never_treated_death_share=cfg["sim_never_treated_death_share"],
        business_share=cfg["sim_business_share"], seed=cfg["seed"])
    sim = run.timed("simulate", simulate_panel, dgp)
    write_panel(sim.panel, run.out / "panel.csv", run.delim())
    run.outputs.append("panel.csv")
    run.write("wage_index.csv", sim.wage_index.frame())
    run.write("truth.csv", sim.truth_frame())
    run.results = {"persons": sim.panel.n_persons,
                   "years": [sim.panel.first_year, sim.panel.last_year]}


def cmd_prepare(run: Run) -> None:
    panel = _load_panel(run)
    index = _load_index(run)
    table = run.timed("assign_cohorts", assign_cohorts, panel, index,
                      _filter_spec(run.cfg))
    table.to_csv(run.out / "cohorts.csv", run.delim())
    run.outputs.append("cohorts.csv")
    report = table.exclusion_report()
    run.write("exclusion_report.csv", report)
    run.results = {"included": int(table.frame["included"].sum()),
                   "persons": len(table)}


def cmd_estimate(run: Run) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    cohorts = _load_cohorts(run, panel)
    spec = _treatment_spec(cfg)
    grid = run.timed("estimate_all_cells", estimate_all_cells, panel, cohorts,
                     spec, cfg["outcome"], run.workers)
    g_lo, _ = grid.cohort_range
    display = (cfg["display_year_min"] if cfg["display_year_min"] is not None else g_lo,
               cfg["display_year_max"] if cfg["display_year_max"] is not None
               else panel.last_year)
    run.write("heatmap.csv", grid.to_frame(display))
    run.write("heatmap_masked.csv", grid.to_frame(display, alpha=cfg["mask_alpha"]))
    inest = pd.DataFrame(
        [(c.cell.g, c.cell.t, c.cell.s, c.reason) for c in grid.inestimable],
        columns=["g", "t", "s", "reason"])
    run.write("inestimable.csv", inest)
    n_g = grid.cohort_range[1] - grid.cohort_range[0] + 1
    run.results = {"cohort_range": list(grid.cohort_range),
                   "display_years": list(display),
                   "grid_shape": [n_g, display[1] - display[0] + 1],
                   "estimable_cells": len(grid.estimates),
                   "inestimable_cells": len(grid.inestimable)}


def _scheme(cfg, spec) -> AggregationScheme:
    return AggregationScheme(
        kind=cfg["scheme"], a=cfg["balanced_a"], b=cfg["balanced_b"],
        display_range=(cfg["display_s_min"], cfg["display_s_max"]),
        reference=spec.reference)


def cmd_aggregate(run: Run) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    cohorts = _load_cohorts(run, panel)
    spec = _treatment_spec(cfg)
    scheme = _scheme(cfg, spec)
    boot = BootstrapSpec(B=cfg["replicates"], level=cfg["level"], seed=cfg["seed"])
    grid = run.timed("estimate_all_cells", estimate_all_cells, panel, cohorts,
                     spec, cfg["outcome"], run.workers)
    curve = run.timed("bootstrap", bootstrap_event_study, panel, cohorts, spec,
                      scheme, boot, cfg["outcome"], run.workers, grid,
                      cfg["dump_draws"])
    run.write("event_plot.csv", curve.to_frame(method="staggered"))
    if cfg["dump_draws"]:
        draws = pd.DataFrame(curve.draws, columns=[f"s={s}" for s in scheme.horizon()])
        draws.insert(0, "replicate", np.arange(len(draws)))
        run.write("bootstrap_draws.csv", draws)
    run.results = {
        "scheme": scheme.tag,
        "band": "pointwise percentile",
        "cohort_sets": {str(s): list(c) for s, c in curve.cohort_sets.items()},
        "unstable_s": curve.table.loc[curve.table["unstable"], "s"].astype(int).tolist(),
    }
    if scheme.kind == "balanced":
        run.results["balanced_cohorts"] = curve.fixed_cohorts()


def cmd_twfe(run: Run) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    cohorts = _load_cohorts(run, panel)
    s_range = None
    if cfg["twfe_s_min"] is not None or cfg["twfe_s_max"] is not None:
        if cfg["twfe_s_min"] is None or cfg["twfe_s_max"] is None:
            raise ConfigError("set both twfe_s_min and twfe_s_max")
        s_range = (cfg["twfe_s_min"], cfg["twfe_s_max"])
    spec = TwfeSpec(omitted=cfg["twfe_omitted"], s_range=s_range,
                    outcome=cfg["outcome"], covariates=cfg["covariates"],
                    category=cfg["category"],
                    include_never_treated=cfg["twfe_include_never_treated"])
    res = run.timed("twfe", estimate_dynamic_twfe, panel, cohorts, spec)
    run.write("twfe_event_plot.csv", res.to_frame())
    run.results = {"dropped_columns": res.dropped_columns,
                   "persons": res.n_persons}
    staggered = run.cfg.path("staggered_curve")
    if staggered is None and (run.out / "event_plot.csv").exists():
        staggered = run.out / "event_plot.csv"
    if staggered is not None:
        from .aggregate import EventStudyCurve

        path = staggered if staggered.exists() else None
        if path is None:
            raise DataError(f"staggered curve not found: {staggered}")
        run.inputs["staggered_curve"] = {"path": path.name, "sha256": _sha256(path)}
        fr = pd.read_csv(path, sep=run.delim())
        fr["supported"] = fr["supported"].astype(bool)
        curve = EventStudyCurve(fr, AggregationScheme(
            reference=-cfg["ref_offset"],
            display_range=(int(fr["s"].min()), int(fr["s"].max()))))
        table, summary = compare_pretrends(res, curve)
        run.write("pretrend_comparison.csv", table)
        run.results["pretrends"] = summary


def cmd_match(run: Run) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    cohorts = _load_cohorts(run, panel)
    spec = MatchSpec(
        cohort_window=(cfg["match_cohort_min"], cfg["match_cohort_max"]),
        clean_before=cfg["match_clean_before"], clean_after=cfg["match_clean_after"],
        match_offset=cfg["match_offset"], covariates=cfg["match_covariates"],
        pool=cfg["match_pool"],
        event_window=(cfg["match_event_min"], cfg["match_event_max"]),
        caliper=cfg["match_caliper"], replacement=cfg["match_replacement"],
        outcome=cfg["outcome"], transform=cfg["match_transform"],
        category=cfg["category"], death_set=cfg["death_set"])
    res = run.timed("match", run_matching, panel, cohorts, spec)
    est = matched_event_estimates(panel, res.pairs, spec.outcome, spec.transform,
                                  spec.event_window)
    run.write("match_pairs.csv", res.pairs)
    run.write("match_estimates.csv", est)
    run.write("match_balance.csv", res.balance)
    rows = []
    for g, fit in sorted(res.fits.items()):
        for name, b in zip(("intercept",) + fit.names, fit.coefficients):
            rows.append((g, name, b, int(fit.converged), fit.iterations, fit.loglik))
    run.write("propensity.csv", pd.DataFrame(rows, columns=[
        "cohort", "term", "coefficient", "converged", "iterations", "loglik"]))
    run.results = {"pairs": len(res.pairs), "dropped": res.n_dropped,
                   "unique_controls": int(res.pairs["control"].nunique())}


def cmd_describe(run: Run) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    index = _load_index(run)
    cohorts = _load_cohorts(run, panel)
    prox = run.timed("death_proximity", death_proximity_table, panel, index,
                     cfg["describe_deltas"], cfg["death_set"])
    means = run.timed("sample_means", sample_means, panel, cohorts,
                      cfg["describe_grouping"], cfg["describe_at"])
    run.write("death_proximity.csv", prox)
    run.write("sample_means.csv", means)
    run.results = {"recipients": int(prox.loc[prox["category"] == "All",
                                               "n_recipients"].iloc[0])
                   if len(prox) else 0}


COMMANDS = {
    "simulate": (cmd_simulate, "draw a synthetic panel with known effects"),
    "prepare": (cmd_prepare, "apply sample filters and build the cohort table"),
    "estimate": (cmd_estimate, "estimate every cohort-year cell (heatmap)"),
    "aggregate": (cmd_aggregate, "event-time curve with bootstrap bands"),
    "twfe": (cmd_twfe, "dynamic two-way fixed-effects comparator"),
    "match": (cmd_match, "nearest-one propensity score matching baseline"),
    "describe": (cmd_describe, "death proximity shares and sample means"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="key = value configuration file")
    common.add_argument("--out", metavar="DIR",
                        help="output folder (overrides out_dir)")
    common.add_argument("--workers", type=int, metavar="N",
                        help="parallel workers (overrides workers; 0 = all CPUs)")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(
        prog="staggerdid",
        description="Staggered difference-in-differences with not-yet-treated "
                    "controls.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else cfg.path("out_dir")
        workers = args.workers if args.workers is not None else cfg["workers"]
        if workers < 0:
            raise ConfigError("workers must be >= 0")
        if workers == 0:
            workers = os.cpu_count() or 1
        run = Run(args.command, cfg, out, workers)
        COMMANDS[args.command][0](run)
        run.manifest()
    except StaggerError as exc:
        print(f"staggerdid {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return exc.exit_code
    except OSError as exc:
        print(f"staggerdid {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
