"""Command-line pipeline: ``rainstorm <subcommand> [options]``.

Subcommands and the artifacts they write into ``--out-dir``:

    synth      field.pgrd, truth.json
    identify   segments.jsonl
    track      events.jsonl
    metrics    metrics.csv, trajectories.csv
    factorize  factors.csv
    maps       <map>.pgrd and <map>.csv per map (ratio_<map>.* with a future run)
    compare    comparison.csv
    simulate   simulated.pgrd, simulation_log.jsonl
    evaluate   evaluation.csv, evaluation_wide.csv

Every run also writes ``manifest_<subcommand>.json`` with all parameters
(defaults included), input and output SHA-256 digests and the package
version. Parameters come from a flat ``key = value`` file given with
``--config``; command-line flags override it.

Exit status is 0 on success, 1 for usage errors and 2 for data errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate_simulation
from .gridio import (DEFAULT_CUTOFF, GridGeometry, PGridFormatError, apply_cutoff, load_field,
                     load_mask, save_field)
from .ident import IdentParams, Region, Segment, identify_field
from .metrics import (EmptySummaryError, bootstrap_ci, compare_factors, compute_all, factorize,
                      metrics_csv, region_weights, trajectories_csv, trim_negligible)
from .sim import SimParams, gridcellwise_simulate, simulate_future, write_log
from .spatial import KernelSpec, cellwise_map, initiation_density, ratio_map, weighted_metric_map
from .synthetic import generate, render, truth_factors
from .tracking import TrackInputError, TrackParams, read_events, track, write_events

logger = logging.getLogger("rainstorm")

SUBCOMMANDS = ("synth", "identify", "track", "metrics", "factorize", "maps", "compare",
               "simulate", "evaluate")


def _optional_float(text):
    return None if text in ("", "none", "None") else float(text)


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help)
PARAMETERS = {
    # inputs
    "field": (str, "field.pgrd", "precipitation field (PGRID)"),
    "segments": (str, "segments.jsonl", "segments file from identify"),
    "events": (str, "events.jsonl", "events file from track"),
    "baseline": (str, "baseline.pgrd", "baseline model field"),
    "future": (str, "future.pgrd", "future model field"),
    "baseline_events": (str, "", "baseline events (compare); tracked on the fly if empty"),
    "future_events": (str, "", "future events (compare, maps); tracked on the fly if empty"),
    "obs": (str, "obs.pgrd", "observed field to transform (simulate)"),
    "target": (str, "future.pgrd", "field the candidates are evaluated against"),
    "candidates": (str, "", "evaluate: comma-separated name=path list; the last is the reference"),
    "regions": (str, "", "comma-separated name=mask.pgrd list; empty means the whole domain"),
    "region_mask": (str, "", "factorize: mask restricting events to a region"),
    "region_name": (str, "all", "label written next to factors"),
    "region_mode": (str, "initiation", "initiation | fractional"),
    "season": (str, "all", "label written next to factors"),
    # preprocessing
    "cutoff_mm_per_hour": (float, DEFAULT_CUTOFF, "values below this intensity become 0"),
    # identification
    "wet_threshold_mm_per_step": (float, 0.1, "a cell is wet above this depth"),
    "connectivity": (int, 8, "4 or 8"),
    "dilation_radius_km": (float, 24.0, "almost-connected labeling radius"),
    "large_region_min_area_km2": (float, 1000.0, "smallest large region"),
    "small_attach_max_km": (float, 48.0, "attachment distance for small regions"),
    # tracking
    "min_overlap_fraction": (float, 0.3, "overlap over the smaller footprint"),
    "max_centroid_jump_km": (float, 120.0, "largest centroid move per step"),
    "max_turn_deg": (float, 120.0, "largest change of direction"),
    "turn_min_move_km": (float, 12.0, "moves shorter than this skip the turn test"),
    # metrics and maps
    "trim_fraction": (float, 0.001, "share of total amount dropped from the smallest events"),
    "bandwidth_km": (float, 200.0, "Gaussian kernel bandwidth"),
    "attribution": (str, "initiation", "initiation | lifetime"),
    # comparison
    "delta_T_K": (_optional_float, None, "warming used to express changes per kelvin"),
    "n_boot": (int, 2000, "bootstrap replicates; 0 disables intervals"),
    "ci_level": (float, 0.95, "bootstrap interval level"),
    # simulation
    "method": (str, "storm", "storm | gridcell"),
    "gap_km": (float, 120.0, "separation that splits a storm into parts"),
    "n_quantiles": (int, 100, "quantile levels per cell"),
    # evaluation
    "epsilon": (float, 1e-6, "pseudo-count added to every histogram bin"),
    # synthetic fields
    "nx": (int, 96, "synth: grid width"),
    "ny": (int, 96, "synth: grid height"),
    "nt": (int, 40, "synth: timesteps"),
    "dx_km": (float, 12.0, "synth: cell width"),
    "dy_km": (float, 12.0, "synth: cell height"),
    "dt_hours": (float, 3.0, "synth: timestep length"),
    "lat0": (float, 35.0, "synth: latitude of row 0"),
    "lon0": (float, -100.0, "synth: longitude of column 0"),
    "n_storms": (int, 30, "synth: storms to place"),
    "size_scale": (float, 1.0, "synth: linear storm size factor"),
    "intensity_scale": (float, 1.0, "synth: storm intensity factor"),
    "text": (_bool, False, "synth: write the text PGRID variant"),
    # run control
    "seed": (int, 0, "root random seed"),
    "threads": (int, 1, "worker threads"),
    "out_dir": (str, ".", "directory for artifacts"),
}

# not echoed into manifests: they do not change any artifact
_RUN_ONLY = ("threads", "out_dir")

# input key -> subcommand that produces the default file
_PRODUCERS = {"field": "synth", "segments": "identify", "events": "track",
              "baseline_events": "track", "future_events": "track"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- config

def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(config: dict, overrides: dict) -> dict:
    """Defaults, then config values, then command-line overrides."""
    unknown = sorted(set(config) - set(PARAMETERS))
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: "
                         + ", ".join(sorted(PARAMETERS)))
    params = {k: spec[1] for k, spec in PARAMETERS.items()}
    for source in (config, overrides):
        for key, value in source.items():
            if value is None and source is overrides:
                continue
            conv = PARAMETERS[key][0]
            try:
                params[key] = conv(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    if params["threads"] < 1:
        raise UsageError("threads must be >= 1")
    return params


def _ident(p):
    return IdentParams(wet_threshold_mm_per_step=p["wet_threshold_mm_per_step"],
                       connectivity=p["connectivity"],
                       dilation_radius_km=p["dilation_radius_km"],
                       large_region_min_area_km2=p["large_region_min_area_km2"],
                       small_attach_max_km=p["small_attach_max_km"])


def _track(p):
    return TrackParams(min_overlap_fraction=p["min_overlap_fraction"],
                       max_centroid_jump_km=p["max_centroid_jump_km"],
                       max_turn_deg=p["max_turn_deg"],
                       turn_min_move_km=p["turn_min_move_km"])


def _kernel(p):
    return KernelSpec(bandwidth_km=p["bandwidth_km"])


# ---------------------------------------------------------------- run state

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Input resolution, output bookkeeping and the manifest of one invocation."""

    def __init__(self, subcommand, params):
        self.subcommand = subcommand
        self.p = params
        self.out_dir = Path(params["out_dir"])
        self.inputs = {}
        self.outputs = {}

    def input(self, key, value=None) -> Path:
        name = self.p[key] if value is None else value
        path = Path(name)
        if not path.is_absolute() and not path.exists():
            path = self.out_dir / name
        if not path.exists():
            hint = f"; run `rainstorm {_PRODUCERS[key]}` first" if key in _PRODUCERS else ""
            raise DataError(f"missing input {key} = {name}{hint}")
        self.inputs[f"{key}:{path.name}" if value is not None else key] = path
        return path

    def field(self, key, value=None):
        fld = load_field(self.input(key, value))
        return apply_cutoff(fld, self.p["cutoff_mm_per_hour"])

    def output(self, name) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        self.outputs[name] = path
        return path

    def write_text(self, name, text):
        self.output(name).write_text(text, encoding="utf-8")

    def manifest(self):
        params = {k: v for k, v in self.p.items() if k not in _RUN_ONLY}
        doc = {
            "subcommand": self.subcommand,
            "version": __version__,
            "parameters": params,
            "inputs": {k: {"file": p.name, "sha256": _sha256(p)}
                       for k, p in sorted(self.inputs.items())},
            "outputs": {k: _sha256(p) for k, p in sorted(self.outputs.items())},
        }
        path = self.out_dir / f"manifest_{self.subcommand}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n",
                        encoding="utf-8")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(f"not serializable: {type(v).__name__}")


# ---------------------------------------------------------------- segments file

def write_segments(segments_by_t, geometry: GridGeometry, path) -> None:
    """Geometry header line, then one JSON object per segment."""
    lines = [json.dumps({"geometry": geometry.to_header(), "nt": len(segments_by_t)},
                        sort_keys=True)]
    for t, segs in enumerate(segments_by_t):
        for s in segs:
            lines.append(json.dumps({"t": t, "id": s.id,
                                     "region_sizes": [len(r) for r in s.regions],
                                     "cells": s.cells.tolist(),
                                     "values": [float(v) for v in s.values]},
                                    separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_segments(path):
    """Inverse of :func:`write_segments`: (segments_by_t, geometry)."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty segments file")
    try:
        head = json.loads(lines[0])
        geometry = GridGeometry(**head["geometry"])
        out = [[] for _ in range(int(head["nt"]))]
        for lineno, line in enumerate(lines[1:], start=2):
            obj = json.loads(line)
            cells = np.asarray(obj["cells"], dtype=np.int64).reshape(-1, 2)
            values = np.asarray(obj["values"], dtype=np.float64)
            sizes = obj.get("region_sizes") or [len(cells)]
            bounds = np.cumsum([0, *sizes])
            regions = [Region(cells[a:b], values[a:b]) for a, b in zip(bounds, bounds[1:])]
            out[int(obj["t"])].append(Segment(regions, t=int(obj["t"]), id=int(obj["id"])))
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise DataError(f"{path}: malformed segments file: {exc}") from None
    return out, geometry


# ---------------------------------------------------------------- subcommands

def cmd_synth(run):
    p = run.p
    g = GridGeometry(nx=p["nx"], ny=p["ny"], dx_km=p["dx_km"], dy_km=p["dy_km"],
                     lat0=p["lat0"], lon0=p["lon0"], dt_hours=p["dt_hours"])
    scenario = generate(g, p["nt"], p["n_storms"], seed=p["seed"])
    fld, labels = render(scenario, size_scale=p["size_scale"],
                         intensity_scale=p["intensity_scale"])
    save_field(fld, run.output("field.pgrd"), text=p["text"])
    truth = scenario.to_dict()
    truth["factors"] = truth_factors(fld, labels)
    run.write_text("truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    logger.info("synth: %d storms on a %dx%dx%d grid", len(scenario.storms), p["nt"], g.ny,
                g.nx)


def cmd_identify(run):
    fld = run.field("field")
    segs = identify_field(fld, _ident(run.p), run.p["threads"])
    write_segments(segs, fld.geometry, run.output("segments.jsonl"))
    logger.info("identify: %d segments over %d timesteps", sum(map(len, segs)), fld.nt)


def cmd_track(run):
    segs, g = read_segments(run.input("segments"))
    events = track(segs, g, _track(run.p))
    write_events(events, run.output("events.jsonl"))
    logger.info("track: %d events", len(events))


def _events_and_metrics(run, events_key, field_key, fld=None):
    """Events from a file, or tracked from the field when the key is empty."""
    fld = run.field(field_key) if fld is None else fld
    if not run.p[events_key]:
        segs = identify_field(fld, _ident(run.p), run.p["threads"])
        events = track(segs, fld.geometry, _track(run.p))
    else:
        events = read_events(run.input(events_key))
    metrics = compute_all(events, fld.geometry, run.p["threads"])
    return fld, events, metrics


def cmd_metrics(run):
    fld, _, metrics = _events_and_metrics(run, "events", "field")
    run.write_text("metrics.csv", metrics_csv(metrics))
    run.write_text("trajectories.csv", trajectories_csv(metrics))


def _trimmed(events, metrics, fraction):
    kept = trim_negligible(metrics, fraction)
    ids = {m.event_id for m in kept}
    return [e for e in events if e.id in ids], kept


def cmd_factorize(run):
    p = run.p
    fld, events, metrics = _events_and_metrics(run, "events", "field")
    events, metrics = _trimmed(events, metrics, p["trim_fraction"])
    weights = None
    if p["region_mask"]:
        mask = load_mask(run.input("region_mask"))
        weights = region_weights(events, metrics, fld.geometry, mask, p["region_mode"])
    summary = factorize(metrics, weights, region=p["region_name"], season=p["season"])
    run.write_text("factors.csv", summary.to_csv())


def _maps_for(fld, metrics, p):
    kernel = _kernel(p)
    mask = fld.domain_mask
    g = fld.geometry
    out = {"seasonal_mean": cellwise_map(fld, "seasonal_mean"),
           "intensity": cellwise_map(fld, "mean_intensity"),
           "initiation_density": initiation_density(metrics, g, mask, kernel, p["attribution"])}
    if metrics:
        for metric in ("size", "duration"):
            m = weighted_metric_map(metrics, metric, g, mask, kernel, p["attribution"],
                                    p["threads"])
            out[m.metric] = m
    return out


def _write_map(run, name, m):
    m.save(run.output(f"{name}.pgrd"))
    run.write_text(f"{name}.csv", m.to_csv())


def cmd_maps(run):
    p = run.p
    fld, _, metrics = _events_and_metrics(run, "events", "field")
    metrics = trim_negligible(metrics, p["trim_fraction"])
    maps = _maps_for(fld, metrics, p)
    for name, m in maps.items():
        _write_map(run, name, m)
    if p["future_events"]:
        ffld, _, fmetrics = _events_and_metrics(run, "future_events", "future")
        fmaps = _maps_for(ffld, trim_negligible(fmetrics, p["trim_fraction"]), p)
        for name, m in maps.items():
            if name in fmaps:
                _write_map(run, f"ratio_{name}", ratio_map(m, fmaps[name]))


def cmd_compare(run):
    p = run.p
    _, _, ma = _events_and_metrics(run, "baseline_events", "baseline")
    _, _, mb = _events_and_metrics(run, "future_events", "future")
    ma = trim_negligible(ma, p["trim_fraction"])
    mb = trim_negligible(mb, p["trim_fraction"])
    a, b = factorize(ma), factorize(mb)
    ci = None
    if p["n_boot"] > 0:
        ci = bootstrap_ci(ma, mb, p["n_boot"], p["ci_level"], p["seed"], p["threads"])
    run.write_text("comparison.csv", compare_factors(a, b, p["delta_T_K"], ci).to_csv())


def cmd_simulate(run):
    p = run.p
    obs, base, fut = run.field("obs"), run.field("baseline"), run.field("future")
    log = []
    if p["method"] == "storm":
        params = SimParams(ident=_ident(p), track=_track(p), kernel=_kernel(p),
                           trim_fraction=p["trim_fraction"], gap_km=p["gap_km"],
                           n_quantiles=p["n_quantiles"], attribution=p["attribution"],
                           seed=p["seed"])
        out = simulate_future(obs, base, fut, params, p["threads"], log)
    elif p["method"] == "gridcell":
        out = gridcellwise_simulate(obs, base, fut, p["n_quantiles"], p["seed"], p["threads"],
                                    log)
    else:
        raise UsageError(f"method must be 'storm' or 'gridcell', not {p['method']!r}")
    save_field(out, run.output("simulated.pgrd"))
    write_log(log, run.output("simulation_log.jsonl"))
    logger.info("simulate: %d log entries", len(log))


def _pairs(text, what):
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise UsageError(f"{what} entries must look like name=path, got {item!r}")
        name, path = (s.strip() for s in item.split("=", 1))
        out[name] = path
    return out


def cmd_evaluate(run):
    p = run.p
    target = run.field("target")
    cands = _pairs(p["candidates"], "candidates")
    if not cands:
        raise UsageError("evaluate needs candidates = name=path,...")
    fields = {name: run.field("candidates", path) for name, path in cands.items()}
    regions = {name: load_mask(run.input("regions", path))
               for name, path in _pairs(p["regions"], "regions").items()}
    if not regions:
        regions = {"all": target.domain_mask}
    table = evaluate_simulation(target, fields, regions, p["epsilon"])
    run.write_text("evaluation.csv", table.long_csv())
    run.write_text("evaluation_wide.csv", table.wide_csv())


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value parameter file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, (_, default, text) in PARAMETERS.items():
        flag = "--" + key.replace("_", "-")
        common.add_argument(flag, dest=key, default=None, metavar=key.upper(),
                            help=f"{text} (default: {default!r})")
    parser = _Parser(prog="rainstorm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        doc = (COMMANDS[name].__doc__ or "").strip()
        sub.add_parser(name, parents=[common], help=doc or None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = read_config(args.config) if args.config else {}
        overrides = {k: getattr(args, k) for k in PARAMETERS}
        run = Run(args.subcommand, resolve(config, overrides))
        COMMANDS[args.subcommand](run)
        run.manifest()
    except UsageError as exc:
        print(f"rainstorm: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help and --version
        return int(exc.code or 0)
    except (DataError, PGridFormatError, TrackInputError, EmptySummaryError) as exc:
        print(f"rainstorm: data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ZeroDivisionError) as exc:
        print(f"rainstorm: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
