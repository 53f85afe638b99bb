"""Scenario files, fitted-aggregate files and run-artifact readers/writers.

Input side: a YAML system description with hourly profiles in an adjacent
CSV, plus a JSON file of fitted aggregates. Output side: every artifact
starts with a schema line naming the subcommand that produced it, and all
numeric formatting is deterministic, so two runs of the same configuration
produce byte-identical files (the manifest's wall-clock entry excepted).

CSV schema line: ``# vppfreq schema=1 subcommand=<name> kind=<table>``.
JSON artifacts carry the same three fields at the top level.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .aggregation import AggregateVpp, FitReport
from .models import (
    Boundaries,
    EssUnit,
    EvCluster,
    FlexibleLoad,
    GfmEquipment,
    Line,
    RegUnit,
    SgUnit,
    SmallSg,
    SystemScenario,
    TransferFunction,
    VppPortfolio,
    VppStation,
)

__all__ = [
    "SCHEMA_VERSION",
    "ScenarioFormatError",
    "ReportInputError",
    "load_scenario",
    "save_scenario",
    "load_aggregates",
    "save_aggregates",
    "sha256_file",
    "package_versions",
    "write_manifest",
    "write_trajectory",
    "write_metrics",
    "write_clearing",
    "write_prices",
    "write_settlement",
    "write_summary",
    "write_audit",
    "read_table",
    "write_report_tables",
]

SCHEMA_VERSION = 1

_UNIT_TYPES = {
    "small_sg": SmallSg,
    "gfm": GfmEquipment,
    "ev": EvCluster,
    "flex_load": FlexibleLoad,
}


class ScenarioFormatError(ValueError):
    """An input file exists but does not follow the documented schema."""


class ReportInputError(ValueError):
    """Run artifacts are inconsistent with each other (e.g. period sets differ)."""


def _fmt(x):
    """Deterministic cell formatting for output tables."""
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def _unit_to_dict(unit):
    doc = {"kind": unit.kind}
    for f in dataclasses.fields(type(unit)):
        doc[f.name] = float(getattr(unit, f.name))
    return doc


def _unit_from_dict(doc):
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind not in _UNIT_TYPES:
        raise ScenarioFormatError(f"unknown DER kind {kind!r}")
    try:
        return _UNIT_TYPES[kind](**doc)
    except TypeError as exc:
        raise ScenarioFormatError(f"bad {kind} unit entry: {exc}") from None


def _row_to_dict(obj, int_fields=()):
    doc = {}
    for f in dataclasses.fields(type(obj)):
        v = getattr(obj, f.name)
        doc[f.name] = int(v) if f.name in int_fields else (float(v) if isinstance(v, (int, float, np.floating)) else v)
    return doc


# ---------------------------------------------------------------------------
# Scenario files


def save_scenario(scenario, path, profiles_name="profiles.csv"):
    """Write the YAML description and the adjacent hourly-profile CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "system-scenario",
        "name": scenario.name,
        "f0": float(scenario.f0),
        "dt_hours": float(scenario.dt_hours),
        "n_buses": int(scenario.n_buses),
        "ref_bus": int(scenario.ref_bus),
        "profiles": profiles_name,
        "tau1": float(scenario.tau1),
        "tau2": float(scenario.tau2),
        "boundaries": {
            "rocof_max": float(scenario.boundaries.rocof_max),
            "nadir_max": float(scenario.boundaries.nadir_max),
            "qss_ref": float(scenario.boundaries.qss_ref),
        },
        "disturbance": {
            "fraction": float(scenario.disturbance_fraction),
            "mean": float(scenario.disturbance_mean),
            "std": float(scenario.disturbance_std),
        },
        "surface": {
            "dd_ref": float(scenario.surface_dd_ref),
            "domain": {k: [float(v[0]), float(v[1])]
                       for k, v in scenario.surface_domain.items()},
        },
        # susceptance is MW per radian of angle difference (DC model)
        "lines": [[int(ln.from_bus), int(ln.to_bus), float(ln.susceptance)]
                  for ln in scenario.lines],
        "sgs": [_row_to_dict(g, int_fields=("bus", "min_up", "min_down")) for g in scenario.sgs],
        "regs": [_row_to_dict(r, int_fields=("bus",)) for r in scenario.regs],
        "esss": [_row_to_dict(e, int_fields=("bus",)) for e in scenario.esss],
        "vpps": [
            {
                "bus": int(v.bus),
                "cost_energy_sg": float(v.cost_energy_sg),
                "cost_energy_rest": float(v.cost_energy_rest),
                "cost_inertia": float(v.cost_inertia),
                "cost_droop": float(v.cost_droop),
                "portfolio": {
                    "name": v.portfolio.name,
                    "s_sys": float(v.portfolio.s_sys),
                    "rated_capacity": float(v.portfolio.rated_capacity),
                    "p_en_min": float(v.portfolio.p_en_min),
                    "p_en_max": float(v.portfolio.p_en_max),
                    "p_in_min": float(v.portfolio.p_in_min),
                    "p_in_max": float(v.portfolio.p_in_max),
                    "p_df_min": float(v.portfolio.p_df_min),
                    "p_df_max": float(v.portfolio.p_df_max),
                    "ramp_small_sg": float(v.portfolio.ramp_small_sg),
                    "units": [_unit_to_dict(u) for u in v.portfolio.units],
                },
            }
            for v in scenario.vpps
        ],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)

    profile_path = path.parent / profiles_name
    header = (["period"]
              + [f"load[{n}]" for n in range(scenario.n_buses)]
              + [f"avail[{r.name}]" for r in scenario.regs])
    with open(profile_path, "w", newline="") as fh:
        fh.write(f"# vppfreq schema={SCHEMA_VERSION} subcommand=none kind=profiles\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(scenario.n_periods):
            row = [t] + [repr(float(scenario.load[n, t])) for n in range(scenario.n_buses)]
            row += [repr(float(scenario.reg_avail[i, t])) for i in range(len(scenario.regs))]
            w.writerow(row)
    return path, profile_path


def load_scenario(path):
    """Read a system description; raises ScenarioFormatError on schema problems."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ScenarioFormatError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict) or doc.get("kind") != "system-scenario":
        raise ScenarioFormatError(f"{path}: not a system-scenario file")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioFormatError(
            f"{path}: schema version {doc.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    try:
        n_buses = int(doc["n_buses"])
        regs = [RegUnit(**r) for r in doc.get("regs", [])]
        load, avail = _load_profiles(path.parent / doc["profiles"], n_buses,
                                     [r.name for r in regs])
        vpps = []
        for v in doc.get("vpps", []):
            pd = dict(v["portfolio"])
            units = [_unit_from_dict(u) for u in pd.pop("units")]
            vpps.append(VppStation(
                portfolio=VppPortfolio(units=units, **pd),
                bus=int(v["bus"]),
                cost_energy_sg=float(v["cost_energy_sg"]),
                cost_energy_rest=float(v["cost_energy_rest"]),
                cost_inertia=float(v["cost_inertia"]),
                cost_droop=float(v["cost_droop"]),
            ))
        dist = doc.get("disturbance", {})
        surface = doc.get("surface", {})
        return SystemScenario(
            name=str(doc["name"]),
            f0=float(doc["f0"]),
            dt_hours=float(doc["dt_hours"]),
            n_buses=n_buses,
            ref_bus=int(doc["ref_bus"]),
            lines=[Line(int(a), int(b), float(s)) for a, b, s in doc.get("lines", [])],
            load=load,
            sgs=[SgUnit(**g) for g in doc.get("sgs", [])],
            regs=regs,
            reg_avail=avail,
            esss=[EssUnit(**e) for e in doc.get("esss", [])],
            vpps=vpps,
            tau1=float(doc["tau1"]),
            tau2=float(doc["tau2"]),
            boundaries=Boundaries(**{k: float(v) for k, v in doc["boundaries"].items()}),
            disturbance_fraction=float(dist.get("fraction", 0.08)),
            disturbance_mean=float(dist.get("mean", 80.0)),
            disturbance_std=float(dist.get("std", 12.0)),
            surface_dd_ref=float(surface.get("dd_ref", 30.0)),
            surface_domain={k: (float(v[0]), float(v[1]))
                            for k, v in surface.get("domain", {}).items()},
        )
    except ScenarioFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"{path}: {exc}") from None


def _load_profiles(path, n_buses, reg_names):
    if not path.exists():
        raise ScenarioFormatError(f"profile file {path} not found")
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(rows)
    load_cols = [f"load[{n}]" for n in range(n_buses)]
    avail_cols = [f"avail[{name}]" for name in reg_names]
    missing = [c for c in load_cols + avail_cols if c not in (reader.fieldnames or [])]
    if missing:
        raise ScenarioFormatError(f"{path}: missing columns {missing}")
    load_rows, avail_rows = [], []
    for i, record in enumerate(reader):
        if int(record["period"]) != i:
            raise ScenarioFormatError(f"{path}: periods must be 0..T-1 in order")
        load_rows.append([float(record[c]) for c in load_cols])
        avail_rows.append([float(record[c]) for c in avail_cols])
    if not load_rows:
        raise ScenarioFormatError(f"{path}: no profile rows")
    load = np.array(load_rows).T
    avail = np.array(avail_rows).T if reg_names else np.zeros((0, len(load_rows)))
    return load, avail


# ---------------------------------------------------------------------------
# Fitted aggregates


def save_aggregates(aggregates, path, subcommand="aggregate", seed=None, order=None):
    """Write fitted reduced models with their fit summaries (trace omitted)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for agg in aggregates:
        entry = {
            "name": agg.name,
            "h_vppg": float(agg.h_vppg),
            "h_vppr": float(agg.h_vppr),
            "num": [float(c) for c in agg.g_vpp.num],
            "den": [float(c) for c in agg.g_vpp.den],
            "delay": float(agg.g_vpp.delay),
            "delayed_droop_share": float(agg.delayed_droop_share),
            "tau1": float(agg.tau1),
            "tau2": float(agg.tau2),
        }
        if agg.fit is not None:
            entry["fit"] = {
                "order": int(agg.fit.order),
                "converged": bool(agg.fit.converged),
                "iterations": int(agg.fit.iterations),
                "final_objective": float(agg.fit.final_objective),
                "best_objective": float(agg.fit.best_objective),
                "seed": int(agg.fit.seed),
                "n_scenarios": int(agg.fit.n_scenarios),
                "mape_nadir": float(agg.fit.mape_nadir),
                "mape_qss": float(agg.fit.mape_qss),
            }
        entries.append(entry)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "kind": "aggregates",
        "seed": seed,
        "order": order,
        "aggregates": entries,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_aggregates(path):
    """Read fitted reduced models back; returns a name-keyed dict."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("kind") != "aggregates":
        raise ScenarioFormatError(f"{path}: not an aggregates file")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioFormatError(
            f"{path}: schema version {doc.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    out = {}
    try:
        for entry in doc["aggregates"]:
            fit = None
            if "fit" in entry:
                f = entry["fit"]
                fit = FitReport(
                    order=f["order"], converged=f["converged"], iterations=f["iterations"],
                    final_objective=f["final_objective"], best_objective=f["best_objective"],
                    objective_trace=[], seed=f["seed"], n_scenarios=f["n_scenarios"],
                    mape_nadir=f["mape_nadir"], mape_qss=f["mape_qss"],
                )
            out[entry["name"]] = AggregateVpp(
                name=entry["name"],
                h_vppg=float(entry["h_vppg"]),
                h_vppr=float(entry["h_vppr"]),
                g_vpp=TransferFunction(tuple(entry["num"]), tuple(entry["den"]),
                                       float(entry.get("delay", 0.0))),
                delayed_droop_share=float(entry["delayed_droop_share"]),
                tau1=float(entry["tau1"]),
                tau2=float(entry["tau2"]),
                fit=fit,
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"{path}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Run manifest


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def package_versions():
    import scipy

    from . import __version__

    return {
        "vppfreq": __version__,
        "python": ".".join(map(str, sys.version_info[:3])),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out_dir, subcommand, inputs, seed, wall_clock_s, config=None):
    """Record what produced this run directory.

    The wall-clock entry varies between runs by design; determinism
    comparisons must exclude it.
    """
    out_dir = Path(out_dir)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "kind": "manifest",
        "inputs": [{"path": Path(p).name, "sha256": sha256_file(p)} for p in inputs],
        "seed": seed,
        "config": config or {},
        "versions": package_versions(),
        "wall_clock_s": round(float(wall_clock_s), 3),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Output tables


def _write_table(path, subcommand, kind, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# vppfreq schema={SCHEMA_VERSION} subcommand={subcommand} kind={kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(c) for c in row])
    return path


def read_table(path, expect_kind=None):
    """Read a schema-tagged CSV; returns (meta, rows as dicts of strings)."""
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# vppfreq "):
            raise ScenarioFormatError(f"{path}: missing the schema line")
        meta = dict(tok.split("=", 1) for tok in first[2:].split()[1:])
        rows = list(csv.DictReader(fh))
    if int(meta.get("schema", -1)) != SCHEMA_VERSION:
        raise ScenarioFormatError(f"{path}: schema version {meta.get('schema')!r}")
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise ScenarioFormatError(
            f"{path}: table kind {meta.get('kind')!r}, expected {expect_kind!r}")
    return meta, rows


def write_trajectory(out_dir, name, subcommand, t, columns):
    """Sampled time series: one time column plus one column per labeled signal."""
    header = ["t"] + list(columns)
    series = list(columns.values())
    rows = ([float(ti)] + [float(col[i]) for col in series] for i, ti in enumerate(t))
    return _write_table(Path(out_dir) / f"{name}.csv", subcommand, "trajectory", header, rows)


def write_metrics(out_dir, name, subcommand, metrics):
    path = Path(out_dir) / f"{name}.json"
    doc = {"schema_version": SCHEMA_VERSION, "subcommand": subcommand, "kind": "metrics"}
    doc.update(metrics)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_clearing(out_dir, scenario, solution, prices):
    """clearing.csv: one row per provider, period and cleared service."""
    en, inr, dr = scenario.offers.energy, scenario.offers.inertia, scenario.offers.droop
    rows = []

    def emit(provider, kind, bus, service, qty, offer, price):
        for t in range(scenario.periods):
            rows.append([provider, kind, bus, service, t,
                         float(qty[t]), float(np.asarray(offer)[t] if np.ndim(offer) else offer),
                         float(price[t])])

    for g in scenario.sgs:
        nodal = prices.energy[g.bus]
        emit(g.name, "sg", g.bus, "energy", solution.p_sg[g.name], en[g.name], nodal)
        emit(g.name, "sg", g.bus, "inertia", solution.uc.x[g.name] * g.inertia, 0.0,
             prices.sg_inertia[g.name])
        emit(g.name, "sg", g.bus, "droop", solution.uc.x[g.name] * g.droop, 0.0,
             prices.sg_droop[g.name])
    for r in scenario.regs:
        nodal = prices.energy[r.bus]
        emit(r.name, "reg", r.bus, "energy", solution.p_reg[r.name], en[r.name], nodal)
        emit(r.name, "reg", r.bus, "inertia", solution.h_reg[r.name], inr[r.name],
             prices.fm_inertia)
        emit(r.name, "reg", r.bus, "droop", solution.k_reg[r.name], dr[r.name],
             prices.fm_droop)
    for e in scenario.esss:
        nodal = prices.energy[e.bus]
        emit(e.name, "ess", e.bus, "energy", solution.p_ess[e.name], en[e.name], nodal)
        emit(e.name, "ess", e.bus, "inertia", solution.h_ess[e.name], inr[e.name],
             prices.fm_inertia)
        emit(e.name, "ess", e.bus, "droop", solution.k_ess[e.name], dr[e.name],
             prices.fm_droop)
    for v in scenario.vpps:
        nodal = prices.energy[v.bus]
        emit(v.name, "vpp", v.bus, "energy", solution.p_vppg[v.name],
             en[f"{v.name}.sg"], nodal)
        emit(v.name, "vpp", v.bus, "energy_flex", solution.p_vppr[v.name],
             en[f"{v.name}.flex"], nodal)
        emit(v.name, "vpp", v.bus, "inertia", solution.h_vppr[v.name], inr[v.name],
             prices.vpp_inertia)
        emit(v.name, "vpp", v.bus, "droop", solution.k_vpp[v.name], dr[v.name],
             prices.vpp_droop)
    header = ["provider", "kind", "bus", "service", "period",
              "quantity", "offer_price", "clearing_price"]
    return _write_table(Path(out_dir) / "clearing.csv", "clear", "clearing", header, rows)


def write_prices(out_dir, scenario, prices):
    """prices.csv in long format: family, key, period, price."""
    rows = []
    for n in scenario.buses:
        for t in range(scenario.periods):
            rows.append(["energy", str(n), t, float(prices.energy[n][t])])
    for g in scenario.sgs:
        for t in range(scenario.periods):
            rows.append(["sg_inertia", g.name, t, float(prices.sg_inertia[g.name][t])])
            rows.append(["sg_droop", g.name, t, float(prices.sg_droop[g.name][t])])
    for family, arr in (("vpp_inertia", prices.vpp_inertia), ("vpp_droop", prices.vpp_droop),
                        ("fm_inertia", prices.fm_inertia), ("fm_droop", prices.fm_droop)):
        for t in range(scenario.periods):
            rows.append([family, "system", t, float(arr[t])])
    header = ["family", "key", "period", "price"]
    return _write_table(Path(out_dir) / "prices.csv", "clear", "prices", header, rows)


def write_settlement(out_dir, settlement):
    rows = [[ln.provider, ln.kind, ln.service, ln.quantity, ln.cost, ln.revenue, ln.profit]
            for ln in settlement.lines]
    header = ["provider", "kind", "service", "quantity", "cost", "revenue", "profit"]
    return _write_table(Path(out_dir) / "settlement.csv", "clear", "settlement", header, rows)


def write_summary(out_dir, subcommand, payload):
    path = Path(out_dir) / "summary.json"
    doc = {"schema_version": SCHEMA_VERSION, "subcommand": subcommand, "kind": "summary"}
    doc.update(payload)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_audit(out_dir, report, subcommand="audit"):
    rows = []
    for r in report.records:
        rows.append([r.period, r.dd, r.rocof, r.nadir, r.qss,
                     "" if r.ode_nadir is None else r.ode_nadir,
                     int(r.rocof_ok), int(r.nadir_ok), int(r.qss_ok)])
    header = ["period", "dd", "rocof", "nadir", "qss", "ode_nadir",
              "rocof_ok", "nadir_ok", "qss_ok"]
    return _write_table(Path(out_dir) / "audit.csv", subcommand, "audit", header, rows)


# ---------------------------------------------------------------------------
# Plot-ready report tables


def write_report_tables(out_dir, clearing_path, prices_path, settlement_path):
    """Derive the four plot-ready tables from a clearing run's artifacts.

    Raises ReportInputError when the artifacts disagree on the period set.
    Degenerate inputs (no providers) produce header-only tables.
    """
    out_dir = Path(out_dir)
    _, clearing = read_table(clearing_path, "clearing")
    _, price_rows = read_table(prices_path, "prices")
    _, settlement = read_table(settlement_path, "settlement")

    periods = sorted({int(r["period"]) for r in clearing})
    price_periods = sorted({int(r["period"]) for r in price_rows})
    if periods != price_periods:
        raise ReportInputError(
            f"clearing covers periods {periods} but prices cover {price_periods}")

    kinds = ("sg", "reg", "ess", "vpp")

    def mix_rows(services, price_of):
        rows = []
        for t in periods:
            picked = [r for r in clearing
                      if int(r["period"]) == t and r["service"] in services]
            totals = {k: sum(float(r["quantity"]) for r in picked if r["kind"] == k)
                      for k in kinds}
            rows.append([t] + [totals[k] for k in kinds] + price_of(t, picked))
        return rows

    def sys_price(family, t):
        vals = [float(r["price"]) for r in price_rows
                if r["family"] == family and int(r["period"]) == t]
        return vals[0] if vals else 0.0

    def energy_price(t, picked):
        qty = sum(float(r["quantity"]) for r in picked)
        if qty <= 0.0:
            return [0.0]
        return [sum(float(r["quantity"]) * float(r["clearing_price"]) for r in picked) / qty]

    paths = [
        _write_table(out_dir / "energy_mix.csv", "report", "energy_mix",
                     ["period", *kinds, "avg_price"],
                     mix_rows({"energy", "energy_flex"}, energy_price)),
        _write_table(out_dir / "inertia_mix.csv", "report", "inertia_mix",
                     ["period", *kinds, "fm_price", "vpp_price"],
                     mix_rows({"inertia"}, lambda t, _: [sys_price("fm_inertia", t),
                                                         sys_price("vpp_inertia", t)])),
        _write_table(out_dir / "droop_mix.csv", "report", "droop_mix",
                     ["period", *kinds, "fm_price", "vpp_price"],
                     mix_rows({"droop"}, lambda t, _: [sys_price("fm_droop", t),
                                                       sys_price("vpp_droop", t)])),
    ]
    by_provider = {}
    for r in settlement:
        key = (r["provider"], r["kind"])
        cost, revenue = by_provider.get(key, (0.0, 0.0))
        by_provider[key] = (cost + float(r["cost"]), revenue + float(r["revenue"]))
    table = [[p, k, c, v, v - c] for (p, k), (c, v) in sorted(by_provider.items())]
    paths.append(_write_table(out_dir / "settlement_table.csv", "report", "settlement_table",
                              ["provider", "kind", "cost", "revenue", "profit"], table))
    return paths
