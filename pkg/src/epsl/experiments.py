"""Seeded experiment runners producing flat CSV records."""

from __future__ import annotations

import csv
import io
from fractions import Fraction

import numpy as np

from .latency import FRAMEWORKS, as_fraction, framework_round_latency, latency_to_target
from .optimizer import BASELINES, baseline_alloc, bcd_optimize
from .scenario import build_scenario
from .splitnet import SplitNet
from .training import (TrainConfig, epoch_batches, evaluate_all, make_dataset, split_shards,
                       train_round)

OPTIMIZE_SCHEMA = "optimize.v1"
TRAIN_SCHEMA = "train.v1"
SWEEP_SCHEMA = "sweep.v1"

OPTIMIZE_FIELDS = ["schema", "run_id", "seed", "method", "phi", "cut", "total", "t1", "t2",
                   "t_server_fp", "t_server_bp", "t_broadcast", "iterations", "converged",
                   "trace"]
TRAIN_FIELDS = ["schema", "run_id", "seed", "framework", "epoch", "round", "phi", "train_loss",
                "test_acc", "test_loss", "round_latency", "elapsed_latency"]
SWEEP_AXES = ("n_devices", "bandwidth_total", "f_s", "dataset_size", "phi")
SWEEP_METHODS = ("bcd",) + BASELINES
SWEEP_FRAMEWORKS = ("vanilla_sl", "sfl", "psl", "epsl")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def to_csv(rows, fields):
    """RFC 4180 text (CRLF line ends); floats use their shortest round-trip repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()


def write_csv(path, rows, fields):
    text = to_csv(rows, fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


# --- optimize ----------------------------------------------------------------------

def run_optimize(config, seed=None):
    """BCD plus the four baselines on one scenario; one row per method."""
    scenario = build_scenario(config, seed)
    seed = scenario.seed
    phi = scenario.hyper.phi
    run_id = f"optimize-{seed}"
    res = bcd_optimize(scenario)
    rows = [_opt_row(run_id, seed, "bcd", phi, res.allocation.cut, res.breakdown,
                     res.iterations, res.converged, res.trace)]
    for kind in BASELINES:
        alloc, bd = baseline_alloc(kind, scenario)
        rows.append(_opt_row(run_id, seed, kind, phi, alloc.cut, bd, 0, True, [bd.total]))
    return rows


def _opt_row(run_id, seed, method, phi, cut, bd, iterations, converged, trace):
    return {
        "schema": OPTIMIZE_SCHEMA, "run_id": run_id, "seed": seed, "method": method,
        "phi": phi, "cut": cut, "total": bd.total, "t1": bd.t1, "t2": bd.t2,
        "t_server_fp": float(bd.t_server_fp), "t_server_bp": float(bd.t_server_bp),
        "t_broadcast": float(bd.t_broadcast), "iterations": iterations,
        "converged": bool(converged), "trace": ";".join(repr(float(t)) for t in trace),
    }


# --- train -------------------------------------------------------------------------

TOY_HIDDEN = (16, 8, 16)
TOY_CUT = 2


def toy_setup(config, seed):
    C = config["n_devices"]
    d = config["toy_input_dim"]
    X, y, Xt, yt = make_dataset(config["dataset_size"], config["toy_test_size"], d,
                                config["toy_class_sep"], seed=[seed, 4])
    shards = split_shards(X, y, C, seed=[seed, 5])
    dims = [d, *TOY_HIDDEN, 2]
    acts = ["relu"] * len(TOY_HIDDEN) + ["identity"]
    net = SplitNet.create(dims, acts, TOY_CUT, C, seed=[seed, 6])
    return net, shards, (Xt, yt)


def run_training(config, frameworks=FRAMEWORKS, epochs=1, seed=None):
    """Train each framework on the same seeded data; one row per round.

    Each round is charged the modelled latency of ``framework`` at the BCD
    allocation optimised for the aggregation ratio in force.
    """
    scenario = build_scenario(config, seed)
    seed = scenario.seed
    cfg = TrainConfig(phi=scenario.hyper.phi, eta_c=config["eta_c"], eta_s=config["eta_s"],
                      switch_epoch=config["pt_switch_epoch"])
    allocs = {}

    def alloc_for(phi):
        if phi not in allocs:
            allocs[phi] = bcd_optimize(scenario, phi).allocation
        return allocs[phi]

    rows = []
    for fw in frameworks:
        if fw not in FRAMEWORKS:
            raise ValueError(f"unknown framework {fw!r}")
        net, shards, (Xt, yt) = toy_setup(config, seed)
        elapsed = 0.0
        rnd = 0
        for epoch in range(epochs):
            for batches in epoch_batches(shards, scenario.hyper.batch_size, seed, epoch):
                phi, loss = train_round(fw, net, batches, cfg, epoch)
                lat = framework_round_latency(scenario, alloc_for(phi), fw, phi)
                elapsed += lat
                rnd += 1
                acc, tloss = evaluate_all(net, Xt, yt)
                rows.append({
                    "schema": TRAIN_SCHEMA, "run_id": f"train-{seed}", "seed": seed,
                    "framework": fw, "epoch": epoch, "round": rnd, "phi": phi,
                    "train_loss": loss, "test_acc": acc, "test_loss": tloss,
                    "round_latency": lat, "elapsed_latency": elapsed,
                })
    return rows


# --- sweep -------------------------------------------------------------------------

def sweep_fields():
    fields = ["schema", "axis", "value", "reps", "seed"]
    for m in SWEEP_METHODS:
        fields += [f"{m}_mean", f"{m}_min", f"{m}_max"]
    fields += [f"{fw}_to_target_mean" for fw in SWEEP_FRAMEWORKS]
    return fields


def apply_axis(config, axis, value):
    cfg = dict(config)
    if axis == "n_devices":
        cfg["n_devices"] = int(value)
    elif axis == "bandwidth_total":
        m = Fraction(str(value)) / Fraction(str(cfg["subchannel_bw_mhz"]))
        if m.denominator != 1:
            raise ValueError(f"total bandwidth {value} MHz is not a multiple of the subchannel width")
        cfg["n_subchannels"] = int(m)
    elif axis == "f_s":
        cfg["server_compute_cycles_per_s"] = float(value)
    elif axis == "dataset_size":
        cfg["dataset_size"] = int(value)
    elif axis == "phi":
        cfg["phi"] = as_fraction(Fraction(str(value)))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    if cfg["n_subchannels"] < cfg["n_devices"]:
        raise ValueError(f"{axis}={value}: fewer subchannels than devices")
    return cfg


def _sweep_point(config, seed):
    """Per-method round latency and per-framework latency-to-target for one seed."""
    sc = build_scenario(config, seed)
    b = sc.hyper.batch_size
    epochs = sc.hyper.target_epochs
    n = int(sc.data_counts.max())
    full = bcd_optimize(sc)
    totals = {"bcd": full.objective}
    for kind in BASELINES:
        totals[kind] = baseline_alloc(kind, sc)[1].total
    psl = bcd_optimize(sc, 0).allocation
    target = {"epsl": latency_to_target(full.objective, n, b, epochs)}
    for fw in ("vanilla_sl", "sfl", "psl"):
        target[fw] = latency_to_target(framework_round_latency(sc, psl, fw, 0), n, b, epochs)
    return totals, target


def run_sweep(config, axis, values, reps=1, seed=None):
    """One aggregated row per axis value (mean/min/max over seeds seed + rep)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    base_seed = config["seed"] if seed is None else seed
    rows = []
    for value in sorted(values, key=lambda v: Fraction(str(v))):
        cfg = apply_axis(config, axis, value)
        totals = {m: [] for m in SWEEP_METHODS}
        target = {fw: [] for fw in SWEEP_FRAMEWORKS}
        for rep in range(reps):
            t, g = _sweep_point(cfg, base_seed + rep)
            for m in SWEEP_METHODS:
                totals[m].append(t[m])
            for fw in SWEEP_FRAMEWORKS:
                target[fw].append(g[fw])
        row = {"schema": SWEEP_SCHEMA, "axis": axis, "value": value, "reps": reps,
               "seed": base_seed}
        for m in SWEEP_METHODS:
            arr = np.array(totals[m])
            row[f"{m}_mean"] = float(arr.mean())
            row[f"{m}_min"] = float(arr.min())
            row[f"{m}_max"] = float(arr.max())
        for fw in SWEEP_FRAMEWORKS:
            row[f"{fw}_to_target_mean"] = float(np.mean(target[fw]))
        rows.append(row)
    return rows
