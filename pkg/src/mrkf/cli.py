"""Command-line front end: reproducible scenario simulation, estimation,
grid-search tuning and run comparison, all emitting CSV/JSON artifacts with
a hash manifest.

Exit codes: 0 success, 2 validation error, 3 filter divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__, adm1r3, baselines, ekf, events as ev, multirate, scenario, tuning
from .events import FLOAT_FMT
from .runlog import STATUS_OK

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

SCHEMA_VERSION = 1

#: configuration keys with their studied value grids
CONFIG_DOMAIN = {
    "days": "positive horizon in days (study used 14)",
    "delay_ac_hours": "one of 0/12/24/36 (no/short/medium/long)",
    "delay_in_hours": "one of 0/6/12/24 (no/short/medium/long)",
    "k_sigma": "one of 0.5/1/2 (low/medium/high noise)",
    "k_theta": "one of 0/0.1/0.2/0.3 (no/low/medium/high mismatch)",
    "k_x": "one of 0/0.5/1/2 (ideal/good/medium/bad init)",
    "seed": "64-bit integer",
    "u_mean": "mean feed volume flow in m^3/d",
    "randomization": "relative hourly feed variation (default 0.2)",
}


class ValidationError(Exception):
    pass


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise OSError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ValidationError(f"config {path} is not valid JSON: {err}") from err
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"config must declare schema_version = {SCHEMA_VERSION}")
    return raw


def _scenario_from_config(raw: dict, overrides: dict) -> scenario.ScenarioConfig:
    data = dict(raw.get("scenario", {}))
    data.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(data) - set(CONFIG_DOMAIN) - {"dt_days"}
    if unknown:
        key = sorted(unknown)[0]
        raise ValidationError(f"unknown scenario key {key!r}; "
                              f"known keys: {sorted(CONFIG_DOMAIN)}")
    for key in ("days", "seed"):
        if key not in data:
            raise ValidationError(
                f"missing scenario key {key!r} ({CONFIG_DOMAIN[key]})")
    try:
        cfg = scenario.ScenarioConfig(**data)
        cfg.validate()
    except (TypeError, ValueError) as err:
        raise ValidationError(f"invalid scenario config: {err}") from err
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, config_obj, seed, t_start, outputs):
    manifest = {
        "config_digest": hashlib.sha256(
            json.dumps(config_obj, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "versions": {"mrkf": __version__,
                     "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_start": t_start,
        "wall_end": time.time(),
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _resolved_config_dict(cfg: scenario.ScenarioConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "scenario": asdict(cfg)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t_start = time.time()
    raw = _load_config(args.config) if args.config else \
        {"schema_version": SCHEMA_VERSION, "scenario": {"days": 14.0, "seed": 0}}
    overrides = {
        "seed": args.seed,
        "delay_ac_hours": args.delay_ac,
        "delay_in_hours": args.delay_in,
        "k_sigma": args.noise,
        "k_theta": args.pmm,
        "k_x": args.init_error,
        "days": args.days,
    }
    cfg = _scenario_from_config(raw, overrides)
    os.makedirs(args.out, exist_ok=True)
    bundle = scenario.build_scenario(cfg)
    truth_path = os.path.join(args.out, "truth.csv")
    events_path = os.path.join(args.out, "events.csv")
    config_path = os.path.join(args.out, "scenario.json")
    ev.write_truth_csv(truth_path, bundle.truth_t, bundle.truth_x, bundle.truth_y)
    ev.write_events_csv(events_path, bundle.events)
    resolved = _resolved_config_dict(cfg)
    with open(config_path, "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    x0_path = os.path.join(args.out, "initial_states.csv")
    with open(x0_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + [f"x{i+1}" for i in range(14)])
        w.writerow(["x0_truth"] + [FLOAT_FMT % v for v in bundle.x0_truth])
        w.writerow(["x0_estimate"] + [FLOAT_FMT % v for v in bundle.x0_estimate])
    _write_manifest(args.out, resolved, cfg.seed, t_start,
                    [truth_path, events_path, config_path, x0_path])
    print(f"simulated {cfg.days} d, {len(bundle.events)} events -> {args.out}")
    return EXIT_OK


def _tuning_from_arg(arg) -> ekf.NoiseConfig:
    base = ekf.NoiseConfig.default()
    if arg is None:
        return base
    if os.path.exists(arg):
        with open(arg) as fh:
            data = json.load(fh)
    else:
        try:
            data = json.loads(arg)
        except json.JSONDecodeError as err:
            raise ValidationError(
                f"--tuning must be a JSON file or inline JSON: {err}") from err
    try:
        return ekf.NoiseConfig(
            Q_diag=np.asarray(data["Q_diag"], dtype=float),
            k_R=float(data.get("k_R", 1.0)),
            R_diag_base=base.R_diag_base)
    except (KeyError, ValueError) as err:
        raise ValidationError(f"invalid tuning: {err}") from err


def _load_linear_system(path) -> baselines.LinearSystem:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return baselines.LinearSystem(
            **{k: np.asarray(data[k], dtype=float)
               for k in ("A", "B", "C_on", "C_off", "Q_d", "R_on", "R_off")})
    except KeyError as err:
        raise ValidationError(f"linear system file missing key {err}") from err


def cmd_estimate(args) -> int:
    t_start = time.time()
    events_list = ev.read_events_csv(args.events)
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    if args.method in ("alexander", "larsen"):
        if not args.linear_system:
            raise ValidationError(
                f"method {args.method} applies to linear time-invariant "
                "systems only; provide --linear-system FILE")
        system = _load_linear_system(args.linear_system)
        t_end = int(max(e.t for e in events_list))
        m0 = np.zeros(system.n)
        P0 = np.eye(system.n)
        fn = (baselines.alexander_filter if args.method == "alexander"
              else baselines.larsen_parallel)
        log = fn(events_list, system, m0, P0, t_end)
        path = os.path.join(args.out, "runlog.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"xhat{i+1}" for i in range(system.n)]
                       + [f"P{i+1}" for i in range(system.n)])
            for k in sorted(log.means):
                w.writerow([FLOAT_FMT % k]
                           + [FLOAT_FMT % v for v in log.means[k]]
                           + [FLOAT_FMT % v for v in np.diag(log.covs[k])])
        outputs.append(path)
        _write_manifest(args.out, {"method": args.method}, 0, t_start, outputs)
        print(f"{args.method} run -> {args.out}")
        return EXIT_OK

    raw = _load_config(args.config)
    cfg = _scenario_from_config(raw, {})
    noise = _tuning_from_arg(args.tuning)
    bundle = scenario.build_scenario(cfg)
    hooks = ekf.normalized_hooks(bundle.filter_model(), bundle.maps)
    x0n = bundle.x0_estimate_normalized()
    opts = multirate.MultirateOptions(fusion=args.fusion)
    if args.method == "mrekf":
        log = multirate.run_multirate(hooks, bundle.maps, noise,
                                      bundle.schedule, events_list, x0n,
                                      cfg.days, opts)
    elif args.method == "recalc":
        log = baselines.recalculation_filter(hooks, bundle.maps, noise,
                                             bundle.schedule, events_list,
                                             x0n, cfg.days, opts)
    else:
        raise ValidationError(f"unknown method {args.method}")

    runlog_path = os.path.join(args.out, "runlog.csv")
    updates_path = os.path.join(args.out, "updates.csv")
    log.write_csv(runlog_path)
    log.write_updates_csv(updates_path)
    outputs += [runlog_path, updates_path]

    metrics_obj = {"status": log.status, "failure": log.failure,
                   "wall_time": log.wall_time,
                   "max_aug_degree": log.max_aug_degree()}
    if args.truth and log.status == STATUS_OK:
        t_truth, x_truth, y_truth = ev.read_truth_csv(args.truth)
        m = tuning.evaluate_run(log, t_truth, x_truth, y_truth, events_list,
                                dt_days=cfg.dt_days)
        metrics_obj.update({
            "nrmse_x": list(m.nrmse_x), "nrmse_x_l1": m.nrmse_x_l1,
            "nrmse_y": list(m.nrmse_y), "nrmse_y_l1": m.nrmse_y_l1,
            "boulkroune": m.boulkroune,
            "boulkroune_summands": list(m.summands)})
    elif log.status == STATUS_OK:
        J, summands = tuning.boulkroune_cost(log, events_list,
                                             eval_start=cfg.days / 2.0,
                                             dt_days=cfg.dt_days)
        metrics_obj.update({"boulkroune": J,
                            "boulkroune_summands": list(summands)})
    metrics_path = os.path.join(args.out, "metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(metrics_obj, fh, indent=2, sort_keys=True)
    outputs.append(metrics_path)
    _write_manifest(args.out, _resolved_config_dict(cfg), cfg.seed, t_start,
                    outputs)
    print(f"{args.method} run: {log.status} -> {args.out}")
    return EXIT_OK if log.status == STATUS_OK else EXIT_DIVERGENCE


def _rank_csv(path, rows, criterion):
    ranked = tuning.rank_rows(rows, criterion)
    failed = [r for r in rows if r["metrics"].status != STATUS_OK]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "tuning_id"] + [f"Q{i+1}" for i in range(14)]
                   + ["k_R", "nrmse_x_L1", "nrmse_y_L1", "boulkroune",
                      "status", "wall_time"])
        for rank, r in enumerate(ranked + failed, start=1):
            m = r["metrics"]
            w.writerow([rank, r["tuning_id"]]
                       + [FLOAT_FMT % v for v in r["Q_diag"]]
                       + [FLOAT_FMT % r["k_R"], FLOAT_FMT % m.nrmse_x_l1,
                          FLOAT_FMT % m.nrmse_y_l1, FLOAT_FMT % m.boulkroune,
                          m.status, FLOAT_FMT % m.wall_time])


def cmd_tune(args) -> int:
    t_start = time.time()
    raw = _load_config(args.scenario)
    cfg = _scenario_from_config(raw, {})
    os.makedirs(args.out, exist_ok=True)
    samples = tuning.lhs_sample(args.n, seed=args.seed)
    bundle = scenario.build_scenario(cfg)

    done_path = os.path.join(args.out, "completed.json")
    done = {}
    if os.path.exists(done_path):
        with open(done_path) as fh:
            stored = json.load(fh)
        if stored.get("seed") == args.seed and stored.get("n") == args.n:
            done = {int(k): v for k, v in stored.get("results", {}).items()}
            print(f"resuming: {len(done)} tunings already evaluated")

    todo = [i for i in range(args.n) if i not in done]
    if todo:
        sub = np.asarray([samples[i] for i in todo])
        def progress(idx, metrics):
            print(f"  tuning {todo[idx]}: {metrics.status} "
                  f"({metrics.wall_time:.1f}s)", flush=True)
        rows_new = tuning.grid_search(bundle, sub,
                                      cutoff_secs=args.cutoff_secs,
                                      jobs=args.jobs,
                                      progress=progress if args.verbose else None)
        for local_i, row in enumerate(rows_new):
            m = row["metrics"]
            done[todo[local_i]] = {
                "status": m.status, "wall_time": m.wall_time,
                "nrmse_x_l1": m.nrmse_x_l1, "nrmse_y_l1": m.nrmse_y_l1,
                "boulkroune": m.boulkroune,
                "summands": [None if not np.isfinite(s) else s
                             for s in m.summands]}
        with open(done_path, "w") as fh:
            json.dump({"seed": args.seed, "n": args.n, "results": done},
                      fh, sort_keys=True)

    rows = []
    for i in range(args.n):
        d = done[i]
        m = tuning.RunMetrics(status=d["status"], wall_time=d["wall_time"])
        m.nrmse_x_l1 = d["nrmse_x_l1"] if d["nrmse_x_l1"] is not None else np.nan
        m.nrmse_y_l1 = d["nrmse_y_l1"] if d["nrmse_y_l1"] is not None else np.nan
        m.boulkroune = d["boulkroune"] if d["boulkroune"] is not None else np.nan
        m.summands = np.array([np.nan if s is None else s
                               for s in d["summands"]])
        rows.append({"tuning_id": i, "Q_diag": samples[i][:14],
                     "k_R": samples[i][14], "metrics": m})

    outputs = []
    for criterion in ("nrmse_x", "nrmse_y", "boulkroune"):
        path = os.path.join(args.out, f"ranking_{criterion}.csv")
        _rank_csv(path, rows, criterion)
        outputs.append(path)
    summands_path = os.path.join(args.out, "summands.csv")
    with open(summands_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tuning_id", "s1", "s2", "s3", "s4", "s5"])
        for r in rows:
            w.writerow([r["tuning_id"]]
                       + [FLOAT_FMT % s if np.isfinite(s) else ""
                          for s in r["metrics"].summands])
    outputs.append(summands_path)
    _write_manifest(args.out, _resolved_config_dict(cfg), args.seed, t_start,
                    outputs)
    n_failed = sum(1 for r in rows if r["metrics"].status != STATUS_OK)
    print(f"grid search: {args.n} tunings, {n_failed} failed -> {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    t_start = time.time()
    from .runlog import read_runlog_csv
    t_truth, x_truth, _ = ev.read_truth_csv(args.truth)
    logs = {}
    for run_dir in args.runs:
        name = os.path.basename(os.path.normpath(run_dir))
        logs[name] = read_runlog_csv(os.path.join(run_dir, "runlog.csv"))
    grids = {name: tuple(np.round(log.t_array() * 24).astype(int))
             for name, log in logs.items()}
    ref = tuple(np.round(np.asarray(t_truth) * 24).astype(int))
    for name, g in grids.items():
        if g != ref:
            raise ValidationError(f"run {name} grid does not match the truth grid")

    os.makedirs(args.out, exist_ok=True)
    mean_abs = np.mean(np.abs(x_truth), axis=0)
    l1_path = os.path.join(args.out, "l1_error.csv")
    with open(l1_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "run", "l1_error"])
        for name, log in sorted(logs.items()):
            X = log.state_array()
            l1 = np.sum(np.abs(X - x_truth) / mean_abs, axis=1)
            for ti, v in zip(t_truth, l1):
                w.writerow([FLOAT_FMT % ti, name, FLOAT_FMT % v])

    shares_path = os.path.join(args.out, "state_shares.csv")
    with open(shares_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "state_1", "share_1", "state_2", "share_2",
                    "state_3", "share_3", "share_rest"])
        for name, log in sorted(logs.items()):
            X = log.state_array()
            contrib = np.sum(np.abs(X - x_truth) / mean_abs, axis=0)
            total = contrib.sum()
            order = np.argsort(contrib)[::-1]
            top = order[:3]
            shares = contrib[top] / total
            w.writerow([name,
                        adm1r3.STATE_NAMES[top[0]], FLOAT_FMT % shares[0],
                        adm1r3.STATE_NAMES[top[1]], FLOAT_FMT % shares[1],
                        adm1r3.STATE_NAMES[top[2]], FLOAT_FMT % shares[2],
                        FLOAT_FMT % (1.0 - shares.sum())])

    traj_path = os.path.join(args.out, "trajectories.csv")
    with open(traj_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "run", "signal", "value"])
        for name, log in sorted(logs.items()):
            Y = log.output_array()
            for j, signal in enumerate(adm1r3.OUTPUT_NAMES):
                for ti, v in zip(t_truth, Y[:, j]):
                    w.writerow([FLOAT_FMT % ti, name, signal, FLOAT_FMT % v])
    _write_manifest(args.out, {"runs": sorted(logs)}, 0, t_start,
                    [l1_path, shares_path, traj_path])
    print(f"compared {len(logs)} runs -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mrkf",
        description="Multirate Kalman filtering for anaerobic digestion "
                    "monitoring: simulate, estimate, tune, compare.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate truth and event CSVs")
    ps.add_argument("--config", help="scenario config JSON")
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--days", type=float, default=None)
    ps.add_argument("--delay-ac", type=float, default=None)
    ps.add_argument("--delay-in", type=float, default=None)
    ps.add_argument("--noise", type=float, default=None)
    ps.add_argument("--pmm", type=float, default=None)
    ps.add_argument("--init-error", type=float, default=None)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pe = sub.add_parser("estimate", help="run a filter over an event stream")
    pe.add_argument("--events", required=True)
    pe.add_argument("--config", help="scenario config JSON (nonlinear methods)")
    pe.add_argument("--truth", help="truth CSV for ground-truth metrics")
    pe.add_argument("--tuning", help="tuning JSON file or inline JSON")
    pe.add_argument("--method", required=True,
                    choices=["mrekf", "recalc", "alexander", "larsen"])
    pe.add_argument("--fusion", default=multirate.FUSION_EXACT,
                    choices=[multirate.FUSION_EXACT, multirate.FUSION_FROZEN])
    pe.add_argument("--linear-system", help="LTI system JSON (alexander/larsen)")
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_estimate)

    pt = sub.add_parser("tune", help="latin-hypercube grid search")
    pt.add_argument("--scenario", required=True, help="scenario config JSON")
    pt.add_argument("--n", type=int, default=200)
    pt.add_argument("--cutoff-secs", type=float, default=30.0)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--jobs", type=int, default=1)
    pt.add_argument("--verbose", action="store_true")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_tune)

    pc = sub.add_parser("compare", help="compare run logs against truth")
    pc.add_argument("--runs", nargs="+", required=True)
    pc.add_argument("--truth", required=True)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "estimate" and args.method in ("mrekf", "recalc") \
            and not args.config:
        parser.error("--config is required for nonlinear methods")
    seed_env = os.environ.get("MRKF_SEED")
    if seed_env is not None and getattr(args, "seed", None) is None \
            and hasattr(args, "seed"):
        args.seed = int(seed_env)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
