"""Command-line entry point: `memsim run <config>` and `memsim plot <csv>`.

A run executes the configured experiment into a fresh timestamped directory
under MEMSIM_ARTIFACT_DIR (default ./artifacts) and writes a manifest with
the fully-resolved config plus a content hash per artifact. Hashes of
loss-history files skip the wall-clock column so identical reruns produce
identical manifests.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

from memsim import analysis, gcnet, geodesy, nets, plotting, rng as rng_mod, \
    training
from memsim.config import ConfigError, load_config, normalized_dict, \
    resolve_defaults

log = logging.getLogger(__name__)


def _artifact_dir(root: str | None, cfg) -> str:
    base = root or os.environ.get("MEMSIM_ARTIFACT_DIR", "artifacts")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    cand = os.path.join(base, f"{cfg.experiment}-{cfg.task}-{stamp}")
    k = 1
    path = cand
    while os.path.exists(path):
        path = f"{cand}-{k}"
        k += 1
    os.makedirs(path)
    return path


def _stable_hash(path: str) -> str:
    with open(path, "rb") as fh:
        data = fh.read()
    if os.path.basename(path) == "history.csv":
        # timing column is the one legitimately nondeterministic artifact field
        buf = io.StringIO(data.decode("utf-8"))
        rows = [row[:-1] for row in csv.reader(buf)]
        out = io.StringIO()
        csv.writer(out).writerows(rows)
        data = out.getvalue().encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def _digital_view(res: analysis.RunResult) -> nets.MlpWeights:
    return res.net.shadow if isinstance(res.net, nets.AnalogNet) else res.net


def _density_fn(res: analysis.RunResult):
    w = _digital_view(res)
    return lambda x: nets.forward_digital(w, res.spec, x).reshape(-1)


def _run_experiment(cfg, outdir: str) -> None:
    def join(name: str) -> str:
        return os.path.join(outdir, name)
    if cfg.experiment == "train":
        res = analysis.run_single(cfg, cfg.seed)
        training.write_history(join("history.csv"), res.history)
        nets.save_checkpoint(join("net.npz"), _digital_view(res), res.spec)
        plotting.render(join("history.csv"), "history", join("history.svg"))
    elif cfg.experiment in ("sweep-slices", "sweep-repeats"):
        fn = analysis.sweep_slices if cfg.experiment == "sweep-slices" \
            else analysis.sweep_repeats
        rows = fn(cfg, seeds=cfg.seeds)
        analysis.write_rows(join("sweep.csv"), analysis.SWEEP_HEADER, rows)
        analysis.write_rows(join("summary.csv"), analysis.SUMMARY_HEADER,
                            analysis.summarize(rows, "param", "test_loss"))
        plotting.render(join("sweep.csv"), "sweep", join("sweep.svg"))
    elif cfg.experiment == "sweep-faults":
        rows = analysis.sweep_faults(cfg, retrain=cfg.retrain, seeds=cfg.seeds)
        analysis.write_rows(join("faults.csv"), analysis.FAULT_HEADER, rows)
        plotting.render(join("faults.csv"), "faults", join("faults.svg"))
    elif cfg.experiment == "sweep-drift":
        rows = analysis.sweep_drift(cfg, seeds=cfg.seeds)
        analysis.write_rows(join("drift.csv"), analysis.DRIFT_HEADER, rows)
        plotting.render(join("drift.csv"), "drift", join("drift.svg"))
    elif cfg.experiment == "lipschitz":
        rows = []
        for om in cfg.omega0_list:
            res = analysis.run_single(cfg, cfg.seed, omega0=om)
            w = _digital_view(res)
            rows.append({
                "omega0": om,
                "grad_estimate": analysis.lipschitz_grad(
                    w, res.spec, 1000, (-1.0, 1.0),
                    rng_mod.stream(cfg.seed, "eval", "lg", om)),
                "pairs_estimate": analysis.lipschitz_pairs(
                    w, res.spec, 1600, (-1.0, 1.0),
                    rng_mod.stream(cfg.seed, "eval", "lp", om)),
            })
        analysis.write_rows(join("lipschitz.csv"), analysis.LIPSCHITZ_HEADER,
                            rows)
        plotting.render(join("lipschitz.csv"), "lipschitz", join("lipschitz.svg"))
    elif cfg.experiment == "rollout":
        res = analysis.run_single(cfg, cfg.seed)
        x0 = res.task.data.states[0]
        mode = "digital" if cfg.mode == "digital" else "analog"
        policy = gcnet.net_policy(res.net, spec=res.spec, mode=mode,
                                  t_device=cfg.drift_time,
                                  rng=rng_mod.stream(cfg.seed, "eval", "roll"),
                                  tau_scale=cfg.tf_range[1])
        traj = gcnet.rollout(policy, x0, cfg.rollout_dt)
        gcnet.write_trajectory(join("trajectory.csv"), traj)
        ref = gcnet.rollout(gcnet.optimal_policy(), x0, cfg.rollout_dt)
        gcnet.write_trajectory(join("optimal.csv"), ref)
        plotting.render(join("trajectory.csv"), "trajectory",
                        join("trajectory.svg"))
    elif cfg.experiment == "export-density":
        res = analysis.run_single(cfg, cfg.seed)
        geodesy.export_density_grid(_density_fn(res), cfg.density_resolution,
                                    cfg.density_threshold, join("density.csv"))
    else:  # config validation makes this unreachable
        raise AssertionError(cfg.experiment)


def run(config_path: str, root: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    cfg = resolve_defaults(cfg)
    outdir = _artifact_dir(root, cfg)
    log.info("writing artifacts to %s", outdir)
    try:
        _run_experiment(cfg, outdir)
    except Exception as err:  # noqa: BLE001 - boundary: report and fail the run
        log.error("run failed: %s", err)
        return 1
    artifacts = {name: _stable_hash(os.path.join(outdir, name))
                 for name in sorted(os.listdir(outdir))}
    manifest = {"config": normalized_dict(cfg), "artifacts": artifacts}
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(outdir)
    return 0


def plot(csv_path: str, kind: str, out: str | None = None) -> int:
    out = out or os.path.splitext(csv_path)[0] + ".svg"
    try:
        plotting.render(csv_path, kind, out)
    except (ValueError, OSError) as err:
        print(f"plot failed: {err}", file=sys.stderr)
        return 1
    print(out)
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="memsim")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--artifact-dir", default=None,
                       help="output root (overrides MEMSIM_ARTIFACT_DIR)")
    p_plot = sub.add_parser("plot", help="render a CSV artifact to SVG")
    p_plot.add_argument("csv")
    p_plot.add_argument("--kind", required=True, choices=plotting.KINDS)
    p_plot.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, args.artifact_dir)
    return plot(args.csv, args.kind, args.out)


if __name__ == "__main__":
    sys.exit(main())
