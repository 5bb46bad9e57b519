"""Experiment drivers: mitigation sweeps, sensitivity estimators, statistics.

Every sweep point is an independent run keyed by (config, seed) with its own
named random streams, so points can execute in any order or in parallel and
still merge into identical CSV rows.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from memsim import crossbar, devices, gcnet, geodesy, ndcore as nd, nets, \
    rng as rng_mod, training
from memsim.config import ExperimentConfig, resolve_defaults
from memsim.crossbar import HIGH_RES_BITS, ConverterSpec
from memsim.nets import MlpWeights, SirenSpec
from memsim.training import OptimizerConfig

log = logging.getLogger(__name__)

SWEEP_HEADER = ["sweep", "param", "device", "seed", "train_loss", "test_loss"]
FAULT_HEADER = ["ratio", "device", "seed", "loss_before", "loss_unretrained",
                "loss_retrained"]
DRIFT_HEADER = ["time_s", "device", "seed", "loss"]
SUMMARY_HEADER = ["param", "n", "mean", "std", "median"]
LIPSCHITZ_HEADER = ["omega0", "grad_estimate", "pairs_estimate"]


def build_task(cfg: ExperimentConfig, seed: int):
    data_rng = rng_mod.stream(seed, "data")
    if cfg.task == "gcnet":
        data = gcnet.synth_dataset(cfg.n_train, tuple(cfg.tf_range),
                                   tuple(cfg.state_box), data_rng)
        return gcnet.GcnetTask(data, tau_scale=cfg.tf_range[1])
    body = geodesy.eros_lite() if cfg.task == "geodesy-eroslite" \
        else geodesy.dumbbell_body()
    targets = geodesy.sample_targets(body, cfg.n_train, tuple(cfg.shell),
                                     data_rng)
    return geodesy.GeodesyTask(body, targets, cfg.n_quad,
                               variant=cfg.loss_variant)


def build_spec(cfg: ExperimentConfig, task, seed: int,
               omega0: float | None = None) -> SirenSpec:
    layers = tuple(cfg.net_layers)
    if layers[0] != task.input_dim or layers[-1] != task.output_dim:
        raise ValueError(f"net_layers {layers} do not match task dims "
                         f"({task.input_dim} -> {task.output_dim})")
    return SirenSpec(layers, omega0 or cfg.omega0, cfg.final_activation, seed)


def build_converter(cfg: ExperimentConfig) -> ConverterSpec:
    return ConverterSpec(cfg.dac_bits, cfg.adc_bits, cfg.input_clip,
                         cfg.output_clip, cfg.periph_noise_std)


@dataclass
class RunResult:
    seed: int
    train_loss: float
    test_loss: float
    history: list[training.EpochRecord]
    net: object  # AnalogNet or MlpWeights
    spec: SirenSpec
    task: object


def run_single(cfg: ExperimentConfig, seed: int,
               omega0: float | None = None) -> RunResult:
    """Train one network under the resolved config and evaluate held-out loss."""
    cfg = resolve_defaults(cfg)
    task = build_task(cfg, seed)
    spec = build_spec(cfg, task, seed, omega0)
    w = nets.init_siren(spec, rng_mod.stream(seed, "init"))
    opt = OptimizerConfig(lr=cfg.lr)
    if cfg.mode == "digital":
        w, hist = training.digital_train(w, spec, task, cfg.epochs, opt,
                                         rng_mod.stream(seed, "train"),
                                         eval_every=cfg.eval_every)
        test = training.eval_loss(w, task, spec=spec)
        return RunResult(seed, hist[-1].train_loss, test, hist, w, spec, task)
    net = nets.to_analog(w, spec, devices.preset(cfg.device), cfg.slices,
                         build_converter(cfg), cfg.repeats, 0.0,
                         rng_mod.stream(seed, "program"), ir_alpha=cfg.ir_alpha)
    net, hist = training.hwa_train(net, task, cfg.epochs, opt,
                                   rng_mod.stream(seed, "train"),
                                   reprogram_every=cfg.reprogram_every,
                                   eval_every=cfg.eval_every)
    test = training.eval_loss(net, task, cfg.drift_time,
                              rng_mod.stream(seed, "eval"))
    return RunResult(seed, hist[-1].train_loss, test, hist, net, spec, task)


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _param_sweep(cfg: ExperimentConfig, name: str, values, seeds) -> list[dict]:
    cfg = resolve_defaults(cfg)
    points = [(v, s) for v in values for s in seeds]

    def job(point):
        v, s = point
        res = run_single(dataclasses.replace(cfg, **{name: v}), s)
        return {"sweep": name, "param": v, "device": cfg.device, "seed": s,
                "train_loss": res.train_loss, "test_loss": res.test_loss}

    return _pmap(job, points, cfg.workers)


def sweep_slices(cfg: ExperimentConfig, slices_list=(1, 2, 4, 8, 16),
                 seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    return _param_sweep(cfg, "slices", slices_list, seeds)


def sweep_repeats(cfg: ExperimentConfig, repeats_list=(1, 2, 4, 8, 16, 32, 64),
                  seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    return _param_sweep(cfg, "repeats", repeats_list, seeds)


def sweep_faults(cfg: ExperimentConfig, ratios=(0.01, 0.02, 0.04, 0.06, 0.08, 0.10),
                 retrain: bool = True, seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    """Each seed trains one baseline, then every ratio degrades a fresh copy."""
    cfg = resolve_defaults(cfg)
    if cfg.mode != "analog":
        raise ValueError("fault sweep needs mode=analog (faults live on tiles)")
    rows = []

    def per_seed(seed):
        base = run_single(cfg, seed)
        out = []
        for ratio in ratios:
            net = copy.deepcopy(base.net)
            for tile in net.tiles:
                crossbar.inject_tile_faults(
                    tile, ratio, rng_mod.stream(seed, "faults", ratio))
            unret = training.eval_loss(net, base.task, 0.0,
                                       rng_mod.stream(seed, "eval", ratio, 0))
            retr = None
            if retrain:
                epochs = max(1, round(cfg.retrain_frac * cfg.epochs))
                training.hwa_train(net, base.task, epochs,
                                   OptimizerConfig(lr=cfg.lr),
                                   rng_mod.stream(seed, "train", "retrain", ratio))
                retr = training.eval_loss(
                    net, base.task, 0.0, rng_mod.stream(seed, "eval", ratio, 1))
            out.append({"ratio": ratio, "device": cfg.device, "seed": seed,
                        "loss_before": base.test_loss,
                        "loss_unretrained": unret, "loss_retrained": retr})
        return out

    for chunk in _pmap(per_seed, list(seeds), cfg.workers):
        rows.extend(chunk)
    return rows


def sweep_drift(cfg: ExperimentConfig, times=(0.0, 1.0, 60.0, 3600.0, 86400.0,
                                              172800.0),
                seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    """Train once per seed, then evaluate the frozen net along the time axis."""
    cfg = resolve_defaults(cfg)
    if cfg.mode != "analog":
        raise ValueError("drift sweep needs mode=analog (drift lives on tiles)")

    def per_seed(seed):
        base = run_single(cfg, seed)
        return [{"time_s": t, "device": cfg.device, "seed": seed,
                 "loss": training.eval_loss(base.net, base.task, t,
                                            rng_mod.stream(seed, "eval", t))}
                for t in times]

    rows = []
    for chunk in _pmap(per_seed, list(seeds), cfg.workers):
        rows.extend(chunk)
    return rows


def summarize(rows: list[dict], param_key: str, value_key: str) -> list[dict]:
    """Per-parameter mean, std, median over seeds (rows with value None dropped)."""
    out = []
    for v in sorted({r[param_key] for r in rows}):
        vals = np.array([r[value_key] for r in rows
                         if r[param_key] == v and r[value_key] is not None])
        out.append({"param": v, "n": int(vals.size),
                    "mean": float(vals.mean()), "std": float(vals.std()),
                    "median": float(np.median(vals))})
    return out


def write_rows(path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for r in rows:
            out.writerow(["" if r[k] is None else
                          (repr(r[k]) if isinstance(r[k], float) else r[k])
                          for k in header])


def read_rows(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            row = {}
            for k, v in zip(header, raw):
                if v == "":
                    row[k] = None
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return header, rows


# --- sensitivity estimators -------------------------------------------------------

def _sample_inputs(n: int, d_in: int, input_box: tuple[float, float],
                   rng: np.random.Generator,
                   points: np.ndarray | None) -> np.ndarray:
    if points is None:
        return rng.uniform(input_box[0], input_box[1], size=(n, d_in))
    points = np.asarray(points, dtype=np.float64).reshape(-1, d_in)
    if len(points) <= n:
        return points
    return points[rng.choice(len(points), n, replace=False)]


def lipschitz_grad(w: MlpWeights, spec: SirenSpec, n_samples: int,
                   input_box: tuple[float, float],
                   rng: np.random.Generator,
                   points: np.ndarray | None = None) -> float:
    """Mean spectral norm of the input Jacobian over sampled inputs.

    Samples are uniform over the box, or drawn from `points` (e.g. the
    training inputs) when given. One reverse sweep per output component
    yields all sample gradients at once; the per-sample Jacobians are
    small, so exact SVD is cheap.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    d_in, d_out = spec.layer_sizes[0], spec.layer_sizes[-1]
    x = _sample_inputs(n_samples, d_in, input_box, rng, points)
    n_samples = len(x)
    tape = nd.Tape()
    x_leaf = tape.leaf(x)
    params = [tape.const(a) for pair in zip(w.weights, w.biases) for a in pair]
    pred = nets.forward_tape(tape, params, spec, x_leaf)
    jac = np.empty((n_samples, d_out, d_in))
    for k in range(d_out):
        pick = np.zeros((d_out, 1))
        pick[k, 0] = 1.0
        s = nd.reduce_sum(nd.matmul(pred, tape.const(pick)))
        jac[:, k, :] = nd.backward(s)[x_leaf.nid]
    sigma = np.linalg.svd(jac, compute_uv=False)
    return float(sigma.max(axis=1).mean())


def lipschitz_pairs(w: MlpWeights, spec: SirenSpec, n_pairs: int,
                    input_box: tuple[float, float],
                    rng: np.random.Generator,
                    points: np.ndarray | None = None) -> float:
    """Max finite-difference quotient over random input pairs.

    Pair separations are log-uniform from 1e-3 of the domain span up to the
    span itself: with only far-apart pairs the quotient is capped near
    2·sup|f| / E[distance] no matter how steep f is, so small separations
    are required for the statistic to estimate a Lipschitz constant at all.
    """
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    d_in = spec.layer_sizes[0]
    lo, hi = input_box
    a = _sample_inputs(n_pairs, d_in, input_box, rng, points)
    n_pairs = len(a)
    span = float(hi - lo)
    direction = rng.normal(size=(n_pairs, d_in))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = span * 10.0 ** rng.uniform(-3.0, 0.0, (n_pairs, 1))
    b = a + radius * direction
    if points is None:
        b = np.clip(b, lo, hi)
    dist = np.linalg.norm(a - b, axis=1)
    keep = dist > 1e-12
    fa = nets.forward_digital(w, spec, a[keep])
    fb = nets.forward_digital(w, spec, b[keep])
    num = np.linalg.norm(np.atleast_2d(fa - fb), axis=1)
    return float((num / dist[keep]).max())


@dataclass
class ProbeResult:
    slope: float | None
    degenerate: bool
    repeats: list[int]
    stds: list[float]


def noise_scaling_probe(w: np.ndarray, model: devices.DeviceModel,
                        x: np.ndarray, repeats_list, trials: int,
                        rng: np.random.Generator,
                        slices: int = 1) -> ProbeResult:
    """Fit log(std of averaged MVM output) against log(repeat count).

    Each trial reprograms a fresh tile, so programming noise varies across
    trials while temporal averaging only touches the read path. Converters
    run at the high-resolution setting to isolate device noise.
    """
    conv = ConverterSpec(dac_bits=HIGH_RES_BITS, adc_bits=HIGH_RES_BITS)
    repeats_list = list(repeats_list)
    stds = []
    scale = 0.0
    for n_rep in repeats_list:
        outs = []
        for _ in range(trials):
            tile = crossbar.map_weights(w, model, slices, 0.0, rng)
            outs.append(crossbar.analog_mvm(tile, x, conv, 0.0, n_rep, rng))
        stacked = np.stack(outs)
        scale = max(scale, float(np.abs(stacked).max()))
        stds.append(float(stacked.std(axis=0).mean()))
    if min(stds) <= 1e-12 * (1.0 + scale):  # noiseless up to float dust
        return ProbeResult(None, True, repeats_list, stds)
    slope = float(np.polyfit(np.log(repeats_list), np.log(stds), 1)[0])
    return ProbeResult(slope, False, repeats_list, stds)
