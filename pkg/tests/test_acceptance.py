"""End-to-end property gates for the whole simulator.

Each test prints one `ACCEPTANCE nn <name>: PASS|FAIL (...)` line so a
`pytest -s` run doubles as a sign-off report. Tests that train real
networks are marked slow; `pytest -m "not slow"` keeps only the cheap ones.

Budgets and tolerances are fixed here on purpose: loosening them to make a
red property green defeats the point of the gate.
"""
from __future__ import annotations

import copy

import numpy as np
import pytest
import yaml

from memsim import analysis, cli, crossbar, devices, gcnet, geodesy
from memsim import ndcore as nd
from memsim import nets, rng as rng_mod, training
from memsim.config import ExperimentConfig, resolve_defaults
from memsim.crossbar import HIGH_RES_BITS, ConverterSpec
from memsim.training import OptimizerConfig

GC_DESK = dict(task="gcnet", epochs=1000)
GEO_DESK = dict(task="geodesy-eroslite", epochs=1000)
SEEDS = (0, 1, 2, 3, 4)


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"acceptance {num:02d} {name}: {detail}"


def _median(values) -> float:
    return float(np.median(values))


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def geo_grid():
    """PCM eros-lite mitigation grid + digital baselines, 5 seeds each."""
    grid = {}
    for slices, repeats in [(1, 1), (4, 1), (4, 4), (4, 16)]:
        cfg = ExperimentConfig("train", mode="analog", device="pcm",
                               slices=slices, repeats=repeats, **GEO_DESK)
        grid[(slices, repeats)] = [analysis.run_single(cfg, s) for s in SEEDS]
    dig_cfg = ExperimentConfig("train", mode="digital", **GEO_DESK)
    grid["digital"] = [analysis.run_single(dig_cfg, s) for s in SEEDS]
    return grid


@pytest.fixture(scope="module")
def gc_rram():
    cfg = ExperimentConfig("train", mode="analog", device="rram",
                           slices=4, repeats=64, **GC_DESK)
    return [analysis.run_single(cfg, s) for s in SEEDS]


@pytest.fixture(scope="module")
def gc_pcm():
    cfg = ExperimentConfig("train", mode="analog", device="pcm",
                           slices=4, repeats=64, **GC_DESK)
    return [analysis.run_single(cfg, s) for s in SEEDS]


@pytest.fixture(scope="module")
def gc_digital():
    cfg = ExperimentConfig("train", mode="digital", **GC_DESK)
    return [analysis.run_single(cfg, s) for s in SEEDS]


@pytest.fixture(scope="module")
def omega_nets():
    """Digital control nets trained at four frequency scales, one seed."""
    cfg = ExperimentConfig("train", mode="digital", **GC_DESK)
    return {w: analysis.run_single(cfg, 0, omega0=w)
            for w in (0.01, 0.1, 1.0, 30.0)}


def _task_and_spec(task_name: str, seed: int = 0):
    cfg = resolve_defaults(ExperimentConfig("train", task=task_name))
    task = analysis.build_task(cfg, seed)
    spec = analysis.build_spec(cfg, task, seed)
    return task, spec


# ---------------------------------------------------------------- criteria

def test_01_gradient_correctness():
    """Tape gradients vs central differences on both task networks."""
    worst = 0.0
    for task_name, n_in in (("gcnet", 64), ("geodesy-eroslite", 200)):
        task, spec = _task_and_spec(task_name)
        w = nets.init_siren(spec, rng_mod.stream(11, "acc1-init"))
        rng = rng_mod.stream(12, "acc1")
        if task_name == "gcnet":
            x = task.net_inputs(task.data.states[:n_in])
        else:
            x = geodesy.quadrature_points(n_in, rng)

        def scalar(weights: nets.MlpWeights) -> float:
            out = nets.forward_digital(weights, spec, x)
            return float(np.mean(out * out))

        tape = nd.Tape()
        params = [tape.leaf(a) for pair in zip(w.weights, w.biases) for a in pair]
        out = nets.forward_tape(tape, params, spec, x)
        loss = nd.reduce_mean(nd.square(out))
        grads = nd.backward(loss)
        grad_mats = [grads[p.nid] for p in params[0::2]]

        for _ in range(100):
            li = int(rng.integers(len(w.weights)))
            r = int(rng.integers(w.weights[li].shape[0]))
            c = int(rng.integers(w.weights[li].shape[1]))
            h = 1e-6 * max(1.0, abs(w.weights[li][r, c]))
            wp, wm = w.copy(), w.copy()
            wp.weights[li][r, c] += h
            wm.weights[li][r, c] -= h
            fd = (scalar(wp) - scalar(wm)) / (2 * h)
            an = grad_mats[li][r, c]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
            worst = max(worst, rel)
    _report(1, "gradient-correctness", worst < 1e-4,
            f"max rel err {worst:.2e} over 100 weights per task net")


def test_02_degenerate_limit():
    """All non-idealities off + wide converters: analog == digital."""
    task, spec = _task_and_spec("gcnet")
    w = nets.init_siren(spec, rng_mod.stream(21, "acc2-init"))
    conv = ConverterSpec(dac_bits=HIGH_RES_BITS, adc_bits=HIGH_RES_BITS)
    net = nets.to_analog(w, spec, devices.preset("ideal"), 1, conv, 1, 0.0,
                         rng_mod.stream(22, "acc2-prog"))

    x = rng_mod.stream(23, "acc2-x").uniform(-0.9, 0.9, (128, spec.layer_sizes[0]))
    y_dig = nets.forward_digital(w, spec, x)
    y_ana = nets.forward_analog(net, x, 0.0, rng_mod.stream(24, "acc2-read"))
    # Relative to the output scale: per-element division blows up on the
    # zero crossings of a sine network regardless of converter resolution.
    fwd_rel = float(np.max(np.abs(y_ana - y_dig)) / np.max(np.abs(y_dig)))

    opt = OptimizerConfig(lr=1e-3)
    _, hist_d = training.digital_train(w, spec, task, 50, opt,
                                       rng_mod.stream(25, "acc2-train"))
    _, hist_a = training.hwa_train(net, task, 50, opt,
                                   rng_mod.stream(25, "acc2-train"))
    step_diff = max(abs(a.train_loss - d.train_loss)
                    for a, d in zip(hist_a, hist_d))
    ok = fwd_rel < 1e-6 and step_diff < 1e-6
    _report(2, "degenerate-limit", ok,
            f"forward rel {fwd_rel:.2e}, worst per-step loss diff {step_diff:.2e}")


def test_03_quantization_bound():
    """DAC(7)/ADC(9) only: per-output error within the analytic bound."""
    conv = ConverterSpec()  # 7/9 bits, clips 1.0 / 10.0
    dac_half = conv.input_clip / (2 ** conv.dac_bits - 2)
    adc_half = conv.output_clip / (2 ** conv.adc_bits - 2)
    model = devices.preset("ideal")
    rng = rng_mod.stream(31, "acc3")
    violations = 0
    worst_margin = np.inf
    for _ in range(10_000):
        rows = int(rng.integers(4, 17))
        cols = int(rng.integers(1, 9))
        w = rng.uniform(-0.5, 0.5, (rows, cols))
        x = rng.uniform(-1.0, 1.0, rows)
        tile = crossbar.map_weights(w, model, 1, 0.0, rng)
        y = crossbar.analog_mvm(tile, x, conv, 0.0, 1, rng)
        bound = dac_half * np.sum(np.abs(w), axis=0) + adc_half + 1e-12
        err = np.abs(y - x @ w)
        violations += int(np.sum(err > bound))
        worst_margin = min(worst_margin, float(np.min(bound - err)))
    _report(3, "quantization-bound", violations == 0,
            f"{violations} violations in 1e4 instances, min margin {worst_margin:.2e}")


def test_04_averaging_law():
    """Output std vs repeats: -1/2 slope for read noise, flat for programming."""
    rng = rng_mod.stream(41, "acc4")
    w = rng.uniform(-0.5, 0.5, (24, 8))
    x = rng.uniform(-1.0, 1.0, 24)
    read_only = devices.DeviceModel("read-only", 0.0, 1.0, 0.0, 0.02, 0.0, 0.0)
    prog_only = devices.DeviceModel("prog-only", 0.0, 1.0, 0.03, 0.0, 0.0, 0.0)
    reps = (1, 2, 4, 8, 16, 32)
    pr = analysis.noise_scaling_probe(w, read_only, x, reps, 200,
                                      rng_mod.stream(42, "acc4-read"))
    pp = analysis.noise_scaling_probe(w, prog_only, x, reps, 200,
                                      rng_mod.stream(43, "acc4-prog"))
    ok = (not pr.degenerate and abs(pr.slope + 0.5) <= 0.1
          and not pp.degenerate and abs(pp.slope) < 0.1)
    _report(4, "temporal-averaging-law", ok,
            f"read slope {pr.slope:.3f} (want -0.5 +/- 0.1), "
            f"program slope {pp.slope:.3f} (want |s| < 0.1)")


def test_05_slicing_law():
    """Decoded-weight error shrinks like 1/sqrt(K)."""
    model = devices.preset("pcm")
    w = rng_mod.stream(51, "acc5-w").uniform(-1.0, 1.0, (100, 100))
    sigma = {}
    for k in (1, 2, 4, 8, 16):
        tile = crossbar.map_weights(w, model, k, 0.0,
                                    rng_mod.stream(52, "acc5-prog", k))
        dec = crossbar.decode_weights(tile, 0.0, rng_mod.stream(53, "acc5-read", k))
        sigma[k] = float(np.std(dec - w))
    detail = []
    ok = True
    for k in (2, 4, 8, 16):
        ratio = sigma[k] / sigma[1]
        want = 1.0 / np.sqrt(k)
        ok = ok and abs(ratio - want) <= 0.25 * want
        detail.append(f"K={k}: {ratio:.3f} vs {want:.3f}")
    _report(5, "bit-slicing-law", ok, "; ".join(detail) + " (tol 25%)")


@pytest.mark.slow
def test_06_geodesy_mitigation_ordering(geo_grid):
    med = {key: _median([r.test_loss for r in runs])
           for key, runs in geo_grid.items()}
    dig = med["digital"]
    order = [med[(1, 1)], med[(4, 1)], med[(4, 4)], med[(4, 16)]]
    strictly = all(a > b for a, b in zip(order, order[1:]))
    r11 = med[(1, 1)] / dig
    r416 = med[(4, 16)] / dig
    ok = strictly and r11 >= 5.0 and r416 <= 3.0
    _report(6, "geodesy-mitigation-ordering", ok,
            f"medians {[f'{v:.4f}' for v in order]}, digital {dig:.4f}; "
            f"ordering {strictly}, unmitigated ratio {r11:.2f} (need >= 5), "
            f"mitigated ratio {r416:.2f} (need <= 3)")


@pytest.mark.slow
def test_07_fault_retraining(geo_grid, gc_rram):
    results = {}
    for label, runs, epochs, lr in (("gcnet", gc_rram, 1000, 1e-3),
                                    ("geodesy", geo_grid[(4, 16)], 1000, 1e-4)):
        before, unret, retr = [], [], []
        for seed, run in zip(SEEDS, runs):
            net = copy.deepcopy(run.net)
            b, u, r = training.retrain_after_faults(
                net, 0.10, run.task, epochs, OptimizerConfig(lr=lr),
                rng_mod.stream(seed, "acc7", label))
            before.append(b)
            unret.append(u)
            retr.append(r)
        results[label] = (_median(before), _median(unret), _median(retr))
    ok = all(retr < unret for _, unret, retr in results.values())
    geo_before, _, geo_retr = results["geodesy"]
    ok = ok and geo_retr <= 2.0 * geo_before
    detail = "; ".join(
        f"{k}: before {b:.4f} faulted {u:.4f} retrained {r:.4f}"
        for k, (b, u, r) in results.items())
    _report(7, "fault-retraining", ok,
            detail + f"; geodesy retrained/fault-free {geo_retr / geo_before:.2f} (need <= 2)")


@pytest.mark.slow
def test_08_drift_monotonicity(gc_pcm, gc_rram):
    times = (0.0, 1.0, 3600.0, 86400.0, 172800.0)

    def curve(runs):
        med = []
        for t in times:
            losses = [training.eval_loss(run.net, run.task, t,
                                         rng_mod.stream(seed, "acc8"))
                      for seed, run in zip(SEEDS, runs)]
            med.append(_median(losses))
        return med

    pcm = curve(gc_pcm)
    rram = curve(gc_rram)
    nondec = all(b >= a for a, b in zip(pcm, pcm[1:]))
    crossed = rram[3] <= pcm[3]
    ok = nondec and crossed
    _report(8, "drift-monotonicity", ok,
            f"pcm medians {[f'{v:.4f}' for v in pcm]} non-decreasing {nondec}; "
            f"rram@86400 {rram[3]:.4f} <= pcm@86400 {pcm[3]:.4f}: {crossed}")


@pytest.mark.slow
def test_09_lipschitz_frequency_study(omega_nets):
    order = (0.01, 0.1, 1.0, 30.0)
    task = omega_nets[order[0]].task
    anchors = task.net_inputs(task.data.states)
    grad_est, pair_est = [], []
    for w0 in order:
        run = omega_nets[w0]
        grad_est.append(analysis.lipschitz_grad(
            run.net, run.spec, 1000, (-1.0, 1.0), rng_mod.stream(91, "acc9-g"),
            points=anchors))
        pair_est.append(analysis.lipschitz_pairs(
            run.net, run.spec, 1600, (-1.0, 1.0), rng_mod.stream(92, "acc9-p"),
            points=anchors))
    mono_g = all(a < b for a, b in zip(grad_est, grad_est[1:]))
    mono_p = all(a < b for a, b in zip(pair_est, pair_est[1:]))

    def drift_increase(w0):
        run = omega_nets[w0]
        incs = []
        for ps in range(5):
            net = nets.to_analog(run.net, run.spec, devices.preset("pcm"), 1,
                                 ConverterSpec(output_clip=5.0), 1, 0.0,
                                 rng_mod.stream(ps, "acc9-prog"))
            l0 = training.eval_loss(net, run.task, 0.0, rng_mod.stream(ps, "acc9-e"))
            l1 = training.eval_loss(net, run.task, 86400.0,
                                    rng_mod.stream(ps, "acc9-e"))
            incs.append(l1 - l0)
        return _median(incs)

    inc_low, inc_high = drift_increase(0.01), drift_increase(30.0)
    inversion = inc_low < inc_high
    ok = mono_g and mono_p and inversion
    _report(9, "lipschitz-frequency-study", ok,
            f"grad {[f'{v:.3g}' for v in grad_est]} mono {mono_g}; "
            f"pairs {[f'{v:.3g}' for v in pair_est]} mono {mono_p}; "
            f"drift inc omega 0.01 {inc_low:.4f} < omega 30 {inc_high:.4f}: {inversion}")


def _batched_feedback_rollout(states: np.ndarray, dt: float) -> np.ndarray:
    """RK4-integrate every row under the clipped optimal feedback; returns
    terminal [p, v] magnitudes stacked as (n, 2)."""
    p = states[:, 0:3].copy()
    v = states[:, 3:6].copy()
    tau0 = states[:, 6].copy()
    t = 0.0
    horizon = float(np.max(tau0))
    while t < horizon - 1e-12:
        h = min(dt, horizon - t)
        active = tau0 - t > 1e-12

        def accel(pp, vv, off):
            tq = np.maximum(tau0 - (t + off), h)
            u = gcnet.optimal_feedback(pp, vv, tq)
            return np.clip(u, -1.0, 1.0)

        k1v = accel(p, v, 0.0)
        k1p = v
        k2v = accel(p + 0.5 * h * k1p, v + 0.5 * h * k1v, 0.5 * h)
        k2p = v + 0.5 * h * k1v
        k3v = accel(p + 0.5 * h * k2p, v + 0.5 * h * k2v, 0.5 * h)
        k3p = v + 0.5 * h * k2v
        k4v = accel(p + h * k3p, v + h * k3v, h)
        k4p = v + h * k3v
        dp = (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        dv = (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        p[active] += dp[active]
        v[active] += dv[active]
        t += h
    return np.column_stack([np.linalg.norm(p, axis=1),
                            np.linalg.norm(v, axis=1)])


@pytest.mark.slow
def test_10_control_task_sanity(gc_digital, gc_rram):
    task = gc_digital[0].task
    rows = task.data.states[:100]
    term = _batched_feedback_rollout(rows, 1e-3)
    label_err = float(np.max(term))

    starts_rng = rng_mod.stream(101, "acc10-starts")
    starts = []
    for _ in range(20):
        p0 = starts_rng.uniform(-0.3, 0.3, 3)
        v0 = starts_rng.uniform(-0.3, 0.3, 3)
        tf = starts_rng.uniform(2.5, 4.0)
        starts.append(np.concatenate([p0, v0, [tf]]))

    def closed_loop(policy):
        errs = []
        for x0 in starts:
            traj = gcnet.rollout(policy, x0, 0.05)
            assert traj.completed
            errs.append(traj.terminal_position_error)
        return _median(errs)

    opt_err = closed_loop(gcnet.optimal_policy())
    # The feedback law self-corrects to integration precision, so the net is
    # held to 10x the oracle's certified 1e-3 bound, not 10x that incidental
    # near-zero measurement.
    opt_bound = max(opt_err, 1e-3)
    net_err = _median([closed_loop(gcnet.net_policy(run.net, spec=run.spec,
                                                    tau_scale=task.tau_scale))
                       for run in gc_digital])

    ana = gc_rram[0]
    ana_policy = gcnet.net_policy(ana.net, mode="analog",
                                  rng=rng_mod.stream(102, "acc10-read"),
                                  tau_scale=ana.task.tau_scale)
    ana_traj = gcnet.rollout(ana_policy, starts[0], 0.05)
    mse_ana = _median([r.test_loss for r in gc_rram])
    mse_dig = _median([r.test_loss for r in gc_digital])

    ok = (label_err < 1e-3 and net_err < 10.0 * opt_bound
          and ana_traj.completed and mse_ana <= 5.0 * mse_dig)
    _report(10, "control-task-sanity", ok,
            f"label oracle max terminal {label_err:.2e} (need < 1e-3); "
            f"closed-loop median: net {net_err:.4f} vs optimal bound {opt_bound:.4f} "
            f"measured {opt_err:.2e} (need < 10x bound); analog rollout completed "
            f"{ana_traj.completed}, analog/digital MSE {mse_ana / mse_dig:.2f} (need <= 5)")


@pytest.mark.slow
def test_11_determinism(tmp_path):
    cfg = dict(experiment="rollout", task="gcnet", mode="analog",
               device="rram", slices=1, repeats=4, epochs=40, n_train=256,
               seed=7, workers=1)
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))

    outs = []
    for sub in ("a", "b"):
        root = tmp_path / sub
        code = cli.main(["run", str(cfg_path), "--artifact-dir", str(root)])
        assert code == 0
        (run_dir,) = list(root.iterdir())
        outs.append(run_dir)

    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    byte_equal = {}
    for name in csvs:
        if name == "history.csv":
            continue  # wall-clock column; covered by the stable manifest hash
        byte_equal[name] = ((outs[0] / name).read_bytes()
                            == (outs[1] / name).read_bytes())
    import json
    man_a = json.loads((outs[0] / "manifest.json").read_text())
    man_b = json.loads((outs[1] / "manifest.json").read_text())
    hashes_equal = man_a["artifacts"] == man_b["artifacts"]
    ok = all(byte_equal.values()) and hashes_equal and len(byte_equal) >= 1
    _report(11, "determinism", ok,
            f"byte-identical: {byte_equal}; manifest hashes equal: {hashes_equal}")
