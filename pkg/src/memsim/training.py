"""Hardware-aware training and post-fault retraining.

Each step draws one consistent noisy view of the programmed tiles (the
effective weights), differentiates the task loss exactly at that view, and
applies the update to exact digital shadow weights. Tiles are reprogrammed
from the shadow on a configurable cadence. Device time is frozen at zero
during training; drift is an inference-time axis.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from memsim import crossbar, ndcore as nd, nets
from memsim.nets import AnalogNet, MlpWeights, SirenSpec

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "test_loss", "wall_ms"]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float | None
    wall_ms: float


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


def digital_predict(w: MlpWeights, spec: SirenSpec):
    return lambda x: nets.forward_digital(w, spec, x)


def analog_predict(net: AnalogNet, t: float, rng: np.random.Generator):
    return lambda x: nets.forward_analog(net, x, t, rng)


def eval_loss(net, task, t: float = 0.0,
              rng: np.random.Generator | None = None,
              spec: SirenSpec | None = None) -> float:
    """Task loss on the held-out split, analog forward at device time t."""
    if isinstance(net, AnalogNet):
        if rng is None:
            raise ValueError("analog evaluation requires an rng stream")
        predict = analog_predict(net, t, rng)
    else:
        if spec is None:
            raise ValueError("digital evaluation requires the network spec")
        predict = digital_predict(net, spec)
    return task.eval_loss(predict)


def _leaves(tape: nd.Tape, weights: list[np.ndarray], biases: list[np.ndarray]):
    return [tape.leaf(a) for pair in zip(weights, biases) for a in pair]


def _step(task, spec, weights, biases, epoch, task_rng):
    tape = nd.Tape()
    params = _leaves(tape, weights, biases)
    try:
        loss = task.train_loss(tape, params, spec, epoch, task_rng)
    except nd.NonFiniteError as err:
        raise TrainingDiverged(f"non-finite value in epoch {epoch}: {err}") from err
    lv = float(loss.data)
    if not np.isfinite(lv):
        raise TrainingDiverged(f"non-finite loss {lv!r} in epoch {epoch}")
    grads = nd.backward(loss)
    return lv, [grads[p.nid] for p in params]


def hwa_train(net: AnalogNet, task, epochs: int, opt: OptimizerConfig,
              rng: np.random.Generator, reprogram_every: int = 1,
              eval_every: int | None = None,
              t_train: float = 0.0) -> tuple[AnalogNet, list[EpochRecord]]:
    """Train through the analog stack; returns the net and per-epoch records.

    Gradients are exact at the step's effective weights; the optimizer state
    lives on the shadow weights. Stuck devices silently ignore reprogramming,
    which is what lets retraining reroute function around them.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if reprogram_every < 1:
        raise ValueError("reprogram_every must be >= 1")
    read_rng, prog_rng, task_rng, eval_rng = rng.spawn(4)
    state = nd.AdamState()
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        w_eff = nets.effective_weights(net, t_train, read_rng)
        lv, grads = _step(task, net.spec, w_eff, net.shadow.biases, epoch, task_rng)
        new_flat = nd.adam_step(net.shadow.flat(), grads, state, lr=opt.lr,
                                beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        net.shadow = MlpWeights.from_flat(new_flat)
        if (epoch + 1) % reprogram_every == 0:
            nets.reprogram_net(net, t_train, prog_rng)
        test = None
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == epochs - 1):
            test = eval_loss(net, task, t_train, eval_rng)
        history.append(EpochRecord(epoch, lv,
                                   test, (time.perf_counter() - t0) * 1e3))
    return net, history


def digital_train(w: MlpWeights, spec: SirenSpec, task, epochs: int,
                  opt: OptimizerConfig, rng: np.random.Generator,
                  eval_every: int | None = None
                  ) -> tuple[MlpWeights, list[EpochRecord]]:
    """Noise-free reference loop with the same optimizer and task plumbing."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    _, _, task_rng, _ = rng.spawn(4)  # mirror hwa_train's stream layout
    state = nd.AdamState()
    history: list[EpochRecord] = []
    w = w.copy()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lv, grads = _step(task, spec, w.weights, w.biases, epoch, task_rng)
        new_flat = nd.adam_step(w.flat(), grads, state, lr=opt.lr,
                                beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        w = MlpWeights.from_flat(new_flat)
        test = None
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == epochs - 1):
            test = eval_loss(w, task, spec=spec)
        history.append(EpochRecord(epoch, lv,
                                   test, (time.perf_counter() - t0) * 1e3))
    return w, history


def retrain_after_faults(net: AnalogNet, ratio: float, task, epochs: int,
                         opt: OptimizerConfig, rng: np.random.Generator,
                         retrain_frac: float = 0.25
                         ) -> tuple[float, float, float]:
    """Degrade every tile with stuck devices, then retrain in place.

    `epochs` is the original training budget; retraining runs
    max(1, round(retrain_frac * epochs)) epochs (budget fraction is a
    documented choice, not a measured constant). Returns evaluation losses
    (before, unretrained, retrained) at device time zero.
    """
    fault_rng, train_rng, e0, e1, e2 = rng.spawn(5)
    loss_before = eval_loss(net, task, 0.0, e0)
    for tile in net.tiles:
        crossbar.inject_tile_faults(tile, ratio, fault_rng)
    loss_unretrained = eval_loss(net, task, 0.0, e1)
    retrain_epochs = max(1, round(retrain_frac * epochs))
    hwa_train(net, task, retrain_epochs, opt, train_rng)
    loss_retrained = eval_loss(net, task, 0.0, e2)
    return loss_before, loss_unretrained, loss_retrained


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(HISTORY_HEADER)
        for rec in history:
            out.writerow([rec.epoch, repr(rec.train_loss),
                          "" if rec.test_loss is None else repr(rec.test_loss),
                          repr(rec.wall_ms)])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HISTORY_HEADER:
            raise ValueError(f"bad history header {header}")
        out = []
        for row in reader:
            out.append(EpochRecord(int(row[0]), float(row[1]),
                                   float(row[2]) if row[2] else None,
                                   float(row[3])))
        return out
