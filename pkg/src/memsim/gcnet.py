"""Guidance-and-control regression task on a double-integrator surrogate.

The plant is a 3-axis double integrator steered to rest at the origin in a
fixed time-to-go tau. The energy-optimal feedback has the closed form
u = -(6/tau^2) p - (4/tau) v per axis, which a two-point-BVP shooting oracle
verifies in the tests. Datasets hold (p, v, tau) -> u pairs sampled along
optimal transfers, so the network sees every time-to-go it will encounter in
closed loop and no label ever exceeds the actuator bound for the default
sampling box.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from memsim import ndcore as nd, nets, rng as rng_mod
from memsim.nets import AnalogNet, MlpWeights, SirenSpec

log = logging.getLogger(__name__)

CSV_HEADER = ["px", "py", "pz", "vx", "vy", "vz", "tau", "ux", "uy", "uz"]
TRAJECTORY_HEADER = ["t", "px", "py", "pz", "vx", "vy", "vz", "ux", "uy", "uz",
                     "theta", "phi"]

# Fixed split-hash seed: the 80/20 assignment is a pure function of row index.
SPLIT_SEED = 20


def _split_mask(n: int, seed: int = SPLIT_SEED) -> np.ndarray:
    return rng_mod.hash_split_mask(n, seed)


@dataclass
class StateActionDataset:
    """Rows of (position, velocity, time_to_go) -> thrust, with split tags."""

    states: np.ndarray   # (n, 7): px py pz vx vy vz tau
    actions: np.ndarray  # (n, 3), each component in [-1, 1]
    is_test: np.ndarray  # (n,) bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 7)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, 3)
        if self.states.shape[0] != self.actions.shape[0]:
            raise ValueError("states/actions row counts differ")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise ValueError("dataset contains non-finite values")
        if self.states.shape[0] and np.any(self.states[:, 6] <= 0.0):
            raise ValueError("time_to_go must be > 0")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.is_test if part == "test" else ~self.is_test
        return self.states[mask], self.actions[mask]


def optimal_feedback(p: np.ndarray, v: np.ndarray, tau) -> np.ndarray:
    """Energy-optimal rest-to-origin feedback, unclipped: -(6/tau^2)p - (4/tau)v."""
    tau = np.maximum(np.asarray(tau, dtype=np.float64), 1e-12)
    if np.ndim(tau) and tau.shape != np.shape(p)[:-1]:
        raise ValueError("tau shape mismatch")
    t = tau[..., None] if np.ndim(tau) else tau
    with np.errstate(over="ignore"):
        return -(6.0 / t ** 2) * p - (4.0 / t) * v


def _transfer_coeffs(p0: np.ndarray, v0: np.ndarray, tf: np.ndarray):
    # u(t) = a t + b along the optimal transfer; closed-form from the BVP.
    tf = tf[..., None]
    b = -6.0 * p0 / tf ** 2 - 4.0 * v0 / tf
    a = (6.0 * v0 + 12.0 * p0 / tf[..., 0][..., None]) / tf ** 2
    return a, b


def _transfer_state(p0, v0, tf, a, b, t):
    t = t[..., None]
    v = v0 + b * t + 0.5 * a * t ** 2
    p = p0 + v0 * t + 0.5 * b * t ** 2 + a * t ** 3 / 6.0
    return p, v


def synth_dataset(n: int, tf_range: tuple[float, float],
                  state_box: tuple[float, float],
                  rng: np.random.Generator) -> StateActionDataset:
    """Generate n labeled pairs along energy-optimal transfers.

    Transfer starts are drawn uniformly: positions in +-state_box[0],
    velocities in +-state_box[1], final times in tf_range. Each row is the
    state at a uniform fraction of its transfer (so time_to_go covers (0, tf])
    labeled with the optimal feedback, clipped to the actuator box [-1, 1].
    Label validity is spot-checked on up to 100 rows per generation by
    integrating the policy to the terminal state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    t_lo, t_hi = tf_range
    if not 0.0 < t_lo <= t_hi:
        raise ValueError("tf_range must satisfy 0 < t_lo <= t_hi")
    p0 = rng.uniform(-state_box[0], state_box[0], size=(n, 3))
    v0 = rng.uniform(-state_box[1], state_box[1], size=(n, 3))
    tf = rng.uniform(t_lo, t_hi, size=n)
    frac = rng.uniform(0.0, 0.95, size=n)
    a, b = _transfer_coeffs(p0, v0, tf)
    p, v = _transfer_state(p0, v0, tf, a, b, frac * tf)
    tau = (1.0 - frac) * tf
    u = np.clip(optimal_feedback(p, v, tau), -1.0, 1.0)
    states = np.concatenate([p, v, tau[:, None]], axis=1)
    data = StateActionDataset(states, u, _split_mask(n))
    _spot_check_labels(data, rng)
    return data


def _spot_check_labels(data: StateActionDataset, rng: np.random.Generator,
                       n_check: int = 100, tol: float = 1e-3) -> None:
    # Integrate the optimal policy from sampled rows; all must reach rest.
    k = min(n_check, data.n)
    idx = rng.choice(data.n, size=k, replace=False)
    p = data.states[idx, 0:3].copy()
    v = data.states[idx, 3:6].copy()
    tau = data.states[idx, 6].copy()
    horizon = float(tau.max())
    dt = 2e-3
    steps = int(math.ceil(horizon / dt))
    t = 0.0
    for _ in range(steps):
        rem = np.maximum(tau - t, 0.0)
        h = min(dt, float(rem.max()))
        if h <= 0.0:
            break
        active = rem > 0.0
        hs = np.where(active, np.minimum(rem, h), 0.0)[:, None]

        def f(ps, vs, off):
            tq = np.maximum(tau - (t + off[:, 0]), np.maximum(hs[:, 0], 1e-9))[:, None]
            u = np.clip(-(6.0 / tq ** 2) * ps - (4.0 / tq) * vs, -1.0, 1.0)
            return vs, u

        z = np.zeros_like(hs)
        k1p, k1v = f(p, v, z)
        k2p, k2v = f(p + 0.5 * hs * k1p, v + 0.5 * hs * k1v, 0.5 * hs)
        k3p, k3v = f(p + 0.5 * hs * k2p, v + 0.5 * hs * k2v, 0.5 * hs)
        k4p, k4v = f(p + hs * k3p, v + hs * k3v, hs)
        p = p + hs / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v = v + hs / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        t += h
    perr = np.linalg.norm(p, axis=1).max()
    verr = np.linalg.norm(v, axis=1).max()
    if max(perr, verr) >= tol:
        raise AssertionError(
            f"label spot-check failed: terminal position {perr:.2e}, velocity {verr:.2e}")


def save_dataset(path, data: StateActionDataset) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for s, u in zip(data.states, data.actions):
            out.writerow([repr(float(x)) for x in (*s, *u)])


def load_dataset(path) -> StateActionDataset:
    """Parse a state-action CSV; schema errors name the offending row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("dataset file is empty (missing header)") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise ValueError(f"bad header {header}, expected {CSV_HEADER}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"row {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise ValueError(f"row {lineno}: non-numeric field") from None
    if not rows:
        return StateActionDataset(np.empty((0, 7)), np.empty((0, 3)), np.empty(0, bool))
    arr = np.array(rows)
    return StateActionDataset(arr[:, :7], arr[:, 7:], _split_mask(arr.shape[0]))


def gcnet_loss(pred: np.ndarray, actions: np.ndarray) -> float:
    """Mean squared error over thrust components."""
    pred = np.asarray(pred, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if pred.shape != actions.shape or pred.size == 0:
        raise ValueError("prediction/label shape mismatch or empty batch")
    return float(np.mean((pred - actions) ** 2))


class GcnetTask:
    """Training adapter: full-batch MSE on the train split, MSE eval on test.

    Network inputs are the raw states with time_to_go scaled by tau_scale so
    every input component fits the unit DAC range.
    """

    input_dim = 7
    output_dim = 3

    def __init__(self, data: StateActionDataset, tau_scale: float):
        if data.n == 0:
            raise ValueError("empty dataset")
        self.data = data
        self.tau_scale = float(tau_scale)
        self._train_x, self._train_u = data.split("train")
        self._test_x, self._test_u = data.split("test")

    def net_inputs(self, states: np.ndarray) -> np.ndarray:
        x = np.array(states, dtype=np.float64, copy=True)
        x[..., 6] /= self.tau_scale
        return x

    def train_loss(self, tape: nd.Tape, params: list[nd.Tensor], spec: SirenSpec,
                   epoch: int, rng: np.random.Generator) -> nd.Tensor:
        del epoch, rng  # full-batch, no per-epoch sampling
        pred = nets.forward_tape(tape, params, spec, self.net_inputs(self._train_x))
        err = nd.sub(pred, tape.const(self._train_u))
        return nd.reduce_mean(nd.square(err))

    def eval_loss(self, predict: Callable[[np.ndarray], np.ndarray]) -> float:
        return gcnet_loss(predict(self.net_inputs(self._test_x)), self._test_u)


# --- closed-loop rollout -------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    completed: bool

    @property
    def terminal_position_error(self) -> float:
        return float(np.linalg.norm(self.p[-1]))

    @property
    def terminal_velocity_error(self) -> float:
        return float(np.linalg.norm(self.v[-1]))


def optimal_policy() -> Callable:
    return lambda p, v, tau: optimal_feedback(p, v, tau)


def net_policy(net, spec: SirenSpec | None = None, mode: str = "digital",
               t_device: float = 0.0, rng: np.random.Generator | None = None,
               tau_scale: float = 1.0) -> Callable:
    """Wrap a network (MlpWeights + spec, or AnalogNet) as a feedback policy."""
    if isinstance(net, AnalogNet):
        if mode == "digital":
            weights, sp = net.shadow, net.spec
        else:
            if rng is None:
                raise ValueError("analog policy requires an rng stream")

            def analog(p, v, tau):
                x = np.concatenate([p, v, [tau / tau_scale]])
                return nets.forward_analog(net, x, t_device, rng)

            return analog
    elif isinstance(net, MlpWeights):
        if spec is None:
            raise ValueError("MlpWeights policy requires a SirenSpec")
        weights, sp = net, spec
    else:
        return net  # already a callable policy

    def digital(p, v, tau):
        x = np.concatenate([p, v, [tau / tau_scale]])
        return nets.forward_digital(weights, sp, x)

    return digital


def rollout(policy: Callable, x0: np.ndarray, dt: float) -> Trajectory:
    """Integrate the closed loop with RK4 until time_to_go reaches zero.

    The commanded thrust is the policy output clipped to [-1, 1]. Policy
    queries floor the remaining time at the current step size so terminal
    gain blowup cannot produce non-finite controls; if the state still goes
    non-finite the rollout aborts and returns the trajectory so far.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    x0 = np.asarray(x0, dtype=np.float64)
    p, v, tau0 = x0[0:3].copy(), x0[3:6].copy(), float(x0[6])
    t = 0.0
    ts, ps, vs, us = [], [], [], []
    completed = True
    while tau0 - t > 1e-12:
        h = min(dt, tau0 - t)

        def f(ps_, vs_, off):
            tq = max(tau0 - (t + off), h)
            u_ = np.clip(np.asarray(policy(ps_, vs_, tq), dtype=np.float64), -1.0, 1.0)
            return vs_, u_

        k1p, k1v = f(p, v, 0.0)
        ts.append(t)
        ps.append(p.copy())
        vs.append(v.copy())
        us.append(k1v)  # k1v is the thrust commanded at the step start
        k2p, k2v = f(p + 0.5 * h * k1p, v + 0.5 * h * k1v, 0.5 * h)
        k3p, k3v = f(p + 0.5 * h * k2p, v + 0.5 * h * k2v, 0.5 * h)
        k4p, k4v = f(p + h * k3p, v + h * k3v, h)
        p_new = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v_new = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(v_new))):
            log.warning("rollout aborted at t=%.4f: non-finite state", t + h)
            completed = False
            break
        p, v = p_new, v_new
        t += h
    if completed:
        ts.append(t)
        ps.append(p.copy())
        vs.append(v.copy())
        us.append(us[-1] if us else np.zeros(3))
    u = np.array(us)
    theta = np.arctan2(np.hypot(u[:, 0], u[:, 1]), u[:, 2])
    phi = np.arctan2(u[:, 1], u[:, 0])
    return Trajectory(np.array(ts), np.array(ps), np.array(vs), u, theta, phi,
                      completed)


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRAJECTORY_HEADER)
        for i in range(traj.t.size):
            row = [traj.t[i], *traj.p[i], *traj.v[i], *traj.u[i],
                   traj.theta[i], traj.phi[i]]
            out.writerow([repr(float(x)) for x in row])
