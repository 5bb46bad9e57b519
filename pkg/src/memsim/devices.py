"""Behavioral model of memristive devices: program, drift, read, stick.

Conductances are normalized so presets use g_max = 1.0. All stochastic ops
take an explicit generator; draw order inside each op is fixed and documented
so runs are reproducible draw-for-draw.

Device populations are held as parallel arrays (struct-of-arrays) because a
crossbar tile owns tens of thousands of devices and per-object state would
dominate the simulation cost. A single device is just a size-1 array.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DeviceModel:
    """Technology parameters shared by every device of one kind.

    Parameters
    ----------
    g_min, g_max : float
        Conductance range in normalized units, 0 <= g_min < g_max.
    prog_noise_frac : float
        Programming noise sigma as a fraction of the target conductance.
    read_noise_frac : float
        Read noise sigma as a fraction of the momentary stored conductance.
    drift_nu_mean, drift_nu_std : float
        Distribution of the per-device drift exponent, sampled at programming.
    drift_t0 : float
        Reference time in seconds; no decay is applied before t0 elapses.
    """

    name: str
    g_min: float
    g_max: float
    prog_noise_frac: float
    read_noise_frac: float
    drift_nu_mean: float
    drift_nu_std: float
    drift_t0: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.g_min < self.g_max:
            raise ValueError(f"require 0 <= g_min < g_max, got [{self.g_min}, {self.g_max}]")
        if min(self.prog_noise_frac, self.read_noise_frac) < 0.0:
            raise ValueError("noise fractions must be >= 0")
        if self.drift_t0 <= 0.0:
            raise ValueError("drift_t0 must be > 0")


PRESETS = {
    "pcm": DeviceModel("pcm", g_min=0.0, g_max=1.0, prog_noise_frac=0.03,
                       read_noise_frac=0.02, drift_nu_mean=0.06, drift_nu_std=0.02),
    "rram": DeviceModel("rram", g_min=0.0, g_max=1.0, prog_noise_frac=0.02,
                        read_noise_frac=0.01, drift_nu_mean=0.005, drift_nu_std=0.002),
    # Noise-free device used for degenerate-limit checks and digital parity.
    "ideal": DeviceModel("ideal", g_min=0.0, g_max=1.0, prog_noise_frac=0.0,
                         read_noise_frac=0.0, drift_nu_mean=0.0, drift_nu_std=0.0),
}


def preset(name: str) -> DeviceModel:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown device preset '{name}' (choose one of {sorted(PRESETS)})") from None


@dataclass
class DeviceArray:
    """State of a device population with a common programming timestamp.

    Fields
    ------
    g_prog : ndarray
        Conductance right after the last programming pulse.
    nu : ndarray
        Per-device drift exponent, resampled at each programming.
    t_prog : float
        Programming timestamp in seconds.
    stuck : ndarray of bool
        Fault mask; stuck devices ignore programming, drift and read noise.
    stuck_g : ndarray
        Conductance reported by stuck devices (meaningful where stuck).
    """

    g_prog: np.ndarray
    nu: np.ndarray
    t_prog: float
    stuck: np.ndarray
    stuck_g: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.g_prog.shape

    @property
    def size(self) -> int:
        return self.g_prog.size


def program(model: DeviceModel, g_target: np.ndarray, t: float,
            rng: np.random.Generator, prior: DeviceArray | None = None) -> DeviceArray:
    """Program target conductances, returning the new population state.

    Applies Gaussian programming noise with sigma = prog_noise_frac * target,
    clips into [g_min, g_max], and resamples each device's drift exponent
    (normal, clipped at 0). Stuck devices in `prior` keep their fault.

    Draw order: programming noise first, then drift exponents.
    """
    g_target = np.asarray(g_target, dtype=np.float64)
    if np.any(g_target < model.g_min - 1e-12) or np.any(g_target > model.g_max + 1e-12):
        raise ValueError("g_target outside [g_min, g_max]")
    noise = rng.standard_normal(g_target.shape)
    g_prog = np.clip(g_target + model.prog_noise_frac * g_target * noise,
                     model.g_min, model.g_max)
    nu = np.maximum(rng.normal(model.drift_nu_mean, model.drift_nu_std, g_target.shape), 0.0) \
        if model.drift_nu_std > 0.0 else np.full(g_target.shape, max(model.drift_nu_mean, 0.0))
    if prior is not None:
        if prior.shape != g_target.shape:
            raise ValueError("prior state shape mismatch")
        stuck = prior.stuck.copy()
        stuck_g = prior.stuck_g.copy()
    else:
        stuck = np.zeros(g_target.shape, dtype=bool)
        stuck_g = np.zeros(g_target.shape)
    return DeviceArray(g_prog=g_prog, nu=nu, t_prog=float(t), stuck=stuck, stuck_g=stuck_g)


def drift(model: DeviceModel, dev: DeviceArray, t: float) -> np.ndarray:
    """Deterministic conductance at time t under power-law decay.

    G(t) = g_prog * (max(t - t_prog, t0) / t0) ** (-nu). The max() gives a
    plateau: no decay is reported within t0 of programming. Stuck devices
    return their stuck value.
    """
    dt = float(t) - dev.t_prog
    if dt < 0.0:
        raise ValueError(f"drift queried at t={t} before programming time {dev.t_prog}")
    if dt <= model.drift_t0:
        g = dev.g_prog.copy()
    else:
        g = dev.g_prog * np.power(dt / model.drift_t0, -dev.nu)
    np.clip(g, model.g_min, model.g_max, out=g)
    if dev.stuck.any():
        g[dev.stuck] = dev.stuck_g[dev.stuck]
    return g


def read(model: DeviceModel, dev: DeviceArray, t: float, rng: np.random.Generator,
         n: int | None = None) -> np.ndarray:
    """Read conductances at time t with fresh Gaussian read noise.

    Noise sigma is read_noise_frac times the drifted conductance, resampled
    on every call. With `n` given, returns `n` independent reads stacked on
    a new leading axis (one rng draw batch, deterministic order). Stuck
    devices report their stuck value exactly, with no noise.
    """
    g = drift(model, dev, t)
    shape = g.shape if n is None else (n,) + g.shape
    if model.read_noise_frac > 0.0:
        out = g + model.read_noise_frac * g * rng.standard_normal(shape)
        np.clip(out, model.g_min, model.g_max, out=out)
    else:
        out = np.broadcast_to(g, shape).copy()
    if dev.stuck.any():
        out[..., dev.stuck] = dev.stuck_g[dev.stuck]
    return out


def inject_faults(model: DeviceModel, dev: DeviceArray, ratio: float,
                  rng: np.random.Generator) -> int:
    """Stick exactly round(ratio * N) devices at conductances U(g_min, g_max).

    Devices are chosen uniformly without replacement across the whole array;
    an already-stuck device may be rechosen and simply gets a new stuck value.
    Mutates `dev` and returns the number of devices selected.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"fault ratio must be in [0, 1], got {ratio}")
    n_pick = int(round(ratio * dev.size))
    if n_pick == 0:
        return 0
    idx = rng.choice(dev.size, size=n_pick, replace=False)
    values = rng.uniform(model.g_min, model.g_max, size=n_pick)
    flat_stuck = dev.stuck.reshape(-1)
    flat_g = dev.stuck_g.reshape(-1)
    flat_stuck[idx] = True
    flat_g[idx] = values
    return n_pick
