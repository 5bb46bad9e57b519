"""Run configuration: one YAML file drives every experiment.

Each field maps 1:1 to a key in the file; unknown keys and out-of-range
values fail validation with the offending field path. Optional fields are
resolved against per-task, per-scale defaults so the normalized config that
lands in the run manifest replays bit-identically.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from memsim import devices
from memsim.nets import FINAL_ACTIVATIONS

EXPERIMENTS = ("train", "sweep-slices", "sweep-repeats", "sweep-faults",
               "sweep-drift", "lipschitz", "rollout", "export-density")
TASKS = ("gcnet", "geodesy", "geodesy-eroslite")
SCALES = ("desk", "paper")
MODES = ("digital", "analog")


class ConfigError(ValueError):
    """Validation failure; message lines are `field: problem`."""


@dataclass
class ExperimentConfig:
    experiment: str
    task: str = "gcnet"
    scale: str = "desk"
    mode: str = "analog"
    device: str = "pcm"
    seed: int = 0
    seeds: list[int] | None = None

    slices: int = 1
    repeats: int = 1
    dac_bits: int = 7
    adc_bits: int = 9
    input_clip: float = 1.0
    output_clip: float | None = None
    periph_noise_std: float = 0.0
    ir_alpha: float = 0.0
    fault_ratio: float = 0.0
    drift_time: float = 0.0

    omega0: float | None = None
    omega0_list: list[float] | None = None
    final_activation: str | None = None
    net_layers: list[int] | None = None

    epochs: int | None = None
    lr: float | None = None
    reprogram_every: int = 1
    eval_every: int | None = None
    retrain: bool = True
    retrain_frac: float = 0.25

    n_train: int | None = None
    n_quad: int | None = None
    shell: list[float] = field(default_factory=lambda: [1.0, 1.5])
    tf_range: list[float] = field(default_factory=lambda: [2.5, 4.0])
    state_box: list[float] = field(default_factory=lambda: [0.3, 0.3])
    loss_variant: str = "l1"

    rollout_dt: float = 0.05
    density_resolution: int = 41
    density_threshold: float = 0.05
    workers: int | None = None


# (task, scale) -> defaults for the optional training fields
# Output converter ranges are matched per task to the observed pre-activation
# envelope (with headroom); a range far above the signal wastes ADC levels and
# its step size, not the device noise under study, sets the analog floor.
_TASK_DEFAULTS = {
    ("gcnet", "desk"): dict(epochs=300, lr=1e-3, n_train=2048, n_quad=0,
                            omega0=1.0, output_clip=5.0,
                            net_layers=[7, 64, 64, 64, 3]),
    ("gcnet", "paper"): dict(epochs=3000, lr=1e-3, n_train=20000, n_quad=0,
                             omega0=1.0, output_clip=5.0,
                             net_layers=[7, 128, 128, 128, 3]),
    ("geodesy", "desk"): dict(epochs=1000, lr=1e-4, n_train=100, n_quad=3000,
                              omega0=30.0, output_clip=2.0,
                              net_layers=[3, 64, 64, 64, 64, 1]),
    ("geodesy", "paper"): dict(epochs=10000, lr=5e-4, n_train=1000,
                               n_quad=30000, omega0=30.0, output_clip=2.0,
                               net_layers=[3, 300, 300, 300, 300, 1]),
}
_FINAL_DEFAULT = {"gcnet": "identity", "geodesy": "abs"}


def _task_family(task: str) -> str:
    return "geodesy" if task.startswith("geodesy") else "gcnet"


def resolve_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill every None field from the task/scale defaults; pure function."""
    out = dataclasses.replace(cfg)
    base = _TASK_DEFAULTS[(_task_family(cfg.task), cfg.scale)]
    for key, val in base.items():
        if getattr(out, key) is None:
            setattr(out, key, val)
    if out.final_activation is None:
        out.final_activation = _FINAL_DEFAULT[_task_family(cfg.task)]
    if out.seeds is None:
        out.seeds = [out.seed + k for k in range(5)]
    if out.omega0_list is None:
        out.omega0_list = [out.omega0]
    if out.workers is None:
        out.workers = os.cpu_count() or 1
    return out


def validate(cfg: ExperimentConfig) -> list[str]:
    """Return `field: problem` strings; empty list means valid."""
    errs = []

    def expect(cond, name, msg):
        if not cond:
            errs.append(f"{name}: {msg}")

    expect(cfg.experiment in EXPERIMENTS, "experiment",
           f"unknown experiment {cfg.experiment!r}, expected one of {EXPERIMENTS}")
    expect(cfg.task in TASKS, "task",
           f"unknown task {cfg.task!r}, expected one of {TASKS}")
    expect(cfg.scale in SCALES, "scale", f"unknown scale {cfg.scale!r}")
    expect(cfg.mode in MODES, "mode", f"unknown mode {cfg.mode!r}")
    expect(cfg.device in devices.PRESETS, "device",
           f"unknown device preset {cfg.device!r}, "
           f"expected one of {tuple(devices.PRESETS)}")
    expect(cfg.slices >= 1, "slices", "must be >= 1")
    expect(cfg.repeats >= 1, "repeats", "must be >= 1")
    expect(1 <= cfg.dac_bits <= 64, "dac_bits", "must be in [1, 64]")
    expect(1 <= cfg.adc_bits <= 64, "adc_bits", "must be in [1, 64]")
    expect(cfg.input_clip > 0, "input_clip", "must be > 0")
    if cfg.output_clip is not None:
        expect(cfg.output_clip > 0, "output_clip", "must be > 0")
    expect(cfg.periph_noise_std >= 0, "periph_noise_std", "must be >= 0")
    expect(0.0 <= cfg.ir_alpha < 1.0, "ir_alpha", "must be in [0, 1)")
    expect(0.0 <= cfg.fault_ratio <= 1.0, "fault_ratio", "must be in [0, 1]")
    expect(cfg.drift_time >= 0.0, "drift_time", "must be >= 0")
    if cfg.omega0 is not None:
        expect(cfg.omega0 > 0.0, "omega0", "must be > 0")
    if cfg.omega0_list is not None:
        expect(all(w > 0 for w in cfg.omega0_list), "omega0_list",
               "entries must be > 0")
    if cfg.final_activation is not None:
        expect(cfg.final_activation in FINAL_ACTIVATIONS, "final_activation",
               f"must be one of {FINAL_ACTIVATIONS}")
    if cfg.net_layers is not None:
        expect(len(cfg.net_layers) >= 2 and all(n >= 1 for n in cfg.net_layers),
               "net_layers", "need >= 2 positive layer sizes")
    if cfg.epochs is not None:
        expect(cfg.epochs >= 1, "epochs", "must be >= 1")
    if cfg.lr is not None:
        expect(cfg.lr > 0, "lr", "must be > 0")
    expect(cfg.reprogram_every >= 1, "reprogram_every", "must be >= 1")
    if cfg.eval_every is not None:
        expect(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    expect(0.0 < cfg.retrain_frac <= 1.0, "retrain_frac", "must be in (0, 1]")
    if cfg.n_train is not None:
        expect(cfg.n_train >= 1, "n_train", "must be >= 1")
    if cfg.n_quad is not None:
        expect(cfg.n_quad >= 0, "n_quad", "must be >= 0")
    expect(len(cfg.shell) == 2 and 0 < cfg.shell[0] <= cfg.shell[1], "shell",
           "need [r_inner, r_outer] with 0 < r_inner <= r_outer")
    expect(len(cfg.tf_range) == 2 and 0 < cfg.tf_range[0] <= cfg.tf_range[1],
           "tf_range", "need [lo, hi] with 0 < lo <= hi")
    expect(len(cfg.state_box) == 2 and all(b > 0 for b in cfg.state_box),
           "state_box", "need two positive half-widths")
    expect(cfg.loss_variant in ("l1", "l2"), "loss_variant",
           "must be 'l1' or 'l2'")
    expect(cfg.rollout_dt > 0, "rollout_dt", "must be > 0")
    expect(cfg.density_resolution >= 2, "density_resolution", "must be >= 2")
    if cfg.seeds is not None:
        expect(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    if cfg.workers is not None:
        expect(cfg.workers >= 1, "workers", "must be >= 1")
    if cfg.experiment == "rollout":
        expect(cfg.task == "gcnet", "task", "rollout needs task=gcnet")
    if cfg.experiment == "export-density":
        expect(cfg.task.startswith("geodesy"), "task",
               "export-density needs a geodesy task")
    if cfg.experiment in ("sweep-faults", "sweep-drift"):
        expect(cfg.mode == "analog", "mode",
               f"{cfg.experiment} needs mode=analog (effects live on tiles)")
    return errs


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a mapping")
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError("\n".join(f"{k}: unknown field" for k in sorted(unknown)))
    if "experiment" not in raw:
        raise ConfigError("experiment: required field missing")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as err:
        raise ConfigError(f"config: {err}") from None
    errs = validate(cfg)
    if errs:
        raise ConfigError("\n".join(errs))
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse and validate; raises ConfigError with field-path diagnostics."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as err:
        raise ConfigError(f"config parse error: {err}") from None
    return from_dict(raw or {})


def normalized_dict(cfg: ExperimentConfig) -> dict:
    """Fully-resolved config as plain data, suitable for the run manifest."""
    return dataclasses.asdict(resolve_defaults(cfg))
