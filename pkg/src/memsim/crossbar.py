"""Crossbar tile: analog matrix-vector multiplication over device pairs.

A weight matrix is encoded differentially: per weight, one device of a pair
carries the positive part and the other is held at g_min. K equal-significance
slices replicate the whole array and are averaged at read time. The analog
path is: DAC-quantize inputs, read every device (drift at the evaluation time
plus fresh read noise), per-slice multiply-accumulate, slice average, optional
IR-drop compression, additive peripheral noise, ADC quantize. Temporal
averaging repeats that whole read path N times and averages the ADC outputs
digitally; programming error and drift are frozen across repeats.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from memsim import devices
from memsim.devices import DeviceArray, DeviceModel


@dataclass(frozen=True)
class ConverterSpec:
    """DAC/ADC resolutions and analog ranges shared by all tiles of a net."""

    dac_bits: int = 7
    adc_bits: int = 9
    input_clip: float = 1.0
    output_clip: float = 10.0
    periph_noise_std: float = 0.0

    def __post_init__(self):
        if self.dac_bits < 1 or self.adc_bits < 1:
            raise ValueError("converter bit widths must be >= 1")
        if self.input_clip <= 0.0 or self.output_clip <= 0.0:
            raise ValueError("converter clips must be > 0")
        if self.periph_noise_std < 0.0:
            raise ValueError("peripheral noise std must be >= 0")


# Bit width treated as "quantization off" in probes and degenerate-limit checks.
HIGH_RES_BITS = 31


@dataclass
class CrossbarTile:
    """One rows x cols array of differential pairs, replicated over K slices."""

    rows: int
    cols: int
    slices: int
    g_plus: DeviceArray
    g_minus: DeviceArray
    w_scale: float
    model: DeviceModel
    t_prog: float


def _targets(w: np.ndarray, model: DeviceModel, w_scale: float) -> tuple[np.ndarray, np.ndarray]:
    # Positive part on g_plus, negative part on g_minus, idle side at g_min.
    tp = model.g_min + np.maximum(w, 0.0) / w_scale
    tm = model.g_min + np.maximum(-w, 0.0) / w_scale
    return tp, tm


def weight_scale(w: np.ndarray, model: DeviceModel) -> float:
    m = float(np.max(np.abs(w)))
    return m / (model.g_max - model.g_min) if m > 0.0 else 1.0


def map_weights(w: np.ndarray, model: DeviceModel, slices: int, t: float,
                rng: np.random.Generator,
                prior: CrossbarTile | None = None) -> CrossbarTile:
    """Program a weight matrix onto a fresh tile (or over an existing one).

    w_scale = max|w| / (g_max - g_min), one scale per tile; an all-zero matrix
    gets w_scale = 1. Every slice is programmed independently with identical
    targets. Draw order: g_plus population first, then g_minus. When `prior`
    is given its stuck devices survive the reprogramming.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weight matrix must be 2-D (rows x cols)")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight matrix contains non-finite entries")
    if slices < 1:
        raise ValueError("slice count must be >= 1")
    if prior is not None and (prior.rows, prior.cols, prior.slices) != (w.shape[0], w.shape[1], slices):
        raise ValueError("prior tile shape mismatch")
    ws = weight_scale(w, model)
    tp, tm = _targets(w, model, ws)
    shape = (slices,) + w.shape
    tp = np.broadcast_to(tp, shape)
    tm = np.broadcast_to(tm, shape)
    dev_p = devices.program(model, tp, t, rng, prior=prior.g_plus if prior else None)
    dev_m = devices.program(model, tm, t, rng, prior=prior.g_minus if prior else None)
    return CrossbarTile(rows=w.shape[0], cols=w.shape[1], slices=slices,
                        g_plus=dev_p, g_minus=dev_m, w_scale=ws, model=model,
                        t_prog=float(t))


def reprogram(tile: CrossbarTile, w: np.ndarray, t: float,
              rng: np.random.Generator) -> CrossbarTile:
    """Refresh the tile with new targets; stuck devices stay stuck."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (tile.rows, tile.cols):
        raise ValueError(f"weight shape {w.shape} does not match tile "
                         f"({tile.rows}, {tile.cols})")
    return map_weights(w, tile.model, tile.slices, t, rng, prior=tile)


def _quantize(x: np.ndarray, bits: int, clip: float) -> np.ndarray:
    # Odd-level mid-tread grid over [-clip, clip]: 2^bits - 1 levels, so 0 and
    # both rails are exactly representable.
    x = np.clip(x, -clip, clip)
    half = 2 ** (bits - 1) - 1
    if half <= 0:
        return np.zeros_like(x)
    step = clip / half
    k = np.clip(np.rint(x / step), -half, half)
    return k * step


def dac_quantize(x: np.ndarray, spec: ConverterSpec) -> np.ndarray:
    """Input converter: clip to +-input_clip, quantize to the DAC grid."""
    return _quantize(np.asarray(x, dtype=np.float64), spec.dac_bits, spec.input_clip)


def adc_quantize(y: np.ndarray, spec: ConverterSpec) -> np.ndarray:
    """Output converter: clip to +-output_clip, quantize to the ADC grid."""
    return _quantize(np.asarray(y, dtype=np.float64), spec.adc_bits, spec.output_clip)


def ir_drop_attenuate(y: np.ndarray, alpha: float, output_clip: float = 10.0) -> np.ndarray:
    """First-order magnitude-dependent compression surrogate for IR drop.

    out = y * (1 - alpha * |y| / output_clip). Magnitudes beyond the converter
    range attenuate at the rail factor so the map never changes sign.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("ir-drop alpha must be in [0, 1)")
    if alpha == 0.0:
        return np.asarray(y, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return y * (1.0 - alpha * np.minimum(np.abs(y), output_clip) / output_clip)


def _read_slices(dev: DeviceArray, model: DeviceModel, g_drifted: np.ndarray,
                 rng: np.random.Generator | None) -> np.ndarray:
    # One fresh noisy read of every device given precomputed drifted values.
    if rng is None or model.read_noise_frac == 0.0:
        out = g_drifted.copy()
    else:
        out = g_drifted + model.read_noise_frac * g_drifted * rng.standard_normal(g_drifted.shape)
        np.clip(out, model.g_min, model.g_max, out=out)
    if dev.stuck.any():
        out[dev.stuck] = dev.stuck_g[dev.stuck]
    return out


def decode_weights(tile: CrossbarTile, t: float,
                   rng: np.random.Generator | None = None,
                   repeats: int = 1) -> np.ndarray:
    """Decode the tile back into weight units.

    With `rng` None the decode is noiseless (drift and faults only). With a
    generator, each of `repeats` decodes applies fresh read noise and the
    results are averaged, mirroring temporal averaging of a linear read path.
    """
    gp = devices.drift(tile.model, tile.g_plus, t)
    gm = devices.drift(tile.model, tile.g_minus, t)
    if rng is None:
        diff = gp - gm
    else:
        acc = np.zeros((tile.rows, tile.cols))
        for _ in range(repeats):
            acc += np.mean(_read_slices(tile.g_plus, tile.model, gp, rng)
                           - _read_slices(tile.g_minus, tile.model, gm, rng), axis=0)
        return acc * (tile.w_scale / repeats)
    return np.mean(diff, axis=0) * tile.w_scale


def analog_mvm(tile: CrossbarTile, x: np.ndarray, spec: ConverterSpec, t: float,
               repeats: int, rng: np.random.Generator,
               ir_alpha: float = 0.0) -> np.ndarray:
    """Analog y = x @ W on the tile, with N-repeat temporal averaging.

    Accepts a single input vector (rows,) or a batch (B, rows); each repeat
    resamples read and peripheral noise (weight noise is drawn once per repeat
    and shared across the batch), while drift and programming error stay
    frozen. Averaging of the N ADC outputs happens digitally.

    Draw order per repeat: g_plus read, g_minus read, peripheral noise.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if t < tile.t_prog:
        raise ValueError(f"evaluation time {t} precedes programming time {tile.t_prog}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != tile.rows:
        raise ValueError(f"input of shape {x.shape} does not match {tile.rows} rows")

    xq = dac_quantize(x2, spec)
    gp = devices.drift(tile.model, tile.g_plus, t)
    gm = devices.drift(tile.model, tile.g_minus, t)
    acc = np.zeros((x2.shape[0], tile.cols))
    for _ in range(repeats):
        diff = np.mean(_read_slices(tile.g_plus, tile.model, gp, rng)
                       - _read_slices(tile.g_minus, tile.model, gm, rng), axis=0)
        y = (xq @ diff) * tile.w_scale
        if ir_alpha > 0.0:
            y = ir_drop_attenuate(y, ir_alpha, spec.output_clip)
        if spec.periph_noise_std > 0.0:
            y = y + rng.normal(0.0, spec.periph_noise_std, y.shape)
        acc += adc_quantize(y, spec)
    out = acc / repeats
    return out[0] if single else out


def inject_tile_faults(tile: CrossbarTile, ratio: float,
                       rng: np.random.Generator) -> int:
    """Stick round(ratio*N) devices in each polarity array. Returns the total."""
    n = devices.inject_faults(tile.model, tile.g_plus, ratio, rng)
    n += devices.inject_faults(tile.model, tile.g_minus, ratio, rng)
    return n


def write_tile_dump(tile: CrossbarTile, path) -> None:
    """Audit dump: one CSV row per (slice, row, col) device pair.

    Columns: slice, row, col, g_plus, g_minus, w_decoded, stuck_plus,
    stuck_minus. w_decoded is the slice-local noiseless decode at t_prog.
    """
    gp = devices.drift(tile.model, tile.g_plus, tile.t_prog)
    gm = devices.drift(tile.model, tile.g_minus, tile.t_prog)
    w = (gp - gm) * tile.w_scale
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["slice", "row", "col", "g_plus", "g_minus", "w_decoded",
                      "stuck_plus", "stuck_minus"])
        for s in range(tile.slices):
            for i in range(tile.rows):
                for j in range(tile.cols):
                    out.writerow([s, i, j, repr(float(gp[s, i, j])), repr(float(gm[s, i, j])),
                                  repr(float(w[s, i, j])), int(tile.g_plus.stuck[s, i, j]),
                                  int(tile.g_minus.stuck[s, i, j])])


def read_tile_dump(path) -> dict[str, np.ndarray]:
    """Load a tile dump back into arrays keyed by column name."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[str, np.ndarray] = {}
    for key in ("slice", "row", "col", "stuck_plus", "stuck_minus"):
        out[key] = np.array([int(r[key]) for r in rows])
    for key in ("g_plus", "g_minus", "w_decoded"):
        out[key] = np.array([float(r[key]) for r in rows])
    return out
