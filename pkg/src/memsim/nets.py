"""Sinusoidal MLPs with a digital (exact) and an analog (tile-backed) mode.

The digital shadow weights are the single source of truth; the analog mode
maps each layer onto one crossbar tile and keeps the shadow for training and
reprogramming. Activations use sin(omega0 * z); hidden outputs therefore lie
in [-1, 1], which is exactly the DAC input range of the analog path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from memsim import crossbar, ndcore as nd
from memsim.crossbar import ConverterSpec, CrossbarTile
from memsim.devices import DeviceModel

FINAL_ACTIVATIONS = ("sine", "abs", "identity")


@dataclass(frozen=True)
class SirenSpec:
    """Architecture description: sizes, frequency, output nonlinearity."""

    layer_sizes: tuple[int, ...]
    omega0: float = 1.0
    final_activation: str = "identity"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.omega0 <= 0.0:
            raise ValueError("omega0 must be > 0")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"final_activation must be one of {FINAL_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MlpWeights:
    """Per-layer weight matrices (n_in x n_out) and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpWeights":
        return MlpWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @staticmethod
    def from_flat(arrays: list[np.ndarray]) -> "MlpWeights":
        return MlpWeights(list(arrays[0::2]), list(arrays[1::2]))


def init_siren(spec: SirenSpec, rng: np.random.Generator) -> MlpWeights:
    """Two-regime uniform init: first layer U(-1/n_in, 1/n_in), deeper layers
    U(+-sqrt(6/n_in)/omega0). Biases start at zero."""
    ws, bs = [], []
    for k in range(spec.n_layers):
        n_in, n_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
        bound = 1.0 / n_in if k == 0 else np.sqrt(6.0 / n_in) / spec.omega0
        ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        bs.append(np.zeros(n_out))
    return MlpWeights(ws, bs)


def _final(z: np.ndarray, spec: SirenSpec) -> np.ndarray:
    if spec.final_activation == "sine":
        return np.sin(spec.omega0 * z)
    if spec.final_activation == "abs":
        return np.abs(z)
    return z


def forward_digital(w: MlpWeights, spec: SirenSpec, x: np.ndarray) -> np.ndarray:
    """Exact float64 forward pass. Accepts (d,) or (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"input dim {h.shape[1]} does not match spec {spec.layer_sizes[0]}")
    last = spec.n_layers - 1
    for k, (wk, bk) in enumerate(zip(w.weights, w.biases)):
        z = h @ wk + bk
        h = _final(z, spec) if k == last else np.sin(spec.omega0 * z)
    return h[0] if single else h


def forward_tape(tape: nd.Tape, params: list[nd.Tensor], spec: SirenSpec,
                 x: np.ndarray | nd.Tensor) -> nd.Tensor:
    """Traced forward: params alternate [W0, b0, W1, b1, ...] as tape tensors.

    `x` may itself be a tape tensor (input-gradient studies differentiate
    through it); a plain array becomes a constant.
    """
    if len(params) != 2 * spec.n_layers:
        raise ValueError("parameter count does not match spec")
    if isinstance(x, nd.Tensor):
        h = x
    else:
        h = tape.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        z = nd.add(nd.matmul(h, params[2 * k]), params[2 * k + 1])
        if k == last:
            if spec.final_activation == "sine":
                h = nd.sin(nd.scale(z, spec.omega0))
            elif spec.final_activation == "abs":
                h = nd.absval(z)
            else:
                h = z
        else:
            h = nd.sin(nd.scale(z, spec.omega0))
    return h


@dataclass
class AnalogNet:
    """Tile-backed execution of an MLP plus its digital shadow weights."""

    spec: SirenSpec
    shadow: MlpWeights
    tiles: list[CrossbarTile]
    converter: ConverterSpec
    repeats: int
    eval_time: float = 0.0
    ir_alpha: float = 0.0

    @property
    def model(self) -> DeviceModel:
        return self.tiles[0].model

    @property
    def slices(self) -> int:
        return self.tiles[0].slices


def to_analog(w: MlpWeights, spec: SirenSpec, model: DeviceModel, slices: int,
              converter: ConverterSpec, repeats: int, t: float,
              rng: np.random.Generator, ir_alpha: float = 0.0) -> AnalogNet:
    """Map every layer onto one tile; the shadow copy is retained for training."""
    tiles = [crossbar.map_weights(wk, model, slices, t, rng) for wk in w.weights]
    return AnalogNet(spec=spec, shadow=w.copy(), tiles=tiles, converter=converter,
                     repeats=int(repeats), eval_time=float(t), ir_alpha=ir_alpha)


def reprogram_net(net: AnalogNet, t: float, rng: np.random.Generator) -> None:
    """Refresh every tile from the current shadow weights."""
    net.tiles = [crossbar.reprogram(tile, wk, t, rng)
                 for tile, wk in zip(net.tiles, net.shadow.weights)]


def forward_analog(net: AnalogNet, x: np.ndarray, t: float | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Analog forward: per layer one analog_mvm (with the net's repeats),
    digital bias add, digital activation."""
    if rng is None:
        raise ValueError("forward_analog requires an rng stream")
    t = net.eval_time if t is None else float(t)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    last = net.spec.n_layers - 1
    for k, tile in enumerate(net.tiles):
        y = crossbar.analog_mvm(tile, h, net.converter, t, net.repeats, rng,
                                ir_alpha=net.ir_alpha)
        z = y + net.shadow.biases[k]
        h = _final(z, net.spec) if k == last else np.sin(net.spec.omega0 * z)
    return h[0] if single else h


def effective_weights(net: AnalogNet, t: float, rng: np.random.Generator) -> list[np.ndarray]:
    """One consistent noisy view of all tiles: each layer's weights decoded
    from `net.repeats` fresh reads, averaged. Used as the per-step forward
    weights during hardware-aware training."""
    return [crossbar.decode_weights(tile, t, rng, repeats=net.repeats)
            for tile in net.tiles]


def save_checkpoint(path, w: MlpWeights, spec: SirenSpec) -> None:
    """Flat binary checkpoint: layer-tagged arrays plus a JSON header."""
    arrays = {}
    for k, (wk, bk) in enumerate(zip(w.weights, w.biases)):
        arrays[f"w{k}"] = wk
        arrays[f"b{k}"] = bk
    header = json.dumps({"layer_sizes": list(spec.layer_sizes), "omega0": spec.omega0,
                         "final_activation": spec.final_activation, "seed": spec.seed})
    np.savez(path, __spec__=np.frombuffer(header.encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[MlpWeights, SirenSpec]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__spec__"]).decode("utf-8"))
        spec = SirenSpec(tuple(header["layer_sizes"]), header["omega0"],
                         header["final_activation"], header["seed"])
        ws = [data[f"w{k}"] for k in range(spec.n_layers)]
        bs = [data[f"b{k}"] for k in range(spec.n_layers)]
    return MlpWeights(ws, bs), spec
