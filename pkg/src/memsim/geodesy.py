"""Gravity inversion: learn a body's density field from exterior accelerations.

Ground truth is a mascon body (point masses, G normalized to 1). The network
represents a nonnegative density over the cube [-1, 1]^3; its acceleration at
a target is a Monte-Carlo quadrature of density times the Newtonian kernel,
using scrambled low-discrepancy nodes refreshed every epoch. The loss is
scale-invariant: a closed 1-D search absorbs the density's overall magnitude
before per-component errors are averaged.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from memsim import ndcore as nd, nets, rng as rng_mod
from memsim.nets import SirenSpec

log = logging.getLogger(__name__)

CUBE_VOLUME = 8.0
PROXIMITY_EPS = 1e-6
BODY_HEADER = ["x", "y", "z", "mu"]
DENSITY_HEADER = ["x", "y", "z", "rho"]


@dataclass(frozen=True)
class MasconBody:
    """Point-mass ground truth. Positions live strictly inside the unit cube."""

    points: np.ndarray  # (k, 3)
    mu: np.ndarray      # (k,)
    name: str = "body"

    def __post_init__(self):
        object.__setattr__(self, "points",
                           np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "mu",
                           np.asarray(self.mu, dtype=np.float64).reshape(-1))
        if self.points.shape[0] < 1:
            raise ValueError("body needs at least one mascon")
        if self.points.shape[0] != self.mu.shape[0]:
            raise ValueError("points/mu length mismatch")
        if float(self.mu.sum()) <= 0.0:
            raise ValueError("total mass parameter must be > 0")
        if np.abs(self.points).max() >= 1.0:
            raise ValueError("mascon positions must lie strictly inside the unit cube")

    @property
    def total_mu(self) -> float:
        return float(self.mu.sum())

    @property
    def centroid(self) -> np.ndarray:
        return (self.mu[:, None] * self.points).sum(axis=0) / self.total_mu

    @property
    def circumscribing_radius(self) -> float:
        return float(np.linalg.norm(self.points, axis=1).max())


def point_body(mu: float = 1.0) -> MasconBody:
    return MasconBody(np.zeros((1, 3)), np.array([mu]), name="point")


def dumbbell_body(separation: float = 1.0, mu_total: float = 1.0) -> MasconBody:
    half = separation / 2.0
    pts = np.array([[-half, 0.0, 0.0], [half, 0.0, 0.0]])
    return MasconBody(pts, np.full(2, mu_total / 2.0), name="dumbbell")


def eros_lite(n_points: int = 500) -> MasconBody:
    """Procedural bean-shaped body: mascons rejection-sampled in a bent ellipsoid.

    Construction is internally seeded, so every call returns the same body.
    """
    gen = np.random.default_rng(424242)
    a, b, c = 0.75, 0.32, 0.26
    pts = np.empty((0, 3))
    while pts.shape[0] < n_points:
        cand = gen.uniform(-1.0, 1.0, size=(4 * n_points, 3)) * [a, b, c]
        keep = ((cand[:, 0] / a) ** 2 + (cand[:, 1] / b) ** 2
                + (cand[:, 2] / c) ** 2) <= 1.0
        pts = np.vstack([pts, cand[keep]])
    pts = pts[:n_points].copy()
    pts[:, 1] += 0.18 * (pts[:, 0] / a) ** 2 - 0.06  # bend into a bean
    mu = gen.uniform(0.5, 1.5, size=n_points)
    mu /= mu.sum()
    return MasconBody(pts, mu, name="eros-lite")


def save_body(path, body: MasconBody) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(BODY_HEADER)
        for p, m in zip(body.points, body.mu):
            out.writerow([repr(float(v)) for v in (*p, m)])


def load_body(path, name: str | None = None) -> MasconBody:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != BODY_HEADER:
            raise ValueError(f"bad body header {header}, expected {BODY_HEADER}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise ValueError(f"row {lineno}: non-numeric field") from None
            if len(row) != 4:
                raise ValueError(f"row {lineno}: expected 4 fields, got {len(row)}")
    arr = np.array(rows)
    stem = os.path.splitext(os.path.basename(str(path)))[0]
    return MasconBody(arr[:, :3], arr[:, 3], name=name or stem)


# --- ground truth and quadrature ------------------------------------------------

def mascon_acceleration(body: MasconBody, r: np.ndarray) -> np.ndarray:
    """Newtonian point-mass sum at one position or a batch of positions."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    rr = r.reshape(-1, 3)
    d = body.points[None, :, :] - rr[:, None, :]          # (m, k, 3)
    dist = np.linalg.norm(d, axis=2)
    if dist.min() < PROXIMITY_EPS:
        raise ValueError("position coincides with a mascon (distance < 1e-6)")
    acc = (body.mu[None, :, None] * d / dist[:, :, None] ** 3).sum(axis=1)
    return acc[0] if single else acc


def quadrature_points(n: int, rng: np.random.Generator) -> np.ndarray:
    """n scrambled low-discrepancy nodes in the cube [-1, 1]^3."""
    if n < 1:
        raise ValueError("need at least one quadrature node")
    sampler = qmc.Halton(d=3, scramble=True, seed=rng)
    return 2.0 * sampler.random(n) - 1.0


def _kernel(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(m, n, 3) array of (x_i - r_j)/|x_i - r_j|^3, with near hits zeroed.

    Targets closer than PROXIMITY_EPS to a node drop that node's term, a
    measure-zero correction for targets inside the sampling cube.
    """
    d = points[None, :, :] - targets[:, None, :]
    dist = np.linalg.norm(d, axis=2)
    near = dist < PROXIMITY_EPS
    dist[near] = 1.0
    k = d / dist[:, :, None] ** 3
    if near.any():
        k[near] = 0.0
    return k


def network_acceleration(density: Callable[[np.ndarray], np.ndarray],
                         r: np.ndarray, n_quad: int,
                         rng: np.random.Generator | None = None,
                         points: np.ndarray | None = None) -> np.ndarray:
    """Monte-Carlo acceleration of a density field at r (single or batch).

    Nodes come from `quadrature_points(n_quad, rng)` unless an explicit node
    set is supplied (evaluation reuse, symmetry checks).
    """
    if points is None:
        if rng is None:
            raise ValueError("need an rng when no explicit nodes are given")
        points = quadrature_points(n_quad, rng)
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    rr = r.reshape(-1, 3)
    rho = np.asarray(density(points), dtype=np.float64).reshape(-1)
    if rho.shape[0] != points.shape[0]:
        raise ValueError("density returned wrong number of values")
    k = _kernel(points, rr)
    acc = (CUBE_VOLUME / points.shape[0]) * np.einsum("n,mnc->mc", rho, k)
    return acc[0] if single else acc


# --- scale-invariant loss --------------------------------------------------------

def _golden_min(f: Callable[[float], float], lo: float, hi: float,
                tol: float = 1e-12, max_iter: int = 200) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_scale(a_pred: np.ndarray, a_true: np.ndarray,
              variant: str = "l1") -> float:
    """Optimal global scale kappa* for kappa*a_pred ~ a_true.

    L1 uses golden-section search on the convex piecewise-linear objective,
    L2 the closed form. All-zero predictions have no defined scale; callers
    handle that case before calling.
    """
    p = np.asarray(a_pred, dtype=np.float64).ravel()
    t = np.asarray(a_true, dtype=np.float64).ravel()
    if variant == "l2":
        return float(p @ t / (p @ p))
    if variant != "l1":
        raise ValueError(f"unknown loss variant {variant!r}")
    nz = np.abs(p) > 0.0
    ratios = t[nz] / p[nz]
    lo, hi = float(ratios.min()), float(ratios.max())
    if lo == hi:
        return lo
    pad = 1e-9 * (hi - lo)
    return _golden_min(lambda k: float(np.abs(k * p - t).sum()),
                       lo - pad, hi + pad)


def scaled_loss(a_pred: np.ndarray, a_true: np.ndarray,
                variant: str = "l1") -> tuple[float, float]:
    """(loss, kappa*) at the optimal scale.

    L1: mean per-component absolute error. L2: mean per-component squared
    error. Identically-zero predictions leave kappa undefined; the unscaled
    loss is returned with kappa=1 and a log flag.
    """
    p = np.asarray(a_pred, dtype=np.float64).ravel()
    t = np.asarray(a_true, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ValueError("prediction/target shape mismatch or empty batch")
    if not np.any(p):
        log.warning("all-zero predicted accelerations: scale undefined, "
                    "returning unscaled loss")
        kappa = 1.0
    else:
        kappa = fit_scale(p, t, variant)
    err = kappa * p - t
    if variant == "l2":
        return float(np.mean(err ** 2)), kappa
    return float(np.mean(np.abs(err))), kappa


def geodesy_loss(density: Callable[[np.ndarray], np.ndarray],
                 targets_r: np.ndarray, targets_a: np.ndarray, n_quad: int,
                 rng: np.random.Generator | None = None,
                 variant: str = "l1",
                 points: np.ndarray | None = None) -> float:
    """Scale-invariant acceleration-matching loss over a target batch."""
    a_pred = network_acceleration(density, targets_r, n_quad, rng, points)
    return scaled_loss(a_pred, targets_a, variant)[0]


# --- datasets --------------------------------------------------------------------

@dataclass
class GeodesyDataset:
    r: np.ndarray        # (n, 3) sample positions
    a_true: np.ndarray   # (n, 3)
    is_test: np.ndarray  # (n,) bool
    shell: tuple[float, float]

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1, 3)
        self.a_true = np.asarray(self.a_true, dtype=np.float64).reshape(-1, 3)
        if self.r.shape[0] != self.a_true.shape[0]:
            raise ValueError("position/acceleration row counts differ")
        if not np.all(np.isfinite(self.a_true)):
            raise ValueError("non-finite ground-truth acceleration")
        if self.r.shape[0]:
            rad = np.linalg.norm(self.r, axis=1)
            if rad.min() < self.shell[0] - 1e-12 or rad.max() > self.shell[1] + 1e-12:
                raise ValueError("target radius outside configured shell")

    @property
    def n(self) -> int:
        return self.r.shape[0]

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.is_test if part == "test" else ~self.is_test
        return self.r[mask], self.a_true[mask]


def sample_targets(body: MasconBody, n: int, shell: tuple[float, float],
                   rng: np.random.Generator) -> GeodesyDataset:
    """Volume-uniform positions in a spherical shell, with exact labels."""
    r_in, r_out = shell
    if not 0.0 < r_in <= r_out:
        raise ValueError("shell must satisfy 0 < r_in <= r_out")
    if r_in <= body.circumscribing_radius:
        raise ValueError("inner shell radius must exceed the body's "
                         f"circumscribing radius {body.circumscribing_radius:.3f}")
    if n == 0:
        return GeodesyDataset(np.empty((0, 3)), np.empty((0, 3)),
                              np.empty(0, bool), shell)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u = rng.uniform(0.0, 1.0, n)
    rad = (r_in ** 3 + u * (r_out ** 3 - r_in ** 3)) ** (1.0 / 3.0)
    pos = d * rad[:, None]
    return GeodesyDataset(pos, mascon_acceleration(body, pos),
                          rng_mod.hash_split_mask(n), shell)


# --- training adapter and export -------------------------------------------------

@dataclass
class GeodesyTask:
    """Training adapter: quadrature refreshed per epoch, kappa held constant
    in the backward pass (envelope treatment of the inner 1-D minimization).
    """

    body: MasconBody
    data: GeodesyDataset
    n_quad: int
    variant: str = "l1"
    eval_points: np.ndarray | None = field(default=None, repr=False)

    input_dim = 3
    output_dim = 1

    def __post_init__(self):
        if self.data.n == 0:
            raise ValueError("empty dataset")
        self._train_r, self._train_a = self.data.split("train")
        self._test_r, self._test_a = self.data.split("test")

    def train_loss(self, tape: nd.Tape, params: list[nd.Tensor], spec: SirenSpec,
                   epoch: int, rng: np.random.Generator) -> nd.Tensor:
        del epoch  # freshness comes from consuming the stream
        x = quadrature_points(self.n_quad, rng)
        k = _kernel(x, self._train_r)                     # (m, n, 3)
        m, n = k.shape[0], k.shape[1]
        kmat = (CUBE_VOLUME / n) * np.transpose(k, (0, 2, 1)).reshape(3 * m, n)
        rho = nets.forward_tape(tape, params, spec, x)    # (n, 1)
        a_pred = nd.matmul(tape.const(kmat), rho)         # (3m, 1)
        a_flat = self._train_a.reshape(-1, 1)
        if np.any(a_pred.data):
            kappa = fit_scale(a_pred.data, a_flat, self.variant)
        else:
            kappa = 1.0
        err = nd.sub(nd.scale(a_pred, kappa), tape.const(a_flat))
        if self.variant == "l2":
            return nd.reduce_mean(nd.square(err))
        return nd.reduce_mean(nd.absval(err))

    def eval_loss(self, predict: Callable[[np.ndarray], np.ndarray]) -> float:
        if self.eval_points is None:
            # Fixed nodes: evaluation noise must not vary across checkpoints.
            # 4x the training node count so the quadrature floor sits well
            # below the model error being measured.
            self.eval_points = quadrature_points(
                4 * self.n_quad, np.random.default_rng(rng_mod.child_seed(0, "eval")))
        return geodesy_loss(lambda x: predict(x).reshape(-1),
                            self._test_r, self._test_a, self.n_quad,
                            variant=self.variant, points=self.eval_points)


def export_density_grid(density: Callable[[np.ndarray], np.ndarray],
                        resolution: int, threshold: float, path) -> int:
    """Write grid points with density >= threshold as CSV; returns row count."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    rho = np.asarray(density(pts), dtype=np.float64).reshape(-1)
    keep = rho >= threshold
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(DENSITY_HEADER)
        for p, v in zip(pts[keep], rho[keep]):
            out.writerow([repr(float(x)) for x in (*p, v)])
    return int(keep.sum())
