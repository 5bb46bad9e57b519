"""SVG line charts for the CSV artifacts.

Rendering is headless and byte-reproducible: fixed hash salt, no embedded
creation date. Each kind maps one CSV schema to one figure.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "memsim"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from memsim import analysis  # noqa: E402

KINDS = ("history", "sweep", "faults", "drift", "lipschitz", "trajectory")

_REQUIRED = {
    "history": ["epoch", "train_loss"],
    "sweep": ["param", "device", "seed", "test_loss"],
    "faults": ["ratio", "device", "seed", "loss_unretrained"],
    "drift": ["time_s", "device", "seed", "loss"],
    "lipschitz": ["omega0", "grad_estimate", "pairs_estimate"],
    "trajectory": ["t", "px", "py", "pz"],
}


def _check(header, kind):
    missing = [c for c in _REQUIRED[kind] if c not in header]
    if missing:
        raise ValueError(f"csv lacks columns {missing} required for kind {kind!r}")


def _series(rows, device, xkey, ykey):
    pts = sorted((r[xkey], r[ykey]) for r in rows
                 if r["device"] == device and r[ykey] is not None)
    xs = sorted({p[0] for p in pts})
    med = [np.median([p[1] for p in pts if p[0] == x]) for x in xs]
    return xs, med, pts


def render(csv_path, kind: str, out_path) -> str:
    """Render one CSV to SVG; returns the output path."""
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}, expected one of {KINDS}")
    header, rows = analysis.read_rows(csv_path)
    _check(header, kind)
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "history":
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["train_loss"] for r in rows], label="train")
        tested = [(r["epoch"], r["test_loss"]) for r in rows
                  if r.get("test_loss") is not None]
        if tested:
            ax.plot(*zip(*tested), marker="o", label="test")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.set_ylabel("loss")
    elif kind in ("sweep", "faults", "drift"):
        xkey = {"sweep": "param", "faults": "ratio", "drift": "time_s"}[kind]
        ykeys = {"sweep": ["test_loss"], "drift": ["loss"],
                 "faults": ["loss_unretrained", "loss_retrained"]}[kind]
        for device in sorted({r["device"] for r in rows}):
            for ykey in ykeys:
                if ykey not in header:
                    continue
                xs, med, pts = _series(rows, device, xkey, ykey)
                if not xs:
                    continue
                label = device if len(ykeys) == 1 else f"{device} {ykey}"
                ax.plot(xs, med, marker="o", label=label)
                ax.scatter([p[0] for p in pts], [p[1] for p in pts],
                           s=8, alpha=0.4)
        if kind == "sweep":
            ax.set_xscale("log", base=2)
        if kind == "drift":
            ax.set_xscale("symlog")
        ax.set_yscale("log")
        ax.set_xlabel(xkey)
        ax.set_ylabel("loss")
    elif kind == "lipschitz":
        om = [r["omega0"] for r in rows]
        ax.plot(om, [r["grad_estimate"] for r in rows], marker="o",
                label="gradient")
        ax.plot(om, [r["pairs_estimate"] for r in rows], marker="s",
                label="pairs")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("omega0")
        ax.set_ylabel("estimate")
    else:
        t = [r["t"] for r in rows]
        for c in ("px", "py", "pz"):
            ax.plot(t, [r[c] for r in rows], label=c)
        ax.set_xlabel("t")
        ax.set_ylabel("position")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return str(out_path)
