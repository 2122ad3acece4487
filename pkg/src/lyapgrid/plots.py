"""Static SVG renderings of already computed results."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed salt and no timestamp so identical data gives identical files
plt.rcParams["svg.hashsalt"] = "lyapgrid"
_META = {"Date": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_frequencies(times, omega, gen_buses, path, omega0=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    ref = 0.0 if omega0 is None else omega0
    for j, bus in enumerate(gen_buses):
        ax.plot(times, omega[:, j] - ref, label=f"gen {bus}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("omega - omega0 [rad/s]" if omega0 is not None else "omega [rad/s]")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_spectrum(exponents, path, title="Lyapunov spectrum"):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(exponents) + 1), exponents, "o-", ms=3)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("index")
    ax.set_ylabel("exponent per step")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_ranking(buses, exponents, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    pos = np.arange(len(buses))
    ax.bar(pos, exponents)
    ax.set_xticks(pos)
    ax.set_xticklabels([str(b) for b in buses])
    ax.set_xlabel("bus (most stable first)")
    ax.set_ylabel("node exponent")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)
