"""Report figures written next to the CSV/JSON outputs (Agg backend, PNG files)."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cluster(aggregate, path, title=""):
    """Occupied cells coloured by aggregation order (dark = old)."""
    with plt.rc_context(RC):
        g = aggregate.geometry
        img = np.full(g.shape, np.nan)
        cells = aggregate.cells()
        img[cells[:, 1], cells[:, 0]] = cells[:, 2]
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        im = ax.imshow(img, origin="lower", cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, label="particle index")
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_mass_radius(curve, fit, path, title=""):
    """ln M against ln r with the fitted scaling window marked."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(curve.log_r, curve.log_m, "o", ms=3, color="0.5", label="M(r)")
        a, b = fit.window
        x = curve.log_r[a:b]
        ax.plot(x, fit.k_log + fit.d * x, "-", color="C3", lw=1.5,
                label=f"d = {fit.d:.3f} (R² = {fit.r_squared:.4f})")
        ax.axvspan(x[0], x[-1], color="C3", alpha=0.08)
        ax.set_xlabel("ln r")
        ax.set_ylabel("ln M(r)")
        ax.legend(loc="upper left", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_age_profile(profile, path, title=""):
    with plt.rc_context(RC):
        r = [p[0] for p in profile]
        a = [p[1] for p in profile]
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(r, a, "o-", ms=3)
        ax.set_xlabel("distance from seed (cells)")
        ax.set_ylabel("mean particle index")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_sweep(rows, path):
    """Mean dimension against sigma / grid width, with ensemble std as error bars."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        x = np.array([r["sigma_over_width"] for r in rows], dtype=float)
        y = np.array([r["mean_d"] for r in rows], dtype=float)
        e = np.array([r["std_d"] if r["std_d"] == r["std_d"] else 0.0 for r in rows], dtype=float)
        ok = np.isfinite(y)
        ax.errorbar(x[ok], y[ok], yerr=e[ok], fmt="o", ms=4, capsize=2)
        for ref in (1.43, 2.0):
            ax.axhline(ref, color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("σ / grid width")
        ax.set_ylabel("mass dimension d")
        return _save(fig, path)


def plot_norm_trace(times, totals, path, tol=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(times, np.abs(np.asarray(totals) - 1.0) + 1e-18)
        ax.set_yscale("log")
        if tol:
            ax.axhline(tol, color="C3", ls="--", lw=0.8)
        ax.set_xlabel("time")
        ax.set_ylabel("|Σ p − 1|")
        return _save(fig, path)
