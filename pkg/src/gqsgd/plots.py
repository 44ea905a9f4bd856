"""Figure rendering for CLI reports.

Kept out of the core modules: matplotlib is imported on first use, with the
non-interactive Agg backend, so the library itself never needs a display.
"""

from __future__ import annotations

import math

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> str:
    # no Software/date stamps, so equal inputs give equal files
    fig.savefig(path, metadata={"Software": None})
    _pyplot().close(fig)
    return str(path)


def trajectory(curves: dict, path, f_star: float | None = None) -> str:
    """Suboptimality (or loss) per step, one line per named run.

    ``curves`` maps a label to a sequence of ``(step, loss, bytes, grad_var)`` rows.
    """
    plt = _pyplot()
    with plt.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(10, 4))
        for label, rows in curves.items():
            steps = [r[0] for r in rows]
            loss = [r[1] - (f_star or 0.0) for r in rows]
            ax.semilogy(steps, [max(v, 1e-300) for v in loss], label=label)
            sent = 0
            cum = []
            for r in rows:
                sent += r[2]
                cum.append(sent)
            bx.semilogy([c / 2 ** 20 for c in cum], [max(v, 1e-300) for v in loss], label=label)
        ylabel = "f(x) - f*" if f_star is not None else "f(x)"
        ax.set(xlabel="step", ylabel=ylabel)
        bx.set(xlabel="MiB sent (all workers)", ylabel=ylabel)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def perf_sweep(betas, baseline, quantized, path, beta_max: float | None = None) -> str:
    """Predicted Allreduce time against link bandwidth."""
    plt = _pyplot()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        gb = [b / 1e9 for b in betas]
        ax.loglog(gb, baseline, label="32-bit baseline")
        ax.loglog(gb, quantized, label="quantized")
        if beta_max is not None and math.isfinite(beta_max):
            ax.axvline(beta_max / 1e9, color="0.4", ls="--", lw=1, label="break-even")
        ax.set(xlabel="bandwidth [GB/s]", ylabel="Allreduce time [s]")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def bound_checks(checks, path) -> str:
    """Empirical value over bound for each check; bars above 1 failed."""
    plt = _pyplot()
    with plt.rc_context(STYLE):
        rows = [c for c in checks if c.bound > 0]
        fig, ax = plt.subplots(figsize=(7, 0.25 * len(rows) + 1.2))
        ratios = [c.empirical / c.bound for c in rows]
        errs = [c.radius / c.bound for c in rows]
        colors = ["tab:blue" if c.passed else "tab:red" for c in rows]
        ax.barh(range(len(rows)), ratios, xerr=errs, color=colors)
        ax.axvline(1.0, color="k", lw=1)
        ax.set_yticks(range(len(rows)), [c.name for c in rows], fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel("empirical / bound")
        fig.tight_layout()
        return _save(fig, path)


def bench_bars(labels, seconds, path) -> str:
    plt = _pyplot()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(labels)), seconds)
        ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel("seconds per Allreduce")
        fig.tight_layout()
        return _save(fig, path)
