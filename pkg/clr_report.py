"""
Result tables and plots
=======================
Rich tables for fits, deviance searches, penalty factors, stability results
and the simulation study, plus the threshold-sweep line plot.
"""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from clr_data import MatchedDataset
from clr_solver import FitResult
from clr_stability import StabilityResult
from clr_tuning import LambdaSearch, PenaltyFactorReport

_stdout = Console()


def _bar(value: float, width: int = 20) -> str:
    filled = int(round(max(0.0, min(1.0, value)) * width))
    return "█" * filled + "░" * (width - filled)


class ResultConsole:
    """Renders pipeline results on a rich console."""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or _stdout

    def show_fit(self, fit: FitResult, data: MatchedDataset, top: int = 20):
        status = "[green]converged[/green]" if fit.converged else "[red]not converged[/red]"
        self.console.print(Panel.fit(
            f"objective {fit.objective:.6g} | {status} after {fit.iterations} iteration(s)\n"
            f"{fit.nonzero.size} of {data.p} coefficient(s) non-zero",
            title="Penalized conditional logistic fit", border_style="cyan",
        ))
        if fit.nonzero.size == 0:
            return
        table = Table(show_header=True, header_style="bold yellow", box=box.ROUNDED)
        table.add_column("Variable", style="green")
        table.add_column("Block", justify="right", style="cyan")
        table.add_column("beta", justify="right", style="blue")
        order = fit.nonzero[np.argsort(-np.abs(fit.beta[fit.nonzero]), kind="stable")][:top]
        for j in order:
            table.add_row(data.column_names[j], str(data.block_of_column[j] + 1), f"{fit.beta[j]:+.4f}")
        self.console.print(table)

    def show_lambda_search(self, search: LambdaSearch):
        table = Table(title="CV deviance by lambda1", header_style="bold yellow", box=box.ROUNDED)
        table.add_column("lambda1", justify="right", style="cyan")
        table.add_column("CV deviance", justify="right", style="blue")
        table.add_column("", style="magenta")
        for lam, dev in zip(search.table["lambda1"], search.table["cv_deviance"]):
            mark = "◀ chosen" if lam == search.lambda1 else ""
            table.add_row(f"{lam:.5g}", f"{dev:.5g}", mark)
        self.console.print(table)

    def show_penalty_factors(self, report: PenaltyFactorReport):
        table = Table(title=f"Penalty factors ({report.type_step1})",
                      header_style="bold yellow", box=box.ROUNDED)
        table.add_column("Block", justify="right", style="cyan")
        table.add_column("mean |beta|", justify="right", style="blue")
        table.add_column("factor", justify="right", style="green")
        for b, (m, pf) in enumerate(zip(report.block_means, report.factors.pf), 1):
            table.add_row(str(b), f"{m:.4g}", f"{pf:.4g}")
        self.console.print(table)

    def show_stability(self, result: StabilityResult, data: MatchedDataset,
                       threshold: float, top: int = 25):
        prob = result.selection_probability
        order = np.argsort(-prob, kind="stable")[:top]
        table = Table(title=f"Selection probabilities ({result.n_fits} fits)",
                      header_style="bold yellow", box=box.HEAVY)
        table.add_column("Variable", style="green")
        table.add_column("Block", justify="right", style="cyan")
        table.add_column("Probability", justify="right")
        table.add_column("", width=22)
        for j in order:
            style = "green" if prob[j] >= threshold else "dim"
            table.add_row(data.column_names[j], str(data.block_of_column[j] + 1),
                          f"[{style}]{prob[j]:.2f}[/{style}]", f"[{style}]{_bar(prob[j])}[/{style}]")
        self.console.print(table)

    def show_study(self, table1: pd.DataFrame, sweep: pd.DataFrame):
        summary = Table(title="Power and FDR per setting", header_style="bold yellow", box=box.ROUNDED)
        summary.add_column("Setting", style="cyan")
        summary.add_column("Power", justify="right", style="green")
        summary.add_column("", width=22)
        summary.add_column("FDR", justify="right", style="red")
        summary.add_column("Replicates", justify="right", style="dim")
        for row in table1.itertuples(index=False):
            summary.add_row(str(row.setting), f"{row.power:.2f}", _bar(row.power),
                            f"{row.fdr:.2f}", str(row.replicates))
        self.console.print(summary)

        wide = sweep.pivot(index="threshold", columns="setting", values=["power", "fdr"])
        thresholds = Table(title="Threshold sweep (power / FDR)", header_style="bold yellow",
                           box=box.SIMPLE)
        thresholds.add_column("Threshold", style="cyan")
        settings = list(dict.fromkeys(sweep["setting"]))
        for s in settings:
            thresholds.add_column(f"setting {s}", justify="right")
        for t in wide.index:
            thresholds.add_row(f"{t:.2f}", *[
                f"{wide.loc[t, ('power', s)]:.2f} / {wide.loc[t, ('fdr', s)]:.2f}" for s in settings
            ])
        self.console.print(thresholds)


def plot_sweep(sweep: pd.DataFrame, path: Path, settings: Optional[Sequence[str]] = None) -> Path:
    """Power and FDR against the selection threshold, one line per setting."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_power, ax_fdr) = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for s in settings or list(dict.fromkeys(sweep["setting"])):
        part = sweep[sweep["setting"] == s].sort_values("threshold")
        ax_power.plot(part["threshold"], part["power"], marker="o", label=f"setting {s}")
        ax_fdr.plot(part["threshold"], part["fdr"], marker="o", label=f"setting {s}")
    ax_power.set_ylabel("power")
    ax_fdr.set_ylabel("FDR")
    for ax in (ax_power, ax_fdr):
        ax.set_xlabel("selection threshold")
        ax.grid(alpha=0.3)
    ax_fdr.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
