from pathlib import Path
from typing import TYPE_CHECKING

from rich.console import Console
from rich.padding import Padding
from rich.table import Table

if TYPE_CHECKING:
    from .evaluation import MetricReport


class Observer:
    def __init__(self, console: Console | None = None, log_dir: str | Path | None = None, quiet: bool = False):
        self.console = console or Console(stderr=True)
        self.quiet = quiet
        self.log_dir = Path(log_dir) if log_dir else None
        self._writer = None

    @property
    def writer(self):
        if self._writer is None and self.log_dir is not None:
            from torch.utils.tensorboard import SummaryWriter

            self._writer = SummaryWriter(log_dir=str(self.log_dir))
        return self._writer

    def info(self, message: str):
        if not self.quiet:
            self.console.print(message, highlight=False)

    def warn(self, message: str):
        self.console.print(f"[yellow]{message}[/yellow]", highlight=False)

    def error(self, message: str):
        self.console.print(f"[bold red]{message}[/bold red]", highlight=False)

    def log_epoch(self, epoch: int, loss: float, secs: float):
        if not self.quiet:
            self.console.print(f"epoch {epoch} loss {loss:.6f} secs {secs:.3f}", highlight=False, markup=False)
        if self.writer is not None:
            self.writer.add_scalar("train/loss", loss, epoch)
            self.writer.add_scalar("train/secs", secs, epoch)

    def log_validation(self, epoch: int, report: "MetricReport"):
        self.info(f"[cyan]epoch {epoch} valid mrr_filt {report.mrr_filtered:.4f} mrr_raw {report.mrr_raw:.4f}[/cyan]")
        if self.writer is not None:
            self.writer.add_scalar("valid/mrr_filt", report.mrr_filtered, epoch)
            self.writer.add_scalar("valid/mrr_raw", report.mrr_raw, epoch)

    def print_table(self, table: Table):
        self.console.print(table)

    def log_eval_summary(self, report: "MetricReport", title: str = "EVALUATION"):
        hits = " | ".join(f"Hits@{k}: {report.hits_filtered[k]:.4f}" for k in sorted(report.hits_filtered))
        summary = f"MRR filt: {report.mrr_filtered:.4f} | MRR raw: {report.mrr_raw:.4f} | {hits} on {report.n_queries} queries."
        self.console.print(
            Padding(
                f"[bold yellow]===== {title} COMPLETE =====\n{summary}\n=============================================[/bold yellow]",
                (1, 2),
            )
        )

    def close(self):
        if self._writer is not None:
            self._writer.close()
            self._writer = None
