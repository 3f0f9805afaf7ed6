"""Console output for the CLI, rendered with Rich."""

from contextlib import contextmanager
from typing import TYPE_CHECKING, Any, Iterator, Sequence

from rich.console import Console as RichConsole
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

if TYPE_CHECKING:
    from ..modules.evaluation import PolicyScore
    from ..modules.fusion import LayerFrequency


def _mean_std(pair: tuple[float, float]) -> str:
    return f"{pair[0]:.4f} ± {pair[1]:.4f}"


class Console:
    """Status lines, result tables and progress spinners for LoraFuse commands."""

    def __init__(self, stderr: bool = False) -> None:
        self.console = RichConsole(stderr=stderr)

    def success(self, text: str) -> None:
        self.console.print(f"[bold green]✓[/bold green] {text}")

    def error(self, text: str) -> None:
        # no markup parsing: messages quote user values that may contain brackets
        self.console.print(f"✗ {text}", style="red", markup=False)

    def warning(self, text: str) -> None:
        self.console.print(f"[bold yellow]⚠[/bold yellow] {text}")

    def info(self, text: str) -> None:
        self.console.print(f"[bold blue]ℹ[/bold blue] {text}")

    def settings(self, data: dict[str, Any], title: str) -> None:
        """Print application settings as key/value lines."""
        self.console.print(f"\n[bold cyan]{title}[/bold cyan]")
        for key, value in sorted(data.items()):
            self.console.print(f"  [yellow]{key}:[/yellow] {value}")

    def score_table(self, rows: Sequence["PolicyScore"], n_seeds: int) -> None:
        """Per-policy mean ± standard deviation of every score."""
        table = Table(title=f"{n_seeds} seeds", show_header=True, header_style="bold cyan")
        for header in ("policy", "style_sim", "content_sim_c", "content_sim_s", "combined"):
            table.add_column(header, justify="left" if header == "policy" else "right")
        best = max(rows, key=lambda r: r.combined[0]).run if rows else None
        for row in rows:
            table.add_row(
                f"[bold]{row.run}[/bold]" if row.run == best else row.run,
                _mean_std(row.style_sim),
                _mean_std(row.content_sim_c),
                _mean_std(row.content_sim_s),
                _mean_std(row.combined),
            )
        self.console.print(table)

    def frequency_table(self, frequencies: Sequence["LayerFrequency"], num_steps: int) -> None:
        """Share of Content and Style picks per layer."""
        table = Table(title=f"{num_steps} steps", show_header=True, header_style="bold cyan")
        for header in ("layer", "content", "style", "count"):
            table.add_column(header, justify="right")
        for f in frequencies:
            table.add_row(str(f.layer), f"{f.content:.3f}", f"{f.style:.3f}", str(f.count))
        self.console.print(table)

    @contextmanager
    def working(self, description: str) -> Iterator[None]:
        """Show a transient spinner with elapsed time while the block runs."""
        with Progress(
            SpinnerColumn(spinner_name="dots"),
            TextColumn("[bold cyan]{task.description}[/bold cyan]"),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        ) as progress:
            progress.add_task(description, total=None)
            yield
