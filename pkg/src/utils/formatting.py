"""Text helpers for report cells and console summaries."""

from typing import Iterable, List, Sequence


def mean_std(mean: float, std: float, digits: int = 3) -> str:
    """'0.831 ± 0.004' style cell."""
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def divided(ratio: float) -> str:
    """Reduction annotation, e.g. '÷3.90'."""
    return f"÷{ratio:.2f}"


def times(ratio: float) -> str:
    """Speed-up annotation, e.g. '×1.70'."""
    return f"×{ratio:.2f}"


def table(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """
    Render rows as a plain aligned text table.

    Columns are left-aligned and padded to their widest cell; a dashed
    rule separates the header from the body.
    """
    cells: List[List[str]] = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)
