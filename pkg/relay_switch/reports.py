"""Plain-text report building: banners and aligned-column tables."""
from __future__ import annotations

from typing import List, Sequence


def banner(title: str, width: int = 80) -> List[str]:
    return ['=' * width, title, '=' * width]


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> List[str]:
    """First column left-aligned, the rest right-aligned, two spaces between columns."""
    cells = [list(map(str, header))] + [list(map(str, row)) for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]

    def fmt(row: Sequence[str]) -> str:
        parts = [row[0].ljust(widths[0])]
        parts.extend(cell.rjust(width) for cell, width in zip(row[1:], widths[1:]))
        return '  '.join(parts).rstrip()

    lines = [fmt(cells[0]), '  '.join('-' * w for w in widths)]
    lines.extend(fmt(row) for row in cells[1:])
    return lines


def mean_std(mean: float, std: float, scale: float = 1.0, digits: int = 2) -> str:
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"
