"""Float rendering helpers for the JSON/CSV artifacts.

Every float leaving the package is rendered with 17 significant digits,
which round-trips IEEE-754 doubles exactly and keeps saved files byte-stable
across runs.
"""

from __future__ import annotations

import numpy as np


def fmt_float(x: float) -> str:
    """17-significant-digit decimal rendering of a double."""
    return format(float(x), ".17g")


def vector_text(v: np.ndarray) -> str:
    return "[" + ", ".join(fmt_float(x) for x in v) + "]"


def matrix_text(m: np.ndarray, indent: str) -> str:
    """Render a 2-D array as a JSON array of arrays, one row per line."""
    rows = (indent + "  " + vector_text(row) for row in m)
    return "[\n" + ",\n".join(rows) + "\n" + indent + "]"
