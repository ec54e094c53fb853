"""Colored terminal summary reports for CLI runs."""

import math
from typing import Any, Dict, Optional

from src.config.settings import REPORT_COLORS


def format_duration(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.2f} seconds"
    minutes = int(seconds // 60)
    return f"{minutes}m {seconds % 60:.2f}s"


def format_value(value: Any) -> str:
    """Render numbers compactly; infinities print as ``inf``."""
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if value != 0.0 and (abs(value) < 1e-3 or abs(value) >= 1e6):
            return f"{value:.4e}"
        return f"{value:.6g}"
    return str(value)


def print_summary_report(
    title: str,
    sections: Dict[str, Dict[str, Any]],
    elapsed: Optional[float] = None,
) -> None:
    """Print a boxed, colored summary of a run.

    Args:
        title: Header line.
        sections: Section name -> ordered mapping of label -> value.
        elapsed: Wall time of the run in seconds, if known.
    """
    c = REPORT_COLORS
    bar = f"{c['BOLD']}{c['CYAN']}{'=' * 80}{c['RESET']}"

    print(f"\n{bar}")
    print(f"{c['BOLD']}{c['CYAN']}{title.upper()}{c['RESET']}")
    print(bar)

    for section, rows in sections.items():
        print(f"\n{c['GREEN']}{section}:{c['RESET']}")
        for label, value in rows.items():
            print(f"   {c['WHITE']}• {label}: {c['YELLOW']}{format_value(value)}{c['RESET']}")

    if elapsed is not None:
        print(f"\n{c['GREEN']}Processing Time:{c['RESET']}")
        print(f"   {c['WHITE']}• Total Time: {c['YELLOW']}{c['BOLD']}{format_duration(elapsed)}{c['RESET']}")

    print(f"\n{bar}\n")
