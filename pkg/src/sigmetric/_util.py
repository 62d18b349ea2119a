import re

_DIGITS = re.compile(r"(\d+)")


def natural_key(label) -> tuple:
    """Sort key that orders "A2" before "A10"."""
    if isinstance(label, (int, float)):
        return ((0, label, ""),)
    parts = _DIGITS.split(str(label))
    return tuple((1, int(p), "") if p.isdigit() else (2, 0, p) for p in parts if p)


def natural_sorted(labels) -> list:
    return sorted(labels, key=natural_key)
