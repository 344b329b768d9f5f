"""Order-independent exact accumulation of IEEE doubles.

Every finite double is an integer multiple of ``2**-1074``, so tallies kept as
Python ints in that unit add exactly and associatively. Merged shards therefore
reduce to bit-identical results no matter how the work was partitioned.
"""

from __future__ import annotations

from fractions import Fraction

SHIFT = 1074
ONE = 1 << SHIFT


def to_fixed(x: float, scale: int = 1) -> int:
    """Exact fixed-point value of ``scale * x``."""
    num, den = float(x).as_integer_ratio()
    return (num * scale) << (SHIFT - (den.bit_length() - 1))


def ratio(fixed_sum: int, count: int) -> Fraction:
    """``fixed_sum / count`` as an exact fraction of real units."""
    return Fraction(fixed_sum, count << SHIFT)


def mean(values) -> Fraction | None:
    values = list(values)
    if not values:
        return None
    return sum(values, Fraction(0)) / len(values)


def percent(value: Fraction | None) -> float | None:
    """Correctly rounded ``100 * value``."""
    return None if value is None else float(value * 100)
