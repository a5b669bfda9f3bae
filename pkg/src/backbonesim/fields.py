"""Spatial coefficient fields on the one-dimensional habitat.

A :class:`SpatialField` wraps an evaluation rule x -> value together
with declared lower/upper bounds.  The bounds are part of the contract:
simulation kernels thin Poisson clocks against the declared sup, and
configuration validation rejects fields that escape their bounds on a
test grid.

For the compiled kernels every field is lowered to a :class:`FieldTable`
(constant fast path, or a uniform grid with linear interpolation and
edge clamping).  The pure-Python kernel mirror evaluates tables with
exactly the same arithmetic so that both lanes consume identical
floating-point values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

__all__ = ["SpatialField", "FieldTable", "as_field"]


@dataclass(frozen=True)
class FieldTable:
    """Lowered form of a field, understood by both kernel lanes.

    mode 0: constant ``c0`` everywhere.
    mode 1: linear interpolation of ``values`` on the uniform grid
            ``x0 + i*dx``, clamped to the end values outside the grid.
    """

    mode: int
    c0: float
    x0: float
    dx: float
    values: np.ndarray

    def __call__(self, x):
        if self.mode == 0:
            if np.isscalar(x):
                return self.c0
            return np.full(np.shape(x), self.c0)
        pos = (np.asarray(x, dtype=float) - self.x0) / self.dx
        pos = np.clip(pos, 0.0, len(self.values) - 1.0)
        k = np.minimum(pos.astype(np.int64), len(self.values) - 2)
        frac = pos - k
        v = self.values[k] + frac * (self.values[k + 1] - self.values[k])
        return float(v) if np.isscalar(x) else v

    @property
    def max(self) -> float:
        return float(self.c0 if self.mode == 0 else self.values.max())

    @property
    def min(self) -> float:
        return float(self.c0 if self.mode == 0 else self.values.min())


def _const_table(c: float) -> FieldTable:
    return FieldTable(0, float(c), 0.0, 1.0, np.array([float(c)]))


class SpatialField:
    """A bounded measurable coefficient x -> f(x) on the habitat.

    Parameters
    ----------
    fn : float or callable
        Constant value, or a vectorized callable of position.
    lower, upper : float, optional
        Declared bounds.  Defaults are inferred for constants; callables
        must declare bounds explicitly (they feed thinning rates and
        validation).
    """

    def __init__(self, fn: Union[float, Callable], lower: float = None,
                 upper: float = None, name: str = ""):
        self.name = name
        if callable(fn):
            if lower is None or upper is None:
                raise ValueError(f"field {name or fn}: callable fields need declared bounds")
            self._fn = fn
            self.constant = None
        else:
            c = float(fn)
            self._fn = None
            self.constant = c
            lower = c if lower is None else lower
            upper = c if upper is None else upper
        self.lower = float(lower)
        self.upper = float(upper)
        if self.lower > self.upper:
            raise ValueError(f"field {name}: lower bound exceeds upper bound")

    def __call__(self, x):
        if self.constant is not None:
            if np.isscalar(x):
                return self.constant
            return np.full(np.shape(x), self.constant)
        return self._fn(np.asarray(x, dtype=float)) if not np.isscalar(x) else float(self._fn(x))

    def validate_on(self, xs: np.ndarray, atol: float = 1e-9) -> None:
        """Check finiteness and declared bounds on sample points."""
        v = np.asarray(self(xs), dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"field {self.name}: non-finite value on test grid")
        if v.min() < self.lower - atol or v.max() > self.upper + atol:
            raise ValueError(
                f"field {self.name}: values in [{v.min():g}, {v.max():g}] escape "
                f"declared bounds [{self.lower:g}, {self.upper:g}]")

    def table(self, x_lo: float = None, x_hi: float = None, n: int = 513) -> FieldTable:
        """Lower to a :class:`FieldTable` on [x_lo, x_hi]."""
        if self.constant is not None:
            return _const_table(self.constant)
        if x_lo is None or x_hi is None:
            raise ValueError(f"field {self.name}: grid window required to tabulate")
        xs = np.linspace(x_lo, x_hi, n)
        vals = np.asarray(self(xs), dtype=float)
        return FieldTable(1, 0.0, float(xs[0]), float(xs[1] - xs[0]), vals)

    @classmethod
    def from_grid(cls, xs: np.ndarray, values: np.ndarray, name: str = "") -> "SpatialField":
        """Field given by samples on a uniform grid (clamped outside)."""
        xs = np.asarray(xs, float)
        values = np.asarray(values, float)
        tab = FieldTable(1, 0.0, float(xs[0]), float(xs[1] - xs[0]), values)
        f = cls(tab, lower=float(values.min()), upper=float(values.max()), name=name)
        f._table = tab
        return f

    def __repr__(self):
        core = f"{self.constant:g}" if self.constant is not None else "fn"
        return f"SpatialField({self.name or core}, [{self.lower:g},{self.upper:g}])"


def as_field(v, name: str = "", lower=None, upper=None) -> SpatialField:
    if isinstance(v, SpatialField):
        return v
    return SpatialField(v, lower=lower, upper=upper, name=name)
