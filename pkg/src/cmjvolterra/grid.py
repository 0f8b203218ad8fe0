"""Functions sampled on a uniform grid 0, h, 2h, ..."""
from __future__ import annotations

import csv
import io

import numpy as np


def fmt(x: float) -> str:
    return format(float(x), ".17g")


class GridFunction:
    """Values of a function on the uniform grid t_k = k h, k = 0..len-1."""

    __slots__ = ("h", "values")

    def __init__(self, h: float, values):
        values = np.array(values, dtype=float)
        if not h > 0:
            raise ValueError("grid step must be positive")
        if values.ndim != 1 or values.size < 2:
            raise ValueError("a grid function needs at least two values")
        values.setflags(write=False)
        self.h = float(h)
        self.values = values

    def __len__(self):
        return self.values.size

    @property
    def t(self) -> np.ndarray:
        return self.h * np.arange(self.values.size)

    @property
    def T(self) -> float:
        return self.h * (self.values.size - 1)

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of t; t must be a grid node."""
        k = int(round(t / self.h))
        if abs(k * self.h - t) > tol * max(1.0, abs(t)) or not 0 <= k < len(self):
            raise ValueError(f"t={t} is not a node of the grid (h={self.h}, T={self.T})")
        return k

    def __call__(self, t):
        """Linear interpolation; raises beyond the horizon."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"t outside grid horizon [0, {self.T}]")
        return np.interp(t, self.t, self.values)

    def _check(self, other: "GridFunction"):
        if not isinstance(other, GridFunction):
            return
        if other.h != self.h or len(other) != len(self):
            raise ValueError("grid functions live on different grids")

    def _binary(self, other, op):
        self._check(other)
        o = other.values if isinstance(other, GridFunction) else other
        return GridFunction(self.h, op(self.values, o))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.h, -self.values)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def integral(self) -> float:
        v = self.values
        return float(self.h * (v.sum() - 0.5 * (v[0] + v[-1])))

    def l2_norm(self) -> float:
        v = self.values**2
        return float(np.sqrt(self.h * (v.sum() - 0.5 * (v[0] + v[-1]))))

    def to_csv(self, path=None, header=("t", "value")) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for k, v in enumerate(self.values):
            w.writerow((fmt(k * self.h), fmt(v)))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        data = np.array([[float(a), float(b)] for a, b in rows[1:]])
        t, v = data[:, 0], data[:, 1]
        h = t[1] - t[0]
        if not np.allclose(np.diff(t), h, rtol=1e-9, atol=0):
            raise ValueError("csv times are not a uniform grid")
        if t[0] != 0:
            raise ValueError("csv grid must start at t=0")
        return cls(h, v)

    def __repr__(self):
        return f"GridFunction(h={self.h}, n={len(self)})"
