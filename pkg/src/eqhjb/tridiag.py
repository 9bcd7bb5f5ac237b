"""Batched tridiagonal solves (Thomas algorithm, cyclic via Sherman-Morrison).

Systems are stored with the unknown axis last: ``lower[..., i]`` multiplies
``x[..., i-1]``, ``diag[..., i]`` multiplies ``x[..., i]`` and ``upper[..., i]``
multiplies ``x[..., i+1]``.  Coefficient arrays may carry singleton batch
axes; they broadcast against the right-hand side, so a matrix shared by a
whole batch is factored once.
"""

import numpy as np


def _take_leading(arr, index, inner):
    """Index the first batch axis of an array whose first ``inner`` axes are kept."""
    arr = np.asarray(arr)
    if arr.ndim <= inner:
        return arr
    key = (slice(None),) * inner
    if arr.shape[inner] == 1:
        return arr[key + (0,)]
    return arr[key + (index,)]


class TridiagFactor:
    """LU factors of a batch of tridiagonal matrices, reusable across RHS."""

    def __init__(self, lower, diag, upper, cyclic=False):
        lower, diag, upper = np.broadcast_arrays(
            np.asarray(lower, float), np.asarray(diag, float), np.asarray(upper, float))
        n = diag.shape[-1]
        if n < (3 if cyclic else 1):
            raise ValueError("tridiagonal system too small")
        self.n = n
        self.cyclic = cyclic
        a = np.ascontiguousarray(np.moveaxis(lower, -1, 0))
        d = np.array(np.moveaxis(diag, -1, 0))
        c = np.ascontiguousarray(np.moveaxis(upper, -1, 0))
        if cyclic:
            corner_lo = a[0].copy()      # row 0 couples x[n-1]
            corner_hi = c[n - 1].copy()  # row n-1 couples x[0]
            gamma = -d[0]
            d[0] = d[0] - gamma
            d[n - 1] = d[n - 1] - corner_hi * corner_lo / gamma
        self._a = a
        self._cp, self._inv = self._factor(a, d, c)
        if cyclic:
            uvec = np.zeros_like(d)
            uvec[0] = gamma
            uvec[n - 1] = corner_hi
            self._z = self._sweep(uvec)
            self._vn = corner_lo / gamma
            self._den = 1.0 + self._z[0] + self._vn * self._z[n - 1]

    @staticmethod
    def _factor(a, d, c):
        n = d.shape[0]
        cp = np.empty_like(d)
        inv = np.empty_like(d)
        inv[0] = 1.0 / d[0]
        cp[0] = c[0] * inv[0]
        for i in range(1, n):
            inv[i] = 1.0 / (d[i] - a[i] * cp[i - 1])
            cp[i] = c[i] * inv[i]
        return cp, inv

    def _sweep(self, r):
        n = self.n
        a, cp, inv = self._a, self._cp, self._inv
        shape = np.broadcast_shapes(r.shape, inv.shape)
        x = np.empty(shape)
        x[0] = r[0] * inv[0]
        for i in range(1, n):
            x[i] = (r[i] - a[i] * x[i - 1]) * inv[i]
        for i in range(n - 2, -1, -1):
            x[i] -= cp[i] * x[i + 1]
        return x

    def solve(self, rhs):
        """Solve for a right-hand side with the unknown axis last."""
        r = np.moveaxis(np.asarray(rhs, float), -1, 0)
        x = self._sweep(r)
        if self.cyclic:
            n = self.n
            factor = (x[0] + self._vn * x[n - 1]) / self._den
            x = x - factor * self._z
        return np.moveaxis(x, 0, -1)

    def select(self, index):
        """Factor of one entry of the leading batch axis (singletons broadcast)."""
        out = object.__new__(TridiagFactor)
        out.n, out.cyclic = self.n, self.cyclic
        out._a = _take_leading(self._a, index, 1)
        out._cp = _take_leading(self._cp, index, 1)
        out._inv = _take_leading(self._inv, index, 1)
        if self.cyclic:
            out._z = _take_leading(self._z, index, 1)
            out._vn = _take_leading(self._vn, index, 0)
            out._den = _take_leading(self._den, index, 0)
        return out


def solve_tridiagonal(lower, diag, upper, rhs, cyclic=False):
    """One-shot batched tridiagonal solve."""
    return TridiagFactor(lower, diag, upper, cyclic=cyclic).solve(rhs)
