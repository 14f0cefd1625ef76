"""Flat unit-area torus sampled on a uniform periodic grid.

Fields are plain ``(n, n)`` float arrays indexed as ``values[ix, iy]`` with
``x = ix / n`` and ``y = iy / n``.  All derivatives are spectral.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


def wrap(delta):
    """Per-axis wrapped difference in [-1/2, 1/2)."""
    return (np.asarray(delta, dtype=float) + 0.5) % 1.0 - 0.5


@dataclass(frozen=True)
class TorusPoint:
    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x) % 1.0)
        object.__setattr__(self, "y", float(self.y) % 1.0)

    def __iter__(self):
        yield self.x
        yield self.y

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


def as_point(p) -> TorusPoint:
    if isinstance(p, TorusPoint):
        return p
    x, y = p
    return TorusPoint(x, y)


def flat_distance(p, q) -> float:
    """Geodesic distance on the unit flat torus."""
    p, q = as_point(p), as_point(q)
    dx = abs(wrap(p.x - q.x))
    dy = abs(wrap(p.y - q.y))
    return float(np.hypot(dx, dy))


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Torus distance matrix between point arrays of shape (m, 2) and (k, 2)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = np.abs(wrap(a[:, None, :] - b[None, :, :]))
    return np.hypot(d[..., 0], d[..., 1])


@dataclass(frozen=True)
class TorusGrid:
    """Uniform ``n x n`` grid on the unit flat torus (cell area ``1/n**2``)."""

    n: int

    def __post_init__(self):
        n = int(self.n)
        if n < 8 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two >= 8, got {self.n}")
        object.__setattr__(self, "n", n)

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def cell_area(self) -> float:
        return 1.0 / self.n**2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.n) / self.n
        return np.meshgrid(x, x, indexing="ij")

    @cached_property
    def _k(self):
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=1.0 / self.n)
        kd = k.copy()
        # odd derivatives of the Nyquist mode vanish at the nodes
        kd[self.n // 2] = 0.0
        kx, ky = np.meshgrid(k, k, indexing="ij")
        kdx, kdy = np.meshgrid(kd, kd, indexing="ij")
        return kx**2 + ky**2, kdx, kdy

    @property
    def symbol(self) -> np.ndarray:
        """Fourier symbol of -Laplacian, ``(2 pi)^2 |k|^2``."""
        return self._k[0]

    # -- quadrature ------------------------------------------------------
    def integrate(self, f) -> float:
        return float(np.mean(np.asarray(f, dtype=float)))

    def zero_mean(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f - f.mean(axis=(-2, -1), keepdims=True)

    def log_integral_exp(self, g) -> float:
        """``log of the integral of exp(g)``, shifted to avoid overflow."""
        g = np.asarray(g, dtype=float)
        m = np.max(g)
        if not np.isfinite(m):
            raise FloatingPointError("non-finite exponent in log-integral")
        return float(m + np.log(np.mean(np.exp(g - m))))

    # -- differential operators -----------------------------------------
    def laplacian(self, f) -> np.ndarray:
        fh = np.fft.fft2(f)
        return np.real(np.fft.ifft2(-self.symbol * fh))

    def gradient(self, f) -> tuple[np.ndarray, np.ndarray]:
        _, kdx, kdy = self._k
        fh = np.fft.fft2(f)
        return (np.real(np.fft.ifft2(1j * kdx * fh)),
                np.real(np.fft.ifft2(1j * kdy * fh)))

    def gradient_dot(self, f, g) -> np.ndarray:
        fx, fy = self.gradient(f)
        if g is f:
            return fx * fx + fy * fy
        gx, gy = self.gradient(g)
        return fx * gx + fy * gy

    def dirichlet(self, f, g=None) -> float:
        """Integral of ``(-Laplacian f) * g`` computed by Parseval.

        This is the bilinear form whose L2-gradient is exactly ``-laplacian``;
        for band-limited fields it equals ``integrate(gradient_dot(f, g))``.
        """
        fh = np.fft.fft2(f)
        gh = fh if g is None else np.fft.fft2(g)
        return float(np.real(np.sum(self.symbol * fh * np.conj(gh)))) / self.n**4

    def inverse_laplacian(self, f) -> np.ndarray:
        """Zero-mean solution ``u`` of ``-Laplacian u = f - mean(f)``."""
        fh = np.fft.fft2(f)
        sym = self.symbol.copy()
        sym[0, 0] = 1.0
        uh = fh / sym
        uh[0, 0] = 0.0
        return np.real(np.fft.ifft2(uh))

    # -- points ----------------------------------------------------------
    def node_index(self, p) -> tuple[int, int]:
        p = as_point(p)
        return (int(round(p.x * self.n)) % self.n, int(round(p.y * self.n)) % self.n)

    def snap(self, p) -> TorusPoint:
        i, j = self.node_index(p)
        return TorusPoint(i / self.n, j / self.n)

    def distance_to(self, p) -> np.ndarray:
        """Field of torus distances ``d(., p)``."""
        p = as_point(p)
        X, Y = self.coords
        return np.hypot(wrap(X - p.x), wrap(Y - p.y))

    @cached_property
    def _green_origin(self) -> np.ndarray:
        delta = np.zeros(self.shape)
        delta[0, 0] = self.n**2
        return self.inverse_laplacian(delta)

    def green_function(self, p) -> np.ndarray:
        """Discrete Green's function: ``-Laplacian G = delta_p - 1``, zero mean.

        ``p`` is snapped to the nearest node; the impulse has unit mass.
        """
        i, j = self.node_index(p)
        return np.roll(self._green_origin, shift=(i, j), axis=(0, 1))

    def singular_weight(self, h, singularities: Iterable[tuple[object, float]]) -> np.ndarray:
        """``h * exp(-4 pi sum_m alpha_m G_{p_m})``: vanishes like ``d(., p_m)^(2 alpha_m)``."""
        out = np.array(h, dtype=float, copy=True)
        expo = np.zeros(self.shape)
        for p, alpha in singularities:
            if alpha < 0:
                raise ValueError(f"singularity strength must be >= 0, got {alpha}")
            expo -= 4.0 * np.pi * alpha * self.green_function(p)
        return out * np.exp(expo)


@dataclass(frozen=True)
class TorusField:
    """A sampled field bound to its grid; converts to an array transparently."""

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def integral(self) -> float:
        return self.grid.integrate(self.values)


def sample(grid: TorusGrid, fn) -> np.ndarray:
    """Evaluate ``fn(X, Y)`` on the grid nodes."""
    X, Y = grid.coords
    return np.asarray(fn(X, Y), dtype=float) * np.ones(grid.shape)


def points_array(points: Sequence) -> np.ndarray:
    return np.array([tuple(as_point(p)) for p in points], dtype=float).reshape(-1, 2)
