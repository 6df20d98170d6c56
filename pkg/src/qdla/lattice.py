"""Toroidal grid geometry, dense fields, reductions and snapshot export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

ZERO_NORM_EPS = 1e-300


class ZeroNorm(ArithmeticError):
    """Raised when a field has (numerically) no probability left."""


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    spacing: float = 1.0

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("grid dimensions must be integers")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"grid must be at least 16x16, got {self.width}x{self.height}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape, rows first: (height, width)."""
        return (self.height, self.width)

    @property
    def center(self) -> tuple[int, int]:
        return (self.width // 2, self.height // 2)

    def wrap(self, x: int, y: int) -> tuple[int, int]:
        return (x % self.width, y % self.height)

    def torus_offsets(self, cx: int, cy: int) -> tuple[np.ndarray, np.ndarray]:
        """Minimal-image displacement of every column / row from (cx, cy), in cells."""
        dx = (np.arange(self.width) - cx + self.width // 2) % self.width - self.width // 2
        dy = (np.arange(self.height) - cy + self.height // 2) % self.height - self.height // 2
        return dx.astype(float), dy.astype(float)


@dataclass
class ScalarField:
    """Real probability values Phi on the grid, stored as ``values[y, x]``."""

    geometry: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.shape:
            raise ValueError(f"values shape {self.values.shape} != grid {self.geometry.shape}")

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "ScalarField":
        return cls(geometry, np.zeros(geometry.shape))

    def probabilities(self) -> np.ndarray:
        return self.values

    def copy(self) -> "ScalarField":
        return ScalarField(self.geometry, self.values.copy())


@dataclass
class ComplexField:
    """Complex amplitudes Psi on the grid; |Psi|^2 is the probability."""

    geometry: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.complex128)
        if self.values.shape != self.geometry.shape:
            raise ValueError(f"values shape {self.values.shape} != grid {self.geometry.shape}")

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "ComplexField":
        return cls(geometry, np.zeros(geometry.shape, dtype=np.complex128))

    def probabilities(self) -> np.ndarray:
        return self.values.real ** 2 + self.values.imag ** 2

    def copy(self) -> "ComplexField":
        return ComplexField(self.geometry, self.values.copy())


Field = ScalarField | ComplexField


def laplacian_at(f: Field, x: int, y: int):
    """Five-point Laplacian of ``f`` at cell (x, y) with toroidal neighbours."""
    g = f.geometry
    x, y = g.wrap(x, y)
    v = f.values
    xp, xm = (x + 1) % g.width, (x - 1) % g.width
    yp, ym = (y + 1) % g.height, (y - 1) % g.height
    lap = ((v[y, xp] + v[y, xm]) + (v[yp, x] + v[ym, x])) - 4.0 * v[y, x]
    return lap / (g.spacing * g.spacing)


def total_mass(f: ScalarField, workers: int = 1) -> float:
    """Sum of all cell values; the result does not depend on ``workers``."""
    return float(_kernels.total_real(f.values, max(1, int(workers))))


def total_norm(f: ComplexField, workers: int = 1) -> float:
    """Sum of |value|^2 over all cells; the result does not depend on ``workers``."""
    return float(_kernels.total_abs2(f.values, max(1, int(workers))))


def total(f: Field, workers: int = 1) -> float:
    if isinstance(f, ComplexField):
        return total_norm(f, workers)
    return total_mass(f, workers)


def renormalize(f: Field, eps: float = ZERO_NORM_EPS, workers: int = 1) -> Field:
    """Return a copy of ``f`` scaled to unit mass (scalar) or unit norm (complex)."""
    t = total(f, workers)
    if not t > eps:
        raise ZeroNorm(f"field total {t!r} is below {eps!r}")
    out = f.copy()
    factor = 1.0 / t if isinstance(f, ScalarField) else 1.0 / math.sqrt(t)
    _kernels.scale_inplace(out.values, factor, max(1, int(workers)))
    return out


def gaussian_packet(geometry: GridGeometry, cx: int, cy: int, sigma: float,
                    quantum: bool = False, workers: int = 1) -> Field:
    """Normalised Gaussian centred on (cx, cy) using minimal-image distances.

    Classical packets are exp(-r^2 / 2 sigma^2).  Quantum packets use the
    amplitude exp(-r^2 / 4 sigma^2) with zero phase, so |Psi|^2 has standard
    deviation ``sigma`` per axis.
    """
    dx, dy = geometry.torus_offsets(cx, cy)
    dx *= geometry.spacing
    dy *= geometry.spacing
    width = 4.0 if quantum else 2.0
    gx = np.exp(-dx ** 2 / (width * sigma ** 2))
    gy = np.exp(-dy ** 2 / (width * sigma ** 2))
    values = np.outer(gy, gx)
    if quantum:
        return renormalize(ComplexField(geometry, values), workers=workers)
    return renormalize(ScalarField(geometry, values), workers=workers)


# -- snapshot export -------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, complex):
        return complex(v).__repr__().strip("()")
    return format(float(v), ".17g")


def write_field_csv(values: np.ndarray, path) -> Path:
    """One text row per grid row; real values at 17 significant digits."""
    path = Path(path)
    values = np.asarray(values)
    with path.open("w") as fh:
        if np.iscomplexobj(values):
            for row in values:
                fh.write(",".join(_fmt(complex(v)) for v in row) + "\n")
        else:
            for row in values:
                fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    return path


def read_field_csv(path) -> np.ndarray:
    rows = [line.strip().split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    if any("j" in tok for tok in rows[0]):
        return np.array([[complex(tok) for tok in row] for row in rows], dtype=np.complex128)
    return np.array([[float(tok) for tok in row] for row in rows], dtype=np.float64)


def write_pgm(values: np.ndarray, path) -> Path:
    """Binary 8-bit graymap (P5), scaled so the maximum maps to 255."""
    path = Path(path)
    a = np.asarray(values)
    if np.iscomplexobj(a):
        a = a.real ** 2 + a.imag ** 2
    a = np.asarray(a, dtype=np.float64)
    peak = float(a.max()) if a.size else 0.0
    if peak > 0:
        img = np.clip(np.rint(a / peak * 255.0), 0, 255).astype(np.uint8)
    else:
        img = np.zeros(a.shape, dtype=np.uint8)
    h, w = img.shape
    with path.open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
