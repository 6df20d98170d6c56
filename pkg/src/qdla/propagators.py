"""Random-walk, explicit diffusion and leapfrog Schroedinger steppers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .lattice import ComplexField, GridGeometry, ScalarField

# step directions: 0 -> +x, 1 -> -x, 2 -> +y, 3 -> -y
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class Unstable(ValueError):
    """Parameters violate an explicit-scheme stability bound."""

    def __init__(self, bound: float, given: float, what: str = "dt"):
        self.bound = bound
        self.given = given
        self.what = what
        super().__init__(f"Unstable({bound:g}, {given:g}): {what}={given:g} exceeds the bound {bound:g}")


@dataclass(frozen=True)
class DiffusionParams:
    d_coeff: float
    dt: float

    def __post_init__(self):
        if not self.d_coeff > 0 or not self.dt > 0:
            raise ValueError("d_coeff and dt must be positive")


@dataclass(frozen=True)
class QuantumParams:
    dt: float
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if not (self.dt > 0 and self.hbar > 0 and self.mass > 0):
            raise ValueError("dt, hbar and mass must be positive")

    def max_energy(self, geometry: GridGeometry, v_max: float = 0.0) -> float:
        # largest eigenvalue of -(hbar^2/2m) lap on the lattice is the checkerboard
        # mode, 4/dx^2 + 4/dy^2 times hbar^2/2m
        h2 = geometry.spacing ** 2
        return (self.hbar ** 2 / self.mass) * (2.0 / h2 + 2.0 / h2) + abs(v_max)

    def dt_limit(self, geometry: GridGeometry) -> float:
        return self.hbar / self.max_energy(geometry)


@dataclass
class WalkerState:
    x: int
    y: int


def validate_stability(params, geometry: GridGeometry):
    """Raise :class:`Unstable` if ``params`` break the explicit-scheme bound.

    Diffusion needs D*dt*(2/dx^2 + 2/dy^2) <= 1 and dt <= 1.  The leapfrog
    scheme needs dt < hbar/E_max strictly; at equality the checkerboard mode
    grows linearly.
    """
    if isinstance(params, DiffusionParams):
        h2 = geometry.spacing ** 2
        limit = 1.0 / (params.d_coeff * (2.0 / h2 + 2.0 / h2))
        if params.dt > 1.0:
            raise Unstable(1.0, params.dt)
        if params.dt > limit:
            raise Unstable(limit, params.dt)
        return True
    if isinstance(params, QuantumParams):
        limit = params.dt_limit(geometry)
        if not params.dt < limit:
            raise Unstable(limit, params.dt)
        return True
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def rw_step(walker: WalkerState, rng, geometry: GridGeometry) -> WalkerState:
    """Move the walker to one of its four neighbours, each with probability 1/4."""
    dx, dy = DIRECTIONS[int(rng.integers(0, 4))]
    x, y = geometry.wrap(walker.x + dx, walker.y + dy)
    return WalkerState(x, y)


_NO_OCC: dict[tuple[int, int], np.ndarray] = {}


def _empty_mask(shape):
    m = _NO_OCC.get(shape)
    if m is None:
        m = _NO_OCC[shape] = np.zeros(shape, dtype=np.uint8)
    return m


def diffusion_step(f: ScalarField, params: DiffusionParams, workers: int = 1) -> ScalarField:
    """One explicit Euler step of the diffusion equation on the torus."""
    g = f.geometry
    out = np.empty_like(f.values)
    h = g.height
    _kernels.diffusion_sweep(f.values, out, _empty_mask(g.shape), 1.0,
                             params.d_coeff * params.dt, 1.0 / g.spacing ** 2,
                             np.empty(h), np.empty(h), max(1, workers))
    return ScalarField(g, out)


def quantum_bootstrap(f: ComplexField, params: QuantumParams,
                      workers: int = 1) -> tuple[ComplexField, ComplexField]:
    """Second time level from one forward Euler step: Psi + (i hbar dt / 2m) lap Psi."""
    g = f.geometry
    out = np.empty_like(f.values)
    h = g.height
    coef = params.hbar * params.dt / (2.0 * params.mass)
    # a*prev + i*b*lap(cur) with prev = cur = Psi^0
    _kernels.leapfrog_sweep(f.values, f.values, out, _empty_mask(g.shape), 1.0, coef,
                            1.0 / g.spacing ** 2, np.empty(h), np.empty(h), max(1, workers))
    return f.copy(), ComplexField(g, out)


def quantum_step(prev: ComplexField, curr: ComplexField, params: QuantumParams,
                 workers: int = 1) -> ComplexField:
    """Leapfrog update Psi(t+dt) = Psi(t-dt) + (i hbar dt / m) lap Psi(t)."""
    g = curr.geometry
    out = np.empty_like(curr.values)
    h = g.height
    _kernels.leapfrog_sweep(prev.values, curr.values, out, _empty_mask(g.shape), 1.0,
                            params.hbar * params.dt / params.mass, 1.0 / g.spacing ** 2,
                            np.empty(h), np.empty(h), max(1, workers))
    return ComplexField(g, out)
