"""Aggregation lifecycle: release, propagation, absorption, detection, recording."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .config import SimConfig
from .lattice import (ZERO_NORM_EPS, ComplexField, Field, GridGeometry, ScalarField,
                      ZeroNorm, gaussian_packet, renormalize, write_field_csv, write_pgm)
from .propagators import WalkerState

AGGREGATED = "aggregated"
DISCARDED_TMAX = "discarded_tmax"
DISCARDED_ABSORBED = "discarded_absorbed"

CLUSTER_COLUMNS = ("x", "y", "particle_index", "detection_step")


class ClusterTooLarge(Exception):
    """The aggregate reached the release annulus; the run stops normally."""


class AggregateState:
    """Occupancy mask plus growth history; row 0 of the history is the seed."""

    def __init__(self, geometry: GridGeometry, seed_cell: tuple[int, int] | None = None):
        self.geometry = geometry
        self.seed_cell = tuple(seed_cell) if seed_cell is not None else geometry.center
        self.occ = np.zeros(geometry.shape, dtype=np.uint8)
        self.xs: list[int] = []
        self.ys: list[int] = []
        self.steps: list[int] = []
        self._frontier: set[int] = set()
        self._frontier_arr: np.ndarray | None = None
        self._r2max = 0
        self.add(*self.seed_cell, step=0)

    def __len__(self):
        return len(self.xs)

    def add(self, x: int, y: int, step: int) -> int:
        g = self.geometry
        x, y = g.wrap(int(x), int(y))
        if self.occ[y, x]:
            raise ValueError(f"cell ({x}, {y}) is already occupied")
        self.occ[y, x] = 1
        self.xs.append(x)
        self.ys.append(y)
        self.steps.append(int(step))
        flat = y * g.width + x
        self._frontier.discard(flat)
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            nx, ny = g.wrap(nx, ny)
            if not self.occ[ny, nx]:
                self._frontier.add(ny * g.width + nx)
        self._frontier_arr = None
        dx, dy = x - self.seed_cell[0], y - self.seed_cell[1]
        self._r2max = max(self._r2max, dx * dx + dy * dy)
        return len(self.xs) - 1

    def frontier(self) -> np.ndarray:
        """Flat indices (y*width + x) of empty cells touching the aggregate, row-major."""
        if self._frontier_arr is None:
            self._frontier_arr = np.array(sorted(self._frontier), dtype=np.int64)
        return self._frontier_arr

    def max_radius(self) -> float:
        return math.sqrt(self._r2max)

    def cells(self) -> np.ndarray:
        """(N, 4) integer array of x, y, particle_index, detection_step."""
        n = len(self.xs)
        return np.column_stack([self.xs, self.ys, np.arange(n), self.steps]).astype(np.int64)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.xs), np.asarray(self.ys)

    def check_invariants(self):
        """Assert seed, contiguous indices, contact growth and monotone steps."""
        assert (self.xs[0], self.ys[0]) == self.seed_cell and self.steps[0] == 0
        g = self.geometry
        order = {}
        for i, (x, y) in enumerate(zip(self.xs, self.ys)):
            order[(x, y)] = i
        for i in range(1, len(self.xs)):
            x, y = self.xs[i], self.ys[i]
            older = [order.get(g.wrap(nx, ny), len(self.xs))
                     for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1))]
            assert min(older) < i, f"particle {i} at ({x}, {y}) touches no older cell"
            assert self.steps[i] > self.steps[i - 1], f"detection steps not increasing at {i}"
        return True

    @classmethod
    def from_cells(cls, geometry: GridGeometry, cells) -> "AggregateState":
        cells = np.asarray(cells, dtype=np.int64)
        order = np.argsort(cells[:, 2], kind="stable")
        cells = cells[order]
        agg = cls(geometry, (int(cells[0, 0]), int(cells[0, 1])))
        agg.steps[0] = int(cells[0, 3])
        for x, y, _, step in cells[1:]:
            agg.add(x, y, step)
        return agg


def write_cluster_csv(aggregate: AggregateState, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLUSTER_COLUMNS)
        w.writerows(aggregate.cells().tolist())
    return path


def read_cluster_csv(path, geometry: GridGeometry | None = None) -> AggregateState:
    """Load a cluster file.  Without ``geometry`` the grid is taken as twice the seed."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:4]) != CLUSTER_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(CLUSTER_COLUMNS)}")
        rows = [[int(r[c]) for c in CLUSTER_COLUMNS] for r in reader]
    if not rows:
        raise ValueError(f"{path}: no cells")
    cells = np.array(rows, dtype=np.int64)
    if geometry is None:
        seed = cells[np.argmin(cells[:, 2])]
        size_x = max(16, 2 * int(seed[0]), int(cells[:, 0].max()) + 1)
        size_y = max(16, 2 * int(seed[1]), int(cells[:, 1].max()) + 1)
        geometry = GridGeometry(size_x, size_y)
    return AggregateState.from_cells(geometry, cells)


# -- particles -------------------------------------------------------------

@dataclass
class ParticleRun:
    """One released particle.

    Field modes keep the stored buffers plus scale factors: the live field is
    ``factor * buffer``.  Quantum runs hold two time levels.
    """

    mode: str
    geometry: GridGeometry
    center: tuple[int, int]
    walker: WalkerState | None = None
    bufs: np.ndarray | None = None
    cur: int = 0
    factor: float = 1.0
    order: np.ndarray | None = None
    f_old: float = 1.0
    steps: int = 0
    elapsed: float = 0.0
    outcome: str | None = None
    cell: tuple[int, int] | None = None
    detection_step: int | None = None
    drift: float = 0.0
    relaunches: int = 0

    def live_field(self) -> Field | None:
        """Copy of the current normalised field (newest level for quantum)."""
        if self.bufs is None:
            return None
        if self.mode == "quantum":
            return ComplexField(self.geometry, self.bufs[self.order[1]] * self.factor)
        return ScalarField(self.geometry, self.bufs[self.cur] * self.factor)

    def previous_level(self) -> ComplexField | None:
        if self.mode != "quantum" or self.bufs is None:
            return None
        return ComplexField(self.geometry, self.bufs[self.order[0]] * self.f_old)


def release_center(config: SimConfig, aggregate: AggregateState, rng) -> tuple[int, int]:
    theta = 2.0 * math.pi * rng.random()
    r = config.effective_release_radius
    sx, sy = aggregate.seed_cell
    return config.geometry.wrap(sx + int(np.rint(r * math.cos(theta))),
                                sy + int(np.rint(r * math.sin(theta))))


def _adaptive_radii(config: SimConfig, aggregate: AggregateState) -> tuple[int, int]:
    half = min(config.width, config.height) // 2
    r_launch = min(int(math.ceil(aggregate.max_radius())) + 5, half - 5)
    r_kill = min(3 * r_launch, half - 1)
    return r_launch, r_kill


def init_particle(config: SimConfig, aggregate: AggregateState, rng) -> ParticleRun:
    """Release one particle at a random angle on the release circle."""
    if aggregate.max_radius() >= config.cluster_limit:
        raise ClusterTooLarge(f"cluster radius {aggregate.max_radius():.1f} reached the "
                              f"limit {config.cluster_limit:g}")
    g = config.geometry
    if config.mode == "random_walk" and config.adaptive_release:
        r_launch, _ = _adaptive_radii(config, aggregate)
        theta = 2.0 * math.pi * rng.random()
        sx, sy = aggregate.seed_cell
        c = g.wrap(sx + int(np.rint(r_launch * math.cos(theta))),
                   sy + int(np.rint(r_launch * math.sin(theta))))
    else:
        c = release_center(config, aggregate, rng)
    run = ParticleRun(mode=config.mode, geometry=g, center=c)
    if config.mode == "random_walk":
        run.walker = WalkerState(*c)
        return run
    quantum = config.mode == "quantum"
    packet = gaussian_packet(g, c[0], c[1], config.sigma, quantum=quantum, workers=config.workers)
    return prepare_particle(config, aggregate, packet, center=c)


def prepare_particle(config: SimConfig, aggregate: AggregateState, packet: Field,
                     center: tuple[int, int] | None = None) -> ParticleRun:
    """Wrap an arbitrary initial field as a particle (aggregate cells projected out)."""
    g = config.geometry
    center = center if center is not None else aggregate.seed_cell
    run = ParticleRun(mode=config.mode, geometry=g, center=center)
    packet = absorb_and_renormalize(packet, aggregate, workers=config.workers)
    if config.mode == "quantum":
        run.bufs = np.zeros((3,) + g.shape, dtype=np.complex128)
        run.bufs[0] = packet.values
        run.order = np.array([0, 0, 1], dtype=np.int64)  # bootstrap pending
        run.f_old = run.factor = 1.0
    else:
        run.bufs = np.zeros((2,) + g.shape, dtype=np.float64)
        run.bufs[0] = packet.values
        run.cur = 0
        run.factor = 1.0
    return run


def absorb_and_renormalize(f: Field, aggregate: AggregateState, workers: int = 1) -> Field:
    """Zero the field on occupied cells, then rescale to unit total (ZeroNorm if none left)."""
    out = f.copy()
    out.values[aggregate.occ.astype(bool)] = 0
    return renormalize(out, workers=workers)


@dataclass
class Detected:
    cell: tuple[int, int]
    index: int


@dataclass
class NotDetected:
    frontier_mass: float


def roulette(p: np.ndarray, u: float) -> int:
    """Index of the first entry whose running total exceeds ``u``, or -1."""
    cum = np.cumsum(p)
    i = int(np.searchsorted(cum, u, side="right"))
    return i if i < len(p) else -1


def attempt_detection(f: Field, aggregate: AggregateState, rng, workers: int = 1):
    """Roulette-wheel measurement over the frontier.

    Returns ``(Detected | NotDetected, field)``.  On failure the frontier is
    zeroed and the field renormalised (ZeroNorm propagates).
    """
    front = aggregate.frontier()
    p = f.probabilities().ravel()[front]
    u = rng.random()
    i = roulette(p, u)
    if i >= 0:
        w = f.geometry.width
        return Detected((int(front[i] % w), int(front[i] // w)), i), f
    out = f.copy()
    out.values.ravel()[front] = 0
    return NotDetected(float(p.sum())), renormalize(out, workers=workers)


def _max_steps(config: SimConfig) -> int:
    if config.mode == "random_walk":
        return int(math.ceil(round(config.t_max, 9)))
    return int(math.ceil(round(config.t_max / config.dt, 9)))


def _step_time(config: SimConfig) -> float:
    return 1.0 if config.mode == "random_walk" else config.dt


def _advance(config: SimConfig, aggregate: AggregateState, run: ParticleRun, nsteps: int) -> bool:
    """Advance a field particle; returns False if it was absorbed completely."""
    g = config.geometry
    inv_h2 = 1.0 / g.spacing ** 2
    nb = config.workers
    if config.mode == "classical_diffusion":
        coef = config.d_coeff * config.dt
        cur, factor, done, drift = _kernels.advance_classical(
            run.bufs, run.cur, aggregate.occ, run.factor, coef, inv_h2, nsteps, ZERO_NORM_EPS, nb)
        run.cur, run.factor = int(cur), float(factor)
    else:
        alpha = config.hbar * config.dt / config.mass
        done = 0
        drift = 0.0
        if run.steps == 0 and nsteps > 0:
            # forward-Euler bootstrap: second level from the first
            rowsum, rowabs = np.empty(g.height), np.empty(g.height)
            b0 = run.bufs[0]
            _kernels.leapfrog_sweep(b0, b0, run.bufs[1], aggregate.occ, 1.0, 0.5 * alpha,
                                    inv_h2, rowsum, rowabs, nb)
            total = _kernels.tree_sum(rowsum)
            drift = abs(total + _kernels.tree_sum(rowabs) - 1.0)
            run.order = np.array([0, 1, 2], dtype=np.int64)
            done = 1
            if not total > ZERO_NORM_EPS:
                run.factor = 0.0
            else:
                run.f_old = run.factor = 1.0 / math.sqrt(total)
        if run.factor > 0 and nsteps - done > 0:
            f_old, f_new, d2, dr2 = _kernels.advance_quantum(
                run.bufs, run.order, aggregate.occ, run.f_old, run.factor, alpha, inv_h2,
                nsteps - done, ZERO_NORM_EPS, nb)
            run.f_old, run.factor = float(f_old), float(f_new)
            done += int(d2)
            drift = max(drift, float(dr2))
    run.steps += int(done)
    run.elapsed = run.steps * config.dt
    run.drift = max(run.drift, float(drift))
    return run.factor > 0


def _detect(config: SimConfig, aggregate: AggregateState, run: ParticleRun, rng) -> bool:
    """Roulette on the live field.  True when detected; may mark absorption."""
    front = aggregate.frontier()
    if run.mode == "quantum":
        live = run.bufs[run.order[1]].ravel()
        a = live[front] * run.factor
        p = a.real ** 2 + a.imag ** 2
    else:
        live = run.bufs[run.cur].ravel()
        p = live[front] * run.factor
    u = rng.random()
    i = roulette(p, u)
    w = config.width
    if i >= 0:
        run.cell = (int(front[i] % w), int(front[i] // w))
        return True
    # measured absent: project out the frontier and renormalise
    nb = config.workers
    if run.mode == "quantum":
        run.bufs[run.order[0]].ravel()[front] = 0
        live[front] = 0
        t = run.factor ** 2 * _kernels.total_abs2(run.bufs[run.order[1]], nb)
        if not t > ZERO_NORM_EPS:
            run.factor = 0.0
            return False
        g = 1.0 / math.sqrt(t)
        run.factor *= g
        run.f_old *= g
    else:
        live[front] = 0
        t = run.factor * _kernels.total_real(run.bufs[run.cur], nb)
        if not t > ZERO_NORM_EPS:
            run.factor = 0.0
            return False
        run.factor /= t
    return False


def run_particle(config: SimConfig, aggregate: AggregateState, rng,
                 particle: ParticleRun | None = None, global_step: int = 0,
                 on_detect=None) -> ParticleRun:
    """Propagate one particle until it aggregates, is absorbed or runs out of time.

    On detection the cell is added to ``aggregate`` with detection step
    ``global_step + particle steps``.
    """
    run = particle if particle is not None else init_particle(config, aggregate, rng)
    max_steps = _max_steps(config)
    if config.mode == "random_walk":
        return _run_walker(config, aggregate, rng, run, max_steps, global_step)
    n = config.detect_every
    while True:
        if run.steps >= max_steps:
            run.outcome = DISCARDED_TMAX
            return run
        chunk = min(n - run.steps % n, max_steps - run.steps)
        if not _advance(config, aggregate, run, chunk):
            run.outcome = DISCARDED_ABSORBED
            return run
        if run.steps % n == 0:
            if _detect(config, aggregate, run, rng):
                if on_detect is not None:
                    on_detect(run)
                run.detection_step = global_step + run.steps
                aggregate.add(*run.cell, step=run.detection_step)
                run.outcome = AGGREGATED
                return run
            if run.factor == 0:
                run.outcome = DISCARDED_ABSORBED
                return run


def _run_walker(config, aggregate, rng, run, max_steps, global_step):
    w = run.walker
    if config.adaptive_release:
        r_launch, r_kill = _adaptive_radii(config, aggregate)
        sx, sy = aggregate.seed_cell
        code, x, y, steps, relaunch = _kernels.walk_adaptive(
            aggregate.occ, w.x, w.y, sx, sy, r_launch, r_kill, rng, max_steps)
        run.relaunches = int(relaunch)
    else:
        code, x, y, steps = _kernels.walk(aggregate.occ, w.x, w.y, rng, max_steps)
    run.walker = WalkerState(int(x), int(y))
    run.steps = int(steps)
    run.elapsed = float(steps)
    if code == _kernels.WALK_STUCK:
        run.cell = (int(x), int(y))
        # a sticking event costs one micro-step so detection steps strictly increase
        run.steps = max(run.steps, 1)
        run.detection_step = global_step + run.steps
        aggregate.add(x, y, step=run.detection_step)
        run.outcome = AGGREGATED
    else:
        run.outcome = DISCARDED_TMAX
    return run


# -- whole simulations -----------------------------------------------------

@dataclass
class RunLog:
    config: dict
    particles: list = field(default_factory=list)
    aggregated: int = 0
    discarded_tmax: int = 0
    discarded_absorbed: int = 0
    stop_reason: str = ""
    max_norm_drift: float = 0.0
    total_steps: int = 0
    wall_time: float = 0.0
    workers: int = 1

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1)

    def summary(self) -> str:
        return (f"aggregated={self.aggregated} discarded_tmax={self.discarded_tmax} "
                f"discarded_absorbed={self.discarded_absorbed} stop={self.stop_reason} "
                f"wall={self.wall_time:.1f}s")


def run_simulation(config: SimConfig, snapshot_dir=None, progress=None,
                   aggregate: AggregateState | None = None) -> tuple[AggregateState, RunLog]:
    """Grow an aggregate from the centre seed until ``target_particles`` have stuck.

    All randomness comes from one PCG64 stream seeded with ``config.rng_seed``;
    results are bit-identical for a fixed seed at any worker count.
    """
    _kernels.set_workers(config.workers)
    rng = np.random.default_rng(config.rng_seed)
    agg = aggregate if aggregate is not None else AggregateState(config.geometry)
    log = RunLog(config=config.to_dict(), workers=config.workers)
    snap = Path(snapshot_dir) if snapshot_dir and config.snapshot_every > 0 else None
    if snap:
        snap.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    global_step = 0
    log.stop_reason = "target reached"
    while log.aggregated < config.target_particles:
        tp = time.perf_counter()
        try:
            particle = init_particle(config, agg, rng)
        except ClusterTooLarge as exc:
            log.stop_reason = f"cluster too large: {exc}"
            break
        hook = None
        if snap and (log.aggregated + 1) % config.snapshot_every == 0:
            hook = _snapshot_hook(snap, log.aggregated + 1, agg)
        run = run_particle(config, agg, rng, particle, global_step, on_detect=hook)
        global_step += run.steps
        log.total_steps = global_step
        log.max_norm_drift = max(log.max_norm_drift, run.drift)
        entry = {"outcome": run.outcome, "steps": run.steps, "elapsed": run.elapsed,
                 "release": list(run.center), "wall": round(time.perf_counter() - tp, 6)}
        if run.outcome == AGGREGATED:
            log.aggregated += 1
            entry["cell"] = list(run.cell)
            entry["particle_index"] = len(agg) - 1
        elif run.outcome == DISCARDED_TMAX:
            log.discarded_tmax += 1
        else:
            log.discarded_absorbed += 1
        if run.relaunches:
            entry["relaunches"] = run.relaunches
        log.particles.append(entry)
        if progress is not None:
            progress(log, agg)
        if _max_steps(config) == 0:
            log.stop_reason = "t_max = 0: no particle can move, so none can aggregate"
            break
    log.wall_time = time.perf_counter() - t0
    return agg, log


def _snapshot_hook(directory: Path, index: int, aggregate: AggregateState):
    def hook(run: ParticleRun):
        f = run.live_field()
        stem = directory / f"snap_{index:06d}"
        write_pgm(f.values, f"{stem}_field.pgm")
        write_field_csv(f.probabilities(), f"{stem}_field.csv")
        write_pgm(aggregate.occ, f"{stem}_mask.pgm")
    return hook


def norm_drift_probe(config: SimConfig, t_end: float, samples: int = 200):
    """Free evolution of one packet on an empty grid without renormalisation.

    Returns (times, totals) where totals is the probability sum at each sample.
    """
    g = config.geometry
    nsteps = int(math.ceil(round(t_end / config.dt, 9)))
    every = max(1, nsteps // max(1, samples))
    nsteps = (nsteps // every) * every
    c = (g.center[0] + config.effective_release_radius, g.center[1])
    if config.mode == "quantum":
        psi0 = gaussian_packet(g, *c, config.sigma, quantum=True, workers=config.workers)
        bufs = np.zeros((3,) + g.shape, dtype=np.complex128)
        bufs[0] = psi0.values
        alpha = config.hbar * config.dt / config.mass
        rowsum, rowabs = np.empty(g.height), np.empty(g.height)
        occ = np.zeros(g.shape, dtype=np.uint8)
        _kernels.leapfrog_sweep(bufs[0], bufs[0], bufs[1], occ, 1.0, 0.5 * alpha,
                                1.0 / g.spacing ** 2, rowsum, rowabs, config.workers)
        order = np.array([0, 1, 2], dtype=np.int64)
        # the bootstrap above is step 1, so the trace counts from there
        totals = _kernels.free_norm_trace(bufs, order, alpha, 1.0 / g.spacing ** 2,
                                          max(0, nsteps - 1), every, 1, config.workers)
        if every == 1:
            totals = np.concatenate([[_kernels.tree_sum(rowsum)], totals])
        times = np.arange(1, len(totals) + 1) * every * config.dt
        return times, totals
    phi = gaussian_packet(g, *c, config.sigma, quantum=False, workers=config.workers)
    bufs = np.zeros((2,) + g.shape)
    bufs[0] = phi.values
    occ = np.zeros(g.shape, dtype=np.uint8)
    rowsum, rowabs = np.empty(g.height), np.empty(g.height)
    totals = []
    cur = 0
    for step in range(1, nsteps + 1):
        _kernels.diffusion_sweep(bufs[cur], bufs[1 - cur], occ, 1.0, config.d_coeff * config.dt,
                                 1.0 / g.spacing ** 2, rowsum, rowabs, config.workers)
        cur = 1 - cur
        if step % every == 0:
            totals.append(_kernels.tree_sum(rowsum))
    times = np.arange(1, len(totals) + 1) * every * config.dt
    return times, np.array(totals)


def safe_horizon(times: np.ndarray, totals: np.ndarray, tol: float = 1e-4) -> float | None:
    """First sampled time at which |total - 1| exceeds ``tol`` (None if never)."""
    bad = np.nonzero(np.abs(totals - 1.0) > tol)[0]
    return float(times[bad[0]]) if len(bad) else None


__all__ = [
    "AggregateState", "ParticleRun", "RunLog", "ClusterTooLarge", "Detected", "NotDetected",
    "ZeroNorm", "init_particle", "prepare_particle", "absorb_and_renormalize",
    "attempt_detection", "run_particle", "run_simulation", "write_cluster_csv",
    "read_cluster_csv", "norm_drift_probe", "safe_horizon", "roulette",
]
