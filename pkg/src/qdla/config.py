"""Simulation configuration: validation, key=value files, presets, seeds."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .lattice import GridGeometry
from .propagators import DiffusionParams, QuantumParams, validate_stability

MODES = ("random_walk", "classical_diffusion", "quantum")
_MODE_ALIASES = {
    "rw": "random_walk", "random-walk": "random_walk", "walk": "random_walk",
    "classical": "classical_diffusion", "diffusion": "classical_diffusion",
    "classical-diffusion": "classical_diffusion", "schrodinger": "quantum", "qdla": "quantum",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    width: int = 256
    height: int = 256
    spacing: float = 1.0
    mode: str = "classical_diffusion"
    dt: float = 0.05
    detect_every: int = 20
    d_coeff: float = 0.25
    hbar: float = 1.0
    mass: float = 1.0
    sigma: float = 10.0
    release_radius: int | None = None  # None -> auto
    t_max: float = 500_000.0
    target_particles: int = 2000
    rng_seed: int = 0
    workers: int = 1
    override_detect_cadence: bool = False
    adaptive_release: bool = False
    snapshot_every: int = 0

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.geometry
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.detect_every < 1:
            raise ConfigError("detect_every must be a positive integer")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.t_max < 0:
            raise ConfigError("t_max must be non-negative")
        if self.target_particles < 1:
            raise ConfigError("target_particles must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")
        if mode != "random_walk":
            validate_stability(self.transport_params, self.geometry)
            cadence = round(1.0 / self.dt)
            if self.detect_every != cadence and not self.override_detect_cadence:
                raise ConfigError(
                    f"detect_every={self.detect_every} but round(1/dt)={cadence}; "
                    "detection cadence must satisfy n = 1/dt (set override_detect_cadence to bypass)")
        r = self.effective_release_radius
        half = min(self.width, self.height) / 2
        if r < 1:
            raise ConfigError(f"release radius {r} leaves no room on a "
                              f"{self.width}x{self.height} grid with sigma={self.sigma}")
        if r + math.ceil(self.sigma) > half:
            raise ConfigError(f"release_radius + ceil(sigma) = {r + math.ceil(self.sigma)} "
                              f"exceeds half the grid ({half:g})")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width, self.height, self.spacing)

    @property
    def transport_params(self):
        if self.mode == "classical_diffusion":
            return DiffusionParams(self.d_coeff, self.dt)
        if self.mode == "quantum":
            return QuantumParams(self.dt, self.hbar, self.mass)
        return None

    @property
    def effective_release_radius(self) -> int:
        if self.release_radius is not None:
            return int(self.release_radius)
        return auto_release_radius(self.width, self.height, self.sigma)

    @property
    def cluster_limit(self) -> float:
        """Cluster radius at which no further particles are released."""
        if self.mode == "random_walk":
            if self.adaptive_release:
                return min(self.width, self.height) // 2 - 10
            return self.effective_release_radius - 2
        return self.effective_release_radius - 2 * self.sigma

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = "auto"
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def auto_release_radius(width: int, height: int, sigma: float) -> int:
    """floor(min(w, h)/2) - ceil(sigma) - 5; gives 113 for 256^2 at sigma=10."""
    return min(width, height) // 2 - math.ceil(sigma) - 5


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(SimConfig)}
_KEY_ALIASES = {"grid": "grid", "seed": "rng_seed", "particles": "target_particles",
                "n": "detect_every"}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    s = raw.strip()
    if key == "release_radius":
        return None if s.lower() in ("auto", "none", "") else int(s)
    if kind == "bool":
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        f = float(s)
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(s) if s.lstrip("-").isdigit() else int(f)
    if kind == "float":
        return float(s)
    return s


def parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().replace("*", "x").split("x")
    if len(parts) == 1:
        n = int(parts[0])
        return n, n
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise ConfigError(f"bad grid spec {text!r}; use N or WxH")


def normalize_items(items: dict) -> dict:
    """Map loose keys (dashes, aliases, grid=WxH) onto SimConfig field values."""
    out = {}
    for key, raw in items.items():
        if raw is None:
            continue
        k = key.strip().replace("-", "_").lower()
        k = _KEY_ALIASES.get(k, k)
        if k == "grid":
            out["width"], out["height"] = parse_grid(str(raw))
            continue
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[k] = raw if not isinstance(raw, str) else _coerce(k, raw)
    return out


def parse_config_text(text: str) -> dict:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return normalize_items(items)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> SimConfig:
    """Build a SimConfig from preset, then file, then explicit overrides."""
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if overrides:
        values.update(normalize_items(overrides))
    try:
        return SimConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# Headline setups; target_particles is reduced to desk scale.
PRESETS: dict[str, dict] = {
    # 256^2, sigma=10, dt=0.05, n=20, D=0.25, release radius 113.
    "classical-256": dict(width=256, height=256, mode="classical_diffusion", dt=0.05,
                          detect_every=20, d_coeff=0.25, sigma=10.0, release_radius=113,
                          t_max=500_000.0, target_particles=1500),
    "quantum-256-sigma10": dict(width=256, height=256, mode="quantum", dt=0.05,
                                detect_every=20, hbar=1.0, mass=1.0, sigma=10.0,
                                release_radius=113, t_max=500_000.0, target_particles=1500),
    # sigma is swept; radius follows the auto rule for each sigma.
    "quantum-512-sweep": dict(width=512, height=512, mode="quantum", dt=0.05,
                              detect_every=20, hbar=1.0, mass=1.0, sigma=10.0,
                              release_radius=None, t_max=500_000.0, target_particles=1500),
    "random-walk-512": dict(width=512, height=512, mode="random_walk", dt=1.0,
                            detect_every=1, sigma=10.0, t_max=500_000.0,
                            target_particles=20000, adaptive_release=True),
}

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def child_seed(master: int, sigma_index: int, replicate: int) -> int:
    """splitmix64(master XOR splitmix64((sigma_index << 32) | replicate))."""
    key = ((sigma_index & 0xFFFFFFFF) << 32) | (replicate & 0xFFFFFFFF)
    return splitmix64((master & _MASK64) ^ splitmix64(key))
