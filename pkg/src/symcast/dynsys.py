"""Canonical chaotic flows, fixed-step RK4 integration and Benettin Lyapunov estimates.

Vector fields are written over plain Python floats: for three-dimensional
states this is several times faster than small numpy arrays.
"""

from __future__ import annotations

import json
import math
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .series import TimeSeries

DIVERGENCE_LIMIT = 1e8

RhsFactory = Callable[[Mapping[str, float]], Callable[[Sequence[float]], Sequence[float]]]


class DivergenceError(RuntimeError):
    def __init__(self, system: str, step: int):
        super().__init__(f"{system}: state magnitude exceeded {DIVERGENCE_LIMIT:g} at step {step}")
        self.step = step


class UnknownSystemError(KeyError):
    pass


@dataclass(frozen=True)
class OdeSystem:
    """An autonomous ODE ``dx/dt = f(x; params)``.

    ``period`` is the characteristic oscillation time used to pick a default
    step of ``period / 100`` (100 samples per period).
    """

    name: str
    dimension: int
    parameters: Mapping[str, float]
    default_initial_state: tuple[float, ...]
    rhs_factory: RhsFactory = field(repr=False, compare=False)
    observe_index: int = 0
    period: float = 1.0

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if len(self.default_initial_state) != self.dimension:
            raise ValueError(f"{self.name}: initial state has wrong dimension")
        if not 0 <= self.observe_index < self.dimension:
            raise ValueError(f"{self.name}: observe_index out of range")
        object.__setattr__(self, "parameters", dict(self.parameters))
        object.__setattr__(self, "default_initial_state", tuple(float(v) for v in self.default_initial_state))
        deriv = self.rhs()(list(self.default_initial_state))
        if not all(math.isfinite(v) for v in deriv):
            raise ValueError(f"{self.name}: vector field is not finite at the initial state")

    def rhs(self) -> Callable[[Sequence[float]], Sequence[float]]:
        return self.rhs_factory(self.parameters)

    @property
    def default_dt(self) -> float:
        return self.period / 100.0


@dataclass(frozen=True)
class SimulationConfig:
    n_points: int = 1200
    dt: float | None = None
    transient_skip: int = 1000
    perturbation: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if self.transient_skip < 0:
            raise ValueError("transient_skip must be >= 0")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.perturbation < 0:
            raise ValueError("perturbation must be >= 0")


@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_max: float
    renorm_interval: int
    horizon: int


# -- vector fields ---------------------------------------------------------


def _lorenz(p):
    s, r, b = p["sigma"], p["rho"], p["beta"]

    def f(x):
        return (s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2])

    return f


def _rossler(p):
    a, b, c = p["a"], p["b"], p["c"]

    def f(x):
        return (-x[1] - x[2], x[0] + a * x[1], b + x[2] * (x[0] - c))

    return f


def _chua(p):
    alpha, beta, m0, m1 = p["alpha"], p["beta"], p["m0"], p["m1"]

    def f(x):
        g = m1 * x[0] + 0.5 * (m0 - m1) * (abs(x[0] + 1.0) - abs(x[0] - 1.0))
        return (alpha * (x[1] - x[0] - g), x[0] - x[1] + x[2], -beta * x[1])

    return f


def _chen(p):
    a, b, c = p["a"], p["b"], p["c"]

    def f(x):
        return (a * (x[1] - x[0]), (c - a) * x[0] - x[0] * x[2] + c * x[1], x[0] * x[1] - b * x[2])

    return f


def _lu(p):
    a, b, c = p["a"], p["b"], p["c"]

    def f(x):
        return (a * (x[1] - x[0]), -x[0] * x[2] + c * x[1], x[0] * x[1] - b * x[2])

    return f


def _halvorsen(p):
    a = p["a"]

    def f(x):
        return (
            -a * x[0] - 4.0 * x[1] - 4.0 * x[2] - x[1] * x[1],
            -a * x[1] - 4.0 * x[2] - 4.0 * x[0] - x[2] * x[2],
            -a * x[2] - 4.0 * x[0] - 4.0 * x[1] - x[0] * x[0],
        )

    return f


def _sprott_b(p):
    a, b, c = p["a"], p["b"], p["c"]

    def f(x):
        return (a * x[1] * x[2], x[0] - b * x[1], c - x[0] * x[1])

    return f


def _rucklidge(p):
    a, b = p["a"], p["b"]

    def f(x):
        return (-a * x[0] + b * x[1] - x[1] * x[2], x[0], -x[2] + x[1] * x[1])

    return f


def _arneodo(p):
    a, b, c, d = p["a"], p["b"], p["c"], p["d"]

    def f(x):
        return (x[1], x[2], -a * x[0] - b * x[1] - c * x[2] + d * x[0] ** 3)

    return f


def _aizawa(p):
    a, b, c, d, e, ff = p["a"], p["b"], p["c"], p["d"], p["e"], p["f"]

    def f(x):
        u, v, w = x
        return (
            (w - b) * u - d * v,
            d * u + (w - b) * v,
            c + a * w - w**3 / 3.0 - (u * u + v * v) * (1.0 + e * w) + ff * w * u**3,
        )

    return f


def _thomas(p):
    b = p["b"]

    def f(x):
        return (math.sin(x[1]) - b * x[0], math.sin(x[2]) - b * x[1], math.sin(x[0]) - b * x[2])

    return f


# name -> (rhs factory, parameters, initial state, characteristic period)
_BUILTIN: dict[str, tuple[RhsFactory, dict, tuple, float]] = {
    "lorenz": (_lorenz, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}, (-9.79, -15.04, 20.53), 1.5),
    "rossler": (_rossler, {"a": 0.2, "b": 0.2, "c": 5.7}, (6.5, 0.4, 0.03), 5.9),
    "chua": (_chua, {"alpha": 15.6, "beta": 28.0, "m0": -8.0 / 7.0, "m1": -5.0 / 7.0}, (0.7, 0.0, 0.0), 2.0),
    "chen": (_chen, {"a": 35.0, "b": 3.0, "c": 28.0}, (-10.0, 0.0, 37.0), 0.5),
    "lu": (_lu, {"a": 36.0, "b": 3.0, "c": 20.0}, (-10.0, -10.0, 18.0), 0.8),
    "halvorsen": (_halvorsen, {"a": 1.4}, (-5.0, 0.0, 0.0), 2.5),
    "sprott_b": (_sprott_b, {"a": 1.0, "b": 1.0, "c": 1.0}, (0.5, 0.5, 0.5), 5.0),
    "rucklidge": (_rucklidge, {"a": 2.0, "b": 6.7}, (1.0, 0.0, 4.5), 4.0),
    "arneodo": (_arneodo, {"a": -5.5, "b": 3.5, "c": 1.0, "d": -1.0}, (0.2, 0.2, -0.75), 4.0),
    "aizawa": (
        _aizawa,
        {"a": 0.95, "b": 0.7, "c": 0.6, "d": 3.5, "e": 0.25, "f": 0.1},
        (0.1, 0.0, 0.0),
        2.0,
    ),
    "thomas": (_thomas, {"b": 0.1998}, (0.1, 0.0, 0.0), 10.0),
}

_DISPLAY = {
    "lorenz": "Lorenz",
    "rossler": "Rössler",
    "chua": "Chua",
    "chen": "Chen",
    "lu": "Lu",
    "halvorsen": "Halvorsen",
    "sprott_b": "Sprott B",
    "rucklidge": "Rucklidge",
    "arneodo": "Arneodo",
    "aizawa": "Aizawa",
    "thomas": "Thomas",
}


def _key(name: str) -> str:
    folded = unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode()
    return folded.strip().lower().replace("-", "_").replace(" ", "_")


def _build(key: str, **overrides) -> OdeSystem:
    factory, params, x0, period = _BUILTIN[key]
    system = OdeSystem(_DISPLAY[key], len(x0), params, x0, factory, 0, period)
    return replace(system, **overrides) if overrides else system


system_key = _key


def catalog() -> list[OdeSystem]:
    return [_build(k) for k in _BUILTIN]


def get_system(name: str) -> OdeSystem:
    key = _key(name)
    if key not in _BUILTIN:
        raise UnknownSystemError(f"unknown system {name!r}; available: {', '.join(_DISPLAY.values())}")
    return _build(key)


def load_system_file(path) -> list[OdeSystem]:
    """Load parameter / initial-state overrides of built-in systems from JSON.

    The file holds a list of objects with a required ``rhs`` naming a built-in
    vector field and optional ``name``, ``parameters``, ``initial_state``,
    ``observe_index`` and ``period`` entries.
    """
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(entries, dict):
        entries = [entries]
    systems = []
    for entry in entries:
        base = get_system(entry["rhs"])
        unknown = set(entry.get("parameters", {})) - set(base.parameters)
        if unknown:
            raise ValueError(f"{entry['rhs']}: unknown parameters {sorted(unknown)}")
        params = {**base.parameters, **entry.get("parameters", {})}
        systems.append(
            replace(
                base,
                name=entry.get("name", base.name),
                parameters=params,
                default_initial_state=tuple(entry.get("initial_state", base.default_initial_state)),
                observe_index=int(entry.get("observe_index", base.observe_index)),
                period=float(entry.get("period", base.period)),
            )
        )
    return systems


# -- integration -----------------------------------------------------------


def rk4_step(f, x, h):
    k1 = f(x)
    k2 = f([a + 0.5 * h * k for a, k in zip(x, k1)])
    k3 = f([a + 0.5 * h * k for a, k in zip(x, k2)])
    k4 = f([a + h * k for a, k in zip(x, k3)])
    h6 = h / 6.0
    return [a + h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)]


def _check(name, x, step):
    for v in x:
        if not abs(v) <= DIVERGENCE_LIMIT:  # also catches NaN
            raise DivergenceError(name, step)


def initial_state(system: OdeSystem, config: SimulationConfig) -> list[float]:
    """Default state jittered by ``perturbation * max(1, |x0|) * N(0, 1)``."""
    x0 = np.asarray(system.default_initial_state, dtype=float)
    if config.perturbation > 0:
        rng = np.random.default_rng(config.seed)
        x0 = x0 + config.perturbation * np.maximum(1.0, np.abs(x0)) * rng.standard_normal(x0.size)
    return [float(v) for v in x0]


def simulate(system: OdeSystem, config: SimulationConfig) -> np.ndarray:
    """Full state trajectory of shape ``(n_points, dimension)`` after the transient."""
    f = system.rhs()
    h = config.dt if config.dt is not None else system.default_dt
    x = initial_state(system, config)
    step = 0
    for step in range(1, config.transient_skip + 1):
        x = rk4_step(f, x, h)
        _check(system.name, x, step)
    out = np.empty((config.n_points, system.dimension))
    out[0] = x
    for i in range(1, config.n_points):
        step += 1
        x = rk4_step(f, x, h)
        _check(system.name, x, step)
        out[i] = x
    return out


def integrate_rk4(system: OdeSystem, config: SimulationConfig) -> TimeSeries:
    traj = simulate(system, config)
    return TimeSeries(traj[:, system.observe_index], name=system.name)


def lyapunov_max(
    system: OdeSystem,
    config: SimulationConfig,
    *,
    delta: float = 1e-8,
    renorm_interval: int = 10,
    horizon: int = 100_000,
) -> LyapunovEstimate:
    """Largest Lyapunov exponent by the two-trajectory (Benettin) method.

    A companion trajectory starts ``delta`` away in a seeded random direction;
    every ``renorm_interval`` steps its separation is logged and rescaled back
    to ``delta``. The exponent is the mean log growth per unit time.
    """
    if renorm_interval < 1 or horizon < renorm_interval:
        raise ValueError("need 1 <= renorm_interval <= horizon")
    f = system.rhs()
    h = config.dt if config.dt is not None else system.default_dt
    x = initial_state(system, config)
    for step in range(1, config.transient_skip + 1):
        x = rk4_step(f, x, h)
        _check(system.name, x, step)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A9]))
    direction = rng.standard_normal(system.dimension)
    direction /= np.linalg.norm(direction)
    y = [a + delta * float(d) for a, d in zip(x, direction)]

    n_blocks = horizon // renorm_interval
    log_sum = 0.0
    step = config.transient_skip
    for _ in range(n_blocks):
        for _ in range(renorm_interval):
            step += 1
            x = rk4_step(f, x, h)
            y = rk4_step(f, y, h)
        _check(system.name, x, step)
        dist = math.sqrt(sum((b - a) ** 2 for a, b in zip(x, y)))
        if dist == 0.0 or not math.isfinite(dist):
            raise DivergenceError(system.name, step)
        log_sum += math.log(dist / delta)
        scale = delta / dist
        y = [a + (b - a) * scale for a, b in zip(x, y)]
    lam = log_sum / (n_blocks * renorm_interval * h)
    return LyapunovEstimate(lam, renorm_interval, n_blocks * renorm_interval)
