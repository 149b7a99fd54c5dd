"""Finite-volume solvers for the 1-D Fokker-Planck and backward Kolmogorov equations.

Nodes x_0..x_{m-1} carry control volumes of width h (h/2 at the two ends), so
the trapezoid rule is the natural mass functional. Probability flux lives on
the interfaces x_{i+1/2} and vanishes at the outer walls (reflecting
boundaries). The backward generator is the exact discrete adjoint of the
forward one in the trapezoid inner product, which makes the pairing
<J(., t), P(., t)> constant along matched forward/backward solves.

Operators are kept in LAPACK banded storage ``ab`` of shape (3, m):
``ab[0, 1:]`` upper diagonal, ``ab[1]`` main diagonal, ``ab[2, :-1]`` lower.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

from .schedule import TimeGrid
from .sde_sim import ProcessSpec

NEG_TOL = 1e-12
FIELD_KINDS = ("density", "control", "multiplier", "expectation")


class PDEError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    lo: float
    hi: float
    m: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PDEError("need lo < hi")
        if int(self.m) != self.m or self.m < 3:
            raise PDEError("need at least 3 nodes")
        object.__setattr__(self, "m", int(self.m))

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.m - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.m)

    @property
    def interfaces(self) -> np.ndarray:
        x = self.x
        return 0.5 * (x[1:] + x[:-1])

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights, equal to the control-volume widths."""
        w = np.full(self.m, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def integrate(self, values) -> np.ndarray:
        return np.asarray(values) @ self.weights

    def point_mass(self, x0: float) -> np.ndarray:
        """Discrete delta at the node nearest ``x0`` (unit trapezoid mass)."""
        i = int(np.argmin(np.abs(self.x - x0)))
        p = np.zeros(self.m)
        p[i] = 1.0 / self.weights[i]
        return p

    def refined(self) -> "SpatialGrid":
        return SpatialGrid(self.lo, self.hi, 2 * self.m - 1)


@dataclass(frozen=True)
class Field:
    """Values on (time node, space node); row s belongs to ``time.nodes[s]``.

    After :func:`reverse_time_relabel` the rows are unchanged but each row is
    labelled with the mirrored time t' = t_start + t_end - t.
    """

    values: np.ndarray
    space: SpatialGrid
    time: TimeGrid
    kind: str = "density"
    time_reversed: bool = False
    clip_count: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.time.n + 1, self.space.m):
            raise PDEError(f"values shape {v.shape} does not match grids {(self.time.n + 1, self.space.m)}")
        if self.kind not in FIELD_KINDS:
            raise PDEError(f"unknown field kind {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        t = self.time.nodes
        return (t[0] + t[-1]) - t if self.time_reversed else t.copy()

    def mass(self) -> np.ndarray:
        return self.space.integrate(self.values)

    def log_transform(self) -> "Field":
        """lambda = -ln chi for a positive control field."""
        if np.any(self.values <= 0):
            raise PDEError("log transform needs strictly positive values")
        return replace(self, values=-np.log(self.values), kind="multiplier")

    def to_csv(self, path) -> None:
        """Rows are time nodes, columns space nodes; metadata goes to ``<path>.json``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])
        meta = {
            "kind": self.kind,
            "lo": self.space.lo,
            "hi": self.space.hi,
            "m": self.space.m,
            "time_nodes": self.time.nodes.tolist(),
            "time_reversed": self.time_reversed,
            "clip_count": self.clip_count,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def from_csv(cls, path) -> "Field":
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(
            values,
            SpatialGrid(meta["lo"], meta["hi"], meta["m"]),
            TimeGrid(np.asarray(meta["time_nodes"])),
            meta["kind"],
            meta["time_reversed"],
            meta.get("clip_count", 0),
        )


def reverse_time_relabel(field: Field) -> Field:
    return replace(field, time_reversed=not field.time_reversed)


# -- operators -----------------------------------------------------------------


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1) with B(0) = 1."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    with np.errstate(over="ignore"):
        out[nz] = z[nz] / np.expm1(z[nz])
    return out


def _eval_drift(spec: ProcessSpec, pts: np.ndarray, t: float) -> np.ndarray:
    f = np.asarray(spec.drift(pts[:, None], t), dtype=float).reshape(-1)
    if not np.all(np.isfinite(f)):
        raise PDEError(f"non-finite drift at t={t!r}")
    return f


def _eval_killing(spec: ProcessSpec, x: np.ndarray, t: float) -> np.ndarray:
    if spec.killing is None:
        return np.zeros_like(x)
    return np.asarray(spec.killing(x[:, None], t), dtype=float).reshape(-1)


def interface_coefficients(F: np.ndarray, D: float, h: float, flux: str = "sg") -> tuple[np.ndarray, np.ndarray]:
    """Flux J_{i+1/2} = c_plus P_i - c_minus P_{i+1} from interface drifts ``F``."""
    a = 0.5 * D
    if flux == "sg":
        if a <= 0:
            return np.maximum(F, 0.0), np.maximum(-F, 0.0)
        pe = F * h / a
        return (a / h) * _bernoulli(-pe), (a / h) * _bernoulli(pe)
    if flux == "central":
        return 0.5 * F + a / h, -0.5 * F + a / h
    raise PDEError(f"unknown flux {flux!r}")


def forward_operator(spec: ProcessSpec, space: SpatialGrid, t: float, flux: str = "sg") -> np.ndarray:
    """Banded L^dagger with reflecting walls, killing included as -V."""
    w = space.weights
    cp, cm = interface_coefficients(_eval_drift(spec, space.interfaces, t), spec.D(t), space.h, flux)
    ab = np.zeros((3, space.m))
    ab[0, 1:] = cm / w[:-1]
    ab[2, :-1] = cp / w[1:]
    diag = np.zeros(space.m)
    diag[:-1] -= cp
    diag[1:] -= cm
    ab[1] = diag / w - _eval_killing(spec, space.x, t)
    return ab


def adjoint_banded(ab: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """W^{-1} A^T W in banded storage."""
    out = np.zeros_like(ab)
    out[1] = ab[1]
    out[0, 1:] = ab[2, :-1] * weights[1:] / weights[:-1]
    out[2, :-1] = ab[0, 1:] * weights[:-1] / weights[1:]
    return out


def backward_operator(spec: ProcessSpec, space: SpatialGrid, t: float, flux: str = "sg") -> np.ndarray:
    """Banded generator L (drift, diffusion and -V) acting on expectations."""
    return adjoint_banded(forward_operator(spec, space, t, flux), space.weights)


def banded_to_dense(ab: np.ndarray) -> np.ndarray:
    m = ab.shape[1]
    return np.diag(ab[1]) + np.diag(ab[0, 1:], 1) + np.diag(ab[2, :-1], -1)


def banded_matvec(ab: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = ab[1] * v
    out[:-1] += ab[0, 1:] * v[1:]
    out[1:] += ab[2, :-1] * v[:-1]
    return out


def _shifted(ab: np.ndarray, c: float) -> np.ndarray:
    """I + c * A."""
    out = c * ab
    out[1] += 1.0
    return out


def _implicit(ab: np.ndarray, c: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (I - c A) y = rhs."""
    return solve_banded((1, 1), _shifted(ab, -c), rhs)


def _check_explicit(ab: np.ndarray, dt: float) -> None:
    limit = 1.0 / np.max(np.abs(ab[1]))
    if dt > limit * (1 + 1e-12):
        raise PDEError(f"explicit step dt={dt:.3g} exceeds stability limit {limit:.3g}; use scheme='cn' or refine time")


def _as_initial(values, space: SpatialGrid) -> np.ndarray:
    if isinstance(values, Field):
        values = values.values[-1]
    elif callable(values):
        values = values(space.x)
    v = np.array(values, dtype=float).reshape(-1)
    if v.size != space.m:
        raise PDEError("initial values do not match the spatial grid")
    if not np.all(np.isfinite(v)):
        raise PDEError("initial values must be finite")
    return v


def _clip(v: np.ndarray) -> tuple[np.ndarray, int]:
    bad = v < -NEG_TOL
    n = int(bad.sum())
    if n:
        v = np.where(bad, 0.0, v)
    return v, n


def solve_fokker_planck(
    spec: ProcessSpec,
    p0,
    space: SpatialGrid,
    time: TimeGrid,
    *,
    scheme: str = "cn",
    flux: str = "sg",
    startup_steps: int = 0,
    check_mass: bool = True,
) -> Field:
    """Evolve a density forward on ``time``; killing (if any) removes mass.

    ``startup_steps`` replaces the first Crank-Nicolson steps by two implicit
    Euler half steps each, which damps the oscillations CN produces from
    point-mass initial data.
    """
    p = _as_initial(p0, space)
    if np.any(p < -NEG_TOL):
        raise PDEError("initial density has negative values")
    if check_mass and abs(space.integrate(p) - 1.0) > 1e-6:
        raise PDEError(f"initial density has mass {space.integrate(p):.8f}, expected 1")
    if scheme not in ("cn", "explicit"):
        raise PDEError(f"unknown scheme {scheme!r}")
    out = np.empty((time.n + 1, space.m))
    out[0] = p
    clips = 0
    a_prev = forward_operator(spec, space, float(time.nodes[0]), flux)
    for s, dt in enumerate(time.steps):
        t_next = float(time.nodes[s + 1])
        if scheme == "explicit":
            _check_explicit(a_prev, dt)
            p = banded_matvec(_shifted(a_prev, dt), p)
            a_next = forward_operator(spec, space, t_next, flux)
        else:
            a_next = forward_operator(spec, space, t_next, flux)
            if s < startup_steps:
                a_mid = forward_operator(spec, space, float(time.nodes[s]) + 0.5 * dt, flux)
                p = _implicit(a_next, 0.5 * dt, _implicit(a_mid, 0.5 * dt, p))
            else:
                p = _implicit(a_next, 0.5 * dt, banded_matvec(_shifted(a_prev, 0.5 * dt), p))
        p, n = _clip(p)
        clips += n
        out[s + 1] = p
        a_prev = a_next
    if clips:
        warnings.warn(f"clipped {clips} negative density values below -{NEG_TOL:g}", RuntimeWarning, stacklevel=2)
    return Field(out, space, time, "density", clip_count=clips)


def solve_backward_kolmogorov(
    spec: ProcessSpec,
    terminal,
    space: SpatialGrid,
    time: TimeGrid,
    *,
    scheme: str = "cn",
    flux: str = "sg",
    kind: str = "expectation",
) -> Field:
    """Solve -dJ/dt = L J - V J backward from J(., t_n) = ``terminal``.

    Each step is the exact adjoint of the matching forward step, so with
    V = 0 the trapezoid pairing with a forward density path stays constant.
    """
    J = _as_initial(terminal, space)
    if scheme not in ("cn", "explicit"):
        raise PDEError(f"unknown scheme {scheme!r}")
    w = space.weights
    out = np.empty((time.n + 1, space.m))
    out[-1] = J
    l_next = adjoint_banded(forward_operator(spec, space, float(time.nodes[-1]), flux), w)
    for s in range(time.n - 1, -1, -1):
        dt = float(time.steps[s])
        l_now = adjoint_banded(forward_operator(spec, space, float(time.nodes[s]), flux), w)
        if scheme == "explicit":
            _check_explicit(l_now, dt)
            J = banded_matvec(_shifted(l_now, dt), J)
        else:
            J = banded_matvec(_shifted(l_now, 0.5 * dt), _implicit(l_next, 0.5 * dt, J))
        out[s] = J
        l_next = l_now
    return Field(out, space, time, kind)


def gaussian_on_grid(space: SpatialGrid, mean: float, variance: float) -> np.ndarray:
    x = space.x
    return np.exp(-0.5 * (x - mean) ** 2 / variance) / np.sqrt(2 * np.pi * variance)


def pairing(J: np.ndarray, P: np.ndarray, space: SpatialGrid) -> float:
    """Trapezoid inner product <J, P>."""
    return float(np.sum(space.weights * J * P))
