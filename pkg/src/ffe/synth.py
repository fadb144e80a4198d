"""Analytic synthetic flow cases with exact ground truth.

Each case samples a source frame uniformly in a box, displaces every
particle under a known velocity field, and emits the displaced set in a
seeded random order (the target frame must not leak the correspondence).
"""

from dataclasses import dataclass, field

import numpy as np

from .core import FlowField, ParticleFrame
from .errors import ConfigError

CASE_UNIFORM = "uniform"
CASE_ROTATION = "rigid_rotation"
CASE_BELTRAMI = "beltrami"

DEFAULT_BOX = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
BELTRAMI_SUBSTEPS = 16
BELTRAMI_A = np.pi / 4
BELTRAMI_D = np.pi / 2
BELTRAMI_NU = 1.0


@dataclass
class FlowCase:
    """One synthetic generation recipe.

    The per-case default time steps put the median displacement near twice
    the median inter-particle spacing at n=512, so correspondence is
    nontrivial without being hopeless.

    ``params`` per kind:
      uniform        velocity: 3-vector
      rigid_rotation axis: 3-vector, rate: rad per unit time, center: 3-vector
      beltrami       a, d, nu, t0
    """

    kind: str
    n: int = 512
    dt: float = 0.05
    seed: int = 0
    box: tuple = DEFAULT_BOX
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in (CASE_UNIFORM, CASE_ROTATION, CASE_BELTRAMI):
            raise ConfigError(f"unknown case kind {self.kind!r}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.kind == CASE_BELTRAMI:
            if self.params.get("a", BELTRAMI_A) <= 0 or self.params.get("d", BELTRAMI_D) <= 0:
                raise ConfigError("beltrami parameters a, d must be positive")


def uniform_case(velocity=(1.0, 0.5, 0.25), n=512, dt=0.127, seed=0, box=DEFAULT_BOX):
    return FlowCase(CASE_UNIFORM, n=n, dt=dt, seed=seed, box=box, params={"velocity": tuple(velocity)})


def rotation_case(axis=(0.0, 0.0, 1.0), rate=1.0, center=(0.0, 0.0, 0.0), n=512, dt=0.36, seed=0, box=DEFAULT_BOX):
    return FlowCase(
        CASE_ROTATION,
        n=n,
        dt=dt,
        seed=seed,
        box=box,
        params={"axis": tuple(axis), "rate": float(rate), "center": tuple(center)},
    )


def beltrami_case(a=BELTRAMI_A, d=BELTRAMI_D, nu=BELTRAMI_NU, t0=0.0, n=512, dt=0.055, seed=0, box=DEFAULT_BOX):
    return FlowCase(
        CASE_BELTRAMI,
        n=n,
        dt=dt,
        seed=seed,
        box=box,
        params={"a": float(a), "d": float(d), "nu": float(nu), "t0": float(t0)},
    )


def beltrami_velocity(points, a=BELTRAMI_A, d=BELTRAMI_D, nu=BELTRAMI_NU, t=0.0):
    """Exact unsteady Beltrami velocity; analytically divergence-free.

    ``points`` is (n, 3) or a single 3-vector; returns matching shape.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    decay = np.exp(-nu * d * d * t)
    u = -a * (np.exp(a * x) * np.sin(a * y + d * z) + np.exp(a * z) * np.cos(a * x + d * y))
    v = -a * (np.exp(a * y) * np.sin(a * z + d * x) + np.exp(a * x) * np.cos(a * y + d * z))
    w = -a * (np.exp(a * z) * np.sin(a * x + d * y) + np.exp(a * y) * np.cos(a * z + d * x))
    out = np.stack([u, v, w], axis=-1) * decay
    if np.asarray(points).ndim == 1:
        return out[0]
    return out


def _rotation_matrix(axis, angle):
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    return np.eye(3) * c + s * K + (1 - c) * np.outer(ax, ax)


def _beltrami_displacement(points, params, dt, substeps=BELTRAMI_SUBSTEPS):
    """Pathline displacement under the Beltrami field, classic RK4."""
    a = params.get("a", BELTRAMI_A)
    d = params.get("d", BELTRAMI_D)
    nu = params.get("nu", BELTRAMI_NU)
    t = params.get("t0", 0.0)
    h = dt / substeps
    pos = np.array(points, dtype=np.float64)
    for _ in range(substeps):
        k1 = beltrami_velocity(pos, a, d, nu, t)
        k2 = beltrami_velocity(pos + 0.5 * h * k1, a, d, nu, t + 0.5 * h)
        k3 = beltrami_velocity(pos + 0.5 * h * k2, a, d, nu, t + 0.5 * h)
        k4 = beltrami_velocity(pos + h * k3, a, d, nu, t + h)
        pos = pos + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return pos - np.asarray(points)


def case_displacement(case, points, substeps=BELTRAMI_SUBSTEPS):
    """Exact (uniform, rotation) or integrated (beltrami) displacement over dt."""
    pts = np.asarray(points, dtype=np.float64)
    if case.kind == CASE_UNIFORM:
        v = np.asarray(case.params.get("velocity", (1.0, 0.0, 0.0)))
        return np.broadcast_to(v * case.dt, pts.shape).copy()
    if case.kind == CASE_ROTATION:
        center = np.asarray(case.params.get("center", (0.0, 0.0, 0.0)))
        R = _rotation_matrix(case.params.get("axis", (0, 0, 1)), case.params.get("rate", 1.0) * case.dt)
        return (pts - center) @ R.T + center - pts
    if case.kind == CASE_BELTRAMI:
        return _beltrami_displacement(pts, case.params, case.dt, substeps)
    raise ConfigError(f"unknown case kind {case.kind!r}")


def generate_pair(case, substeps=BELTRAMI_SUBSTEPS):
    """(source frame, shuffled target frame, ground-truth flow) for a case."""
    case.validate()
    rng = np.random.default_rng(case.seed)
    lo = np.asarray(case.box[0], dtype=np.float64)
    hi = np.asarray(case.box[1], dtype=np.float64)
    x = rng.uniform(lo, hi, (case.n, 3))
    disp = case_displacement(case, x, substeps)
    target = x + disp
    perm = rng.permutation(case.n)
    return ParticleFrame(x), ParticleFrame(target[perm]), FlowField(disp)
