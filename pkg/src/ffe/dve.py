"""Test-time flow refinement: optimize a per-particle residual against the
confidence-weighted reconstruction objective.

Only the residual is optimized; confidences and the network are untouched.
The nearest target of each warped point is recomputed every step and treated
as a constant, so the objective stays piecewise smooth in the residual.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import ParticleFrame, SpatialIndex
from .errors import ConfigError, NumericalError, ShapeError

DEFAULT_STEPS = 150
DEFAULT_LR = 0.01


@dataclass
class DveConfig:
    steps: int = DEFAULT_STEPS
    learning_rate: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class RefinementTrace:
    """Objective value per step (steps + 1 entries including the start),
    the final residual, and the refined flow."""

    objectives: list
    residual: np.ndarray
    flow: np.ndarray

    @property
    def initial_objective(self):
        return self.objectives[0]

    @property
    def final_objective(self):
        return min(self.objectives)


def _objective(y_prime_data, residual, target_positions, target_index, p):
    q = y_prime_data + residual.data
    nn = target_index.nearest(q)
    moved = Tensor(y_prime_data) + residual
    diff = moved - Tensor(target_positions[nn])
    return ad.tmean(ad.mul(Tensor(p), ad.tsum(ad.mul(diff, diff), axis=1)))


def refine(frame_x, flow_init, confidences, frame_y, cfg=None):
    """Adam-optimize a residual added to the initial flow.

    Keeps the best-objective iterate, so the returned flow never scores worse
    than the input. The initial flow array is not modified.
    """
    if cfg is None:
        cfg = DveConfig()
    cfg.validate()
    x = frame_x.positions if isinstance(frame_x, ParticleFrame) else np.asarray(frame_x)
    y = frame_y.positions if isinstance(frame_y, ParticleFrame) else np.asarray(frame_y)
    f0 = flow_init.vectors if hasattr(flow_init, "vectors") else np.asarray(flow_init, dtype=np.float64)
    p = np.asarray(confidences, dtype=np.float64)
    if f0.shape != x.shape:
        raise ShapeError(f"flow shape {f0.shape} does not match frame shape {x.shape}")
    if p.shape[0] != x.shape[0]:
        raise ShapeError("confidences must align with the source frame")

    y_prime = x + f0
    target_index = SpatialIndex(y)
    residual = Tensor(np.zeros_like(f0), requires_grad=True)
    m = np.zeros_like(f0)
    v = np.zeros_like(f0)

    objectives = []
    best_obj = np.inf
    best_residual = residual.data.copy()
    for step in range(cfg.steps):
        residual.zero_grad()
        obj = _objective(y_prime, residual, y, target_index, p)
        val = obj.item()
        if not np.isfinite(val):
            raise NumericalError(f"non-finite objective at step {step}", context=step)
        objectives.append(val)
        if val < best_obj:
            best_obj = val
            best_residual = residual.data.copy()
        ad.backward(obj)
        g = residual.grad if residual.grad is not None else np.zeros_like(f0)
        t = step + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        residual.data = residual.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_opt)

    final = _objective(y_prime, residual, y, target_index, p).item()
    if not np.isfinite(final):
        raise NumericalError(f"non-finite objective at step {cfg.steps}", context=cfg.steps)
    objectives.append(final)
    if final < best_obj:
        best_obj = final
        best_residual = residual.data.copy()

    return RefinementTrace(
        objectives=objectives,
        residual=best_residual,
        flow=f0 + best_residual,
    )
