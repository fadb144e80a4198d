"""Self-supervised training losses: reconstruction, smoothness, divergence.

The divergence term splats the per-particle flow onto a regular grid with
inverse-squared-distance weights, differences the interpolated field along
the axes, and penalizes the absolute finite-difference divergence. All loss
values are differentiable with respect to the flow (and confidences where
they appear); neighbor selections are recorded as constants.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (
    DEFAULT_GRID_MARGIN,
    ParticleFrame,
    SpatialIndex,
    bounding_grid,
    self_excluded_knn,
)
from .errors import ConfigError, ShapeError

SPLAT_NORMALIZED = "normalized"
SPLAT_AS_WRITTEN = "as-written"
BOUNDARY_INTERIOR = "interior"
BOUNDARY_ALL = "all"


@dataclass
class LossWeights:
    """Loss coefficients and the discretization knobs they depend on.

    ``splat_mode``: "normalized" divides by the summed weights (reproduces
    constant fields exactly, the default); "as-written" divides by the
    neighborhood size only. ``boundary``: "interior" averages the divergence
    over grid points whose full stencil stays on the grid (default);
    "all" averages over every grid point, extrapolating at the rim.
    """

    lambda_conf: float = 0.1
    lambda_smooth: float = 10.0
    lambda_div: float = 0.1
    smooth_k: int = 32
    div_k: int = 2
    eps_splat: float = 1e-6
    grid_g: int = 10
    splat_mode: str = SPLAT_NORMALIZED
    boundary: str = BOUNDARY_INTERIOR
    margin_fraction: float = DEFAULT_GRID_MARGIN

    def validate(self):
        if min(self.lambda_conf, self.lambda_smooth, self.lambda_div) < 0:
            raise ConfigError("loss coefficients must be nonnegative")
        if self.smooth_k < 1 or self.div_k < 1:
            raise ConfigError("neighborhood sizes must be >= 1")
        if self.eps_splat <= 0:
            raise ConfigError("eps_splat must be positive")
        if self.grid_g < 2:
            raise ConfigError("grid_g must be >= 2")
        if self.splat_mode not in (SPLAT_NORMALIZED, SPLAT_AS_WRITTEN):
            raise ConfigError(f"unknown splat_mode {self.splat_mode!r}")
        if self.boundary not in (BOUNDARY_INTERIOR, BOUNDARY_ALL):
            raise ConfigError(f"unknown boundary mode {self.boundary!r}")


@dataclass
class GridField:
    """Flow vectors interpolated onto the points of a regular grid."""

    grid: object
    values: np.ndarray


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, ParticleFrame):
        return Tensor(x.positions)
    if hasattr(x, "vectors"):
        return Tensor(x.vectors)
    return Tensor(x)


# ---------------------------------------------------------------------------
# reconstruction


def reconstruction_loss(y_prime, target, confidences, lambda_conf, target_index=None):
    """Confidence-weighted squared distance to each point's nearest target,
    plus a penalty on low confidence.

    The nearest neighbor is found over the full target set from the current
    values of ``y_prime``; the chosen index is a constant on the tape, so
    gradients flow into the warped points and the confidences only.
    """
    yp = _as_tensor(y_prime)
    p = _as_tensor(confidences)
    if yp.data.size == 0 or p.data.size == 0:
        raise ShapeError("reconstruction_loss requires nonempty inputs")
    if yp.data.shape[0] != p.data.shape[0]:
        raise ShapeError("confidences must align with warped points")
    y = target.positions if isinstance(target, ParticleFrame) else np.asarray(target)
    if target_index is None:
        target_index = SpatialIndex(y)
    nn = target_index.nearest(yp.data)
    resid = yp - Tensor(y[nn])
    sq = ad.tsum(ad.mul(resid, resid), axis=1)
    data_term = ad.tmean(ad.mul(p, sq))
    conf_term = ad.tmean(1.0 - p)
    return data_term + lambda_conf * conf_term


# ---------------------------------------------------------------------------
# smoothness


def smooth_loss(frame, flow, smooth_k=32, neighbor_idx=None):
    """Mean L1 difference between each particle's flow and its k nearest
    neighbors' flows (self excluded)."""
    f = _as_tensor(flow)
    n = f.data.shape[0]
    pts = frame.positions if isinstance(frame, ParticleFrame) else np.asarray(frame)
    if pts.shape[0] != n:
        raise ShapeError("flow rows must align with the frame")
    if n < 2:
        warnings.warn("smooth_loss on fewer than 2 particles is 0 by convention")
        return Tensor(0.0)
    if neighbor_idx is None:
        neighbor_idx = self_excluded_knn(pts, smooth_k)
    k_eff = neighbor_idx.shape[1]
    diffs = ad.take_rows(f, neighbor_idx) - ad.reshape(f, (n, 1, 3))
    return ad.tsum(ad.absolute(diffs)) * (1.0 / (n * k_eff))


# ---------------------------------------------------------------------------
# splatting


@dataclass
class SplatPlan:
    """Constant interpolation stencil: which particles feed each query point
    and with what weight. Only the flow values remain variable."""

    neighbor_idx: np.ndarray
    weights: np.ndarray
    denom: np.ndarray
    n_points: int


def build_splat_plan(frame, query_points, div_k, eps_splat, mode=SPLAT_NORMALIZED, index=None):
    """Precompute neighbor indices and inverse-squared-distance weights for
    interpolating particle values at ``query_points``."""
    pts = frame.positions if isinstance(frame, ParticleFrame) else np.asarray(frame)
    q = np.asarray(query_points, dtype=np.float64)
    if index is None:
        index = SpatialIndex(pts)
    k_eff = min(div_k, pts.shape[0])
    idx, dist = index.query_batch(q, k_eff)
    w = 1.0 / (dist * dist + eps_splat)
    if mode == SPLAT_NORMALIZED:
        denom = w.sum(axis=1, keepdims=True)
    elif mode == SPLAT_AS_WRITTEN:
        denom = np.full((q.shape[0], 1), float(k_eff))
    else:
        raise ConfigError(f"unknown splat_mode {mode!r}")
    return SplatPlan(neighbor_idx=idx, weights=w, denom=denom, n_points=pts.shape[0])


def splat_apply(plan, flow):
    """Interpolated flow at the plan's query points: (q, 3) tensor."""
    f = _as_tensor(flow)
    if f.data.shape[0] != plan.n_points:
        raise ShapeError("flow rows do not match the splat plan's particle count")
    gathered = ad.take_rows(f, plan.neighbor_idx)
    weighted = ad.mul(gathered, Tensor(plan.weights[:, :, None]))
    return ad.div(ad.tsum(weighted, axis=1), Tensor(plan.denom))


def splat(frame, flow, grid, div_k=2, eps_splat=1e-6, mode=SPLAT_NORMALIZED):
    """Interpolate per-particle flow onto every grid point."""
    plan = build_splat_plan(frame, grid.lattice_points(), div_k, eps_splat, mode)
    values = splat_apply(plan, flow)
    return GridField(grid=grid, values=values.data.copy())


def splat_at(frame, flow, points, div_k=2, eps_splat=1e-6, mode=SPLAT_NORMALIZED):
    """Interpolate per-particle flow at arbitrary points; returns a tensor."""
    plan = build_splat_plan(frame, points, div_k, eps_splat, mode)
    return splat_apply(plan, flow)


# ---------------------------------------------------------------------------
# divergence


@dataclass
class DivergencePlan:
    """Splat stencils at the six axis-offset evaluation points of each
    retained grid point, ready to apply to any flow over the same frame."""

    grid: object
    spacing: float
    plans_plus: list
    plans_minus: list
    n_points: int
    n_grid_points: int


def build_divergence_plan(frame, weights, grid=None, index=None):
    """Precompute everything about the divergence stencil that depends only
    on particle positions."""
    weights.validate()
    pts = frame.positions if isinstance(frame, ParticleFrame) else np.asarray(frame)
    if grid is None:
        grid = bounding_grid(frame, weights.grid_g, weights.margin_fraction)
    gp = grid.lattice_points()
    if weights.boundary == BOUNDARY_INTERIOR:
        mask = grid.interior_mask()
        if mask.any():
            gp = gp[mask]
    if index is None:
        index = SpatialIndex(pts)
    s = grid.spacing
    plans_plus, plans_minus = [], []
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = s
        plans_plus.append(
            build_splat_plan(pts, gp + offset, weights.div_k, weights.eps_splat, weights.splat_mode, index)
        )
        plans_minus.append(
            build_splat_plan(pts, gp - offset, weights.div_k, weights.eps_splat, weights.splat_mode, index)
        )
    return DivergencePlan(
        grid=grid,
        spacing=s,
        plans_plus=plans_plus,
        plans_minus=plans_minus,
        n_points=pts.shape[0],
        n_grid_points=gp.shape[0],
    )


def divergence_from_plan(plan, flow):
    """Mean absolute central-difference divergence under a prebuilt plan."""
    f = _as_tensor(flow)
    div = None
    inv = 1.0 / (2.0 * plan.spacing)
    for axis in range(3):
        fp = splat_apply(plan.plans_plus[axis], f)
        fm = splat_apply(plan.plans_minus[axis], f)
        term = (ad.select_col(fp, axis) - ad.select_col(fm, axis)) * inv
        div = term if div is None else div + term
    return ad.tmean(ad.absolute(div))


def divergence_loss(frame, flow, weights=None, grid=None):
    """Splat-based zero-divergence penalty for a flow over a frame."""
    if weights is None:
        weights = LossWeights()
    plan = build_divergence_plan(frame, weights, grid=grid)
    return divergence_from_plan(plan, flow)


# ---------------------------------------------------------------------------
# combined objective


@dataclass
class LossContext:
    """Reusable per-sample constants: the target index, the smoothness
    neighbor lists, and the divergence stencil."""

    target_index: SpatialIndex
    smooth_idx: np.ndarray
    divergence_plan: DivergencePlan


def build_loss_context(frame_x, frame_y, weights):
    weights.validate()
    return LossContext(
        target_index=SpatialIndex(frame_y),
        smooth_idx=self_excluded_knn(frame_x, weights.smooth_k),
        divergence_plan=build_divergence_plan(frame_x, weights),
    )


def train_loss(frame_x, frame_y, flow, confidences, weights=None, context=None):
    """Reconstruction + weighted smoothness + weighted divergence.

    Returns (total, components) where components maps each term's name to
    its plain float value before weighting.
    """
    if weights is None:
        weights = LossWeights()
    weights.validate()
    if context is None:
        context = build_loss_context(frame_x, frame_y, weights)
    f = _as_tensor(flow)
    y_prime = Tensor(frame_x.positions) + f
    recon = reconstruction_loss(
        y_prime, frame_y, confidences, weights.lambda_conf, target_index=context.target_index
    )
    smooth = smooth_loss(frame_x, f, weights.smooth_k, neighbor_idx=context.smooth_idx)
    divergence = divergence_from_plan(context.divergence_plan, f)
    total = recon + weights.lambda_smooth * smooth + weights.lambda_div * divergence
    components = {
        "recon": recon.item(),
        "smooth": smooth.item(),
        "div": divergence.item(),
        "total": total.item(),
    }
    return total, components
