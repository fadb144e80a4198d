"""Soft correspondence between two particle sets via entropic optimal transport.

Cosine feature similarity defines a cost; a marginal-relaxed Sinkhorn solve
(run in the log domain, unrolled so gradients reach the cost matrix) yields a
transport plan. Each source row keeps its top-L plan entries, softmax-weighted
into a target estimate, a matching confidence, and an initial flow vector.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import ParticleFrame
from .errors import ConfigError, NumericalError, ShapeError

DEFAULT_EPSILON = 0.03
DEFAULT_LAMBDA = 10.0
DEFAULT_TRAIN_ITERS = 30
DEFAULT_INFER_ITERS = 100
DEFAULT_TOP_L = 32

# Soft-correspondence weighting over each row's top-L support.
# "plan": normalize the plan values themselves (the softmax of their logs);
#         plan entries spread over orders of magnitude, so the weights are
#         sharp and the estimate tracks the best candidates.
# "exp-plan": softmax of the raw plan values; entries are O(1/n) masses, so
#         exp() of them is near-flat and the estimate averages the support.
WEIGHTS_PLAN = "plan"
WEIGHTS_EXP_PLAN = "exp-plan"
DEFAULT_WEIGHT_MODE = WEIGHTS_PLAN


@dataclass
class OTConfig:
    epsilon: float = DEFAULT_EPSILON
    lam: float = DEFAULT_LAMBDA
    sinkhorn_iters: int = DEFAULT_INFER_ITERS
    top_l: int = DEFAULT_TOP_L

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam <= 0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.sinkhorn_iters < 1:
            raise ConfigError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        if self.top_l < 1:
            raise ConfigError(f"top_l must be >= 1, got {self.top_l}")


@dataclass
class SolveDiagnostics:
    """Per-iteration convergence record of one transport solve.

    ``plan_residuals[t]`` is the max absolute change of any plan entry
    between iterations t and t+1 (the fixed-point residual of the update
    map); ``dual_residuals`` is the same measure on the log-domain duals.
    """

    dual_residuals: list = field(default_factory=list)
    plan_residuals: list = field(default_factory=list)


@dataclass
class TransportPlan:
    """Plan, top-L support, soft weights, confidences, and initial flow."""

    plan: Tensor
    top_idx: np.ndarray
    weights_top: Tensor
    confidences: Tensor
    flow: Tensor

    def weights_dense(self):
        """Materialize the (n1, n2) weight matrix (zero off the support)."""
        n1 = self.plan.data.shape[0]
        n2 = self.plan.data.shape[1]
        w = np.zeros((n1, n2))
        rows = np.repeat(np.arange(n1), self.top_idx.shape[1])
        w[rows, self.top_idx.reshape(-1)] = self.weights_top.data.reshape(-1)
        return w


def similarity_matrix(fx, fy):
    """Cosine similarity of every feature-row pair: values in [-1, 1]."""
    fx = fx if isinstance(fx, Tensor) else Tensor(fx)
    fy = fy if isinstance(fy, Tensor) else Tensor(fy)
    if fx.data.ndim != 2 or fy.data.ndim != 2 or fx.data.shape[1] != fy.data.shape[1]:
        raise ShapeError(
            f"feature widths must match, got {fx.data.shape} and {fy.data.shape}"
        )
    nx = ad.sqrt(ad.tsum(ad.mul(fx, fx), axis=1, keepdims=True))
    ny = ad.sqrt(ad.tsum(ad.mul(fy, fy), axis=1, keepdims=True))
    dots = ad.matmul(fx, ad.transpose(fy))
    denom = ad.matmul(nx, ad.transpose(ny)) + 1e-12
    return ad.div(dots, denom)


def cost_matrix(similarity):
    """Transport cost: one minus similarity."""
    return 1.0 - similarity


def _dual_update(log_k, lv, log_marginal, fi, transpose):
    """Fused relaxed-Sinkhorn half step: fi * (log_marginal - LSE(logK + lv)).

    Backward recomputes the softmax from the inputs instead of caching the
    (n1, n2) exponentials, which keeps an unrolled solve's tape small.
    """

    def combined():
        if transpose:
            return log_k.data.T + lv.data[None, :]
        return log_k.data + lv.data[None, :]

    m = combined()
    mx = m.max(axis=1, keepdims=True)
    lse = (mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True)))[:, 0]
    out_data = fi * (log_marginal - lse)

    def back(g):
        s = np.exp(combined() - lse[:, None])
        gm = (-fi * g)[:, None] * s
        ad.accumulate(log_k, gm.T if transpose else gm)
        ad.accumulate(lv, gm.sum(axis=0))

    return ad.make_op(out_data, (log_k, lv), back)


def solve_transport(cost, cfg, track_plan_residuals=False):
    """Relaxed entropic transport plan for a cost matrix.

    Both marginals are softly constrained toward uniform mass 1/n1 on every
    point; each Sinkhorn half step is damped by the exponent lam/(lam+eps).
    The loop runs for exactly ``cfg.sinkhorn_iters`` iterations, unrolled on
    the tape so gradients flow back into the cost. Returns (plan,
    diagnostics); the plan is strictly positive.
    """
    cfg.validate()
    cost_t = cost if isinstance(cost, Tensor) else Tensor(cost)
    if cost_t.data.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {cost_t.data.shape}")
    if not np.isfinite(cost_t.data).all():
        raise NumericalError("cost matrix contains non-finite entries")
    n1, n2 = cost_t.data.shape
    fi = cfg.lam / (cfg.lam + cfg.epsilon)
    la = np.full(n1, -np.log(n1))
    lb = np.full(n2, -np.log(n1))
    log_k = ad.mul(cost_t, Tensor(-1.0 / cfg.epsilon))

    lu = Tensor(np.zeros(n1))
    lv = Tensor(np.zeros(n2))
    diag = SolveDiagnostics()
    prev_plan = None
    if track_plan_residuals:
        prev_plan = np.exp(lu.data[:, None] + log_k.data + lv.data[None, :])
    for it in range(cfg.sinkhorn_iters):
        lu_new = _dual_update(log_k, lv, la, fi, transpose=False)
        lv_new = _dual_update(log_k, lu_new, lb, fi, transpose=True)
        if not (np.isfinite(lu_new.data).all() and np.isfinite(lv_new.data).all()):
            raise NumericalError(
                f"non-finite dual at sinkhorn iteration {it}", context=it
            )
        diag.dual_residuals.append(
            max(
                float(np.abs(lu_new.data - lu.data).max()),
                float(np.abs(lv_new.data - lv.data).max()),
            )
        )
        lu, lv = lu_new, lv_new
        if track_plan_residuals:
            plan_now = np.exp(lu.data[:, None] + log_k.data + lv.data[None, :])
            diag.plan_residuals.append(float(np.abs(plan_now - prev_plan).max()))
            prev_plan = plan_now
    logits = ad.reshape(lu, (n1, 1)) + log_k + ad.reshape(lv, (1, n2))
    plan = ad.exp(logits)
    if not np.isfinite(plan.data).all():
        raise NumericalError("non-finite transport plan after solve")
    return plan, diag


def top_l_support(plan_data, top_l):
    """Per-row indices of the top-L plan values (value ties -> lower index)."""
    n1, n2 = plan_data.shape
    l_eff = min(top_l, n2)
    part = np.argpartition(-plan_data, l_eff - 1, axis=1)[:, :l_eff]
    vals = np.take_along_axis(plan_data, part, axis=1)
    order = np.lexsort((part, -vals), axis=1)
    return np.take_along_axis(part, order, axis=1)


def initial_flow(plan, similarity, frame_x, frame_y, top_l=DEFAULT_TOP_L, weight_mode=DEFAULT_WEIGHT_MODE):
    """Soft-correspondence weights, target estimates, confidences, and flow.

    Per source row: restrict to the top-L plan entries, weight them per
    ``weight_mode``, average the corresponding target positions, score
    confidence as the weighted similarity clamped at zero, and take
    flow = estimated target minus source position.
    """
    plan_t = plan if isinstance(plan, Tensor) else Tensor(plan)
    sim_t = similarity if isinstance(similarity, Tensor) else Tensor(similarity)
    x = frame_x.positions if isinstance(frame_x, ParticleFrame) else np.asarray(frame_x)
    y = frame_y.positions if isinstance(frame_y, ParticleFrame) else np.asarray(frame_y)
    n1, n2 = plan_t.data.shape
    if sim_t.data.shape != (n1, n2):
        raise ShapeError(f"similarity shape {sim_t.data.shape} != plan shape {(n1, n2)}")
    if x.shape[0] != n1 or y.shape[0] != n2:
        raise ShapeError("frame sizes do not match the plan")
    if top_l < 1:
        raise ConfigError(f"top_l must be >= 1, got {top_l}")

    top_idx = top_l_support(plan_t.data, top_l)
    rows = np.repeat(np.arange(n1)[:, None], top_idx.shape[1], axis=1)
    plan_top = ad.take2d(plan_t, rows, top_idx)
    if weight_mode == WEIGHTS_PLAN:
        w_top = ad.div(plan_top, ad.tsum(plan_top, axis=1, keepdims=True))
    elif weight_mode == WEIGHTS_EXP_PLAN:
        w_top = ad.softmax(plan_top, axis=1)
    else:
        raise ConfigError(f"unknown weight_mode {weight_mode!r}")
    y_top = Tensor(y[top_idx])  # constant gather: (n1, L, 3)
    y_star = ad.tsum(ad.mul(ad.reshape(w_top, (n1, top_idx.shape[1], 1)), y_top), axis=1)
    sim_top = ad.take2d(sim_t, rows, top_idx)
    conf = ad.clamp(ad.tsum(ad.mul(w_top, sim_top), axis=1), lo=0.0)
    flow = y_star - Tensor(x)
    return TransportPlan(
        plan=plan_t, top_idx=top_idx, weights_top=w_top, confidences=conf, flow=flow
    )
