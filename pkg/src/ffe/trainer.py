"""Label-free training over frame pairs.

Per sample: extract features for both frames, build the cosine cost, solve
the transport plan (unrolled), form the initial flow and confidences, and
minimize the combined self-supervised loss with Adam. Samples carry only the
two frames, so ground truth can never leak into training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import features as ft
from . import losses as ls
from . import transport as tp
from .core import ParticleFrame
from .errors import ConfigError, TrainingDivergedError

DEFAULT_LR = 1e-3
DEFAULT_BATCH = 4
DIVERGENCE_ABORT = 1e6


@dataclass
class TrainSample:
    """A dual-frame observation; deliberately has no ground-truth slot."""

    frame_x: ParticleFrame
    frame_y: ParticleFrame


@dataclass
class TrainConfig:
    batch_size: int = DEFAULT_BATCH
    epochs: int = 100
    learning_rate: float = DEFAULT_LR
    data_fraction: float = 1.0
    seed: int = 0
    loss_weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    ot: tp.OTConfig = field(
        default_factory=lambda: tp.OTConfig(sinkhorn_iters=tp.DEFAULT_TRAIN_ITERS)
    )
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 < self.data_fraction <= 1.0):
            raise ConfigError("data_fraction must be in (0, 1]")
        self.ot.validate()
        self.loss_weights.validate()


@dataclass
class EpochStats:
    epoch: int
    total: float
    recon: float
    smooth: float
    div: float

    def to_record(self):
        return (
            f"epoch={self.epoch}\ttotal={self.total!r}\trecon={self.recon!r}"
            f"\tsmooth={self.smooth!r}\tdiv={self.div!r}"
        )


@dataclass
class TrainResult:
    params: ft.ModelParams
    trace: list


def sample_subset(dataset, fraction, seed):
    """floor(fraction * N) samples without replacement, deterministic in seed.

    fraction == 1 returns the dataset unchanged (original order).
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    items = list(dataset)
    if fraction == 1.0:
        return items
    count = math.floor(fraction * len(items))
    if count < 1:
        raise ConfigError(
            f"fraction {fraction} of {len(items)} samples selects nothing"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(items), size=count, replace=False)
    return [items[i] for i in chosen]


def to_train_samples(records):
    """Strip any ground truth off pair records, keeping only the frames."""
    return [TrainSample(frame_x=r.frame_x, frame_y=r.frame_y) for r in records]


class _SampleCache:
    """Constants reused across epochs: graphs, loss context, descriptors."""

    def __init__(self, sample, params, weights):
        self.sample = sample
        self.static_x = ft.static_graph(sample.frame_x, params.k)
        self.static_y = ft.static_graph(sample.frame_y, params.k)
        self.loss_context = ls.build_loss_context(sample.frame_x, sample.frame_y, weights)


def forward_pipeline(frame_x, frame_y, params, ot_cfg, static_x=None, static_y=None, feature_fn=None):
    """Features -> cost -> transport -> initial flow for one frame pair.

    ``feature_fn(frame, params, static_idx)`` may swap in a different
    per-particle feature extractor; the default is the graph extractor.
    """
    if feature_fn is None:
        feature_fn = lambda frame, p, idx: ft.extract_features(frame, p, static_idx=idx)
    fx = feature_fn(frame_x, params, static_x)
    fy = feature_fn(frame_y, params, static_y)
    sim = tp.similarity_matrix(fx, fy)
    plan, _ = tp.solve_transport(tp.cost_matrix(sim), ot_cfg)
    return tp.initial_flow(plan, sim, frame_x, frame_y, ot_cfg.top_l)


class Adam:
    """Adam over a list of tensors; step counts are shared."""

    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.tensors):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.tensors:
            p.zero_grad()


def train(samples, cfg=None, params=None):
    """Minimize the mean combined loss over the samples; returns the trained
    parameters and the per-epoch loss trace."""
    if cfg is None:
        cfg = TrainConfig()
    cfg.validate()
    samples = list(samples)
    if not samples:
        raise ConfigError("train requires at least one sample")
    if cfg.data_fraction < 1.0:
        samples = sample_subset(samples, cfg.data_fraction, cfg.seed)
    if params is None:
        params = ft.init_model_params(seed=cfg.seed)
    caches = [_SampleCache(s, params, cfg.loss_weights) for s in samples]
    opt = Adam(params.tensors(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_opt)
    rng = np.random.default_rng(cfg.seed + 1)

    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(caches))
        sums = {"total": 0.0, "recon": 0.0, "smooth": 0.0, "div": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            opt.zero_grad()
            for ci in batch:
                cache = caches[ci]
                plan = forward_pipeline(
                    cache.sample.frame_x,
                    cache.sample.frame_y,
                    params,
                    cfg.ot,
                    static_x=cache.static_x,
                    static_y=cache.static_y,
                )
                total, comps = ls.train_loss(
                    cache.sample.frame_x,
                    cache.sample.frame_y,
                    plan.flow,
                    plan.confidences,
                    cfg.loss_weights,
                    context=cache.loss_context,
                )
                if not np.isfinite(comps["total"]) or comps["total"] > DIVERGENCE_ABORT:
                    raise TrainingDivergedError(
                        f"loss diverged at epoch {epoch}, sample {ci}: {comps['total']}",
                        epoch=epoch,
                        sample=int(ci),
                        loss=comps["total"],
                    )
                for key in sums:
                    sums[key] += comps[key]
                ad.backward(total * (1.0 / len(batch)))
            opt.step()
        n = len(caches)
        trace.append(
            EpochStats(
                epoch=epoch,
                total=sums["total"] / n,
                recon=sums["recon"] / n,
                smooth=sums["smooth"] / n,
                div=sums["div"] / n,
            )
        )
    return TrainResult(params=params, trace=trace)
