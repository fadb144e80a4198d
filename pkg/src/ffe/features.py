"""Graph-based per-particle feature extraction.

A static k-NN graph over positions feeds a stack of set-convolution layers;
one dynamic layer rebuilds its graph in feature space on every forward pass.
The per-layer outputs are concatenated and projected to the embedding width.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import ParticleFrame, self_excluded_knn
from .errors import ShapeError, FileFormatError

GEOM_DIM = 6
DEFAULT_K = 32
DEFAULT_STATIC_WIDTHS = (32, 64, 64)
DEFAULT_DYNAMIC_WIDTH = 64
DEFAULT_EMBED_DIM = 128

_MAGIC = b"FFE1"
_VERSION = 1


def geometric_descriptor(frame):
    """Per-particle (x, y, z, r, azimuth, polar) rows as an (n, 6) array.

    Both angles are defined as 0 at the origin.
    """
    pos = frame.positions if isinstance(frame, ParticleFrame) else np.asarray(frame, dtype=np.float64)
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    r = np.sqrt((pos ** 2).sum(axis=1))
    nonzero = r > 0
    azimuth = np.where(nonzero, np.arctan2(y, x), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cospolar = np.where(nonzero, z / np.where(nonzero, r, 1.0), 1.0)
    polar = np.where(nonzero, np.arccos(np.clip(cospolar, -1.0, 1.0)), 0.0)
    return np.column_stack([x, y, z, r, azimuth, polar])


@dataclass
class LayerParams:
    """Two-layer perceptron applied per graph edge before max-pooling."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self):
        return self.w1.data.shape[0]

    @property
    def width(self):
        return self.w1.data.shape[1]

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class ModelParams:
    """All trainable weights plus the graph/embedding hyperparameters."""

    k: int
    embed_dim: int
    dropout_rate: float
    static: list
    dynamic: LayerParams
    head_w: Tensor
    head_b: Tensor

    def tensors(self):
        out = []
        for layer in self.static:
            out.extend(layer.tensors())
        out.extend(self.dynamic.tensors())
        out.extend([self.head_w, self.head_b])
        return out

    def zero_grads(self):
        for t in self.tensors():
            t.zero_grad()


def _init_layer(rng, in_dim, width):
    def uniform(fan_in, fan_out, shape):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-lim, lim, shape), requires_grad=True)

    return LayerParams(
        w1=uniform(in_dim, width, (in_dim, width)),
        b1=Tensor(np.zeros(width), requires_grad=True),
        w2=uniform(width, width, (width, width)),
        b2=Tensor(np.zeros(width), requires_grad=True),
    )


def init_model_params(
    seed=0,
    k=DEFAULT_K,
    static_widths=DEFAULT_STATIC_WIDTHS,
    dynamic_width=DEFAULT_DYNAMIC_WIDTH,
    embed_dim=DEFAULT_EMBED_DIM,
    dropout_rate=0.0,
):
    """Fresh parameters, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    static = []
    prev = 3
    for w in static_widths:
        static.append(_init_layer(rng, GEOM_DIM + prev, w))
        prev = w
    dynamic = _init_layer(rng, 2 * prev, dynamic_width)
    concat_dim = sum(static_widths) + dynamic_width
    lim = np.sqrt(6.0 / (concat_dim + embed_dim))
    return ModelParams(
        k=int(k),
        embed_dim=int(embed_dim),
        dropout_rate=float(dropout_rate),
        static=static,
        dynamic=dynamic,
        head_w=Tensor(rng.uniform(-lim, lim, (concat_dim, embed_dim)), requires_grad=True),
        head_b=Tensor(np.zeros(embed_dim), requires_grad=True),
    )


def static_graph(frame, k, index=None):
    """Self-excluded k-NN over positions; rows keep (distance, index) order."""
    return self_excluded_knn(frame, k, index=index)


def _feature_knn(feats, k):
    """Self-excluded k-NN in feature space, ties broken by lower index."""
    n = feats.shape[0]
    k_eff = min(k, n - 1)
    sq = (feats ** 2).sum(axis=1)
    out = np.empty((n, k_eff), dtype=np.int64)
    block = max(1, int(2**22 // max(n, 1)))
    for s in range(0, n, block):
        chunk = feats[s : s + block]
        d2 = sq[s : s + block, None] + sq[None, :] - 2.0 * chunk @ feats.T
        d2[np.arange(chunk.shape[0]), np.arange(s, s + chunk.shape[0])] = np.inf
        part = np.argpartition(d2, k_eff - 1, axis=1)[:, :k_eff]
        dsel = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, dsel), axis=1)
        out[s : s + block] = np.take_along_axis(part, order, axis=1)
    return out


def _edge_mlp(context, feats, neighbor_idx, layer):
    """MaxPool_j MLP(context_i, F_j - F_i) over each row's neighbor list.

    The first linear layer is split into its context and difference blocks so
    the expensive matmuls run on (n, d) arrays instead of (n*k, d).
    """
    n, k = neighbor_idx.shape
    c = context.data.shape[1]
    d = feats.data.shape[1]
    if layer.in_dim != c + d:
        raise ShapeError(
            f"layer expects input width {layer.in_dim}, got context {c} + features {d}"
        )
    w1c = ad.take_rows(layer.w1, np.arange(c))
    w1f = ad.take_rows(layer.w1, np.arange(c, c + d))
    bn = ad.matmul(feats, w1f)
    a = ad.matmul(context, w1c) + layer.b1 - bn
    edges = ad.reshape(a, (n, 1, layer.width)) + ad.take_rows(bn, neighbor_idx)
    h1 = ad.leaky_relu(edges)
    h2 = ad.leaky_relu(ad.matmul(ad.reshape(h1, (n * k, layer.width)), layer.w2) + layer.b2)
    return ad.amax(ad.reshape(h2, (n, k, layer.width)), axis=1)


def geoset_conv(feats, descriptor, neighbor_idx, layer):
    """One static-graph convolution: per-edge MLP on (descriptor_i, F_j - F_i)
    followed by channelwise max over the fixed neighbor list."""
    desc = descriptor if isinstance(descriptor, Tensor) else Tensor(descriptor)
    return _edge_mlp(desc, feats, np.asarray(neighbor_idx), layer)


def edge_conv(feats, k, layer):
    """Dynamic-graph convolution: neighbors are found in the input feature
    space on every call, then aggregated like :func:`geoset_conv` with the
    features themselves as context."""
    n = feats.data.shape[0]
    if k > n:
        raise ShapeError(f"edge_conv needs k <= n, got k={k}, n={n}")
    neighbor_idx = _feature_knn(feats.data, k)
    return _edge_mlp(feats, feats, neighbor_idx, layer)


def extract_features(frame, params, static_idx=None, rng=None, training=False):
    """Hierarchical static+dynamic features projected to the embedding width.

    ``static_idx`` may carry a precomputed position-space graph (it only
    depends on the frame, so callers that revisit a frame can cache it).
    """
    n = len(frame)
    k_eff = min(params.k, n - 1)
    if static_idx is None:
        static_idx = static_graph(frame, params.k)
    desc = Tensor(geometric_descriptor(frame))
    feats = Tensor(frame.positions)
    outs = []
    for layer in params.static:
        feats = geoset_conv(feats, desc, static_idx, layer)
        outs.append(feats)
    outs.append(edge_conv(feats, k_eff, params.dynamic))
    h = ad.concat(outs, axis=1)
    if training and params.dropout_rate > 0.0:
        if rng is None:
            raise ShapeError("dropout requires an rng in training mode")
        h = ad.dropout(h, params.dropout_rate, rng)
    return ad.matmul(h, params.head_w) + params.head_b


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, hyperparameters, layer table, raw floats


def save_params(params, path):
    """Write a checkpoint; little-endian, round-trips bit-exactly."""
    layers = list(params.static) + [params.dynamic]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIId", _VERSION, params.k, params.embed_dim, params.dropout_rate))
        f.write(struct.pack("<I", len(params.static)))
        for layer in layers:
            f.write(struct.pack("<II", layer.in_dim, layer.width))
        f.write(struct.pack("<II", *params.head_w.data.shape))
        for t in params.tensors():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path):
    """Read a checkpoint written by :func:`save_params`."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise FileFormatError("bad checkpoint magic", path=path, offset=0)
    off = 4
    try:
        version, k, embed_dim, dropout = struct.unpack_from("<IIId", blob, off)
        off += struct.calcsize("<IIId")
        if version != _VERSION:
            raise FileFormatError(f"unsupported checkpoint version {version}", path=path)
        (n_static,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes = []
        for _ in range(n_static + 1):
            in_dim, width = struct.unpack_from("<II", blob, off)
            off += 8
            shapes.append((in_dim, width))
        head_shape = struct.unpack_from("<II", blob, off)
        off += 8
    except struct.error as e:
        raise FileFormatError(f"truncated checkpoint header: {e}", path=path, offset=off)

    def read_array(shape):
        nonlocal off
        count = int(np.prod(shape))
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise FileFormatError(
                f"truncated checkpoint payload: expected {off + nbytes} bytes, got {len(blob)}",
                path=path,
                offset=off,
            )
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        return arr

    def read_layer(in_dim, width):
        return LayerParams(
            w1=Tensor(read_array((in_dim, width)), requires_grad=True),
            b1=Tensor(read_array((width,)), requires_grad=True),
            w2=Tensor(read_array((width, width)), requires_grad=True),
            b2=Tensor(read_array((width,)), requires_grad=True),
        )

    static = [read_layer(*shapes[i]) for i in range(n_static)]
    dynamic = read_layer(*shapes[n_static])
    head_w = Tensor(read_array(head_shape), requires_grad=True)
    head_b = Tensor(read_array((head_shape[1],)), requires_grad=True)
    if off != len(blob):
        raise FileFormatError(
            f"trailing bytes in checkpoint: expected {off}, got {len(blob)}", path=path, offset=off
        )
    return ModelParams(
        k=k,
        embed_dim=embed_dim,
        dropout_rate=dropout,
        static=static,
        dynamic=dynamic,
        head_w=head_w,
        head_b=head_b,
    )
