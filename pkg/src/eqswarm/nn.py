"""O(3)-equivariant layers on (scalar, vector) node features.

Scalars have shape [n, k]; vectors have shape [n, 3, l] with the Cartesian axis
in the middle, so a global orthogonal transform ``R`` acts as ``R @ v``.  Every
vector operation here is either a channel-mixing linear map (no bias), a
rescaling by invariant scalars, or the projection-style activation, which keeps
vectors equivariant and scalars invariant under rotations and inversions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import DomainError

EPS = 1e-12
LN_EPS = 1e-5


class Module:
    """Minimal parameter container; parameters are leaf Tensors."""

    training = False

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()


def param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = fan_in_uniform(rng, d_in, (d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class VectorLinear(Module):
    """Channel mixing for [n, 3, l] vectors; bias-free to stay equivariant."""

    def __init__(self, l_in: int, l_out: int, rng: np.random.Generator):
        self.weight = fan_in_uniform(rng, l_in, (l_in, l_out))

    def __call__(self, v) -> Tensor:
        return ad.matmul(v, self.weight)


def safe_normalize(v, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Unit vectors ``v / max(|v|, 1e-12)`` and the norms."""
    n = ad.norm(v, axis=axis, keepdims=True)
    return v / ad.clamp_min(n, EPS), n


class GraphLayerNorm(Module):
    """Normalise over all rows and channels belonging to the same graph."""

    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))

    def __call__(self, x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
        rows = np.bincount(seg, minlength=num_segments).astype(np.float64)
        count = np.maximum(rows * x.shape[1], 1.0)[:, None]
        mu = ad.segment_sum(ad.tsum(x, axis=1, keepdims=True), seg, num_segments) / count
        xc = x - ad.gather(mu, seg)
        var = ad.segment_sum(ad.tsum(xc * xc, axis=1, keepdims=True), seg, num_segments) / count
        return xc / ad.sqrt(ad.gather(var, seg) + LN_EPS) * self.gain + self.shift


class VectorNorm(Module):
    """Rescale each node's vectors by the RMS of its channel norms."""

    def __call__(self, v: Tensor) -> Tensor:
        sq = ad.tsum(v * v, axis=1, keepdims=True)  # [n, 1, l]
        rms = ad.sqrt(ad.mean(sq, axis=2, keepdims=True) + LN_EPS)
        return v / rms


class Scalarizer(Module):
    """Invariant scalars from vectors via learned internal axes.

    Unit vectors are mixed into ``num_axes`` axes that rotate with the input;
    the dot products of every unit vector with every axis, together with the
    vector norms, feed a linear map.
    """

    def __init__(self, l_in: int, d_out: int, rng: np.random.Generator,
                 num_axes: int = 3, bias: bool = True):
        self.num_axes = num_axes
        self.axes = fan_in_uniform(rng, l_in, (l_in, num_axes))
        self.out = Linear(l_in * (num_axes + 1), d_out, rng, bias=bias)

    def features(self, v) -> Tensor:
        unit, n = safe_normalize(v)
        axes = ad.matmul(unit, self.axes)  # [n, 3, a]
        dots = ad.matmul(ad.swapaxes(unit, 1, 2), axes)  # [n, l, a]
        rows = v.shape[0]
        return ad.concat([dots.reshape(rows, -1), n.reshape(rows, -1)], axis=1)

    def __call__(self, v) -> Tensor:
        return self.out(self.features(v))


class VectorActivation(Module):
    """Projection nonlinearity: drop the component of each vector channel
    pointing against a learned direction, keep it otherwise."""

    def __init__(self, l: int, rng: np.random.Generator):
        self.direction = fan_in_uniform(rng, l, (l, l))

    def __call__(self, v) -> Tensor:
        k_hat, _ = safe_normalize(ad.matmul(v, self.direction))
        dot = ad.tsum(v * k_hat, axis=1, keepdims=True)  # [n, 1, l]
        return v + ad.relu(-dot) * k_hat


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


class EMLPLayer(Module):
    def __init__(self, s_in: int, s_out: int, v_in: int, v_out: int,
                 rng: np.random.Generator, norm: bool = True, vector_norm: bool = False,
                 dropout: float = 0.0, activation: Callable = ad.gelu):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.scalarizer = Scalarizer(v_in, s_in, rng)
        self.lin = Linear(s_in, s_out, rng)
        self.norm = GraphLayerNorm(s_out) if norm else None
        self.gate = Linear(s_out, v_out, rng)
        self.gate_norm = GraphLayerNorm(v_out) if norm else None
        self.vlin = VectorLinear(v_in, v_out, rng)
        self.vnorm = VectorNorm() if vector_norm else None
        self.vact = VectorActivation(v_out, rng)
        self.s_res = Linear(s_in, s_out, rng, bias=False) if s_in != s_out else None
        self.v_res = VectorLinear(v_in, v_out, rng) if v_in != v_out else None
        self.dropout = dropout
        self.activation = activation
        self._rng = np.random.default_rng(rng.integers(2**63))

    def __call__(self, s: Tensor, v: Tensor, seg: np.ndarray, num_segments: int):
        h = self.lin(s + self.scalarizer(v))
        if self.norm is not None:
            h = self.norm(h, seg, num_segments)
        h = self.activation(h)
        if self.training and self.dropout > 0:
            h = _dropout(h, self.dropout, self._rng)
        s_new = (self.s_res(s) if self.s_res is not None else s) + h

        g = self.gate(s_new)
        if self.gate_norm is not None:
            g = self.gate_norm(g, seg, num_segments)
        g = self.activation(g)
        vg = self.vlin(v)
        if self.vnorm is not None:
            vg = self.vnorm(vg)
        vg = self.vact(vg)
        v_res = self.v_res(v) if self.v_res is not None else v
        v_new = v_res + ad.expand_dims(g, 1) * vg
        return s_new, v_new


class EMLP(Module):
    """A stack of EMLP layers; the first may change dimensions."""

    def __init__(self, s_in: int, s_out: int, v_in: int, v_out: int, depth: int,
                 rng: np.random.Generator, **kw):
        self.layers = [EMLPLayer(s_in if i == 0 else s_out, s_out,
                                 v_in if i == 0 else v_out, v_out, rng, **kw)
                       for i in range(depth)]

    def __call__(self, s, v, seg, num_segments):
        for layer in self.layers:
            s, v = layer(s, v, seg, num_segments)
        return s, v


class NodeEmbedding(Module):
    """Initial node features from atom type and normalised position.

    Scalars see the type embedding and the radial distance; vectors are
    channel-wise multiples of the position vector.
    """

    def __init__(self, num_types: int, type_dim: int, s_dim: int, v_dim: int,
                 rng: np.random.Generator):
        self.num_types = num_types
        self.table = param(rng.normal(0.0, 1.0, size=(num_types, type_dim)))
        self.lin = Linear(type_dim + 1, s_dim, rng)
        self.vweight = param(rng.uniform(-1.0, 1.0, size=(1, v_dim)))

    def __call__(self, positions, types: np.ndarray):
        types = np.asarray(types)
        if types.size and (types.min() < 0 or types.max() >= self.num_types):
            raise DomainError(f"atom type outside [0, {self.num_types})")
        positions = ad.as_tensor(positions)
        r = ad.norm(positions, axis=1, keepdims=True)
        s = self.lin(ad.concat([ad.gather(self.table, types), r], axis=1))
        v = ad.matmul(ad.expand_dims(positions, 2), self.vweight)
        return s, v


def radial_basis(d, cutoff: float, count: int) -> Tensor:
    """Gaussian bumps with centres evenly spaced on [0, cutoff] and width equal
    to the spacing.  ``d`` has shape [e]; the result has shape [e, count]."""
    centers = np.linspace(0.0, cutoff, count)
    width = cutoff / (count - 1) if count > 1 else cutoff
    z = (ad.expand_dims(ad.as_tensor(d), 1) - centers) * (1.0 / width)
    return ad.exp(z * z * -0.5)


class AugSoftmaxAggregation(Module):
    """Per-channel softmax pooling with learned inverse temperature and an
    additive weight offset: beta=0, b=0 is the mean, large beta tends to the
    max, and b=1 adds the plain sum."""

    def __init__(self, channels: int, vector: bool = False,
                 beta_init: float = 0.1, bias_init: float = 0.0):
        self.vector = vector
        self.beta = param(np.full(channels, beta_init))
        self.bias = param(np.full(channels, bias_init))

    def __call__(self, x: Tensor, seg: np.ndarray, num_segments: int,
                 allow_empty: bool = False) -> Tensor:
        seg = np.asarray(seg)
        if not allow_empty and np.bincount(seg, minlength=num_segments).min() == 0:
            raise DomainError("aggregation over an empty segment")
        score = ad.norm(x, axis=1) if self.vector else x
        w = ad.segment_softmax(score * self.beta, seg, num_segments) + self.bias
        if self.vector:
            w = ad.expand_dims(w, 1)
        return ad.segment_sum(w * x, seg, num_segments)


@dataclass
class Edges:
    """Directed edges ``src -> dst`` with radial-basis features."""

    src: np.ndarray
    dst: np.ndarray
    features: Tensor
    num_nodes: int
    graph: np.ndarray
    num_graphs: int

    @property
    def count(self) -> int:
        return len(self.src)


def radius_pairs(positions: np.ndarray, batch: np.ndarray, cutoff: float):
    """All (src, dst) pairs in the same graph with 0 < distance <= cutoff,
    sorted by destination then source."""
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    positions = np.asarray(positions, dtype=np.float64)
    batch = np.asarray(batch)
    srcs, dsts = [], []
    for g in np.unique(batch):
        idx = np.flatnonzero(batch == g)
        diff = positions[idx][:, None, :] - positions[idx][None, :, :]
        d = np.sqrt(ad.ordered_sum(diff * diff, axis=2))
        dst, src = np.nonzero((d > 0) & (d <= cutoff))
        dsts.append(idx[dst])
        srcs.append(idx[src])
    src = np.concatenate(srcs) if srcs else np.zeros(0, int)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, int)
    order = np.lexsort((src, dst))
    return src[order].astype(np.intp), dst[order].astype(np.intp)


def build_radius_graph(positions, batch: np.ndarray, cutoff: float, num_rbf: int,
                       num_graphs: int | None = None) -> Edges:
    """Radius graph over ``positions`` (Tensor or array, Å); edge features are
    differentiable in the positions when they are a Tensor."""
    positions = ad.as_tensor(positions)
    batch = np.asarray(batch)
    src, dst = radius_pairs(positions.data, batch, cutoff)
    diff = ad.gather(positions, dst) - ad.gather(positions, src)
    d = ad.norm(diff, axis=1)
    feats = radial_basis(d, cutoff, num_rbf)
    if num_graphs is None:
        num_graphs = int(batch.max()) + 1 if batch.size else 0
    return Edges(src, dst, feats, len(batch), batch[dst], num_graphs)


class GraphConv(Module):
    """Message passing on scalar and vector tracks with augmented-softmax
    aggregation over incoming edges.  Nodes without incoming edges receive a
    zero update."""

    def __init__(self, s_dim: int, v_dim: int, msg_dim: int, vmsg_dim: int,
                 num_rbf: int, rng: np.random.Generator, norm: bool = True,
                 vector_norm: bool = False, activation: Callable = ad.gelu):
        self.w_dst = Linear(s_dim, msg_dim, rng, bias=False)
        self.w_src = Linear(s_dim, msg_dim, rng, bias=False)
        self.w_edge = Linear(num_rbf, msg_dim, rng)
        self.norm = GraphLayerNorm(3 * msg_dim) if norm else None
        self.agg = AugSoftmaxAggregation(3 * msg_dim)
        self.w_out = Linear(3 * msg_dim, s_dim, rng, bias=False)

        self.v_dst = VectorLinear(v_dim, vmsg_dim, rng)
        self.v_src = VectorLinear(v_dim, vmsg_dim, rng)
        self.v_edge = Linear(num_rbf, vmsg_dim, rng)
        self.vnorm = VectorNorm() if vector_norm else None
        self.vagg = AugSoftmaxAggregation(vmsg_dim, vector=True)
        self.v_out = VectorLinear(vmsg_dim, v_dim, rng)
        self.activation = activation

    def __call__(self, s: Tensor, v: Tensor, edges: Edges):
        if edges.count == 0:
            return s, v
        n = edges.num_nodes
        m = ad.concat([ad.gather(self.w_dst(s), edges.dst),
                       ad.gather(self.w_src(s), edges.src),
                       self.w_edge(edges.features)], axis=1)
        if self.norm is not None:
            m = self.norm(m, edges.graph, edges.num_graphs)
        m = self.activation(m)
        s_new = s + self.w_out(self.agg(m, edges.dst, n, allow_empty=True))

        vm = ad.gather(self.v_dst(v), edges.dst) + ad.gather(self.v_src(v), edges.src)
        if self.vnorm is not None:
            vm = self.vnorm(vm)
        vm = vm * ad.expand_dims(self.v_edge(edges.features), 1)
        v_new = v + self.v_out(self.vagg(vm, edges.dst, n, allow_empty=True))
        return s_new, v_new
