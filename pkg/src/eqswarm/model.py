"""Equivariant encoder/decoder pair mapping molecules to weighted swarms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import (DEFAULT_NUM_TYPES, DEFAULT_TYPE_SCALE, DomainError, GraphBatch, Swarm,
                    TypedPointCloud)
from .nn import (EMLP, AugSoftmaxAggregation, GraphConv, Linear, Module, NodeEmbedding,
                 Scalarizer, VectorLinear, build_radius_graph, param)


@dataclass
class ModelConfig:
    num_types: int = DEFAULT_NUM_TYPES
    type_scale: float = DEFAULT_TYPE_SCALE
    radial_norm: float = 5.0  # largest molecular radius in the dataset, Å
    type_dim: int = 32
    enc_dim: int = 128
    enc_vdim: int = 128
    enc_convs: int = 2
    emlp_depth: int = 2
    msg_dim: int = 64
    num_rbf: int = 50
    enc_cutoff: float = 3.0
    bottleneck: int = 64
    dec_nodes: int = 64
    dec_dim: int = 128
    dec_vdim: int = 128
    dec_layers: int = 4
    dec_cutoff: float = 3.0
    decoder: str = "graph"  # or "emlp"
    norm: bool = True
    vector_norm: bool = False
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.decoder not in ("graph", "emlp"):
            raise ValueError(f"decoder must be 'graph' or 'emlp', got {self.decoder!r}")
        if self.enc_convs < 1:
            raise ValueError("encoder needs at least one convolution")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Embedding:
    """Latent code of one molecule.

    ``vectors`` [k, 3] rotate with the molecule; ``scalars`` are invariant.
    """

    vectors: np.ndarray
    scalars: np.ndarray

    def rotated(self, rot: np.ndarray) -> "Embedding":
        return Embedding(self.vectors @ np.asarray(rot).T, self.scalars)

    @staticmethod
    def zeros(k: int, k_s: int | None = None) -> "Embedding":
        return Embedding(np.zeros((k, 3)), np.zeros(k if k_s is None else k_s))


@dataclass
class SwarmTensors:
    """Batched decoder output, still attached to the autodiff graph."""

    positions: Tensor  # [B * n_j, 3]
    type_probs: Tensor  # [B * n_j, n_c]
    weights: Tensor  # [B * n_j]
    num_graphs: int
    size: int
    n_ref: np.ndarray = field(default=None)

    @property
    def batch(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_graphs), self.size)

    def to_swarms(self) -> list[Swarm]:
        pos = self.positions.data.reshape(self.num_graphs, self.size, 3)
        probs = self.type_probs.data.reshape(self.num_graphs, self.size, -1)
        w = self.weights.data.reshape(self.num_graphs, self.size)
        return [Swarm(pos[b].copy(), probs[b].copy(), w[b].copy(), int(self.n_ref[b]))
                for b in range(self.num_graphs)]


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, l = cfg.enc_dim, cfg.enc_vdim
        kw = dict(norm=cfg.norm, vector_norm=cfg.vector_norm, dropout=cfg.dropout)
        self.cfg = cfg
        self.embed = NodeEmbedding(cfg.num_types, cfg.type_dim, d, l, rng)
        self.mlps = [EMLP(d, d, l, l, cfg.emlp_depth, rng, **kw)
                     for _ in range(cfg.enc_convs + 1)]
        self.convs = [GraphConv(d, l, cfg.msg_dim, cfg.msg_dim, cfg.num_rbf, rng,
                                norm=cfg.norm, vector_norm=cfg.vector_norm)
                      for _ in range(cfg.enc_convs)]
        self.pool = AugSoftmaxAggregation(l, vector=True)
        self.bottleneck = VectorLinear(l, cfg.bottleneck, rng)
        self.scalarizer = Scalarizer(cfg.bottleneck, cfg.bottleneck, rng)

    def __call__(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Returns (g_vec [B, 3, k], g_scalar [B, k])."""
        cfg = self.cfg
        nb, seg = batch.num_graphs, batch.batch
        edges = build_radius_graph(batch.positions, seg, cfg.enc_cutoff, cfg.num_rbf, nb)
        s, v = self.embed(batch.positions / cfg.radial_norm, batch.types)
        for mlp, conv in zip(self.mlps, self.convs):
            s, v = mlp(s, v, seg, nb)
            s, v = conv(s, v, edges)
        s, v = self.mlps[-1](s, v, seg, nb)
        g = self.bottleneck(self.pool(v, seg, nb))
        return g, self.scalarizer(g)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, l, nj, k = cfg.dec_dim, cfg.dec_vdim, cfg.dec_nodes, cfg.bottleneck
        kw = dict(norm=cfg.norm, vector_norm=cfg.vector_norm, dropout=cfg.dropout)
        self.cfg = cfg
        self.lift_v = Linear(k, nj * l, rng, bias=False)
        self.lift_p = Linear(k, nj, rng, bias=False)
        self.lift_s = Linear(k, nj * d, rng, bias=False)
        self.s_bias = param(np.zeros(d))
        self.mlps = [EMLP(d, d, l, l, cfg.emlp_depth, rng, **kw)
                     for _ in range(cfg.dec_layers)]
        self.convs = ([GraphConv(d, l, cfg.msg_dim, cfg.msg_dim, cfg.num_rbf, rng,
                                 norm=cfg.norm, vector_norm=cfg.vector_norm)
                       for _ in range(cfg.dec_layers)] if cfg.decoder == "graph" else [])
        self.out_pos = VectorLinear(l, 1, rng)
        self.out_type = Linear(d, cfg.num_types, rng)
        self.out_amp = Linear(d, 1, rng)

    def __call__(self, g_vec: Tensor, g_scalar: Tensor, n_atoms: np.ndarray) -> SwarmTensors:
        cfg = self.cfg
        n_atoms = np.asarray(n_atoms)
        if n_atoms.min() < 1:
            raise DomainError("decode needs n_i >= 1")
        nb, nj, d, l = g_vec.shape[0], cfg.dec_nodes, cfg.dec_dim, cfg.dec_vdim
        n = nb * nj
        seg = np.repeat(np.arange(nb), nj)

        v = self.lift_v(g_vec).reshape(nb, 3, nj, l)
        v = ad.transpose(v, (0, 2, 1, 3)).reshape(n, 3, l)
        p0 = ad.transpose(self.lift_p(g_vec), (0, 2, 1)).reshape(n, 3)
        s = self.lift_s(g_scalar).reshape(n, d) + self.s_bias
        p0 = p0 * cfg.radial_norm

        edges = (build_radius_graph(p0, seg, cfg.dec_cutoff, cfg.num_rbf, nb)
                 if self.convs else None)
        for i, mlp in enumerate(self.mlps):
            s, v = mlp(s, v, seg, nb)
            if self.convs:
                s, v = self.convs[i](s, v, edges)

        pos = p0 + self.out_pos(v).reshape(n, 3) * cfg.radial_norm
        probs = ad.softmax(self.out_type(s), axis=1)
        amp = self.out_amp(s).reshape(nb, nj)
        w = ad.softmax(amp, axis=1) * n_atoms[:, None].astype(np.float64)
        return SwarmTensors(pos, probs, w.reshape(n), nb, nj, n_atoms)


class Autoencoder(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)

    # -- batched, differentiable ----------------------------------------------
    def forward(self, batch: GraphBatch) -> SwarmTensors:
        g, gs = self.encoder(batch)
        return self.decoder(g, gs, batch.counts)

    # -- numpy-facing API ---------------------------------------------------
    def encode(self, clouds: Sequence[TypedPointCloud]) -> list[Embedding]:
        batch = GraphBatch.from_clouds(list(clouds))
        g, gs = self.encoder(batch)
        return [Embedding(g.data[b].T.copy(), gs.data[b].copy()) for b in range(batch.num_graphs)]

    def decode(self, embeddings: Sequence[Embedding], n_atoms: Sequence[int]) -> list[Swarm]:
        g = Tensor(np.stack([np.asarray(e.vectors).T for e in embeddings]))
        gs = Tensor(np.stack([np.asarray(e.scalars) for e in embeddings]))
        return self.decoder(g, gs, np.asarray(n_atoms, dtype=np.int64)).to_swarms()

    def reconstruct(self, clouds: Sequence[TypedPointCloud]) -> list[Swarm]:
        batch = GraphBatch.from_clouds(list(clouds))
        return self.forward(batch).to_swarms()
