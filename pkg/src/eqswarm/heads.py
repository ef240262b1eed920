"""Scalar, vector and symmetric rank-2/rank-3 tensor heads on frozen embeddings.

A head runs an EMLP over the embedding (scalars g̃, vectors g⃗), treating every
molecule as a single node, and assembles its output from the final features so
that rotations of g⃗ act on the prediction in the right way.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import TypedPointCloud
from .model import Embedding
from .nn import EMLP, Linear, Module, VectorLinear
from .training import AdamW, AdamWConfig

KINDS = ("scalar", "vector", "tensor2", "tensor3")
_GROUPS = {"scalar": (1, 0), "vector": (0, 1), "tensor2": (2, 2), "tensor3": (1, 4)}

_EYE = np.eye(3)
_PERMS = list(itertools.permutations(range(3)))


@dataclass
class HeadConfig:
    kind: str = "scalar"
    hidden: int = 32
    vhidden: int = 32
    depth: int = 2
    n_out: int = 4  # components per group for tensor heads
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {KINDS}")
        if self.n_out < 1:
            raise ValueError("n_out must be positive")


def stack_embeddings(embs: Sequence[Embedding]) -> tuple[Tensor, Tensor]:
    """(scalars [B, k_s], vectors [B, 3, k])."""
    s = np.stack([np.asarray(e.scalars, float) for e in embs])
    v = np.stack([np.asarray(e.vectors, float).T for e in embs])
    return Tensor(s), Tensor(v)


def sym_outer2(v1: Tensor, v2: Tensor) -> Tensor:
    """½(v1⊗v2 + v2⊗v1) per channel; inputs [B, 3, n], output [B, n, 3, 3]."""
    a = ad.transpose(v1, (0, 2, 1))
    b = ad.transpose(v2, (0, 2, 1))
    ab = ad.expand_dims(a, 3) * ad.expand_dims(b, 2)
    return (ab + ad.swapaxes(ab, 2, 3)) * 0.5


def identity_embed3(v: Tensor) -> Tensor:
    """(δ_ab v_c + δ_bc v_a + δ_ac v_b) / 3; input [B, 3, n], output [B, n, 3, 3, 3]."""
    vt = ad.transpose(v, (0, 2, 1))  # [B, n, 3]
    first = ad.expand_dims(ad.expand_dims(vt, 2), 2) * _EYE[:, :, None]  # δ_ab v_c
    return (first + ad.transpose(first, (0, 1, 4, 2, 3)) + ad.transpose(first, (0, 1, 3, 4, 2))) * (1.0 / 3.0)


def sym_outer3(v1: Tensor, v2: Tensor, v3: Tensor) -> Tensor:
    """Sum of v1⊗v2⊗v3 over all six index permutations; output [B, n, 3, 3, 3]."""
    a, b, c = (ad.transpose(x, (0, 2, 1)) for x in (v1, v2, v3))
    t = (ad.expand_dims(ad.expand_dims(a, 3), 4) * ad.expand_dims(ad.expand_dims(b, 2), 4)
         * ad.expand_dims(ad.expand_dims(c, 2), 3))
    out = None
    for p in _PERMS:
        term = ad.transpose(t, (0, 1) + tuple(2 + i for i in p))
        out = term if out is None else out + term
    return out


class RegressionHead(Module):
    def __init__(self, k_scalar: int, k_vector: int, cfg: HeadConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.mlp = EMLP(k_scalar, cfg.hidden, k_vector, cfg.vhidden, cfg.depth, rng, norm=False)
        ns, nv = _GROUPS[cfg.kind]
        n = 1 if cfg.kind in ("scalar", "vector") else cfg.n_out
        self.out_s = Linear(cfg.hidden, ns * n, rng) if ns else None
        self.out_v = VectorLinear(cfg.vhidden, nv * n, rng) if nv else None

    def __call__(self, s: Tensor, v: Tensor) -> Tensor:
        nb = s.shape[0]
        s, v = self.mlp(s, v, np.arange(nb), nb)
        kind, n = self.cfg.kind, self.cfg.n_out
        if kind == "scalar":
            return self.out_s(s).reshape(nb)
        if kind == "vector":
            return self.out_v(v).reshape(nb, 3)
        so, vo = self.out_s(s), self.out_v(v)
        if kind == "tensor2":
            s1, s2 = so[:, :n], so[:, n:]
            w = ad.softmax(s2, axis=1)
            iso = ad.expand_dims(ad.expand_dims(s1, 2), 3) * _EYE
            aniso = ad.expand_dims(ad.expand_dims(w, 2), 3) * sym_outer2(vo[:, :, :n], vo[:, :, n:])
            return ad.tsum(iso + aniso, axis=1)
        w = ad.softmax(so, axis=1)
        v1, v2, v3, v4 = (vo[:, :, g * n:(g + 1) * n] for g in range(4))
        full = ad.expand_dims(ad.expand_dims(ad.expand_dims(w, 2), 3), 4) * sym_outer3(v1, v2, v3)
        return ad.tsum(identity_embed3(v4) + full, axis=1)

    def predict(self, embs: Sequence[Embedding]) -> np.ndarray:
        return self(*stack_embeddings(embs)).data


def scalar_head(emb: Embedding, head: RegressionHead) -> float:
    return float(head.predict([emb])[0])


def vector_head(emb: Embedding, head: RegressionHead) -> np.ndarray:
    return head.predict([emb])[0]


def tensor2_head(emb: Embedding, head: RegressionHead) -> np.ndarray:
    return head.predict([emb])[0]


def tensor3_head(emb: Embedding, head: RegressionHead) -> np.ndarray:
    return head.predict([emb])[0]


# -- synthetic analytic targets -------------------------------------------------

TYPE_CHARGES = np.array([0.3, -0.1, -0.4, -0.5, -0.3])  # H C N O F, arbitrary units
TYPE_MASSES = np.array([1.008, 12.011, 14.007, 15.999, 18.998])


def dipole(cloud: TypedPointCloud, charges: np.ndarray = TYPE_CHARGES) -> np.ndarray:
    """Σ q_i r_i with fixed per-type charges."""
    return charges[cloud.types] @ cloud.positions


def inertia_tensor(cloud: TypedPointCloud, masses: np.ndarray = TYPE_MASSES) -> np.ndarray:
    m = masses[cloud.types]
    r = cloud.positions - (m @ cloud.positions) / m.sum()
    r2 = np.einsum("i,ij,ij->", m, r, r)
    return r2 * np.eye(3) - np.einsum("i,ij,ik->jk", m, r, r)


def third_moment(cloud: TypedPointCloud, charges: np.ndarray = TYPE_CHARGES) -> np.ndarray:
    """Σ q_i r_i⊗r_i⊗r_i, a fully symmetric parity-odd rank-3 target."""
    q = charges[cloud.types]
    return np.einsum("i,ia,ib,ic->abc", q, cloud.positions, cloud.positions, cloud.positions)


def fit_head(head: RegressionHead, embs: Sequence[Embedding], targets: np.ndarray,
             steps: int = 500, lr: float = 3e-3, weight_decay: float = 0.0,
             batch: int = 64, seed: int = 0) -> list[float]:
    """Mean-squared-error fit of ``head`` on frozen embeddings; returns the loss curve."""
    targets = np.asarray(targets, float)
    s_all, v_all = stack_embeddings(embs)
    opt = AdamW(head.parameters(), AdamWConfig(weight_decay=weight_decay))
    rng = np.random.default_rng(seed)
    curve = []
    for _ in range(steps):
        idx = rng.choice(len(targets), size=min(batch, len(targets)), replace=False)
        pred = head(Tensor(s_all.data[idx]), Tensor(v_all.data[idx]))
        diff = pred - targets[idx]
        loss = ad.mean(diff * diff)
        ad.zero_grad(head.parameters())
        ad.backward(loss)
        opt.step(lr)
        curve.append(loss.item())
    return curve
