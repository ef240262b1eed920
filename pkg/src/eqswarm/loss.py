"""Gaussian-mixture reconstruction loss, auxiliary penalties and width annealing.

Input atoms and swarm points are Gaussians of shared width ``sigma`` in the
(3 + n_c)-dimensional augmented space (position followed by ``type_scale``
times the one-hot / type-probability vector).  The overlap of input atom i
with swarm point j is ``w_j * exp(-d_ij^2 / sigma)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ordered_sum
from .cloud import DEFAULT_TYPE_SCALE, GraphBatch, Swarm, TypedPointCloud
from .model import SwarmTensors


@dataclass(frozen=True)
class LossConfig:
    type_scale: float = DEFAULT_TYPE_SCALE
    sigma: float = 2.0
    sigma_threshold: float = 0.15
    sigma_factor: float = 0.99
    self_overlap_stop: float = 1e-3
    nearest_coef: float = 0.1
    weight_coef: float = 1.0
    radial_coef: float = 1.0
    annealing_stopped: bool = False

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.sigma_factor < 1:
            raise ValueError(f"sigma_factor must lie in (0, 1), got {self.sigma_factor}")
        if self.nearest_coef < 0:
            raise ValueError("nearest_coef must be non-negative")


@dataclass
class LossBreakdown:
    """Batch means of the per-molecule loss terms."""

    reconstruction: float
    radial: float
    weight: float
    nearest: float
    total: float
    self_overlap: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- plain numpy kernels ------------------------------------------------------

def overlap(x: np.ndarray, y: np.ndarray, w: float, sigma: float) -> float:
    d2 = float(np.sum((np.asarray(x, float) - np.asarray(y, float)) ** 2))
    return float(w * np.exp(-d2 / sigma))


def overlap_matrix(x: np.ndarray, y: np.ndarray, w: np.ndarray, sigma: float) -> np.ndarray:
    """A[i, j] for augmented inputs ``x`` [n_i, D] and outputs ``y`` [n_j, D]."""
    diff = y[None, :, :] - x[:, None, :]
    d2 = ordered_sum(diff * diff, axis=2)
    return w[None, :] * np.exp(-(d2 / sigma))


def atom_self_overlap(cloud: TypedPointCloud, sigma: float,
                      type_scale: float = DEFAULT_TYPE_SCALE) -> np.ndarray:
    """Per-atom total overlap with all input atoms (itself included)."""
    x = cloud.augmented(type_scale)
    return ordered_sum(overlap_matrix(x, x, np.ones(len(x)), sigma), axis=1)


def self_overlap(cloud: TypedPointCloud, sigma: float,
                 type_scale: float = DEFAULT_TYPE_SCALE) -> float:
    """Mean per-atom self-overlap; at least 1 because of the diagonal term."""
    return float(atom_self_overlap(cloud, sigma, type_scale).mean())


# -- differentiable batched loss ----------------------------------------------

@dataclass
class LossTerms:
    """Per-molecule loss tensors for one batch."""

    reconstruction: Tensor
    radial: Tensor
    weight: Tensor
    nearest: Tensor
    total: Tensor
    self_overlap: np.ndarray

    def mean_total(self) -> Tensor:
        return ad.mean(self.total)

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            reconstruction=float(self.reconstruction.data.mean()),
            radial=float(self.radial.data.mean()),
            weight=float(self.weight.data.mean()),
            nearest=float(self.nearest.data.mean()),
            total=float(self.total.data.mean()),
            self_overlap=float(self.self_overlap.mean()),
        )


def loss_terms(batch: GraphBatch, swarm: SwarmTensors, cfg: LossConfig) -> LossTerms:
    nb, nj = swarm.num_graphs, swarm.size
    nc = swarm.type_probs.shape[1]
    mol = batch.batch
    onehot = np.zeros((batch.num_nodes, nc))
    onehot[np.arange(batch.num_nodes), batch.types] = cfg.type_scale
    x = np.concatenate([batch.positions, onehot], axis=1)  # [n_a, D]

    y = ad.concat([swarm.positions, swarm.type_probs * cfg.type_scale], axis=1)
    y = y.reshape(nb, nj, 3 + nc)
    diff = ad.gather(y, mol) - x[:, None, :]
    d2 = ad.tsum(diff * diff, axis=2)  # [n_a, n_j]
    w = swarm.weights.reshape(nb, nj)
    a = ad.gather(w, mol) * ad.exp(-(d2 / cfg.sigma))
    cross = ad.tsum(a, axis=1)

    selfo = np.empty(batch.num_nodes)
    for m in range(nb):
        lo, hi = batch.offsets[m], batch.offsets[m + 1]
        xm = x[lo:hi]
        selfo[lo:hi] = ordered_sum(overlap_matrix(xm, xm, np.ones(hi - lo), cfg.sigma), axis=1)

    recon = ad.segment_sum(ad.absolute(cross - selfo), mol, nb)

    r = ad.norm(swarm.positions, axis=1)
    r_mol = np.repeat(np.asarray(batch.radii), nj)
    radial = ad.segment_sum(ad.relu(r - r_mol), swarm.batch, nb)

    wdev = ad.relu(w - ad.mean(w, axis=1, keepdims=True))
    weight = ad.tsum(wdev, axis=1)

    nearest = ad.segment_sum(ad.amin(d2, axis=1), mol, nb) * cfg.nearest_coef

    total = recon + radial * cfg.radial_coef + weight * cfg.weight_coef + nearest
    per_mol_self = ad.scatter_add(selfo, mol, nb) / batch.counts
    return LossTerms(recon, radial, weight, nearest, total, per_mol_self)


def _swarm_tensors(swarms: Sequence[Swarm]) -> SwarmTensors:
    nj = swarms[0].size
    return SwarmTensors(
        positions=Tensor(np.concatenate([s.positions for s in swarms])),
        type_probs=Tensor(np.concatenate([s.type_probs for s in swarms])),
        weights=Tensor(np.concatenate([s.weights for s in swarms])),
        num_graphs=len(swarms), size=nj,
        n_ref=np.array([s.n_ref for s in swarms]))


def evaluate_loss(clouds: Sequence[TypedPointCloud], swarms: Sequence[Swarm],
                  cfg: LossConfig) -> LossTerms:
    """Loss terms for already-decoded swarms (no gradient tracking)."""
    return loss_terms(GraphBatch.from_clouds(list(clouds)), _swarm_tensors(swarms), cfg)


def reconstruction_loss(cloud: TypedPointCloud, swarm: Swarm, cfg: LossConfig) -> float:
    """sum_i | sum_j A_ij - sum_k A_ik | for one molecule."""
    return float(evaluate_loss([cloud], [swarm], cfg).reconstruction.data[0])


def radial_constraint(swarm: Swarm, r_mol: float) -> float:
    r = np.linalg.norm(swarm.positions, axis=1)
    return float(np.maximum(r - r_mol, 0.0).sum())


def weight_penalty(swarm: Swarm) -> float:
    w = np.asarray(swarm.weights)
    return float(np.maximum(w - w.mean(), 0.0).sum())


def nearest_node_penalty(cloud: TypedPointCloud, swarm: Swarm, coef: float = 0.1,
                         type_scale: float = DEFAULT_TYPE_SCALE) -> float:
    x, y = cloud.augmented(type_scale), swarm.augmented(type_scale)
    diff = y[None, :, :] - x[:, None, :]
    return float(coef * ordered_sum(diff * diff, axis=2).min(axis=1).sum())


def anneal_sigma(cfg: LossConfig, eval_loss: float, mean_self_overlap: float) -> LossConfig:
    """Shrink sigma by ``sigma_factor`` when the eval reconstruction loss is at
    or below ``sigma_threshold``.  Once the mean input self-overlap excess
    (self-overlap minus 1) is at or below ``self_overlap_stop``, annealing
    stops for good."""
    if cfg.annealing_stopped:
        return cfg
    if mean_self_overlap - 1.0 <= cfg.self_overlap_stop:
        return dataclasses.replace(cfg, annealing_stopped=True)
    if eval_loss <= cfg.sigma_threshold:
        return dataclasses.replace(cfg, sigma=cfg.sigma * cfg.sigma_factor)
    return cfg
