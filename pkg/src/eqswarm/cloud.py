"""Typed point clouds, swarms, Gaussian-mixture views and graph batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ELEMENTS = ("H", "C", "N", "O", "F")
DEFAULT_NUM_TYPES = len(ELEMENTS)
DEFAULT_TYPE_SCALE = 2.0  # Å


class DomainError(ValueError):
    """Input outside an operation's domain (empty cloud, bad type index, ...)."""


@dataclass(frozen=True)
class TypedPointCloud:
    """A molecule: ``positions`` [n, 3] in Å and integer ``types`` [n]."""

    positions: np.ndarray
    types: np.ndarray
    num_types: int = DEFAULT_NUM_TYPES

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        typ = np.array(self.types, dtype=np.int64).reshape(-1)
        if len(pos) != len(typ):
            raise DomainError(f"{len(pos)} positions but {len(typ)} types")
        if not np.all(np.isfinite(pos)):
            raise DomainError("non-finite atom position")
        if typ.size and (typ.min() < 0 or typ.max() >= self.num_types):
            raise DomainError(f"type index out of range [0, {self.num_types})")
        pos.setflags(write=False)
        typ.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "types", typ)

    @property
    def n_atoms(self) -> int:
        return len(self.types)

    @property
    def radius(self) -> float:
        """Largest distance of any atom from the origin (r_mol)."""
        if self.n_atoms == 0:
            return 0.0
        return float(np.linalg.norm(self.positions, axis=1).max())

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def with_positions(self, positions: np.ndarray) -> "TypedPointCloud":
        return TypedPointCloud(positions, self.types, self.num_types)

    def rotated(self, rot: np.ndarray) -> "TypedPointCloud":
        return self.with_positions(self.positions @ np.asarray(rot).T)

    def permuted(self, perm: Sequence[int]) -> "TypedPointCloud":
        perm = np.asarray(perm)
        return TypedPointCloud(self.positions[perm], self.types[perm], self.num_types)

    def augmented(self, type_scale: float = DEFAULT_TYPE_SCALE) -> np.ndarray:
        """Positions concatenated with the scaled one-hot type block, [n, 3 + n_c]."""
        onehot = np.zeros((self.n_atoms, self.num_types))
        onehot[np.arange(self.n_atoms), self.types] = type_scale
        return np.concatenate([self.positions, onehot], axis=1)


def center_cloud(cloud: TypedPointCloud) -> TypedPointCloud:
    """Translate ``cloud`` so its (unweighted) centroid sits at the origin."""
    if cloud.n_atoms == 0:
        raise DomainError("cannot center an empty cloud")
    return cloud.with_positions(cloud.positions - cloud.centroid)


def one_hot_encode(z: int, num_types: int, type_scale: float) -> np.ndarray:
    if type_scale <= 0:
        raise DomainError(f"type scale must be positive, got {type_scale}")
    if not 0 <= z < num_types:
        raise DomainError(f"type index {z} outside [0, {num_types})")
    out = np.zeros(num_types)
    out[z] = type_scale
    return out


@dataclass(frozen=True)
class Swarm:
    """Decoder output for one molecule: weighted, typed points.

    ``weights`` sum to ``n_ref``, the atom count of the encoded input.
    """

    positions: np.ndarray  # [n_j, 3]
    type_probs: np.ndarray  # [n_j, n_c]
    weights: np.ndarray  # [n_j]
    n_ref: int

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def num_types(self) -> int:
        return self.type_probs.shape[1]

    def augmented(self, type_scale: float = DEFAULT_TYPE_SCALE) -> np.ndarray:
        return np.concatenate([self.positions, type_scale * self.type_probs], axis=1)

    def rotated(self, rot: np.ndarray) -> "Swarm":
        return Swarm(self.positions @ np.asarray(rot).T, self.type_probs, self.weights, self.n_ref)

    def permuted(self, perm: Sequence[int]) -> "Swarm":
        perm = np.asarray(perm)
        return Swarm(self.positions[perm], self.type_probs[perm], self.weights[perm], self.n_ref)


@dataclass(frozen=True)
class GaussianMixtureView:
    """Isotropic Gaussians of shared width ``sigma`` at augmented centers."""

    centers: np.ndarray
    weights: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def of_cloud(cls, cloud: TypedPointCloud, sigma: float,
                 type_scale: float = DEFAULT_TYPE_SCALE) -> "GaussianMixtureView":
        return cls(cloud.augmented(type_scale), np.ones(cloud.n_atoms), sigma)

    @classmethod
    def of_swarm(cls, swarm: Swarm, sigma: float,
                 type_scale: float = DEFAULT_TYPE_SCALE) -> "GaussianMixtureView":
        return cls(swarm.augmented(type_scale), swarm.weights, sigma)


@dataclass
class GraphBatch:
    """Several molecules concatenated node-wise.

    ``batch[k]`` is the molecule of node ``k``; ``offsets[m]`` the first node of
    molecule ``m`` (with a trailing total).
    """

    positions: np.ndarray
    types: np.ndarray
    batch: np.ndarray
    offsets: np.ndarray
    radii: np.ndarray = field(default=None)

    @classmethod
    def from_clouds(cls, clouds: Sequence[TypedPointCloud]) -> "GraphBatch":
        if not clouds:
            raise DomainError("empty batch")
        for c in clouds:
            if c.n_atoms == 0:
                raise DomainError("empty cloud in batch")
        counts = np.array([c.n_atoms for c in clouds])
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            types=np.concatenate([c.types for c in clouds]),
            batch=np.repeat(np.arange(len(clouds)), counts),
            offsets=offsets,
            radii=np.array([c.radius for c in clouds]),
        )

    @property
    def num_graphs(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_nodes(self) -> int:
        return len(self.batch)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)
