"""Equivariant multi-type point-cloud autoencoder for small molecules."""

from .cloud import (DomainError, GaussianMixtureView, GraphBatch, Swarm, TypedPointCloud,
                    center_cloud, one_hot_encode)
from .model import Autoencoder, Embedding, ModelConfig

__all__ = [
    "Autoencoder", "DomainError", "Embedding", "GaussianMixtureView", "GraphBatch",
    "ModelConfig", "Swarm", "TypedPointCloud", "center_cloud", "one_hot_encode",
]
__version__ = "0.1.0"
