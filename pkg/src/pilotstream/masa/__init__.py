"""Streaming-analysis mini-apps: K-Means and tomographic reconstruction
kernels plus their engine operator adapters (registered on import)."""

from .points import (
    KMeansModel,
    farthest_point_init,
    kmeans_score,
    kmeans_update,
    parse_points,
    sufficient_stats,
    update_from_stats,
)
from .tomo import (
    Sinogram,
    back_project,
    decode_sinogram,
    encode_sinogram,
    gridrec_reconstruct,
    interior_disc_mask,
    mlem_reconstruct,
    poisson_log_likelihood,
    radon_forward,
    rmse,
    shepp_logan,
    sinogram_template,
)
from . import operators as operators

__all__ = [
    "KMeansModel",
    "Sinogram",
    "back_project",
    "decode_sinogram",
    "encode_sinogram",
    "farthest_point_init",
    "gridrec_reconstruct",
    "interior_disc_mask",
    "kmeans_score",
    "kmeans_update",
    "mlem_reconstruct",
    "operators",
    "parse_points",
    "poisson_log_likelihood",
    "radon_forward",
    "rmse",
    "shepp_logan",
    "sinogram_template",
    "sufficient_stats",
    "update_from_stats",
]
