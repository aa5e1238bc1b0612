"""Cancer tissue region detection from paired histology embeddings and spatial expression.

Three trained stages: contrastive alignment of the two modalities, a
neighbour-aware cross-attention fusion network regularised by class-specific
latent priors, and a classifier whose scores are thresholded with a
two-component Gaussian mixture.
"""

from .dataio import SpotDataset, load_dataset, save_dataset
from .pipeline import RunConfig, TrainedModel, fit, infer, load_model, save_model
from .synthgen import SynthConfig, generate_cohort

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "SpotDataset",
    "SynthConfig",
    "TrainedModel",
    "fit",
    "generate_cohort",
    "infer",
    "load_dataset",
    "load_model",
    "save_dataset",
    "save_model",
]
