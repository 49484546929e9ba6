"""Neural nowcasting of financial curves and surfaces.

Daily observations are compressed into short factor codes by a decoder
network; partially observed days are completed by calibrating a code on the
visible points and decoding everywhere.
"""
from . import baselines, data, models, nn, optim, pipeline
from .data import Dataset, MaskSpec, Observation, load_dataset, save_dataset
from .errors import NowcastError

__version__ = "0.1.0"
__all__ = ["baselines", "data", "models", "nn", "optim", "pipeline",
           "Dataset", "MaskSpec", "Observation", "load_dataset", "save_dataset", "NowcastError"]
