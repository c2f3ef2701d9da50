"""Unsupervised discovery of a subpart/part hierarchy from unlabeled images.

The package couples a capsule-style template autoencoder (shared learnable
templates warped per sample by affine poses) with a slot-attention parsing
module that assembles subparts into higher-level parts. Part visibilities
double as unsupervised segmentation maps, evaluated with concentration- and
landmark-based metrics on a built-in synthetic compositional dataset.
"""

__version__ = "0.1.0"

from hpcap.config import TrainConfig, desk_config, paper_config

__all__ = ["TrainConfig", "desk_config", "paper_config", "__version__"]
