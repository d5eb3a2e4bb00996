"""Mind2Mind transfer learning for WGANs at desk scale.

An autoencoder trained on a source dataset is frozen; a small WGAN-GP
("MindGAN") learns the encoded target distribution, and the decoder maps
its samples back to data space.
"""

from .autoencoder import AutoencoderSpec, ae_pushforward, encode_dataset, train_autoencoder
from .gan import GanLossConfig, PriorSpec, TrainConfig, TrainHistory, train_wgan
from .nn import MlpSpec, Network, init_mlp, predict
from .ot import EmpiricalMeasure, exact_w1, lipschitz_upper, sliced_w1
from .pipeline import BoundReport, ComposedGenerator, mind2mind, sample, verify_bound, wae_bound

__all__ = [
    "AutoencoderSpec", "BoundReport", "ComposedGenerator", "EmpiricalMeasure", "GanLossConfig",
    "MlpSpec", "Network", "PriorSpec", "TrainConfig", "TrainHistory", "ae_pushforward",
    "encode_dataset", "exact_w1", "init_mlp", "lipschitz_upper", "mind2mind", "predict",
    "sample", "sliced_w1", "train_autoencoder", "train_wgan", "verify_bound", "wae_bound",
]
