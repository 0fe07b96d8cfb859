"""Non-local image restoration: classic non-local denoisers, a trainable
neighborhood-confined non-local module with hand-written gradients, and the
non-local recurrent network built on it."""

from .classic import GroupDenoiser, NonLocalMeans
from .estimators import NLRNRestorer
from .model import DESK_CONFIG, FULL_CONFIG, NlrnConfig, NlrnParams, forward, init_params, restore
from .nonlocal_module import NonLocalWeights, nonlocal_backward, nonlocal_forward
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DESK_CONFIG",
    "FULL_CONFIG",
    "GroupDenoiser",
    "NLRNRestorer",
    "NlrnConfig",
    "NlrnParams",
    "NonLocalMeans",
    "NonLocalWeights",
    "TrainConfig",
    "forward",
    "init_params",
    "nonlocal_backward",
    "nonlocal_forward",
    "restore",
    "train",
]
