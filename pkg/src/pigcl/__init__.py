"""Graph contrastive learning with learnable noise augmentation.

The package trains a shared GCN encoder on two graph views: the original
graph and a noisy view produced by learnable topological noise (per-edge
keep/drop decisions sampled with a straight-through Gumbel-Softmax) and
learnable attribute noise (a diagonal Gaussian applied through the
reparameterization trick). Both noise generators are trained jointly with
the encoder against the contrastive objective, and an information-theoretic
diagnostic layer (task entropy, conditional-entropy estimate) is exposed
alongside the loss.
"""

__version__ = "0.1.0"

from .encoder import Dims, EncoderParams, encode, init_params, project  # noqa: E402,F401
from .graph import (Graph, SplitMasks, generate_sbm, load_graph,  # noqa: E402,F401
                    make_split, normalize, save_graph)
from .losses import infonce_loss, kappa, pi_noise_loss, task_entropy  # noqa: E402,F401
from .training import TrainConfig, TrainResult, train  # noqa: E402,F401
from .evaluation import EvalReport, ablation_grid, linear_probe, repeated_eval  # noqa: E402,F401
