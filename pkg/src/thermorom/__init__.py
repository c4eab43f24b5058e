"""Thermodynamically consistent reduced-order models of parametric
dynamical systems.

The library couples a dense autoencoder with a latent vector field built in
the GENERIC (metriplectic) form, so that energy conservation, entropy
production, and the associated degeneracy conditions hold by construction
for every parameter value.  Training data come from built-in reference
solvers or external snapshot archives; a greedy residual-based indicator can
grow the training set on the fly.
"""

from .autoencoder import AutoEncoder, IdentityAutoEncoder, load_autoencoder
from .datasets import PairBatch, Trajectory, TrajectoryDataset
from .generic import KnownScalar, PGFinn, load_model, save_model
from .losses import LossWeights, total_loss
from .optim import OptimState, TrainableSet, grad_params, opt_step
from .systems import generate_dataset, get_system
from .training import Trainer, TrainResult, TrainSchedule, make_batches, train

__version__ = "0.1.0"

__all__ = [
    "AutoEncoder",
    "IdentityAutoEncoder",
    "KnownScalar",
    "LossWeights",
    "OptimState",
    "PGFinn",
    "PairBatch",
    "Trainer",
    "TrainResult",
    "TrainSchedule",
    "Trajectory",
    "TrajectoryDataset",
    "TrainableSet",
    "generate_dataset",
    "get_system",
    "grad_params",
    "load_autoencoder",
    "load_model",
    "make_batches",
    "opt_step",
    "save_model",
    "total_loss",
    "train",
]
