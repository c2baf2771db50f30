"""Federated multi-task learning with multi-output Gaussian process priors."""

from .data import ClientDataset, generate_synthetic, load_manifest, split
from .elbo import GlobalPrior, elbo_terms
from .federation import FederationConfig, run_federation
from .kernels import FeatureMap, KernelSpec
from .metrics import accuracy, ece, mse, ood_score

__version__ = "0.1.0"

__all__ = [
    "ClientDataset", "FeatureMap", "FederationConfig", "GlobalPrior", "KernelSpec", "accuracy", "ece",
    "elbo_terms", "generate_synthetic", "load_manifest", "mse", "ood_score", "run_federation", "split",
]
