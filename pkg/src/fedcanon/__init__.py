"""Canonical-space federated aggregation for cross-modal projectors, at desk scale."""
from .aggregation import (ClientUpdate, FedAdamConfig, FedCmpConfig, MomentumState, cra_decompose,
                          fedadam_aggregate, fedavg_aggregate, fedcmp_aggregate, fedprox_penalty,
                          fuse_global, opm_update, reliability_weights)
from .client import TrainConfig, local_train, surrogate_loss
from .datagen import CorpusSpec, build_dataset, generate_corpus, partition
from .linalg import align_signs, cos_dissimilarity, orthogonality_defect, polar_orth, svd
from .metrics import compare, smoothness, summarize
from .orchestrator import FederationConfig, evaluate, run_federation
from .params import ProjectorParams

__version__ = "0.1.0"
