"""Desk-scale federated LoRA fine-tuning lab.

Simulates FedAvg with low-rank adapters on a tiny causal language model,
with Dirichlet-based non-IID corpus partitioning (context-length label skew
and quantity skew) and generalization/fairness metrics.
"""

from ._kernels import get_backend

__version__ = "0.1.0"

__all__ = ["get_backend", "__version__"]
