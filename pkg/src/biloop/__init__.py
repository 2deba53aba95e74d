"""Bi-directional loop closure at desk scale.

Subpackages cover pose geometry, a synthetic out-and-back world, triplet
mining, trainable place embeddings, relative pose regression, causal loop
detection with neighbour confidence sharing, and evaluation/reporting.
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
