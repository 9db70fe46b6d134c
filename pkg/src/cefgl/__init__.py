"""Desk-scale laboratory for communication-efficient personalized federated
graph learning: dual-channel (low-rank shared / sparse private) training with
drift correction, truncated-SVD aggregation, quantized transfers and
probabilistic communication skipping, plus weighted-average and proximal
baselines, dataset tooling and a batch-experiment harness.
"""

__version__ = "0.1.0"

from . import compress, fedcore, gnn, graphdata, harness, linalg  # noqa: F401
