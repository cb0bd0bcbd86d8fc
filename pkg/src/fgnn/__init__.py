"""Finite Gaussian neurons: a small numpy framework with conversion, attacks and evaluation."""
import os as _os

# FGN_THREADS caps BLAS worker threads; it only takes effect when fgnn is
# imported before numpy.
_threads = _os.environ.get("FGN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .autodiff import Graph, GraphError, Node, Tensor  # noqa: E402
from .layers import (Conv1dLayer, DenseLayer, FgnConv1dLayer, FgnDenseLayer,  # noqa: E402
                     Network)

__version__ = "0.1.0"

__all__ = ["Graph", "GraphError", "Node", "Tensor", "DenseLayer", "FgnDenseLayer",
           "Conv1dLayer", "FgnConv1dLayer", "Network"]
