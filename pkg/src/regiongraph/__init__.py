"""Space-time region graphs and two-branch residual GCNs for action classification."""

from regiongraph.linalg import ShapeError

__version__ = "0.1.0"

__all__ = ["ShapeError", "__version__"]
