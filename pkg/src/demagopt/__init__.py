"""2D nonlinear magnetostatics FEM toolkit for demagnetization-aware
multi-material rotor topology optimization."""

__version__ = "0.1.0"

from ._kernels import available_backends, backend_name  # noqa: F401
