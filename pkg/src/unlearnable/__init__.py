"""Error-minimizing noise for unlearnable examples, built on a small numpy autodiff engine."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
