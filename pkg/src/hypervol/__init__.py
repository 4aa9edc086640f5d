"""hypervol: band-limited hyper-volumes, projection simulation, MCMC recovery."""

__version__ = "0.1.0"

from .errors import DomainError, InvariantError

__all__ = ["DomainError", "InvariantError", "__version__"]
