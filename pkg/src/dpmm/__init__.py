"""Distributed Dirichlet-process mixture estimation.

Local collapsed Gibbs sampling over data shards, delta synchronization of
sufficient statistics against a master pool, and probabilistic
consolidation (progressive or pooled merge/split MCMC) of locally-created
components, in serial, synchronous, and asynchronous modes.
"""

from .families import FamilySpec, PosteriorParams, SuffStats, parse_family
from .runtime import RunConfig, RunResult, run

__all__ = [
    "FamilySpec",
    "PosteriorParams",
    "SuffStats",
    "parse_family",
    "RunConfig",
    "RunResult",
    "run",
]

__version__ = "0.1.0"
