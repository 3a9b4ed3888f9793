"""Conjugate exponential-family kernels.

Two concrete observation families are supported:

* ``gaussian`` -- fixed-variance spherical Gaussian with a spherical
  Gaussian prior on the mean.  Canonical parameters are chosen so that the
  prior is (beta0 = 0, kappa0 = sigma^2 / sigma0^2), the posterior mean is
  beta / kappa and the posterior variance of the mean is sigma^2 / kappa.
* ``multinomial`` -- multinomial documents (bag-of-words count vectors)
  with a symmetric Dirichlet prior.  beta0 = (gamma, ..., gamma) and kappa
  tracks the total word count (kappa0 = V * gamma); kappa is bookkeeping
  only since the log-partition depends on beta alone.

All densities are computed and returned in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.special import gammaln

GAUSSIAN = "gaussian"
MULTINOMIAL = "multinomial"


class FamilyError(ValueError):
    """Invalid family parameters or observations."""


@dataclass(frozen=True)
class FamilySpec:
    """Hyperparameters of a conjugate observation family.

    ``dim`` is the data dimension (Gaussian) or vocabulary size
    (multinomial).  ``alpha`` is the DP concentration, carried here because
    every likelihood-ratio computation needs it next to the family.
    """

    kind: str
    dim: int
    sigma: float = 1.0
    sigma0: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, MULTINOMIAL):
            raise FamilyError(f"unknown family kind: {self.kind!r}")
        if self.dim < 1:
            raise FamilyError("dim must be a positive integer")
        for name in ("sigma", "sigma0", "gamma", "alpha"):
            if getattr(self, name) <= 0:
                raise FamilyError(f"{name} must be strictly positive")

    @cached_property
    def beta0(self) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return np.zeros(self.dim)
        return np.full(self.dim, self.gamma)

    @property
    def kappa0(self) -> float:
        if self.kind == GAUSSIAN:
            return self.sigma**2 / self.sigma0**2
        return self.dim * self.gamma

    def with_alpha(self, alpha: float) -> "FamilySpec":
        return replace(self, alpha=alpha)


@dataclass
class SuffStats:
    """Additive sufficient statistics: psi-sum plus sample count.

    ``count`` may be negative when the object represents a delta.
    """

    psi: np.ndarray
    count: int

    def copy(self) -> "SuffStats":
        return SuffStats(self.psi.copy(), self.count)


@dataclass
class PosteriorParams:
    """Canonical posterior parameters (beta, kappa)."""

    beta: np.ndarray
    kappa: float


def zero_stats(spec: FamilySpec) -> SuffStats:
    return SuffStats(np.zeros(spec.dim), 0)


def _check_dim(x: np.ndarray, spec: FamilySpec):
    if x.shape != (spec.dim,):
        raise FamilyError(
            f"observation has shape {x.shape}, expected ({spec.dim},)"
        )


def suff_stats(x, spec: FamilySpec) -> SuffStats:
    """Per-observation sufficient statistics (psi(x), 1).

    psi is the identity map for both families.  Multinomial observations
    must be nonnegative count vectors with at least one positive entry.
    """
    x = np.asarray(x, dtype=float)
    _check_dim(x, spec)
    if spec.kind == MULTINOMIAL:
        if np.any(x < 0) or np.any(x != np.round(x)):
            raise FamilyError("multinomial observation must be nonnegative integer counts")
        if x.sum() == 0:
            raise FamilyError("empty document: all-zero count vector")
    return SuffStats(x.copy(), 1)


def accumulate(a: SuffStats, b: SuffStats, sign: int = 1) -> SuffStats:
    """Componentwise a + sign*b; sign=-1 yields a delta payload."""
    if a.psi.shape != b.psi.shape:
        raise FamilyError("sufficient-statistics dimension mismatch")
    if sign not in (1, -1):
        raise FamilyError("sign must be +1 or -1")
    return SuffStats(a.psi + sign * b.psi, a.count + sign * b.count)


def obs_scale(x: np.ndarray, spec: FamilySpec) -> float:
    """Per-observation kappa increment c.

    1 for the Gaussian family; the document word count for the
    multinomial family (variable-length documents).
    """
    if spec.kind == GAUSSIAN:
        return 1.0
    return float(np.asarray(x).sum())


def posterior_params(spec: FamilySpec, stats: SuffStats) -> PosteriorParams:
    """beta = beta0 + psi-sum; kappa = kappa0 plus absorbed mass."""
    if stats.psi.shape != (spec.dim,):
        raise FamilyError("sufficient-statistics dimension mismatch")
    beta = spec.beta0 + stats.psi
    if spec.kind == GAUSSIAN:
        kappa = spec.kappa0 + stats.count
    else:
        kappa = spec.kappa0 + float(stats.psi.sum())
    return PosteriorParams(beta, kappa)


def log_partition(spec: FamilySpec, p: PosteriorParams) -> float:
    """Log-partition b(beta, kappa) of the (posterior) parameter density."""
    if spec.kind == GAUSSIAN:
        if p.kappa <= 0:
            raise FamilyError("kappa must be positive for the gaussian family")
        s2 = spec.sigma**2
        return 0.5 * spec.dim * math.log(2.0 * math.pi * s2 / p.kappa) + float(
            p.beta @ p.beta
        ) / (2.0 * s2 * p.kappa)
    if np.any(p.beta <= 0):
        raise FamilyError("beta entries must be positive for the multinomial family")
    return float(gammaln(p.beta).sum() - gammaln(p.beta.sum()))


def log_h(x, spec: FamilySpec) -> float:
    """Log base measure h(x): Gaussian carrier term, or the log multinomial
    coefficient for documents (cancels in ratios, needed for absolute
    log-likelihoods)."""
    x = np.asarray(x, dtype=float)
    _check_dim(x, spec)
    if spec.kind == GAUSSIAN:
        s2 = spec.sigma**2
        return -0.5 * spec.dim * math.log(2.0 * math.pi * s2) - float(x @ x) / (2.0 * s2)
    return float(gammaln(x.sum() + 1.0) - gammaln(x + 1.0).sum())


def log_marginal(x, p: PosteriorParams, spec: FamilySpec) -> float:
    """Posterior-predictive log density/mass of one observation.

    Equals log h(x) + b(beta + psi(x), kappa + c) - b(beta, kappa).
    """
    x = np.asarray(x, dtype=float)
    _check_dim(x, spec)
    post = PosteriorParams(p.beta + x, p.kappa + obs_scale(x, spec))
    return log_h(x, spec) + log_partition(spec, post) - log_partition(spec, p)


def prior_params(spec: FamilySpec) -> PosteriorParams:
    return PosteriorParams(spec.beta0.copy(), spec.kappa0)


def parse_family(text: str, alpha: float | None = None) -> FamilySpec:
    """Parse a CLI family string.

    Formats: ``gaussian:dim=2,sigma=1.0,sigma0=1.0`` or
    ``multinomial:vocab=9866,gamma=1.0``.
    """
    head, _, rest = text.partition(":")
    head = head.strip()
    if head not in (GAUSSIAN, MULTINOMIAL):
        raise FamilyError(f"unknown family {head!r}")
    kv = {}
    if rest:
        for item in rest.split(","):
            if not item:
                continue
            key, _, val = item.partition("=")
            if not val:
                raise FamilyError(f"malformed family option {item!r}")
            kv[key.strip()] = val.strip()
    try:
        if head == GAUSSIAN:
            spec = FamilySpec(
                kind=GAUSSIAN,
                dim=int(kv.pop("dim")),
                sigma=float(kv.pop("sigma", 1.0)),
                sigma0=float(kv.pop("sigma0", 1.0)),
            )
        else:
            spec = FamilySpec(
                kind=MULTINOMIAL,
                dim=int(kv.pop("vocab")),
                gamma=float(kv.pop("gamma", 1.0)),
            )
    except KeyError as exc:
        raise FamilyError(f"missing required family option {exc.args[0]!r}") from None
    except ValueError as exc:
        raise FamilyError(str(exc)) from None
    if "alpha" in kv:
        spec = spec.with_alpha(float(kv.pop("alpha")))
    if kv:
        raise FamilyError(f"unknown family options: {sorted(kv)}")
    if alpha is not None:
        spec = spec.with_alpha(alpha)
    return spec
