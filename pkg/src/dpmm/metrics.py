"""Evaluation: collapsed joint log-likelihood, Variation of Information,
and trace records for convergence / communication-cost reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .families import (
    FamilySpec,
    GAUSSIAN,
    PosteriorParams,
    log_h,
    log_partition,
    prior_params,
)


@dataclass
class TraceRecord:
    iteration: int
    ms: float
    loglik: float
    k: int
    msgs: int
    bytes: int
    mode: str

    def csv_row(self) -> str:
        return f"{self.iteration},{self.ms:.3f},{self.loglik:.6f},{self.k},{self.msgs},{self.bytes},{self.mode}"


TRACE_HEADER = "iter,ms,loglik,K,msgs,bytes,mode"


def write_trace(records: list[TraceRecord], path: str):
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


def cluster_stats(
    observations: np.ndarray, labels: np.ndarray, spec: FamilySpec
) -> dict[int, tuple[np.ndarray, float, int]]:
    """Per-cluster (beta, kappa, n) from a labeling."""
    labels = np.asarray(labels)
    out = {}
    for lab in np.unique(labels):
        mask = labels == lab
        psi = observations[mask].sum(axis=0)
        n = int(mask.sum())
        if spec.kind == GAUSSIAN:
            kappa = spec.kappa0 + n
        else:
            kappa = spec.kappa0 + float(psi.sum())
        out[int(lab)] = (spec.beta0 + psi, kappa, n)
    return out


def sum_log_h(observations: np.ndarray, spec: FamilySpec) -> float:
    """Sum of log h(x) over the dataset; constant in the labeling."""
    x = np.asarray(observations, dtype=float)
    if spec.kind == GAUSSIAN:
        s2 = spec.sigma**2
        return float(
            -0.5 * spec.dim * math.log(2 * math.pi * s2) * len(x)
            - (x * x).sum() / (2 * s2)
        )
    return float((gammaln(x.sum(axis=1) + 1) - gammaln(x + 1).sum(axis=1)).sum())


def loglik_from_stats(
    stats: list[tuple[np.ndarray, float, int]],
    lnh_total: float,
    spec: FamilySpec,
    include_crp: bool = False,
) -> float:
    """Collapsed joint log score from per-cluster canonical parameters.

    Likelihood part: sum_k [b(beta_k, kappa_k) - b(beta0, kappa0)] plus the
    data's log base measure.  ``include_crp`` adds the partition prior
    K ln(alpha) + sum_k lnGamma(n_k) - [lnGamma(alpha+N) - lnGamma(alpha)].
    """
    b0 = log_partition(spec, prior_params(spec))
    total = lnh_total
    n_total = 0
    for beta, kappa, n in stats:
        if n <= 0:
            raise ValueError("cluster with no members")
        total += log_partition(spec, PosteriorParams(beta, kappa)) - b0
        n_total += n
    if include_crp:
        total += len(stats) * math.log(spec.alpha)
        total += sum(math.lgamma(n) for _, _, n in stats)
        total -= math.lgamma(spec.alpha + n_total) - math.lgamma(spec.alpha)
    return total


def joint_log_likelihood(
    observations: np.ndarray,
    labels: np.ndarray,
    spec: FamilySpec,
    include_crp: bool = False,
) -> float:
    """Collapsed joint log score of a labeling of the data."""
    stats = list(cluster_stats(np.asarray(observations, dtype=float), labels, spec).values())
    return loglik_from_stats(stats, sum_log_h(observations, spec), spec, include_crp)


def variation_of_information(a: np.ndarray, b: np.ndarray) -> float:
    """VI = H(a) + H(b) - 2 I(a;b), in nats.  Relabeling-invariant."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be equal-length 1-D label arrays")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na = ai.max() + 1
    nb = bi.max() + 1
    joint = np.zeros((na, nb))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    h_a = -float((pa[pa > 0] * np.log(pa[pa > 0])).sum())
    h_b = -float((pb[pb > 0] * np.log(pb[pb > 0])).sum())
    mi = float(
        (joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum()
    )
    return max(0.0, h_a + h_b - 2.0 * mi)
