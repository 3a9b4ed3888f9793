"""Synthetic benchmark generation and dataset I/O.

Binary dataset format (little-endian)::

    magic u16 (0xDA7A) | version u8 | family-kind u8 | dim u32 | N u64
    rows: dense f64 x dim each, or sparse per row: nnz u32, (idx u32, cnt u32)...
    optional truth section: u64 x N (presence detected by file length)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = 0xDA7A
FORMAT_VERSION = 1
KIND_DENSE = 0
KIND_SPARSE = 1


class DataError(ValueError):
    """Bad dataset file or invalid generator parameters."""


@dataclass
class Dataset:
    observations: np.ndarray  # N x dim, float64 (sparse stored densified)
    truth: np.ndarray | None = None
    kind: int = KIND_DENSE
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        if self.observations.ndim != 2 or len(self.observations) < 1:
            raise DataError("observations must be a nonempty N x dim matrix")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            if len(self.truth) != len(self.observations):
                raise DataError("truth length must equal N")

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return len(self.observations)


def gen_synthetic(
    k: int,
    size_range: tuple[int, int],
    dim: int = 2,
    sigma: float = 1.0,
    seed: int = 0,
    box: float = 50.0,
) -> Dataset:
    """Gaussian mixture benchmark: k isotropic components with means drawn
    uniformly in [-box, box]^dim and per-cluster sizes uniform in
    [min, max].  Ground-truth labels are recorded."""
    lo, hi = size_range
    if k < 1 or lo < 1 or lo > hi:
        raise DataError("invalid cluster count or size range")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-box, box, size=(k, dim))
    sizes = rng.integers(lo, hi + 1, size=k)
    obs = []
    labels = []
    for j in range(k):
        obs.append(means[j] + sigma * rng.standard_normal((sizes[j], dim)))
        labels.append(np.full(sizes[j], j, dtype=np.int64))
    x = np.concatenate(obs)
    z = np.concatenate(labels)
    perm = rng.permutation(len(x))
    return Dataset(
        x[perm],
        truth=z[perm],
        metadata={"k": k, "sizes": sizes.tolist(), "sigma": sigma, "box": box, "seed": seed},
    )


def save_dataset(ds: Dataset, path: str):
    if not np.all(np.isfinite(ds.observations)):
        raise DataError("refusing to save non-finite observations")
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<HBBIQ", MAGIC, FORMAT_VERSION, ds.kind, ds.dim, len(ds)
            )
        )
        if ds.kind == KIND_DENSE:
            fh.write(np.ascontiguousarray(ds.observations, dtype="<f8").tobytes())
        else:
            for row in ds.observations:
                nz = np.nonzero(row)[0]
                fh.write(struct.pack("<I", len(nz)))
                for idx in nz:
                    fh.write(struct.pack("<II", int(idx), int(round(row[idx]))))
        if ds.truth is not None:
            fh.write(np.ascontiguousarray(ds.truth, dtype="<u8").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<HBBIQ")
    if len(raw) < head.size:
        raise DataError("truncated dataset header")
    magic, version, kind, dim, n = head.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"bad dataset magic 0x{magic:04X}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {version}")
    if dim < 1 or n < 1:
        raise DataError("invalid dataset dimensions")
    pos = head.size
    if kind == KIND_DENSE:
        nbytes = 8 * dim * n
        if len(raw) < pos + nbytes:
            raise DataError("truncated dense payload")
        obs = (
            np.frombuffer(raw, dtype="<f8", count=dim * n, offset=pos)
            .reshape(n, dim)
            .copy()
        )
        pos += nbytes
    elif kind == KIND_SPARSE:
        obs = np.zeros((n, dim))
        for i in range(n):
            if len(raw) < pos + 4:
                raise DataError("truncated sparse row")
            (nnz,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if len(raw) < pos + 8 * nnz:
                raise DataError("truncated sparse row")
            for _ in range(nnz):
                idx, cnt = struct.unpack_from("<II", raw, pos)
                pos += 8
                if idx >= dim:
                    raise DataError("sparse index out of range")
                obs[i, idx] = cnt
    else:
        raise DataError(f"unknown dataset kind {kind}")
    if not np.all(np.isfinite(obs)):
        raise DataError("dataset contains NaN or Inf")
    truth = None
    remaining = len(raw) - pos
    if remaining == 8 * n:
        truth = np.frombuffer(raw, dtype="<u8", count=n, offset=pos).astype(np.int64)
    elif remaining != 0:
        raise DataError("trailing bytes in dataset file")
    return Dataset(obs, truth=truth, kind=kind)


def load_csv(path: str) -> Dataset:
    """Dense CSV import; a non-numeric first line is treated as a header."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(v) for v in first.strip().split(",") if v]
    except ValueError:
        skip = 1
    obs = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if not np.all(np.isfinite(obs)):
        raise DataError("CSV contains NaN or Inf")
    return Dataset(obs)


def load_labels(path: str) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def save_labels(labels: np.ndarray, path: str):
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")
