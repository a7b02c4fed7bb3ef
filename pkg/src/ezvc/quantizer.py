"""K-means codebook: training (k-means++ seeding + Lloyd), assignment, files."""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .container import check_version, read_matrix, write_matrix
from .errors import ContractError, DataError, DomainError, FormatError

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"EZVCKM1\n"


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, dim) float32
    trained_on: str = ""
    inertia: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2:
            raise ContractError(f"centroids must be 2-D, got shape {self.centroids.shape}")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class UnitSequence:
    units: np.ndarray
    deduped: bool = False

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=np.int64).reshape(-1)
        if self.units.size and self.units.min() < 0:
            raise ContractError("unit ids must be non-negative")
        if self.deduped and np.any(self.units[1:] == self.units[:-1]):
            raise ContractError("sequence flagged deduped has adjacent repeats")

    def __len__(self) -> int:
        return self.units.shape[0]

    def tolist(self) -> list[int]:
        return [int(u) for u in self.units]


def _sq_dists(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray | None = None) -> np.ndarray:
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", c, c)
    x_sq = np.einsum("ij,ij->i", x, x)
    d = x_sq[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (lowest index on ties) and its squared distance.

    The expanded ``|x|^2 - 2xc + |c|^2`` form is fast but rounds; rows whose two
    best candidates are within rounding distance are re-decided with exact
    differences so ties always go to the lower index.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    c_sq = np.einsum("ij,ij->i", c, c)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dists = np.empty(x.shape[0], dtype=np.float64)
    for s in range(0, x.shape[0], chunk):
        xb = x[s:s + chunk]
        d = _sq_dists(xb, c, c_sq)
        lab = np.argmin(d, axis=1)
        best = d[np.arange(len(xb)), lab]
        scale = np.einsum("ij,ij->i", xb, xb) + c_sq.max()
        close = (d - best[:, None]) <= 1e-9 * (scale[:, None] + 1.0)
        ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
        for i in ambiguous:
            cand = np.flatnonzero(close[i])
            exact = ((c[cand] - xb[i]) ** 2).sum(axis=1)
            j = cand[np.argmin(exact)]
            lab[i] = j
        exact_best = ((c[lab] - xb) ** 2).sum(axis=1)
        labels[s:s + chunk] = lab
        dists[s:s + chunk] = exact_best
    return labels, dists


def _gather(data: Iterable[np.ndarray] | np.ndarray) -> np.ndarray:
    if isinstance(data, np.ndarray):
        mats = [data]
    else:
        mats = [getattr(m, "vectors", m) for m in data]
    if not mats:
        raise DomainError("no embeddings to train on")
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    mats = [m.reshape(-1, 1) if m.ndim == 1 else m for m in mats]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ContractError(f"inconsistent embedding dims in stream: {sorted(dims)}")
    x = np.concatenate(mats, axis=0)
    if not np.all(np.isfinite(x)):
        raise DataError("embeddings contain NaN or infinite values")
    return x


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _update(x: np.ndarray, labels: np.ndarray, k: int, chunk: int) -> tuple[np.ndarray, np.ndarray]:
    # chunked accumulation in fixed order keeps the reduction deterministic
    sums = np.zeros((k, x.shape[1]))
    counts = np.zeros(k, dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        lab = labels[s:s + chunk]
        np.add.at(sums, lab, x[s:s + chunk])
        counts += np.bincount(lab, minlength=k)
    return sums, counts


def train_kmeans(
    data: Iterable[np.ndarray] | np.ndarray,
    k: int = 500,
    seed: int = 0,
    max_iters: int = 100,
    rel_tol: float = 1e-4,
    *,
    max_frames: int | None = None,
    chunk_size: int = 4096,
    trained_on: str = "",
) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    ``max_frames`` uniformly subsamples the pooled frames (seeded) before
    training.  The returned codebook's ``history`` holds the mean squared
    distance after each assignment step; it is non-increasing.
    """
    x = _gather(data)
    rng = np.random.default_rng(seed)
    if max_frames is not None and x.shape[0] > max_frames:
        keep = np.sort(rng.choice(x.shape[0], size=max_frames, replace=False))
        x = x[keep]
    n = x.shape[0]
    if n < k:
        raise DomainError(f"need at least k={k} frames, got {n}")
    if np.unique(x, axis=0).shape[0] < k:
        raise DomainError(f"fewer than k={k} distinct frames")

    centroids = kmeans_plusplus(x, k, rng)
    history: list[float] = []
    prev_labels = None
    for it in range(max_iters):
        labels, dists = nearest(x, centroids, chunk_size)
        inertia = float(dists.mean())
        history.append(inertia)
        if prev_labels is not None:
            if np.array_equal(labels, prev_labels):
                break
            improvement = (history[-2] - inertia) / max(history[-2], 1e-300)
            if improvement < rel_tol:
                break
        prev_labels = labels

        sums, counts = _update(x, labels, k, chunk_size)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            # farthest points from their own centroids become the new seeds
            far = np.argsort(-dists, kind="stable")[: len(empty)]
            centroids[empty] = x[far]
            log.debug("iteration %d: reseeded %d empty clusters", it, len(empty))

    labels, dists = nearest(x, centroids, chunk_size)
    final = float(dists.mean())
    if final < history[-1]:
        history.append(final)
    log.info("k-means k=%d converged after %d iterations, inertia %.6g", k, len(history), history[-1])
    cb = Codebook(centroids.astype(np.float32), trained_on=trained_on, inertia=history[-1], history=history)
    if np.unique(cb.centroids, axis=0).shape[0] != k:
        raise DomainError("training produced duplicate centroids")
    return cb


def assign(cb: Codebook, emb) -> UnitSequence:
    """Map each frame to its nearest centroid (squared Euclidean, lowest index on ties)."""
    vectors = np.asarray(getattr(emb, "vectors", emb))
    if vectors.ndim != 2 or vectors.shape[1] != cb.dim:
        raise ContractError(f"embedding dim {vectors.shape[-1]} does not match codebook dim {cb.dim}")
    labels, _ = nearest(vectors, cb.centroids)
    return UnitSequence(labels, deduped=False)


def save_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    header = {
        "version": 1,
        "k": cb.k,
        "dim": cb.dim,
        "inertia": cb.inertia,
        "trained_on": cb.trained_on,
    }
    if cb.meta:
        header["meta"] = cb.meta
    write_matrix(path, CODEBOOK_MAGIC, header, cb.centroids)


def load_codebook(path: str | os.PathLike) -> Codebook:
    header, centroids = read_matrix(path, CODEBOOK_MAGIC, "k", "dim")
    check_version(header, path)
    if centroids.shape[0] == 0:
        raise FormatError(f"{path}: empty codebook")
    return Codebook(
        centroids,
        trained_on=str(header.get("trained_on", "")),
        inertia=float(header.get("inertia", float("nan"))),
        meta=dict(header.get("meta", {})),
    )
