"""PCA reduction of dense features to a fixed channel count."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..archive import read_archive, write_archive

logger = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 64


class FeatureBasisError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureBasis:
    mean: np.ndarray  # [D]
    components: np.ndarray  # [K, D]
    explained_variance: np.ndarray  # [K]
    rank: int

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """components · (x - mean) over the last axis."""
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components.T

    def reconstruct(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) @ self.components + self.mean

    def save(self, path):
        arrays = {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance}
        return write_archive(path, arrays, meta={"kind": "feature-basis", "rank": int(self.rank)}, dtypes={k: "float64" for k in arrays})

    @classmethod
    def load(cls, path) -> FeatureBasis:
        a, meta = read_archive(path)
        return cls(a["mean"], a["components"], a["explained_variance"], int(meta["rank"]))


def fit_feature_basis(samples: np.ndarray, n_components: int = DEFAULT_COMPONENTS, strict: bool = False, rtol: float = 1e-12) -> FeatureBasis:
    """Top principal directions of mean-centered samples.

    When the data rank is below ``n_components`` the remaining rows are an orthonormal
    completion with zero variance (or zero rows when the feature dimension itself is
    smaller), so the channel count stays fixed. ``strict=True`` raises instead.
    """
    X = np.asarray(samples, dtype=np.float64)
    N, D = X.shape
    if N <= n_components:
        raise FeatureBasisError(f"need more than {n_components} samples, got {N}")
    mean = X.mean(0)
    Xc = X - mean
    # eigh of the D x D covariance also yields the orthonormal null-space completion
    cov = Xc.T @ Xc / (N - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    top = max(evals[0], 0.0)
    rank = int(np.sum(evals > rtol * top)) if top > 0 else 0
    if rank < n_components and strict:
        raise FeatureBasisError(f"feature rank {rank} is below the requested {n_components} components")
    k = min(n_components, D)
    comps = np.zeros((n_components, D))
    comps[:k] = evecs[:, :k].T
    ev = np.zeros(n_components)
    ev[: min(rank, n_components)] = evals[: min(rank, n_components)]
    if rank < n_components:
        logger.info("feature basis: data rank %d < %d; padding with zero-variance directions", rank, n_components)
    # deterministic sign: largest-magnitude entry of each row positive
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return FeatureBasis(mean, comps, ev, rank)
