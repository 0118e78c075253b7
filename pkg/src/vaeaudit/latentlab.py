"""Latent-space forensics: embeddings, neighborhood composition, pull effect.

Embeddings are posterior means only; sampled codes would make the
brute-force neighbor oracle nondeterministic. All neighbor queries use
Euclidean distance with ties broken by ascending sample id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _util
from .attack import BUDGET_TOLERANCE
from .dataio import Dataset, SubgroupKey, normalize_image


class LatentLabError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Posterior-mean vectors, one row per sample, with subgroup labels."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, M) float64
    subgroups: tuple[SubgroupKey, ...]

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise LatentLabError(f"vectors must be 2-D, got shape {vectors.shape}")
        if not (len(self.ids) == vectors.shape[0] == len(self.subgroups)):
            raise LatentLabError("ids, vectors, and subgroups must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise LatentLabError("duplicate sample ids in embedding matrix")
        if not np.all(np.isfinite(vectors)):
            raise LatentLabError("embedding vectors must be finite")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {sid: i for i, sid in enumerate(self.ids)})

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def latent_dim(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, sample_id: str) -> np.ndarray:
        index: dict = getattr(self, "_index")
        if sample_id not in index:
            raise LatentLabError(f"unknown sample id {sample_id!r}")
        return self.vectors[index[sample_id]]

    def subgroup_keys(self) -> list[SubgroupKey]:
        return sorted(set(self.subgroups), key=lambda k: k.canonical_name())

    def centroid(self, key: SubgroupKey) -> np.ndarray:
        rows = [i for i, k in enumerate(self.subgroups) if k == key]
        if not rows:
            raise LatentLabError(f"no rows for subgroup {key.canonical_name()}")
        return self.vectors[rows].mean(axis=0)


def embed_dataset(model, dataset: Dataset, ids: Sequence[str] | None = None) -> EmbeddingMatrix:
    """Posterior mean for every sample (or the given ids), deterministic.

    Subgroup labels come from each sample's own protected attributes.
    """
    chosen = tuple(ids) if ids is not None else tuple(s.id for s in dataset.samples)
    vectors = []
    subgroups = []
    for sample_id in chosen:
        sample = dataset.get(sample_id)
        code = model.encode(sample.pixels)
        vectors.append(np.asarray(code.mean, dtype=np.float64))
        subgroups.append(SubgroupKey.from_attributes(dataset.schema.protected, sample.attributes))
    if not vectors:
        raise LatentLabError("cannot embed an empty sample list")
    return EmbeddingMatrix(ids=chosen, vectors=np.stack(vectors), subgroups=tuple(subgroups))


# ---------------------------------------------------------------------------
# Neighborhoods


@dataclass(frozen=True)
class NeighborEntry:
    sample_id: str
    distance: float


def _ordered_neighbors(
    matrix: EmbeddingMatrix,
    query: np.ndarray,
    indices: Sequence[int],
    k: int,
    exclude: str | None,
) -> list[NeighborEntry]:
    distances = np.linalg.norm(matrix.vectors[list(indices)] - query, axis=1)
    ranked = sorted(
        (
            (float(d), matrix.ids[i])
            for d, i in zip(distances, indices)
            if matrix.ids[i] != exclude
        ),
    )
    return [NeighborEntry(sample_id=sid, distance=d) for d, sid in ranked[:k]]


def knn_composition(
    matrix: EmbeddingMatrix,
    query: np.ndarray,
    k: int,
    exclude: str | None = None,
) -> dict[SubgroupKey, list[NeighborEntry]]:
    """k nearest rows to `query` from each subgroup independently.

    Subgroups with fewer than k members return all members. Ties break by
    ascending sample id.
    """
    if k < 1:
        raise LatentLabError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if matrix.n == 0:
        raise LatentLabError("empty embedding matrix")
    if query.shape != (matrix.latent_dim,):
        raise LatentLabError(f"query shape {query.shape} != ({matrix.latent_dim},)")
    out: dict[SubgroupKey, list[NeighborEntry]] = {}
    for key in matrix.subgroup_keys():
        indices = [i for i, sk in enumerate(matrix.subgroups) if sk == key]
        out[key] = _ordered_neighbors(matrix, query, indices, k, exclude)
    return out


def knn_global(
    matrix: EmbeddingMatrix,
    query: np.ndarray,
    k: int,
    exclude: str | None = None,
) -> list[NeighborEntry]:
    """Secondary mode: k nearest rows over the whole matrix."""
    if k < 1:
        raise LatentLabError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (matrix.latent_dim,):
        raise LatentLabError(f"query shape {query.shape} != ({matrix.latent_dim},)")
    return _ordered_neighbors(matrix, query, range(matrix.n), k, exclude)


def nearest_centroid_subgroup(matrix: EmbeddingMatrix, query: np.ndarray) -> SubgroupKey:
    """Subgroup whose embedding centroid is closest to `query`.

    Distance ties break by canonical subgroup name.
    """
    query = np.asarray(query, dtype=np.float64)
    best: tuple[float, str] | None = None
    best_key: SubgroupKey | None = None
    for key in matrix.subgroup_keys():
        d = float(np.linalg.norm(matrix.centroid(key) - query))
        rank = (d, key.canonical_name())
        if best is None or rank < best:
            best, best_key = rank, key
    assert best_key is not None
    return best_key


# ---------------------------------------------------------------------------
# Pull effect


@dataclass(frozen=True)
class PullRecord:
    sample_id: str
    embedding: np.ndarray
    adversarial_embedding: np.ndarray
    neighbors: dict[SubgroupKey, list[NeighborEntry]]
    adversarial_neighbors: dict[SubgroupKey, list[NeighborEntry]]
    centroid_subgroup: SubgroupKey
    adversarial_centroid_subgroup: SubgroupKey
    displacement: float

    @property
    def switched(self) -> bool:
        return self.centroid_subgroup != self.adversarial_centroid_subgroup

    def to_dict(self) -> dict:
        def nbrs(table: Mapping[SubgroupKey, list[NeighborEntry]]) -> dict:
            return {
                key.canonical_name(): [
                    {"id": e.sample_id, "distance": e.distance} for e in table[key]
                ]
                for key in sorted(table, key=lambda k: k.canonical_name())
            }

        return {
            "sample_id": self.sample_id,
            "embedding": [float(v) for v in self.embedding],
            "adversarial_embedding": [float(v) for v in self.adversarial_embedding],
            "neighbors": nbrs(self.neighbors),
            "adversarial_neighbors": nbrs(self.adversarial_neighbors),
            "centroid_subgroup": self.centroid_subgroup.canonical_name(),
            "adversarial_centroid_subgroup": self.adversarial_centroid_subgroup.canonical_name(),
            "displacement": self.displacement,
        }


def pull_effect(
    model,
    matrix: EmbeddingMatrix,
    x: np.ndarray,
    delta: np.ndarray,
    k: int = 10,
    sample_id: str = "",
    budget: float | None = None,
) -> PullRecord:
    """Where the adversarial embedding lands relative to subgroup territory.

    Embeds x and normalize(x + delta), collects per-subgroup k-NN around
    both, and flags whether the nearest-centroid subgroup changed.
    """
    if matrix.n == 0:
        raise LatentLabError("empty embedding matrix")
    delta = np.asarray(delta, dtype=np.float64)
    if budget is not None and delta.size and float(np.max(np.abs(delta))) > budget + BUDGET_TOLERANCE:
        raise LatentLabError(f"delta exceeds L-inf budget {budget}")
    x = normalize_image(x)
    before = np.asarray(model.encode(x).mean, dtype=np.float64)
    after = np.asarray(model.encode(normalize_image(x + delta)).mean, dtype=np.float64)
    return PullRecord(
        sample_id=sample_id,
        embedding=before,
        adversarial_embedding=after,
        neighbors=knn_composition(matrix, before, k),
        adversarial_neighbors=knn_composition(matrix, after, k),
        centroid_subgroup=nearest_centroid_subgroup(matrix, before),
        adversarial_centroid_subgroup=nearest_centroid_subgroup(matrix, after),
        displacement=float(np.linalg.norm(after - before)),
    )


# ---------------------------------------------------------------------------
# 2D projections


@dataclass(frozen=True)
class Projection2D:
    ids: tuple[str, ...]
    coords: np.ndarray  # (n, 2) float64
    method: str
    seed: int

    def coord_of(self, sample_id: str) -> np.ndarray:
        return self.coords[self.ids.index(sample_id)]


def _pca_2d(ids: Sequence[str], vectors: np.ndarray) -> dict[str, np.ndarray]:
    # Work on id-sorted rows so the result is independent of row order.
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    data = vectors[order]
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[: min(2, vt.shape[0])]
    fixed = []
    for comp in components:
        pivot = int(np.argmax(np.abs(comp)))
        fixed.append(comp if comp[pivot] > 0 else -comp)
    coords = centered @ np.stack(fixed).T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return {ids[i]: coords[j] for j, i in enumerate(order)}


def project_2d(matrix: EmbeddingMatrix, method: str = "pca", seed: int = 0) -> Projection2D:
    """2D coordinates per sample.

    pca: deterministic top-2 principal components, sign fixed so the
    largest-magnitude loading of each component is positive.
    tsne: seeded, for visualization only; never drives numeric checks.
    """
    if matrix.n < 2:
        raise LatentLabError("projection needs at least 2 rows")
    if method == "pca":
        by_id = _pca_2d(matrix.ids, matrix.vectors)
        coords = np.stack([by_id[sid] for sid in matrix.ids])
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (matrix.n - 1) / 3.0))
        tsne = TSNE(
            n_components=2,
            random_state=seed,
            perplexity=perplexity,
            init="pca" if matrix.latent_dim > 1 else "random",
        )
        coords = np.asarray(tsne.fit_transform(matrix.vectors), dtype=np.float64)
    else:
        raise LatentLabError(f"unknown projection method {method!r}")
    return Projection2D(ids=matrix.ids, coords=coords, method=method, seed=seed)


# ---------------------------------------------------------------------------
# Persistence


def write_embeddings_csv(matrix: EmbeddingMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "subgroup"] + [f"v_{j + 1}" for j in range(matrix.latent_dim)])
        order = sorted(range(matrix.n), key=lambda i: matrix.ids[i])
        for i in order:
            row = [matrix.ids[i], matrix.subgroups[i].canonical_name()]
            row += [repr(float(v)) for v in matrix.vectors[i]]
            writer.writerow(row)


def write_pull_records_json(records: Sequence[PullRecord], path: str | Path) -> None:
    payload = {"records": [r.to_dict() for r in sorted(records, key=lambda r: r.sample_id)]}
    _util.write_json(path, payload)


def write_projection_csv(
    projection: Projection2D,
    matrix: EmbeddingMatrix,
    path: str | Path,
) -> None:
    if projection.ids != matrix.ids:
        raise LatentLabError("projection and matrix describe different samples")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "subgroup", "x", "y"])
        order = sorted(range(matrix.n), key=lambda i: matrix.ids[i])
        for i in order:
            writer.writerow(
                [
                    matrix.ids[i],
                    matrix.subgroups[i].canonical_name(),
                    repr(float(projection.coords[i, 0])),
                    repr(float(projection.coords[i, 1])),
                ]
            )
