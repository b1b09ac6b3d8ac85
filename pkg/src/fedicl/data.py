"""Dataset ingestion, Dirichlet non-IID partitioning, and kNN filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (ClientDataset, Covariate, Example, example_from_json,
                   example_to_json)


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

class Embedder:
    """Deterministic map from a covariate (vector or text) to a fixed-length
    vector used for nearest-neighbor search."""

    def embed(self, covariate: Covariate) -> np.ndarray:
        raise NotImplementedError

    def embed_many(self, covariates: Sequence[Covariate]) -> np.ndarray:
        return np.vstack([self.embed(c) for c in covariates])


class IdentityEmbedder(Embedder):
    """Vector covariates embed as themselves; exact for regression mode."""

    def embed(self, covariate: Covariate) -> np.ndarray:
        if isinstance(covariate, str):
            raise TypeError("identity embedder only handles vector covariates")
        return np.asarray(covariate, dtype=float)


class TableEmbedder(Embedder):
    """Lookup embedder for text covariates, fed from a precomputed table."""

    def __init__(self, table: Dict[str, Sequence[float]]):
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}

    def embed(self, covariate: Covariate) -> np.ndarray:
        key = covariate if isinstance(covariate, str) else tuple(covariate)
        if key not in self.table:
            raise KeyError(f"no embedding for {key!r}")
        return self.table[key]


# ---------------------------------------------------------------------------
# Dirichlet non-IID partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    prior: Tuple[float, ...]  # probability vector over categories
    seed: int = 0

    def __post_init__(self):
        prior = tuple(float(p) for p in self.prior)
        object.__setattr__(self, "prior", prior)
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if any(p < 0 for p in prior) or abs(sum(prior) - 1.0) > 1e-12:
            raise ValueError("prior must be a probability vector")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Round `weights * total / sum(weights)` to integers summing to total."""
    weights = np.asarray(weights, dtype=float)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quotas = weights / weights.sum() * total
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def dirichlet_partition(dataset: Sequence[Example], spec: PartitionSpec,
                        categories: Optional[Sequence[str]] = None
                        ) -> Tuple[List[ClientDataset], Dict[int, int]]:
    """Split examples across clients with category mix q ~ Dir(alpha * prior).

    Per client, a proportion vector is sampled once and converted to integer
    per-category counts by largest-remainder rounding; draws are without
    replacement, falling back to the globally most-available category when a
    requested one is exhausted. Returns the client datasets and a manifest
    mapping example index -> client id (ids are 1-based).
    """
    if any(ex.category is None for ex in dataset):
        raise ValueError("every example needs a category for partitioning")
    if spec.num_clients > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} examples across "
                         f"{spec.num_clients} clients")
    if categories is None:
        categories = sorted({ex.category for ex in dataset})
    categories = list(categories)
    if len(categories) != len(spec.prior):
        raise ValueError(f"prior has {len(spec.prior)} entries but there are "
                         f"{len(categories)} categories")
    missing = [c for c, p in zip(categories, spec.prior)
               if p > 0 and not any(ex.category == c for ex in dataset)]
    if missing:
        raise ValueError(f"dataset has no examples of category {missing[0]!r}")

    rng = np.random.default_rng(spec.seed)
    cat_index = {c: i for i, c in enumerate(categories)}
    pools: List[List[int]] = [[] for _ in categories]
    for idx, ex in enumerate(dataset):
        if ex.category not in cat_index:
            raise ValueError(f"example category {ex.category!r} not in prior "
                             "support")
        pools[cat_index[ex.category]].append(idx)
    for pool in pools:
        rng.shuffle(pool)

    total = len(dataset)
    client_sizes = _largest_remainder(np.ones(spec.num_clients), total)
    alpha_vec = spec.alpha * np.asarray(spec.prior)
    # Dirichlet with zero-mass components: sample over the positive support.
    positive = alpha_vec > 0

    manifest: Dict[int, int] = {}
    clients: List[ClientDataset] = []
    available = np.array([len(p) for p in pools])
    for ci in range(spec.num_clients):
        q = np.zeros(len(categories))
        q[positive] = rng.dirichlet(alpha_vec[positive])
        want = _largest_remainder(q, int(client_sizes[ci]))
        picked: List[int] = []
        for cat, count in enumerate(want):
            take = min(int(count), int(available[cat]))
            for _ in range(take):
                picked.append(pools[cat].pop())
            available[cat] -= take
        while len(picked) < client_sizes[ci]:
            cat = int(np.argmax(available))
            if available[cat] == 0:
                raise ValueError("dataset exhausted before all clients filled")
            picked.append(pools[cat].pop())
            available[cat] -= 1
        examples = tuple(dataset[i] for i in sorted(picked))
        clients.append(ClientDataset(client_id=ci + 1, examples=examples))
        for i in picked:
            manifest[i] = ci + 1
    return clients, manifest


def category_entropy(dataset: ClientDataset) -> float:
    """Shannon entropy (nats) of the client's empirical category mix."""
    counts: Dict[str, int] = {}
    for ex in dataset.examples:
        counts[ex.category or ""] = counts.get(ex.category or "", 0) + 1
    p = np.array(list(counts.values()), dtype=float)
    p /= p.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# kNN filtering (exact search; desk-scale datasets)
# ---------------------------------------------------------------------------

def _nearest_indices(dataset: ClientDataset, query: Covariate, c: int,
                     embedder: Embedder,
                     dataset_emb: Optional[np.ndarray] = None) -> List[int]:
    if dataset_emb is None:
        dataset_emb = embedder.embed_many(dataset.covariates())
    q = embedder.embed(query)
    dists = np.linalg.norm(dataset_emb - q[None, :], axis=1)
    # stable sort: distance ties broken by dataset index order
    order = np.argsort(dists, kind="stable")
    return [int(i) for i in order[: min(c, len(dataset))]]


def knn_filter(dataset: ClientDataset, queries: Sequence[Covariate], c: int,
               embedder: Embedder) -> ClientDataset:
    """Union over queries of each query's c nearest examples.

    Duplicates are merged; asking for more neighbors than examples returns
    the whole dataset.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    emb = embedder.embed_many(dataset.covariates())
    keep = set()
    for q in queries:
        keep.update(_nearest_indices(dataset, q, c, embedder, emb))
    examples = tuple(dataset.examples[i] for i in sorted(keep))
    return ClientDataset(client_id=dataset.client_id, examples=examples)


def knn_context(dataset: ClientDataset, query: Covariate, c: int,
                embedder: Embedder) -> Tuple[Example, ...]:
    """The c nearest examples to one query, ordered nearest-first."""
    if c < 1:
        raise ValueError("c must be >= 1")
    idx = _nearest_indices(dataset, query, c, embedder)
    return tuple(dataset.examples[i] for i in idx)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def load_dataset(path) -> List[Example]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(example_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}")
    return examples


def save_dataset(examples: Sequence[Example], path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex)) + "\n")


def sample_query_set(dataset: Sequence[Example], per_category: int,
                     seed: int) -> List[Example]:
    """Draw per_category examples from each category, seeded."""
    rng = np.random.default_rng(seed)
    by_cat: Dict[str, List[Example]] = {}
    for ex in dataset:
        by_cat.setdefault(ex.category or "", []).append(ex)
    out: List[Example] = []
    for cat in sorted(by_cat):
        pool = by_cat[cat]
        take = min(per_category, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        out.extend(pool[i] for i in sorted(idx))
    return out
