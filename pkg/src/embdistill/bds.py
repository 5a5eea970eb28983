"""Cluster-balanced data sampling.

Teacher embeddings are clustered with k-means; each sample is weighted by
``1 / (size of its cluster + offset)`` and every epoch draws a weighted
sample without replacement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_OFFSET = 100.0


@dataclass
class ClusterModel:
    centroids: np.ndarray  # k x d
    assignments: np.ndarray  # N
    inertia: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class SamplerWeights:
    weights: np.ndarray
    offset: float = DEFAULT_OFFSET

    def __len__(self) -> int:
        return len(self.weights)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # Explicit differences rather than the |x|^2 - 2x.c + |c|^2 expansion, so
    # exact ties stay exact and argmin picks the lowest index.
    out = np.empty((X.shape[0], C.shape[0]))
    for j in range(C.shape[0]):
        diff = X - C[j]
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _nearest(X, C):
    d2 = _sq_dists(X, C)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(X, X[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point already coincides with a centre; fall back to an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(unused[rng.integers(unused.size)])
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx : idx + 1]).ravel())
    return X[chosen].copy()


def kmeans(
    emb: np.ndarray,
    k: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    normalize: bool = False,
) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding.

    Stops once no centroid moves by ``tol`` or more (Euclidean), or after
    ``max_iter`` updates. An empty cluster is re-seeded at the point lying
    farthest from its current centroid. Raises ``RuntimeError`` if inertia
    ever increases, which would indicate a bug.
    """
    X = np.asarray(emb, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"embeddings must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("embeddings contain non-finite values")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"need 1 <= k <= N, got k={k}, N={n}")
    if normalize:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
    rng = np.random.default_rng(seed)

    centroids = _kmeans_pp(X, k, rng)
    labels, d2 = _nearest(X, centroids)
    inertia = float(d2.sum())
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        labels, d2 = labels.copy(), d2.copy()
        counts = np.bincount(labels, minlength=k)
        # a donor cluster can empty in turn, hence the repeat; bounded by k
        for _ in range(k):
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0 or d2.max() <= 0:
                break
            j = int(empty[0])
            far = int(np.argmax(d2))
            counts[labels[far]] -= 1
            labels[far] = j
            d2[far] = 0.0
            counts[j] = 1
            centroids[j] = X[far]
        new = np.zeros_like(centroids)
        np.add.at(new, labels, X)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        new[~nonempty] = centroids[~nonempty]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d2 = _nearest(X, centroids)
        new_inertia = float(d2.sum())
        if new_inertia > inertia * (1 + 1e-12) + 1e-12:
            raise RuntimeError(
                f"k-means inertia increased at iteration {it}: {inertia!r} -> {new_inertia!r}"
            )
        inertia = new_inertia
        history.append(inertia)
        if shift < tol:
            break
    return ClusterModel(centroids, labels, inertia, history, it)


def assign(model: ClusterModel, emb: np.ndarray) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties go to the lower index."""
    X = np.asarray(emb, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.centroids.shape[1]:
        raise UsageError(
            f"embedding dim {X.shape[-1]} does not match centroid dim {model.centroids.shape[1]}"
        )
    return _nearest(X, model.centroids)[0]


def bds_weights(assignments, offset: float = DEFAULT_OFFSET) -> SamplerWeights:
    a = np.asarray(assignments)
    if a.size == 0:
        raise DataError("no assignments")
    _, inverse, counts = np.unique(a, return_inverse=True, return_counts=True)
    return SamplerWeights(1.0 / (counts[inverse].astype(np.float64) + offset), offset)


def uniform_weights(n: int) -> SamplerWeights:
    return SamplerWeights(np.ones(n), offset=0.0)


def sample_epoch(weights: SamplerWeights | np.ndarray, m: int, seed) -> np.ndarray:
    """Draw ``m`` distinct indices, with probability driven by ``weights``.

    Each item gets the key ``-ln(u) / w`` with ``u`` uniform on (0, 1]; the
    ``m`` smallest keys win. The result is in key order, which is itself a
    valid random draw order.
    """
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    n = w.size
    if not 0 < m <= n:
        raise UsageError(f"cannot draw {m} distinct items from {n}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DataError("sampling weights must be positive and finite")
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n)
    keys = -np.log(u) / w
    return np.argsort(keys, kind="stable")[:m]


def cluster_sweep(data, k_values, config, tasks, out_csv=None, probe_config=None):
    """Distill once per cluster count plus once with uniform sampling.

    ``tasks`` is a list of :class:`embdistill.evaluation.ProbeTask` whose
    splits hold student *inputs*. Returns a list of row dicts with keys
    ``k, sampling, final_loss, macro_avg`` followed by one column per task,
    and writes them to ``out_csv`` when given. The uniform baseline is last.
    """
    import csv
    import dataclasses

    from .evaluation import evaluate_tasks
    from .trainer import distill

    k_values = [int(k) for k in k_values]
    if not k_values:
        raise UsageError("k_values is empty")
    if len(set(k_values)) != len(k_values):
        raise UsageError(f"duplicate cluster counts in {k_values}")
    if any(k < 1 or k > len(data) for k in k_values):
        raise UsageError(f"every k must lie in [1, {len(data)}], got {k_values}")

    runs = [(k, dataclasses.replace(config, k_clusters=k, bds_enabled=True)) for k in k_values]
    runs.append((None, dataclasses.replace(config, bds_enabled=False)))
    rows = []
    for k, cfg in runs:
        student, _, report = distill(data, cfg)
        ev = evaluate_tasks(tasks, student=student, probe_config=probe_config)
        row = {
            "k": "" if k is None else k,
            "sampling": "random" if k is None else "bds",
            "final_loss": report.final_loss,
            "macro_avg": ev.macro_average,
        }
        row.update(ev.metrics)
        rows.append(row)
        logger.info("sweep %s: loss %.5f, macro %.3f", row["sampling"] + str(row["k"]), report.final_loss, ev.macro_average)

    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: (repr(v) if isinstance(v, float) else v) for key, v in row.items()})
    return rows
