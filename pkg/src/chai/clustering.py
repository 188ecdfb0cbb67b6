"""Statistical machinery over attention traces: feature extraction, k-means
with restarts, elbow selection, representative choice, correlation matrices,
membership-stability and cluster-size analyses.

Distances are plain squared Euclidean on raw probabilities (entries are
already commensurate in [0, 1]); k-means uses k-means++ seeding, best-of-N
restarts, and deterministic empty-cluster repair. Everything is pure and
deterministic given (input order, seed).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .attention import AttentionTrace
from .errors import ContractError, ShapeError, ValidationError
from .plan import ClusterPlan

DEFAULT_WINDOW = (1, 5)
DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6


def extract_features(
    trace: AttentionTrace, layer: int, window: tuple[int, int] = DEFAULT_WINDOW
) -> np.ndarray:
    """One feature vector per head: its probability rows for the window's steps,
    each right-padded with zeros to the window's final row length, concatenated.

    For a trace over a fresh cache with the default window this gives rows of
    lengths 1..5 padded to 5, i.e. 25 features per head.
    """
    first, last = window
    if not 1 <= first <= last:
        raise ValidationError(f"bad step window ({first}, {last})")
    final_len = len(trace.row(layer, 0, last))
    num_steps = last - first + 1
    features = np.zeros((trace.num_heads, num_steps * final_len), dtype=np.float32)
    for head in range(trace.num_heads):
        for i, step in enumerate(range(first, last + 1)):
            row = trace.row(layer, head, step)
            if len(row) > final_len:
                raise ContractError(
                    f"row at step {step} is longer ({len(row)}) than the window's "
                    f"final row ({final_len})"
                )
            features[head, i * final_len : i * final_len + len(row)] = row
    return features


class KMeansResult(NamedTuple):
    assignment: np.ndarray  # (n,) cluster ids
    centroids: np.ndarray  # (k, dim) float64
    sse: float


def kmeans(
    points,
    k: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    extra_inits=None,
) -> KMeansResult:
    """Lloyd's algorithm, k-means++ seeded, best of `restarts` by SSE.

    Empty clusters are repaired by reassigning the point farthest from its
    centroid. `extra_inits` adds caller-provided centroid seeds to the restart
    pool (used to keep error curves monotone in k).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans expects (n, dim) points, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"cluster count {k} outside [1, {n}]")

    rng = np.random.default_rng(seed)
    inits = [_kmeanspp_init(points, k, rng) for _ in range(restarts)]
    for init in extra_inits or ():
        inits.append(np.asarray(init, dtype=np.float64))

    best: KMeansResult | None = None
    for init in inits:
        result = _lloyd(points, init, max_iter, tol)
        if best is None or result.sse < best.sse:
            best = result
    assert best is not None
    return best


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _sqdist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points**2).sum(axis=1)[:, None]
    c2 = (centroids**2).sum(axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def _cluster_means(points: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    means = np.empty((k, points.shape[1]), dtype=np.float64)
    for c in range(k):
        members = points[assignment == c]
        if members.shape[0] == 0:
            raise ContractError(f"cluster {c} became empty despite repair")
        means[c] = members.mean(axis=0)
    return means


def _repair_empty(points, assignment, centroids, d2):
    """Give each empty cluster the point farthest from its current centroid
    (ties to the lowest index); donors must not empty their own cluster."""
    k = centroids.shape[0]
    counts = np.bincount(assignment, minlength=k)
    if np.all(counts > 0):
        return assignment, centroids
    assignment = assignment.copy()
    centroids = centroids.copy()
    own_dist = d2[np.arange(points.shape[0]), assignment]
    for empty in np.flatnonzero(counts == 0):
        candidates = np.flatnonzero(counts[assignment] > 1)
        if candidates.size == 0:
            raise ContractError("no donor point available for empty-cluster repair")
        farthest = candidates[np.argmax(own_dist[candidates])]
        counts[assignment[farthest]] -= 1
        assignment[farthest] = empty
        counts[empty] = 1
        centroids[empty] = points[farthest]
        own_dist[farthest] = 0.0
    return assignment, centroids


def _lloyd(points: np.ndarray, init: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    centroids = init.copy()
    k = centroids.shape[0]
    prev_sse = np.inf
    assignment = np.zeros(points.shape[0], dtype=np.intp)
    for _ in range(max_iter):
        d2 = _sqdist(points, centroids)
        assignment = d2.argmin(axis=1)
        assignment, centroids = _repair_empty(points, assignment, centroids, d2)
        sse = float(((points - centroids[assignment]) ** 2).sum())
        assert sse <= prev_sse + 1e-9, "SSE increased across a Lloyd iteration"
        if np.isfinite(prev_sse) and prev_sse - sse <= tol * max(prev_sse, 1e-12):
            prev_sse = sse
            break
        prev_sse = sse
        centroids = _cluster_means(points, assignment, k)
    centroids = _cluster_means(points, assignment, k)
    sse = float(((points - centroids[assignment]) ** 2).sum())
    return KMeansResult(assignment=assignment, centroids=centroids, sse=sse)


def sse_curve(
    points,
    k_max: int | None = None,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """SSE at every cluster count 1..k_max (default: number of points).

    Each count's restart pool is warm-started by splitting the previous
    solution, so the curve is non-increasing by construction.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    k_max = n if k_max is None else k_max
    errors = np.empty(k_max, dtype=np.float64)
    prev: KMeansResult | None = None
    for k in range(1, k_max + 1):
        extra = []
        if prev is not None:
            own_dist = ((points - prev.centroids[prev.assignment]) ** 2).sum(axis=1)
            farthest = int(np.argmax(own_dist))
            extra.append(np.vstack([prev.centroids, points[farthest]]))
        prev = kmeans(
            points, k, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol,
            extra_inits=extra,
        )
        errors[k - 1] = prev.sse
    if np.any(np.diff(errors) > 1e-9):
        raise ContractError("cluster error curve is not non-increasing")
    return errors


def elbow_select(errors, threshold: float = 0.05) -> int:
    """Smallest k whose drop to k+1 falls below `threshold` of err(1); the
    full head count if the curve never plateaus."""
    errors = list(errors)
    if not errors:
        raise ValidationError("empty error curve")
    denom = max(errors[0], 1e-12)
    for k in range(1, len(errors)):
        if (errors[k - 1] - errors[k]) / denom < threshold:
            return k
    return len(errors)


def choose_representatives(features, assignment, centroids) -> list[int]:
    """Per cluster, the member closest to the centroid; ties go to the lowest
    head index."""
    features = np.asarray(features, dtype=np.float64)
    assignment = np.asarray(assignment)
    representatives = []
    for c in range(len(centroids)):
        members = np.flatnonzero(assignment == c)
        if members.size == 0:
            raise ContractError(f"cluster {c} has no members")
        d2 = ((features[members] - centroids[c]) ** 2).sum(axis=1)
        representatives.append(int(members[int(np.argmin(d2))]))
    return representatives


def correlation_matrix(vectors) -> np.ndarray:
    """Symmetric Pearson correlation of the rows; rows with zero variance
    correlate 0 with everything (including themselves)."""
    m = np.asarray(vectors, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected (heads, length) rows, got shape {m.shape}")
    if m.shape[1] < 2:
        raise ShapeError(f"rows must have length >= 2, got {m.shape[1]}")
    centered = m - m.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    nonzero = norms > 0.0
    normalized = centered / np.where(nonzero, norms, 1.0)[:, None]
    corr = normalized @ normalized.T
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    corr[~nonzero, :] = 0.0
    corr[:, ~nonzero] = 0.0
    corr[np.diag_indices_from(corr)] = np.where(nonzero, 1.0, 0.0)
    return corr


def stability_seed(base_seed: int, layer: int, step: int) -> int:
    """Deterministic k-means seed for a (layer, step) re-clustering."""
    return int(np.random.SeedSequence((base_seed, layer, step)).generate_state(1)[0])


def membership_stability(trace: AttentionTrace, profile, from_step: int, to_step: int):
    """Counts of heads whose cluster changed at each step, per layer.

    Re-clusters the trailing calibration window ending at every step with the
    profile's per-layer cluster counts. A head's membership label is its
    cluster's canonical member (the lowest head index in it), so neither label
    permutations nor representative drift within an unchanged partition count
    as changes. The first comparable step reports 0.
    """
    window = profile.window
    if from_step < window:
        raise ValidationError(
            f"stability needs steps >= the {window}-step window, got {from_step}"
        )
    if to_step < from_step:
        raise ValidationError(f"empty step range [{from_step}, {to_step}]")

    first_needed = from_step - 1 if from_step - 1 >= window else from_step
    memberships: dict[tuple[int, int], tuple[int, ...]] = {}
    for layer in range(trace.num_layers):
        k = profile.cluster_counts[layer]
        for step in range(first_needed, to_step + 1):
            features = extract_features(trace, layer, (step - window + 1, step))
            result = kmeans(features, k, seed=stability_seed(profile.seed, layer, step))
            assignment = result.assignment.tolist()
            canonical = {c: min(h for h, a in enumerate(assignment) if a == c)
                         for c in set(assignment)}
            memberships[(layer, step)] = tuple(canonical[c] for c in assignment)

    steps = list(range(from_step, to_step + 1))
    counts = np.zeros((trace.num_layers, len(steps)), dtype=int)
    for layer in range(trace.num_layers):
        for i, step in enumerate(steps):
            before = memberships.get((layer, step - 1))
            now = memberships[(layer, step)]
            if before is not None:
                counts[layer, i] = sum(a != b for a, b in zip(before, now))
    return steps, counts


def cluster_size_histogram(plan: ClusterPlan, layer: int) -> list[int]:
    """Cluster cardinalities of one layer, largest first."""
    layer_plan = plan.layers[layer]
    sizes = np.bincount(np.asarray(layer_plan.assignment), minlength=layer_plan.cluster_count)
    return sorted((int(s) for s in sizes), reverse=True)
