"""Multi-head and clustered-head attention over a prunable KV cache.

The two forward paths share their per-head primitives (head-block projection,
rotary application, score row, row softmax, value blending), so a cluster plan
with one head per cluster makes `clustered_forward` reproduce `mha_forward`
bit for bit. Pruning physically drops key storage for non-representative
heads; value rows are kept for every head, except under the value-reuse
variant which stores only the representatives' values.

Cache ownership: a KVCache belongs to exactly one in-flight request. Layer
weights are read-only and shareable.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import ContractError, InsufficientTraceError, ModeMismatchError, ShapeError
from .kernels import apply_rope_heads, matmul, softmax_rows
from .model import LayerWeights, ModelConfig
from .plan import ClusterPlan


class LayerCache:
    """Preallocated per-layer key/value storage.

    `keys` holds one plane per stored key head (all heads before pruning,
    representatives after); `values` holds one plane per stored value head.
    Only the first `length` positions of each plane are live.
    """

    def __init__(self, key_heads: list[int], value_heads: list[int], capacity: int, head_dim: int):
        self.stored_key_heads = list(key_heads)
        self.stored_value_heads = list(value_heads)
        self.keys = np.zeros((len(key_heads), capacity, head_dim), dtype=np.float32)
        self.values = np.zeros((len(value_heads), capacity, head_dim), dtype=np.float32)
        self.length = 0

    def key_slot(self, head: int) -> int:
        return self.stored_key_heads.index(head)

    def value_slot(self, head: int) -> int:
        return self.stored_value_heads.index(head)

    def append(self, new_keys: np.ndarray, new_values: np.ndarray) -> None:
        """Append `tokens` new positions; arrays are (stored_heads, tokens, head_dim)."""
        tokens = new_keys.shape[1]
        if self.length + tokens > self.keys.shape[1]:
            raise ContractError(
                f"cache capacity {self.keys.shape[1]} exceeded at length {self.length}"
            )
        self.keys[:, self.length : self.length + tokens, :] = new_keys
        self.values[:, self.length : self.length + tokens, :] = new_values
        self.length += tokens

    def live_keys(self) -> np.ndarray:
        return self.keys[:, : self.length, :]

    def live_values(self) -> np.ndarray:
        return self.values[:, : self.length, :]


class KVCache:
    def __init__(self, config: ModelConfig):
        self.config = config
        all_heads = list(range(config.num_heads))
        self.layers = [
            LayerCache(all_heads, all_heads, config.max_seq_len, config.head_dim)
            for _ in range(config.num_layers)
        ]
        self.pruned = False

    @property
    def length(self) -> int:
        return self.layers[0].length

    def measured_bytes(self, element_width_bytes: int = 2) -> int:
        """Bytes of live storage, counting actual stored vectors only."""
        total_vectors = sum(
            lc.length * (len(lc.stored_key_heads) + len(lc.stored_value_heads))
            for lc in self.layers
        )
        return total_vectors * self.config.head_dim * element_width_bytes

    def summary(self) -> dict:
        return {
            "length": self.length,
            "pruned": self.pruned,
            "layers": [
                {
                    "stored_key_heads": list(lc.stored_key_heads),
                    "stored_value_heads": list(lc.stored_value_heads),
                }
                for lc in self.layers
            ],
        }


def prune_cache(cache: KVCache, plan: ClusterPlan, prune_values: bool = False) -> KVCache:
    """Drop key rows of non-representative heads; values are kept unless
    `prune_values` (the value-reuse variant) is set. Returns a new cache;
    the sequence length is unchanged."""
    if cache.pruned:
        raise ContractError("cache is already pruned")
    config = cache.config
    if plan.num_layers != config.num_layers:
        raise ContractError(
            f"plan covers {plan.num_layers} layers, cache has {config.num_layers}"
        )
    pruned = KVCache.__new__(KVCache)
    pruned.config = config
    pruned.pruned = True
    pruned.layers = []
    for lc, layer_plan in zip(cache.layers, plan.layers):
        if layer_plan.num_heads != config.num_heads:
            raise ContractError(
                f"plan has {layer_plan.num_heads} heads, cache has {config.num_heads}"
            )
        reps = sorted(layer_plan.representatives)
        value_heads = reps if prune_values else list(range(config.num_heads))
        new_lc = LayerCache(reps, value_heads, config.max_seq_len, config.head_dim)
        key_rows = [lc.key_slot(h) for h in reps]
        value_rows = [lc.value_slot(h) for h in value_heads]
        new_lc.keys[:, : lc.length, :] = lc.keys[key_rows, : lc.length, :]
        new_lc.values[:, : lc.length, :] = lc.values[value_rows, : lc.length, :]
        new_lc.length = lc.length
        pruned.layers.append(new_lc)
    return pruned


class AttentionTrace:
    """Per-layer, per-head attention probability rows keyed by decode step.

    Steps are 1-based and offset by `base_position`: a row recorded at
    absolute cache position p lands at step p + 1 - base_position, so a
    generation run traces its decoded positions as steps 1, 2, ... while a
    run over a fresh cache (calibration) yields rows of length 1, 2, ...
    Rows at step <= 0 (inside the untraced prompt) are discarded.
    """

    def __init__(self, num_layers: int, num_heads: int, base_position: int = 0):
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.base_position = base_position
        self._rows: dict[tuple[int, int], dict[int, np.ndarray]] = {}

    def record(self, layer: int, head: int, position: int, row: np.ndarray) -> None:
        step = position + 1 - self.base_position
        if step < 1:
            return
        total = float(row.sum())
        if not math.isfinite(total) or abs(total - 1.0) > 1e-5:
            raise ContractError(f"attention row sums to {total}, not 1")
        self._rows.setdefault((layer, head), {})[step] = np.asarray(row, dtype=np.float32).copy()

    def row(self, layer: int, head: int, step: int) -> np.ndarray:
        try:
            return self._rows[(layer, head)][step]
        except KeyError:
            raise InsufficientTraceError(
                f"trace has no row for layer {layer}, head {head}, step {step}"
            ) from None

    def steps(self, layer: int, head: int = 0) -> list[int]:
        return sorted(self._rows.get((layer, head), {}))

    def max_step(self) -> int:
        return max((max(steps) for steps in self._rows.values() if steps), default=0)


def export_trace_csv(trace: AttentionTrace, path) -> None:
    """Write rows as (layer, head, step, position, probability), RFC-4180."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "head", "step", "position", "probability"])
        for layer in range(trace.num_layers):
            for head in range(trace.num_heads):
                for step in trace.steps(layer, head):
                    row = trace.row(layer, head, step)
                    for position, prob in enumerate(row.tolist()):
                        writer.writerow([layer, head, step, position, repr(prob)])


def load_trace_csv(path) -> AttentionTrace:
    rows: dict[tuple[int, int, int], list[tuple[int, float]]] = {}
    max_layer = -1
    max_head = -1
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for record in reader:
            layer = int(record["layer"])
            head = int(record["head"])
            step = int(record["step"])
            position = int(record["position"])
            rows.setdefault((layer, head, step), []).append(
                (position, float(record["probability"]))
            )
            max_layer = max(max_layer, layer)
            max_head = max(max_head, head)
    trace = AttentionTrace(max_layer + 1, max_head + 1)
    for (layer, head, step), entries in rows.items():
        entries.sort()
        row = np.array([prob for _, prob in entries], dtype=np.float32)
        trace._rows.setdefault((layer, head), {})[step] = row
    return trace


def _head_scale(head_dim: int) -> np.float32:
    # Scores scale by the per-head dimension, not the model dimension.
    return np.float32(1.0 / math.sqrt(head_dim))


def head_columns(w: np.ndarray, heads, head_dim: int) -> np.ndarray:
    """Column submatrix of `w` covering the given heads' blocks, in the order
    given. Returns `w` itself when the selection is all heads in order."""
    if list(heads) == list(range(w.shape[1] // head_dim)):
        return w
    cols = np.concatenate([np.arange(h * head_dim, (h + 1) * head_dim) for h in heads])
    return np.ascontiguousarray(w[:, cols])


def _project_heads(
    x: np.ndarray, w: np.ndarray, heads, head_dim: int, submatrix: np.ndarray | None = None
) -> np.ndarray:
    """One batched projection for the selected heads: (T, n_heads, head_dim)."""
    if submatrix is None:
        submatrix = head_columns(w, heads, head_dim)
    flat = matmul(x, submatrix)
    return flat.reshape(x.shape[0], len(heads), head_dim)


def _to_cache_layout(block: np.ndarray) -> np.ndarray:
    """(T, heads, d_h) -> contiguous (heads, T, d_h)."""
    return np.ascontiguousarray(block.transpose(1, 0, 2))


def _score_rows(queries: np.ndarray, keys: np.ndarray, scale: np.float32) -> np.ndarray:
    """Single-token scores: (n, d_h) queries against (n, len, d_h) keys -> (n, len)."""
    scores = np.matmul(queries[:, None, :], keys.transpose(0, 2, 1))[:, 0, :]
    scores *= scale
    return scores


def _blend_values(rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-head weighted value sums: (n, len) rows x (n, len, d_h) -> (n, d_h)."""
    return np.matmul(rows[:, None, :], values)[:, 0, :]


def mha_forward(
    x: np.ndarray,
    layer_weights: LayerWeights,
    cache: KVCache,
    layer: int,
    trace: AttentionTrace | None = None,
) -> np.ndarray:
    """Standard multi-head attention over an unpruned cache.

    Projects Q/K/V for all heads in batched matmuls, rotates Q and K at their
    absolute positions, appends K and V to the cache, and attends causally.
    Works for prefill (several rows of x) and single-token decode alike; the
    prefill path loops heads to bound score-matrix memory.
    """
    config = cache.config
    num_heads, head_dim = config.num_heads, config.head_dim
    lc = cache.layers[layer]
    if lc.stored_key_heads != list(range(num_heads)):
        raise ModeMismatchError(
            f"mha_forward needs all {num_heads} key heads cached, "
            f"found {lc.stored_key_heads}"
        )
    if x.ndim != 2 or x.shape[1] != config.model_dim:
        raise ShapeError(f"expected (T, {config.model_dim}) input, got {x.shape}")

    tokens = x.shape[0]
    start = lc.length
    scale = _head_scale(head_dim)
    all_heads = list(range(num_heads))

    queries = apply_rope_heads(_project_heads(x, layer_weights.wq, all_heads, head_dim), start)
    new_keys = apply_rope_heads(_project_heads(x, layer_weights.wk, all_heads, head_dim), start)
    new_values = _project_heads(x, layer_weights.wv, all_heads, head_dim)
    lc.append(_to_cache_layout(new_keys), _to_cache_layout(new_values))

    live_keys = lc.live_keys()
    live_values = lc.live_values()

    if tokens == 1:
        probs = softmax_rows(_score_rows(queries[0], live_keys, scale))
        if trace is not None:
            for head in range(num_heads):
                trace.record(layer, head, start, probs[head])
        merged = _blend_values(probs, live_values).reshape(1, num_heads * head_dim)
        return matmul(merged, layer_weights.wo)

    outputs = []
    for head in range(num_heads):
        scores = matmul(queries[:, head, :], live_keys[head].T) * scale
        probs = softmax_rows(scores, causal_from=start)
        outputs.append(matmul(probs, live_values[head]))
        if trace is not None:
            for i in range(tokens):
                trace.record(layer, head, start + i, probs[i, : start + i + 1])
    merged = np.concatenate(outputs, axis=1)
    return matmul(merged, layer_weights.wo)


class PlanTensors:
    """Per-layer Q/K column submatrices for a frozen plan, precomputed once so
    steady-state decode steps skip the per-step column gathers."""

    def __init__(self, plan: ClusterPlan, weights_layers, head_dim: int):
        self.wq = []
        self.wk = []
        for layer_weights, layer_plan in zip(weights_layers, plan.layers):
            reps = list(layer_plan.representatives)
            self.wq.append(head_columns(layer_weights.wq, reps, head_dim))
            self.wk.append(head_columns(layer_weights.wk, reps, head_dim))


def clustered_forward(
    x_t: np.ndarray,
    layer_weights: LayerWeights,
    cache: KVCache,
    layer: int,
    plan: ClusterPlan,
    reuse_values: bool = False,
    plan_tensors: PlanTensors | None = None,
) -> np.ndarray:
    """Single-token attention computing Q/K and score rows only for cluster
    representatives. Every head's output uses its representative's probability
    row; with `reuse_values` the representative's value output is replicated
    across the cluster instead of blending each head's own values."""
    config = cache.config
    num_heads, head_dim = config.num_heads, config.head_dim
    layer_plan = plan.layers[layer]
    lc = cache.layers[layer]

    reps = list(layer_plan.representatives)
    reps_sorted = sorted(reps)
    if lc.stored_key_heads != reps_sorted:
        raise ContractError(
            f"cache stores key heads {lc.stored_key_heads}, "
            f"plan representatives are {reps_sorted}"
        )
    expected_value_heads = reps_sorted if reuse_values else list(range(num_heads))
    if lc.stored_value_heads != expected_value_heads:
        raise ContractError(
            f"cache stores value heads {lc.stored_value_heads}, expected {expected_value_heads}"
        )
    if x_t.ndim != 2 or x_t.shape[0] != 1 or x_t.shape[1] != config.model_dim:
        raise ShapeError(f"clustered_forward decodes one token, got input {x_t.shape}")

    start = lc.length
    scale = _head_scale(head_dim)

    wq_sub = plan_tensors.wq[layer] if plan_tensors is not None else None
    wk_sub = plan_tensors.wk[layer] if plan_tensors is not None else None
    # projections land in cluster-id order (one row per cluster)
    queries = apply_rope_heads(
        _project_heads(x_t, layer_weights.wq, reps, head_dim, wq_sub), start
    )
    new_keys = apply_rope_heads(
        _project_heads(x_t, layer_weights.wk, reps, head_dim, wk_sub), start
    )
    new_values = _project_heads(x_t, layer_weights.wv, expected_value_heads, head_dim)

    # cache slots hold representatives in ascending-head order; reorder the
    # small per-token tensors rather than the cached key planes
    cluster_of_slot = [layer_plan.assignment[h] for h in reps_sorted]
    lc.append(_to_cache_layout(new_keys[:, cluster_of_slot, :]), _to_cache_layout(new_values))

    live_keys = lc.live_keys()
    live_values = lc.live_values()

    probs_by_slot = softmax_rows(_score_rows(queries[0][cluster_of_slot], live_keys, scale))

    slot_of_cluster = np.empty(layer_plan.cluster_count, dtype=np.intp)
    slot_of_cluster[cluster_of_slot] = np.arange(len(cluster_of_slot))
    assignment = np.asarray(layer_plan.assignment)
    if reuse_values:
        rep_outputs = _blend_values(probs_by_slot, live_values)  # slot order
        head_outputs = rep_outputs[slot_of_cluster[assignment]]
    else:
        head_outputs = _blend_values(probs_by_slot[slot_of_cluster[assignment]], live_values)
    merged = head_outputs.reshape(1, num_heads * head_dim)
    return matmul(merged, layer_weights.wo)
