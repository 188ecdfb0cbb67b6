"""Closed-form FLOP and byte accounting for attention, plain or under a plan.

Conventions (documented so the numbers are auditable): a multiply-add counts
as 2 FLOPs; softmax costs 5 FLOPs per element (max-subtract, exp, sum,
divide, amortized bookkeeping). Cache bytes default to 2-byte elements (fp16
storage model) even though compute runs in float32.

`seq_len` always means the number of cached positions a step attends over,
including the token being decoded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import ValidationError
from .model import ModelConfig
from .plan import ClusterPlan

MULTIPLY_ADD_FLOPS = 2
SOFTMAX_FLOPS_PER_ELEMENT = 5
DEFAULT_CACHE_WIDTH_BYTES = 2


@dataclass(frozen=True)
class LayerMemory:
    key_bytes: int
    value_bytes: int

    @property
    def kv_total_bytes(self) -> int:
        return self.key_bytes + self.value_bytes


@dataclass(frozen=True)
class MemoryReport:
    per_layer: tuple[LayerMemory, ...]
    seq_len: int
    element_width_bytes: int
    baseline_bytes: int

    @property
    def key_bytes(self) -> int:
        return sum(layer.key_bytes for layer in self.per_layer)

    @property
    def value_bytes(self) -> int:
        return sum(layer.value_bytes for layer in self.per_layer)

    @property
    def kv_total_bytes(self) -> int:
        return self.key_bytes + self.value_bytes

    @property
    def savings_fraction(self) -> float:
        return 1.0 - self.kv_total_bytes / self.baseline_bytes

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "element_width_bytes": self.element_width_bytes,
            "key_bytes": self.key_bytes,
            "value_bytes": self.value_bytes,
            "kv_total_bytes": self.kv_total_bytes,
            "baseline_bytes": self.baseline_bytes,
            "savings_fraction": self.savings_fraction,
            "per_layer": [
                {
                    "key_bytes": layer.key_bytes,
                    "value_bytes": layer.value_bytes,
                    "kv_total_bytes": layer.kv_total_bytes,
                }
                for layer in self.per_layer
            ],
        }


@dataclass(frozen=True)
class LayerFlops:
    projection_flops: int  # Q, K, V, O projections
    score_flops: int  # Q Kᵀ
    softmax_flops: int
    av_flops: int  # probability rows times values

    @property
    def total(self) -> int:
        return self.projection_flops + self.score_flops + self.softmax_flops + self.av_flops


@dataclass(frozen=True)
class FlopReport:
    per_layer: tuple[LayerFlops, ...]
    seq_len: int
    step_kind: str
    baseline_flops: int

    @property
    def projection_flops(self) -> int:
        return sum(layer.projection_flops for layer in self.per_layer)

    @property
    def score_flops(self) -> int:
        return sum(layer.score_flops for layer in self.per_layer)

    @property
    def softmax_flops(self) -> int:
        return sum(layer.softmax_flops for layer in self.per_layer)

    @property
    def av_flops(self) -> int:
        return sum(layer.av_flops for layer in self.per_layer)

    @property
    def total_flops(self) -> int:
        return sum(layer.total for layer in self.per_layer)

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.total_flops / self.baseline_flops

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "step_kind": self.step_kind,
            "projection_flops": self.projection_flops,
            "score_flops": self.score_flops,
            "softmax_flops": self.softmax_flops,
            "av_flops": self.av_flops,
            "total_flops": self.total_flops,
            "baseline_flops": self.baseline_flops,
            "reduction_fraction": self.reduction_fraction,
            "per_layer": [
                {
                    "projection_flops": layer.projection_flops,
                    "score_flops": layer.score_flops,
                    "softmax_flops": layer.softmax_flops,
                    "av_flops": layer.av_flops,
                    "total_flops": layer.total,
                }
                for layer in self.per_layer
            ],
        }


def _layer_cluster_counts(config: ModelConfig, plan: ClusterPlan | None) -> list[int]:
    if plan is None:
        return [config.num_heads] * config.num_layers
    if plan.num_layers != config.num_layers:
        raise ValidationError(
            f"plan covers {plan.num_layers} layers, config has {config.num_layers}"
        )
    return plan.cluster_counts()


def kv_cache_bytes(
    config: ModelConfig,
    plan: ClusterPlan | None,
    seq_len: int,
    element_width_bytes: int = DEFAULT_CACHE_WIDTH_BYTES,
    prune_values: bool = False,
) -> MemoryReport:
    """Cache capacity at `seq_len` positions: keys from the stored key heads
    (representatives under a plan), values from all heads unless `prune_values`."""
    if seq_len < 1 or element_width_bytes < 1:
        raise ValidationError(
            f"seq_len {seq_len} and element width {element_width_bytes} must be >= 1"
        )
    if seq_len > config.max_seq_len:
        raise ValidationError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    heads = config.num_heads
    per_position = config.head_dim * element_width_bytes
    layers = []
    for k in _layer_cluster_counts(config, plan):
        value_heads = k if (prune_values and plan is not None) else heads
        layers.append(
            LayerMemory(
                key_bytes=k * seq_len * per_position,
                value_bytes=value_heads * seq_len * per_position,
            )
        )
    baseline = config.num_layers * 2 * heads * seq_len * per_position
    return MemoryReport(
        per_layer=tuple(layers),
        seq_len=seq_len,
        element_width_bytes=element_width_bytes,
        baseline_bytes=baseline,
    )


def _decode_layer_flops(config, k, seq_len, reuse_values):
    d, dh, heads = config.model_dim, config.head_dim, config.num_heads
    ma = MULTIPLY_ADD_FLOPS
    # Q and K projections cover only the k computed heads; V and O stay full.
    projection = ma * d * dh * k * 2 + ma * d * d * 2
    score = ma * k * seq_len * dh
    softmax = SOFTMAX_FLOPS_PER_ELEMENT * k * seq_len
    av_heads = k if reuse_values else heads
    av = ma * av_heads * seq_len * dh
    return projection, score, softmax, av


def attention_flops(
    config: ModelConfig,
    plan: ClusterPlan | None,
    seq_len: int,
    step_kind: str = "decode",
    reuse_values: bool = False,
) -> FlopReport:
    """Attention FLOPs for one decode step at `seq_len` cached positions, or
    for a whole prefill (the decode form summed over positions 1..seq_len)."""
    if step_kind not in ("decode", "prefill"):
        raise ValidationError(f"step_kind must be decode or prefill, got {step_kind!r}")
    if seq_len < 1:
        raise ValidationError(f"seq_len must be >= 1, got {seq_len}")
    counts = _layer_cluster_counts(config, plan)
    reuse = reuse_values and plan is not None

    def build(cluster_counts, use_reuse):
        layers = []
        for k in cluster_counts:
            if step_kind == "decode":
                parts = _decode_layer_flops(config, k, seq_len, use_reuse)
            else:
                positions = seq_len * (seq_len + 1) // 2
                proj, score, softmax, av = _decode_layer_flops(config, k, 1, use_reuse)
                parts = (
                    proj * seq_len,
                    score * positions,
                    softmax * positions,
                    av * positions,
                )
            layers.append(LayerFlops(*parts))
        return layers

    per_layer = build(counts, reuse)
    baseline = sum(layer.total for layer in build([config.num_heads] * config.num_layers, False))
    return FlopReport(
        per_layer=tuple(per_layer),
        seq_len=seq_len,
        step_kind=step_kind,
        baseline_flops=baseline,
    )


def write_memory_csv(report: MemoryReport, path) -> None:
    """Flat per-layer rows plus a total row, for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "seq_len", "key_bytes", "value_bytes", "kv_total_bytes"])
        for layer, entry in enumerate(report.per_layer):
            writer.writerow(
                [layer, report.seq_len, entry.key_bytes, entry.value_bytes, entry.kv_total_bytes]
            )
        writer.writerow(
            ["total", report.seq_len, report.key_bytes, report.value_bytes, report.kv_total_bytes]
        )


def write_flop_csv(report: FlopReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["layer", "seq_len", "step_kind", "projection_flops", "score_flops",
             "softmax_flops", "av_flops", "total_flops"]
        )
        for layer, entry in enumerate(report.per_layer):
            writer.writerow(
                [layer, report.seq_len, report.step_kind, entry.projection_flops,
                 entry.score_flops, entry.softmax_flops, entry.av_flops, entry.total]
            )
        writer.writerow(
            ["total", report.seq_len, report.step_kind, report.projection_flops,
             report.score_flops, report.softmax_flops, report.av_flops, report.total_flops]
        )
