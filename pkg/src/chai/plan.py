"""Per-layer head-to-cluster assignments with one representative head per cluster."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError


@dataclass(frozen=True)
class LayerPlan:
    """Cluster structure of one layer's attention heads.

    assignment[h] is the cluster id of head h; representatives[c] is the head
    whose queries and keys are actually computed for cluster c.
    """

    assignment: tuple[int, ...]
    representatives: tuple[int, ...]

    def __post_init__(self):
        num_heads = len(self.assignment)
        k = len(self.representatives)
        if not 1 <= k <= num_heads:
            raise ContractError(f"cluster count {k} outside [1, {num_heads}]")
        if sorted(set(self.assignment)) != list(range(k)):
            raise ContractError("assignment is not surjective onto cluster ids")
        for cluster, rep in enumerate(self.representatives):
            if not 0 <= rep < num_heads:
                raise ContractError(f"representative {rep} is not a head index")
            if self.assignment[rep] != cluster:
                raise ContractError(
                    f"representative {rep} of cluster {cluster} is assigned "
                    f"to cluster {self.assignment[rep]}"
                )

    @property
    def cluster_count(self) -> int:
        return len(self.representatives)

    @property
    def num_heads(self) -> int:
        return len(self.assignment)

    def heads_of(self, cluster: int) -> list[int]:
        return [h for h, c in enumerate(self.assignment) if c == cluster]


@dataclass(frozen=True)
class ClusterPlan:
    """One LayerPlan per transformer layer."""

    layers: tuple[LayerPlan, ...]

    @classmethod
    def singleton(cls, num_layers: int, num_heads: int) -> "ClusterPlan":
        """Every head its own cluster: prunes nothing, reproduces plain attention."""
        layer = LayerPlan(
            assignment=tuple(range(num_heads)),
            representatives=tuple(range(num_heads)),
        )
        return cls(layers=(layer,) * num_layers)

    @classmethod
    def uniform(cls, num_layers: int, num_heads: int, cluster_count: int) -> "ClusterPlan":
        """Round-robin assignment into `cluster_count` clusters, same every layer."""
        assignment = tuple(h % cluster_count for h in range(num_heads))
        representatives = tuple(range(cluster_count))
        layer = LayerPlan(assignment=assignment, representatives=representatives)
        return cls(layers=(layer,) * num_layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def cluster_counts(self) -> list[int]:
        return [layer.cluster_count for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "assignment": list(layer.assignment),
                    "representatives": list(layer.representatives),
                }
                for layer in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterPlan":
        return cls(
            layers=tuple(
                LayerPlan(
                    assignment=tuple(entry["assignment"]),
                    representatives=tuple(entry["representatives"]),
                )
                for entry in data["layers"]
            )
        )
