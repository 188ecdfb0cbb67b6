"""Shared fixtures for the test suite: tiny configs and planted-redundancy models."""

import numpy as np

from chai.engine import CalibrationProfile
from chai.model import ModelConfig, Weights, init_random, make_redundant
from chai.plan import ClusterPlan, LayerPlan


def small_config(**overrides) -> ModelConfig:
    params = dict(
        num_layers=2,
        num_heads=4,
        model_dim=32,
        head_dim=8,
        ffn_dim=48,
        vocab_size=32,
        max_seq_len=64,
    )
    params.update(overrides)
    return ModelConfig(**params)


def small_weights(seed=0, **overrides) -> Weights:
    return init_random(small_config(**overrides), seed)


def grouped_plan(num_layers: int, num_heads: int, counts: list[int]) -> ClusterPlan:
    """Contiguous-block plan with counts[l] clusters in layer l.

    Heads are split into near-equal contiguous groups; the first head of each
    group is its representative.
    """
    layers = []
    for layer in range(num_layers):
        k = counts[layer]
        bounds = np.linspace(0, num_heads, k + 1).astype(int)
        assignment = []
        representatives = []
        for cluster in range(k):
            lo, hi = bounds[cluster], bounds[cluster + 1]
            representatives.append(int(lo))
            assignment.extend([cluster] * (hi - lo))
        layers.append(
            LayerPlan(assignment=tuple(assignment), representatives=tuple(representatives))
        )
    return ClusterPlan(layers=tuple(layers))


def redundant_fixture(counts, seed=0, **overrides):
    """Random weights rewritten so each layer has exactly counts[l] distinct
    (wq, wk) head blocks; returns (weights, plan)."""
    config = small_config(**overrides)
    plan = grouped_plan(config.num_layers, config.num_heads, counts)
    weights = make_redundant(init_random(config, seed), plan)
    return weights, plan


def random_prompt(config: ModelConfig, length: int, seed=0) -> list[int]:
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=length).tolist()


def degenerate_profile(config, window=5, seed=0) -> CalibrationProfile:
    """All heads their own cluster: clustered modes collapse to plain MHA."""
    num_heads, num_layers = config.num_heads, config.num_layers
    return CalibrationProfile(
        fingerprint=config.fingerprint(),
        window=window,
        threshold=0.05,
        sample_count=1,
        seed=seed,
        cluster_counts=[num_heads] * num_layers,
        elbow_curves=[[0.0] * num_heads] * num_layers,
        static_assignment=ClusterPlan.singleton(num_layers, num_heads),
    )


def fixture_profile(weights, plan, window=5, seed=0) -> CalibrationProfile:
    """Profile carrying a known plan's cluster counts and static assignment."""
    return CalibrationProfile(
        fingerprint=weights.config.fingerprint(),
        window=window,
        threshold=0.05,
        sample_count=1,
        seed=seed,
        cluster_counts=plan.cluster_counts(),
        elbow_curves=[[0.0] * weights.config.num_heads] * weights.config.num_layers,
        static_assignment=plan,
    )


ACCEPTANCE_COUNTS = [1, 4, 8, 4]


def acceptance_fixture(base_seed=0, boost=6.0):
    """The criterion-scale planted-redundancy model: H=16, L=4, d=256 with
    per-layer cluster counts {1, 4, 8}. Query/key projections are scaled up so
    head attention patterns are sharply peaked and well separated."""
    config = ModelConfig(
        num_layers=4, num_heads=16, model_dim=256, head_dim=16,
        ffn_dim=384, vocab_size=64, max_seq_len=128,
    )
    plan = grouped_plan(4, 16, ACCEPTANCE_COUNTS)
    weights = init_random(config, seed=base_seed)
    for lw in weights.layers:
        lw.wq *= boost
        lw.wk *= boost
    return make_redundant(weights, plan), plan


def acceptance_corpus(config, samples=8, length=10, seed=123):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, config.vocab_size, size=length).tolist() for _ in range(samples)]
