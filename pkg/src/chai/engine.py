"""End-to-end inference: plain multi-head decoding, clustered decoding with
online membership identification, the static-assignment variant, the
value-reuse variant, and offline calibration.

Generation flow for the clustered modes: the prompt prefills with plain
attention, the first `identify_at` decoded tokens also run plain attention
with tracing, then each layer's heads are clustered from those traced rows
(k-means with the profile's per-layer cluster counts), the cache is pruned
once, and every remaining step runs the clustered kernel with the plan
frozen. The static variant skips identification and applies the profile's
calibration-time assignment right after prefill.

Decode steps are numbered from 1; step s feeds generated token s and attends
over prompt_len + s cached positions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import accounting
from .attention import (
    AttentionTrace,
    KVCache,
    PlanTensors,
    clustered_forward,
    mha_forward,
    prune_cache,
)
from .clustering import (
    choose_representatives,
    elbow_select,
    extract_features,
    kmeans,
    sse_curve,
)
from .errors import ValidationError
from .kernels import matmul, rms_norm
from .model import ModelConfig, Weights
from .plan import ClusterPlan, LayerPlan

MODES = ("MHA", "CHAI", "CHAI_STATIC", "CHAI_QKV")
DEFAULT_IDENTIFY_AT = 5


def parse_mode(mode: str) -> str:
    name = str(mode).upper().replace("-", "_")
    if name not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    return name


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


@dataclass
class CalibrationProfile:
    """Offline per-layer cluster counts plus a corpus-level static assignment."""

    fingerprint: str
    window: int
    threshold: float
    sample_count: int
    seed: int
    cluster_counts: list[int]
    elbow_curves: list[list[float]]
    static_assignment: ClusterPlan

    def __post_init__(self):
        static_counts = self.static_assignment.cluster_counts()
        if static_counts != list(self.cluster_counts):
            raise ValidationError(
                f"static assignment cluster counts {static_counts} disagree "
                f"with chosen counts {list(self.cluster_counts)}"
            )

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "window": self.window,
            "threshold": self.threshold,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "cluster_counts": list(self.cluster_counts),
            "elbow_curves": [list(curve) for curve in self.elbow_curves],
            "static_assignment": self.static_assignment.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationProfile":
        return cls(
            fingerprint=data["fingerprint"],
            window=data["window"],
            threshold=data["threshold"],
            sample_count=data["sample_count"],
            seed=data["seed"],
            cluster_counts=list(data["cluster_counts"]),
            elbow_curves=[list(curve) for curve in data["elbow_curves"]],
            static_assignment=ClusterPlan.from_dict(data["static_assignment"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def _forward_pass(
    weights: Weights,
    token_ids,
    cache: KVCache,
    trace: AttentionTrace | None = None,
    plan: ClusterPlan | None = None,
    reuse_values: bool = False,
    plan_tensors: PlanTensors | None = None,
) -> np.ndarray:
    """Run tokens through every block; returns the last position's logits."""
    config = weights.config
    ids = np.asarray(token_ids, dtype=np.intp)
    h = weights.token_embedding[ids]
    for layer, lw in enumerate(weights.layers):
        normed = rms_norm(h, lw.attn_norm_gain)
        if plan is None:
            attn = mha_forward(normed, lw, cache, layer, trace)
        else:
            attn = clustered_forward(
                normed, lw, cache, layer, plan, reuse_values, plan_tensors
            )
        h = h + attn
        normed = rms_norm(h, lw.mlp_norm_gain)
        gated = _silu(matmul(normed, lw.w_gate)) * matmul(normed, lw.w_up)
        h = h + matmul(gated, lw.w_down)
    last = rms_norm(h[-1:], weights.final_norm_gain)
    return matmul(last, weights.output_projection)[0]


def prefill(weights: Weights, prompt, cache: KVCache, trace: AttentionTrace | None = None):
    """Process the whole prompt with plain attention; returns last-position logits."""
    return _forward_pass(weights, prompt, cache, trace=trace)


def _validate_prompt(config: ModelConfig, prompt, steps: int) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValidationError("prompt must contain at least one token id")
    if any(t < 0 or t >= config.vocab_size for t in prompt):
        raise ValidationError(f"prompt token ids must lie in [0, {config.vocab_size})")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if len(prompt) + steps > config.max_seq_len:
        raise ValidationError(
            f"prompt length {len(prompt)} + steps {steps} exceeds "
            f"max_seq_len {config.max_seq_len}"
        )
    return prompt


@dataclass
class GenerationResult:
    mode: str
    prompt_length: int
    tokens: list[int]
    identify_at: int
    identification_skipped: bool
    plan: ClusterPlan | None
    plan_at_identification: dict | None
    prefill_ms: float
    step_ms: list[float]
    identification_ms: float
    per_step_kv_bytes: list[int]
    per_step_attention_flops: list[int]
    per_step_key_head_counts: list[list[int]]
    per_step_value_head_counts: list[list[int]]
    kv_cache_summary: dict
    memory_report: accounting.MemoryReport
    flop_report: accounting.FlopReport
    trace: AttentionTrace | None = None
    logits: list[np.ndarray] | None = None
    identified_at_step: int | None = None

    @property
    def ttft_ms(self) -> float:
        return self.prefill_ms + self.step_ms[0]

    def steady_step_ms(self) -> list[float]:
        """Per-step latencies after the plan took effect (all steps for MHA);
        identification overhead is kept out of step timings by construction."""
        if self.plan is None or self.identified_at_step is None:
            return list(self.step_ms)
        return list(self.step_ms[self.identified_at_step :])

    def to_dict(self) -> dict:
        """Deterministic payload; wall-clock measurements live under 'timing'."""
        return {
            "mode": self.mode,
            "prompt_length": self.prompt_length,
            "steps": len(self.tokens),
            "tokens": list(self.tokens),
            "identify_at": self.identify_at,
            "identification_skipped": self.identification_skipped,
            "identified_at_step": self.identified_at_step,
            "plan": self.plan.to_dict() if self.plan is not None else None,
            "plan_at_identification": self.plan_at_identification,
            "per_step_kv_bytes": list(self.per_step_kv_bytes),
            "per_step_attention_flops": list(self.per_step_attention_flops),
            "per_step_key_head_counts": [list(c) for c in self.per_step_key_head_counts],
            "per_step_value_head_counts": [list(c) for c in self.per_step_value_head_counts],
            "kv_cache_summary": self.kv_cache_summary,
            "memory_report": self.memory_report.to_dict(),
            "flop_report": self.flop_report.to_dict(),
            "timing": {
                "prefill_ms": self.prefill_ms,
                "ttft_ms": self.ttft_ms,
                "step_ms": list(self.step_ms),
                "identification_ms": self.identification_ms,
            },
        }


def _require_profile(config: ModelConfig, mode: str, profile: CalibrationProfile | None):
    if profile is None:
        raise ValidationError(f"mode {mode} requires a calibration profile")
    if profile.fingerprint != config.fingerprint():
        raise ValidationError(
            "calibration profile fingerprint does not match the model config"
        )


def _identify_plan(
    trace: AttentionTrace,
    cluster_counts,
    window: tuple[int, int],
    seed: int,
) -> ClusterPlan:
    layers = []
    for layer in range(trace.num_layers):
        features = extract_features(trace, layer, window)
        result = kmeans(features, cluster_counts[layer], seed=_derived_seed(seed, layer))
        reps = choose_representatives(features, result.assignment, result.centroids)
        layers.append(
            LayerPlan(
                assignment=tuple(int(c) for c in result.assignment),
                representatives=tuple(reps),
            )
        )
    return ClusterPlan(layers=tuple(layers))


def generate(
    weights: Weights,
    prompt,
    steps: int,
    mode: str = "MHA",
    profile: CalibrationProfile | None = None,
    identify_at: int = DEFAULT_IDENTIFY_AT,
    seed: int = 0,
    collect_trace: bool = False,
    collect_logits: bool = False,
) -> GenerationResult:
    """Greedy-decode `steps` tokens; see the module docstring for the flow."""
    config = weights.config
    mode = parse_mode(mode)
    prompt = _validate_prompt(config, prompt, steps)
    if identify_at < 1:
        raise ValidationError(f"identify_at must be >= 1, got {identify_at}")
    if mode != "MHA":
        _require_profile(config, mode, profile)
    reuse_values = mode == "CHAI_QKV"

    cache = KVCache(config)
    plan: ClusterPlan | None = None
    plan_snapshot = None
    identified_at_step = None
    identification_ms = 0.0
    will_identify = mode in ("CHAI", "CHAI_QKV") and steps > identify_at
    identification_skipped = mode in ("CHAI", "CHAI_QKV") and not will_identify

    trace = None
    if will_identify or (collect_trace and mode != "CHAI_STATIC"):
        trace = AttentionTrace(config.num_layers, config.num_heads, base_position=len(prompt))

    start = time.perf_counter()
    logits = prefill(weights, prompt, cache)
    prefill_ms = (time.perf_counter() - start) * 1000.0
    next_token = int(np.argmax(logits))

    plan_tensors = None
    if mode == "CHAI_STATIC":
        plan = profile.static_assignment
        plan_snapshot = plan.to_dict()
        cache = prune_cache(cache, plan)
        plan_tensors = PlanTensors(plan, weights.layers, config.head_dim)
        identified_at_step = 0

    tokens: list[int] = []
    step_ms: list[float] = []
    per_step_kv_bytes: list[int] = []
    per_step_attention_flops: list[int] = []
    per_step_key_heads: list[list[int]] = []
    per_step_value_heads: list[list[int]] = []
    collected_logits: list[np.ndarray] = []

    for step in range(1, steps + 1):
        tokens.append(next_token)
        trace_this_step = trace is not None and (
            mode == "MHA" or step <= identify_at or plan is None
        )
        step_start = time.perf_counter()
        logits = _forward_pass(
            weights,
            [next_token],
            cache,
            trace=trace if trace_this_step else None,
            plan=plan,
            reuse_values=reuse_values and plan is not None,
            plan_tensors=plan_tensors,
        )
        next_token = int(np.argmax(logits))
        step_ms.append((time.perf_counter() - step_start) * 1000.0)

        if collect_logits:
            collected_logits.append(logits.copy())
        seq_len = len(prompt) + step
        step_plan = plan
        per_step_kv_bytes.append(cache.measured_bytes(accounting.DEFAULT_CACHE_WIDTH_BYTES))
        per_step_attention_flops.append(
            accounting.attention_flops(
                config, step_plan, seq_len, "decode",
                reuse_values=reuse_values and step_plan is not None,
            ).total_flops
        )
        per_step_key_heads.append(
            [len(lc.stored_key_heads) for lc in cache.layers]
        )
        per_step_value_heads.append(
            [len(lc.stored_value_heads) for lc in cache.layers]
        )

        if will_identify and step == identify_at:
            ident_start = time.perf_counter()
            plan = _identify_plan(
                trace, profile.cluster_counts, (1, identify_at), _derived_seed(seed)
            )
            plan_snapshot = plan.to_dict()
            cache = prune_cache(cache, plan, prune_values=reuse_values)
            plan_tensors = PlanTensors(plan, weights.layers, config.head_dim)
            identification_ms = (time.perf_counter() - ident_start) * 1000.0
            identified_at_step = step

    final_len = len(prompt) + steps
    memory_report = accounting.kv_cache_bytes(
        config, plan, final_len,
        prune_values=reuse_values and plan is not None,
    )
    flop_report = accounting.attention_flops(
        config, plan, final_len, "decode",
        reuse_values=reuse_values and plan is not None,
    )
    return GenerationResult(
        mode=mode,
        prompt_length=len(prompt),
        tokens=tokens,
        identify_at=identify_at,
        identification_skipped=identification_skipped,
        plan=plan,
        plan_at_identification=plan_snapshot,
        prefill_ms=prefill_ms,
        step_ms=step_ms,
        identification_ms=identification_ms,
        per_step_kv_bytes=per_step_kv_bytes,
        per_step_attention_flops=per_step_attention_flops,
        per_step_key_head_counts=per_step_key_heads,
        per_step_value_head_counts=per_step_value_heads,
        kv_cache_summary=cache.summary(),
        memory_report=memory_report,
        flop_report=flop_report,
        trace=trace if collect_trace else None,
        logits=collected_logits if collect_logits else None,
        identified_at_step=identified_at_step,
    )


def _traced_prefix(weights: Weights, token_ids) -> AttentionTrace:
    """Plain attention over a fresh cache with tracing from position 0; the
    step-s row then has length s, giving fixed-size calibration features."""
    cache = KVCache(weights.config)
    trace = AttentionTrace(weights.config.num_layers, weights.config.num_heads)
    _forward_pass(weights, token_ids, cache, trace=trace)
    return trace


def calibrate(
    weights: Weights,
    corpus,
    sample_count: int | None = None,
    window: int = DEFAULT_IDENTIFY_AT,
    threshold: float = 0.05,
    seed: int = 0,
) -> CalibrationProfile:
    """Offline pass: trace each sample's first `window` tokens under plain
    attention, average per-sample clustering-error curves per layer, pick each
    layer's cluster count at the elbow, and bake a static assignment from the
    corpus-mean features."""
    config = weights.config
    corpus = [list(sample) for sample in corpus]
    if not corpus:
        raise ValidationError("calibration corpus is empty")
    if sample_count is None:
        sample_count = len(corpus)
    if sample_count < 1 or sample_count > len(corpus):
        raise ValidationError(
            f"sample_count {sample_count} outside [1, {len(corpus)}]"
        )
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")

    if sample_count < len(corpus):
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(corpus), size=sample_count, replace=False).tolist())
    else:
        chosen = list(range(len(corpus)))

    samples = []
    for index in chosen:
        sample = corpus[index]
        if len(sample) < window:
            raise ValidationError(
                f"corpus sample {index} has {len(sample)} tokens, "
                f"needs at least {window} to decode the feature window"
            )
        if any(t < 0 or t >= config.vocab_size for t in sample[:window]):
            raise ValidationError(f"corpus sample {index} has token ids out of range")
        samples.append(sample[:window])

    num_layers, num_heads = config.num_layers, config.num_heads
    feature_sets = []  # per sample: list of (H, F) arrays per layer
    for sample in samples:
        trace = _traced_prefix(weights, sample)
        feature_sets.append(
            [extract_features(trace, layer, (1, window)) for layer in range(num_layers)]
        )

    cluster_counts = []
    elbow_curves = []
    static_layers = []
    for layer in range(num_layers):
        curves = [
            sse_curve(
                feature_sets[i][layer], k_max=num_heads,
                seed=_derived_seed(seed, i, layer),
            )
            for i in range(len(samples))
        ]
        mean_curve = np.mean(np.stack(curves), axis=0)
        chosen_k = elbow_select(mean_curve, threshold)
        cluster_counts.append(chosen_k)
        elbow_curves.append([float(e) for e in mean_curve])

        mean_features = np.mean(
            np.stack([feature_sets[i][layer] for i in range(len(samples))]), axis=0
        )
        result = kmeans(
            mean_features, chosen_k, seed=_derived_seed(seed, len(samples), layer)
        )
        reps = choose_representatives(mean_features, result.assignment, result.centroids)
        static_layers.append(
            LayerPlan(
                assignment=tuple(int(c) for c in result.assignment),
                representatives=tuple(reps),
            )
        )

    return CalibrationProfile(
        fingerprint=config.fingerprint(),
        window=window,
        threshold=threshold,
        sample_count=sample_count,
        seed=seed,
        cluster_counts=cluster_counts,
        elbow_curves=elbow_curves,
        static_assignment=ClusterPlan(layers=tuple(static_layers)),
    )


def compare_outputs(
    weights: Weights,
    prompt,
    steps: int,
    profile: CalibrationProfile,
    mode: str = "CHAI",
    identify_at: int = DEFAULT_IDENTIFY_AT,
    seed: int = 0,
) -> dict:
    """Run plain decoding and a clustered variant on the same prompt; report
    where the token streams diverge and how far the logits drift."""
    variant = parse_mode(mode)
    if variant == "MHA":
        raise ValidationError("compare_outputs needs a clustered variant, got MHA")
    base = generate(
        weights, prompt, steps, "MHA", collect_logits=True, seed=seed,
        identify_at=identify_at,
    )
    other = generate(
        weights, prompt, steps, variant, profile=profile, collect_logits=True,
        seed=seed, identify_at=identify_at,
    )

    first_divergence = None
    for i, (a, b) in enumerate(zip(base.tokens, other.tokens)):
        if a != b:
            first_divergence = i + 1
            break

    max_abs, mean_abs, kls = [], [], []
    for la, lb in zip(base.logits, other.logits):
        delta = np.abs(la.astype(np.float64) - lb.astype(np.float64))
        max_abs.append(float(delta.max()))
        mean_abs.append(float(delta.mean()))
        kls.append(_kl_divergence(la, lb))

    return {
        "mode": variant,
        "steps": steps,
        "prompt_length": base.prompt_length,
        "first_divergence_step": first_divergence,
        "tokens_mha": base.tokens,
        "tokens_variant": other.tokens,
        "per_step_max_abs_logit_delta": max_abs,
        "per_step_mean_abs_logit_delta": mean_abs,
        "per_step_next_token_kl": kls,
    }


def _kl_divergence(logits_p: np.ndarray, logits_q: np.ndarray) -> float:
    """KL(P || Q) of the two next-token distributions, in nats."""
    lp = logits_p.astype(np.float64)
    lq = logits_q.astype(np.float64)
    log_p = lp - _logsumexp(lp)
    log_q = lq - _logsumexp(lq)
    kl = float(np.sum(np.exp(log_p) * (log_p - log_q)))
    return max(kl, 0.0)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))
