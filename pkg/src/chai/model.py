"""Toy decoder-only transformer: config, weights, deterministic init, weight files.

The block structure is pre-norm (RMS norm -> attention -> residual,
RMS norm -> gated MLP -> residual) with rotary positions and no biases.
There is no tokenizer; callers feed integer token ids, and a byte-level
fallback maps bytes 0..255 to ids.

Weight initialization uses a documented splitmix64 stream so that any
implementation can replay it: draw n (1-based) has state
(seed + n * 0x9E3779B97F4A7C15) mod 2**64, mixed by

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

and is mapped to a float via (z >> 11) / 2**53 * 2 - 1, i.e. uniform in
[-1, 1), then scaled by 1/sqrt(model_dim) and cast to float32. Random
tensors are drawn in this order: token_embedding, then per layer
wq, wk, wv, wo, w_gate, w_up, w_down, then output_projection (row-major
within each tensor). Norm gains are not drawn; they start at 1.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    HeaderMismatchError,
    TruncatedWeightsError,
)
from .plan import ClusterPlan

MAGIC = b"CHAIWGT1"

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    model_dim: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"model_dim {self.model_dim} != num_heads {self.num_heads} "
                f"* head_dim {self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary positions, got {self.head_dim}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**{f.name: data[f.name] for f in fields(cls)})

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class LayerWeights:
    attn_norm_gain: np.ndarray  # (d,)
    wq: np.ndarray  # (d, d), column-partitioned into H head blocks of width d_h
    wk: np.ndarray  # (d, d)
    wv: np.ndarray  # (d, d)
    wo: np.ndarray  # (d, d)
    mlp_norm_gain: np.ndarray  # (d,)
    w_gate: np.ndarray  # (d, ffn)
    w_up: np.ndarray  # (d, ffn)
    w_down: np.ndarray  # (ffn, d)


@dataclass
class Weights:
    config: ModelConfig
    token_embedding: np.ndarray  # (vocab, d)
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray  # (d,)
    output_projection: np.ndarray  # (d, vocab)


def head_block(w: np.ndarray, head: int, head_dim: int) -> np.ndarray:
    """View of one head's column block of a (d, d) projection matrix."""
    return w[:, head * head_dim : (head + 1) * head_dim]


class _SplitMix64Stream:
    """Counter-based splitmix64 stream; see the module docstring for the formula."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.drawn = 0

    def uniform(self, count: int) -> np.ndarray:
        index = np.arange(self.drawn + 1, self.drawn + count + 1, dtype=np.uint64)
        self.drawn += count
        with np.errstate(over="ignore"):
            z = (self.seed + index * np.uint64(_GOLDEN)) & _MASK64
            z = ((z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)) & _MASK64
            z = ((z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)) & _MASK64
            z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def init_random(config: ModelConfig, seed: int) -> Weights:
    """Deterministic random weights; identical (config, seed) is bit-identical."""
    stream = _SplitMix64Stream(seed)
    scale = 1.0 / np.sqrt(config.model_dim)

    def draw(rows, cols):
        block = stream.uniform(rows * cols) * scale
        return block.astype(np.float32).reshape(rows, cols)

    d, ffn, vocab = config.model_dim, config.ffn_dim, config.vocab_size
    token_embedding = draw(vocab, d)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                attn_norm_gain=np.ones(d, dtype=np.float32),
                wq=draw(d, d),
                wk=draw(d, d),
                wv=draw(d, d),
                wo=draw(d, d),
                mlp_norm_gain=np.ones(d, dtype=np.float32),
                w_gate=draw(d, ffn),
                w_up=draw(d, ffn),
                w_down=draw(ffn, d),
            )
        )
    return Weights(
        config=config,
        token_embedding=token_embedding,
        layers=layers,
        final_norm_gain=np.ones(d, dtype=np.float32),
        output_projection=draw(d, vocab),
    )


def make_redundant(weights: Weights, plan: ClusterPlan) -> Weights:
    """Copy of `weights` whose wq/wk head blocks are shared within each plan cluster.

    Heads in the same cluster then produce identical attention rows, which makes
    the clustered attention path exactly equivalent to the plain one. Test
    fixture; all other tensors are untouched.
    """
    config = weights.config
    if plan.num_layers != config.num_layers:
        raise ContractError(
            f"plan has {plan.num_layers} layers, model has {config.num_layers}"
        )
    out_layers = []
    for layer_weights, layer_plan in zip(weights.layers, plan.layers):
        if layer_plan.num_heads != config.num_heads:
            raise ContractError(
                f"plan has {layer_plan.num_heads} heads, model has {config.num_heads}"
            )
        wq = layer_weights.wq.copy()
        wk = layer_weights.wk.copy()
        for head, cluster in enumerate(layer_plan.assignment):
            rep = layer_plan.representatives[cluster]
            head_block(wq, head, config.head_dim)[:] = head_block(
                layer_weights.wq, rep, config.head_dim
            )
            head_block(wk, head, config.head_dim)[:] = head_block(
                layer_weights.wk, rep, config.head_dim
            )
        out_layers.append(
            LayerWeights(
                attn_norm_gain=layer_weights.attn_norm_gain.copy(),
                wq=wq,
                wk=wk,
                wv=layer_weights.wv.copy(),
                wo=layer_weights.wo.copy(),
                mlp_norm_gain=layer_weights.mlp_norm_gain.copy(),
                w_gate=layer_weights.w_gate.copy(),
                w_up=layer_weights.w_up.copy(),
                w_down=layer_weights.w_down.copy(),
            )
        )
    return Weights(
        config=config,
        token_embedding=weights.token_embedding.copy(),
        layers=out_layers,
        final_norm_gain=weights.final_norm_gain.copy(),
        output_projection=weights.output_projection.copy(),
    )


def _tensor_manifest(config: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, rows, cols) entries; vectors are stored as 1-row matrices."""
    d, ffn, vocab = config.model_dim, config.ffn_dim, config.vocab_size
    entries = [("token_embedding", vocab, d)]
    for layer in range(config.num_layers):
        prefix = f"layers.{layer}."
        entries += [
            (prefix + "attn_norm_gain", 1, d),
            (prefix + "wq", d, d),
            (prefix + "wk", d, d),
            (prefix + "wv", d, d),
            (prefix + "wo", d, d),
            (prefix + "mlp_norm_gain", 1, d),
            (prefix + "w_gate", d, ffn),
            (prefix + "w_up", d, ffn),
            (prefix + "w_down", ffn, d),
        ]
    entries.append(("final_norm_gain", 1, d))
    entries.append(("output_projection", d, vocab))
    return entries


def _tensors_in_order(weights: Weights):
    yield weights.token_embedding
    for layer_weights in weights.layers:
        yield layer_weights.attn_norm_gain
        yield layer_weights.wq
        yield layer_weights.wk
        yield layer_weights.wv
        yield layer_weights.wo
        yield layer_weights.mlp_norm_gain
        yield layer_weights.w_gate
        yield layer_weights.w_up
        yield layer_weights.w_down
    yield weights.final_norm_gain
    yield weights.output_projection


def save_weights(weights: Weights, path) -> None:
    """Write magic, length-prefixed JSON header, then little-endian float32 payload."""
    header = {
        "config": weights.config.to_dict(),
        "tensors": [list(entry) for entry in _tensor_manifest(weights.config)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for tensor in _tensors_in_order(weights):
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_weights(path) -> Weights:
    """Inverse of save_weights; round-trips bit-exactly.

    Raises BadMagicError, TruncatedWeightsError, or HeaderMismatchError for
    the corresponding file defects.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < len(MAGIC):
        raise TruncatedWeightsError(f"file is {len(data)} bytes, shorter than the magic")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {data[: len(MAGIC)]!r}")
    offset = len(MAGIC)

    if len(data) < offset + 4:
        raise TruncatedWeightsError("file ends inside the header length prefix")
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + header_len:
        raise TruncatedWeightsError("file ends inside the JSON header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        declared = [tuple(entry) for entry in header["tensors"]]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise HeaderMismatchError(f"unreadable header: {exc}") from exc
    offset += header_len

    expected = _tensor_manifest(config)
    if declared != expected:
        raise HeaderMismatchError(
            "tensor manifest does not match the declared config "
            f"(first difference: {_first_difference(declared, expected)})"
        )

    arrays = {}
    for name, rows, cols in expected:
        nbytes = rows * cols * 4
        if len(data) < offset + nbytes:
            raise TruncatedWeightsError(
                f"file ends inside tensor {name!r}: need {nbytes} bytes at offset {offset}"
            )
        flat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        arrays[name] = flat.astype(np.float32).reshape(rows, cols)
        offset += nbytes
    if offset != len(data):
        raise HeaderMismatchError(f"{len(data) - offset} trailing bytes after the payload")

    def vec(name):
        return arrays[name].reshape(-1)

    layers = [
        LayerWeights(
            attn_norm_gain=vec(f"layers.{i}.attn_norm_gain"),
            wq=arrays[f"layers.{i}.wq"],
            wk=arrays[f"layers.{i}.wk"],
            wv=arrays[f"layers.{i}.wv"],
            wo=arrays[f"layers.{i}.wo"],
            mlp_norm_gain=vec(f"layers.{i}.mlp_norm_gain"),
            w_gate=arrays[f"layers.{i}.w_gate"],
            w_up=arrays[f"layers.{i}.w_up"],
            w_down=arrays[f"layers.{i}.w_down"],
        )
        for i in range(config.num_layers)
    ]
    return Weights(
        config=config,
        token_embedding=arrays["token_embedding"],
        layers=layers,
        final_norm_gain=vec("final_norm_gain"),
        output_projection=arrays["output_projection"],
    )


def _first_difference(declared, expected) -> str:
    for got, want in zip(declared, expected):
        if got != want:
            return f"declared {got}, expected {want}"
    return f"declared {len(declared)} tensors, expected {len(expected)}"


def weights_equal(a: Weights, b: Weights) -> bool:
    """Bitwise equality of two weight sets (used by round-trip tests)."""
    if a.config != b.config:
        return False
    pairs = zip(_tensors_in_order(a), _tensors_in_order(b))
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in pairs)


def byte_prompt(text: bytes | str) -> list[int]:
    """Byte-level fallback: maps raw bytes to token ids 0..255."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)
