import numpy as np
import pytest

from chai.errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    HeaderMismatchError,
    TruncatedWeightsError,
)
from chai.model import (
    ModelConfig,
    byte_prompt,
    head_block,
    init_random,
    load_weights,
    make_redundant,
    save_weights,
    weights_equal,
)
from chai.plan import ClusterPlan
from helpers import grouped_plan, small_config, small_weights


def splitmix64_reference(seed, count):
    """Independent pure-int replay of the documented init generator."""
    mask = (1 << 64) - 1
    out = []
    for n in range(1, count + 1):
        z = (seed + n * 0x9E3779B97F4A7C15) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        z = z ^ (z >> 31)
        out.append((z >> 11) / float(1 << 53) * 2.0 - 1.0)
    return out


class TestConfig:
    def test_dim_consistency_enforced(self):
        with pytest.raises(ConfigError):
            small_config(model_dim=33)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigError):
            small_config(head_dim=7, model_dim=28)

    def test_nonpositive_field_rejected(self):
        with pytest.raises(ConfigError):
            small_config(vocab_size=0)

    def test_fingerprint_tracks_config(self):
        assert small_config().fingerprint() == small_config().fingerprint()
        assert small_config().fingerprint() != small_config(vocab_size=33).fingerprint()


class TestInitRandom:
    def test_same_seed_bitwise_equal(self):
        assert weights_equal(small_weights(seed=3), small_weights(seed=3))

    def test_different_seeds_differ(self):
        a, b = small_weights(seed=0), small_weights(seed=1)
        assert not np.array_equal(a.token_embedding, b.token_embedding)

    def test_embedding_matches_reference_generator(self):
        config = small_config(num_heads=4, head_dim=16, model_dim=64, vocab_size=8)
        weights = init_random(config, seed=0)
        n = config.vocab_size * config.model_dim
        reference = np.array(splitmix64_reference(0, n)) / np.sqrt(64.0)
        want = reference.astype(np.float32).reshape(8, 64)
        np.testing.assert_array_equal(weights.token_embedding, want)
        assert abs(weights.token_embedding.mean() - want.mean()) == 0.0

    def test_values_finite_and_scaled(self):
        weights = small_weights()
        bound = 1.0 / np.sqrt(weights.config.model_dim)
        for layer in weights.layers:
            assert np.all(np.isfinite(layer.wq))
            assert np.max(np.abs(layer.wq)) <= bound

    def test_norm_gains_start_at_one(self):
        weights = small_weights()
        np.testing.assert_array_equal(weights.final_norm_gain, np.ones(32, dtype=np.float32))


class TestMakeRedundant:
    def test_singleton_plan_is_identity(self):
        weights = small_weights()
        plan = ClusterPlan.singleton(2, 4)
        assert weights_equal(make_redundant(weights, plan), weights)

    def test_single_cluster_duplicates_all_blocks(self):
        weights = small_weights()
        plan = grouped_plan(2, 4, [1, 1])
        redundant = make_redundant(weights, plan)
        wq = redundant.layers[0].wq
        for head in range(1, 4):
            np.testing.assert_array_equal(head_block(wq, head, 8), head_block(wq, 0, 8))

    def test_untouched_tensors_preserved(self):
        weights = small_weights()
        redundant = make_redundant(weights, grouped_plan(2, 4, [2, 2]))
        np.testing.assert_array_equal(redundant.layers[0].wv, weights.layers[0].wv)
        np.testing.assert_array_equal(redundant.layers[0].wo, weights.layers[0].wo)
        np.testing.assert_array_equal(redundant.token_embedding, weights.token_embedding)

    def test_layer_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            make_redundant(small_weights(), ClusterPlan.singleton(3, 4))

    def test_head_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            make_redundant(small_weights(), ClusterPlan.singleton(2, 8))


class TestWeightFile:
    def test_round_trip_bitwise(self, tmp_path):
        weights = small_weights(seed=11)
        path = tmp_path / "w.bin"
        save_weights(weights, path)
        assert weights_equal(load_weights(path), weights)

    def test_round_trip_over_random_small_configs(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(8):
            heads = int(rng.integers(1, 5))
            head_dim = int(rng.integers(1, 5)) * 2
            config = ModelConfig(
                num_layers=int(rng.integers(1, 4)),
                num_heads=heads,
                head_dim=head_dim,
                model_dim=heads * head_dim,
                ffn_dim=int(rng.integers(4, 40)),
                vocab_size=int(rng.integers(2, 50)),
                max_seq_len=16,
            )
            weights = init_random(config, seed=i)
            path = tmp_path / f"w{i}.bin"
            save_weights(weights, path)
            assert weights_equal(load_weights(path), weights)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        save_weights(small_weights(), path)
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTCHAI!"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_weights(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        save_weights(small_weights(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 17])
        with pytest.raises(TruncatedWeightsError):
            load_weights(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "tiny.bin"
        path.write_bytes(b"CHAIWGT1\xff\x00\x00\x00{}")
        with pytest.raises(TruncatedWeightsError):
            load_weights(path)

    def test_header_declaring_other_dims_than_payload(self, tmp_path):
        # Header config says model_dim=64 but the manifest/payload were
        # written for model_dim=32: a shape mismatch, not truncation.
        import json
        import struct

        path = tmp_path / "lying.bin"
        save_weights(small_weights(), path)
        raw = path.read_bytes()
        (header_len,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + header_len])
        header["config"]["model_dim"] = 64
        header["config"]["head_dim"] = 16
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(raw[:8] + struct.pack("<I", len(new_header)) + new_header + raw[12 + header_len :])
        with pytest.raises(HeaderMismatchError):
            load_weights(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "extra.bin"
        save_weights(small_weights(), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(HeaderMismatchError):
            load_weights(path)


def test_byte_prompt_maps_bytes_to_ids():
    assert byte_prompt("ab") == [97, 98]
    assert byte_prompt(b"\x00\xff") == [0, 255]
