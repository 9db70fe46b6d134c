import struct

import numpy as np
import pytest

from cefgl import compress
from cefgl.errors import BadBits, MalformedPayload, NonFiniteInput, ZeroVector

# Wire-format accounting used to derive expected byte counts independently.
HEADER_BYTES = 4 + 2 + 1 + 2  # magic, version, scheme, tensor count


def tensor_meta_bytes(name: str) -> int:
    return 2 + len(name.encode()) + 4 + 4


def quant_body_bytes(n: int, r: int) -> int:
    return 1 + 8 + (n + 7) // 8 + (n * r + 7) // 8


class TestQuantize:
    def test_two_coordinate_example(self):
        # ||x|| = 5; scaled magnitudes 4*(3/5, 4/5) = (2.4, 3.2) round to (2, 3).
        q = compress.quantize(np.array([3.0, 4.0]), r=2)
        assert list(q.levels) == [2, 3]
        assert q.norm == 5.0
        assert np.array_equal(compress.dequantize(q), [2.5, 3.75])

    def test_sign_bit(self):
        q = compress.quantize(np.array([-3.0, 4.0]), r=2)
        assert np.array_equal(compress.dequantize(q), [-2.5, 3.75])
        assert list(q.signs) == [1, 0]

    def test_full_scale_coordinate_saturates(self):
        # A coordinate equal to the norm hits level 2**r, which is clamped
        # to the top representable level; the residual stays under norm/2**r.
        for r in (1, 4, 8):
            q = compress.quantize(np.array([1.0, 0.0, 0.0]), r=r)
            out = compress.dequantize(q)
            assert out[0] == (2**r - 1) / 2**r
            assert out[1] == out[2] == 0.0
            assert abs(out[0] - 1.0) <= 1.0 / 2**r

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            compress.quantize(np.zeros(4), r=4)
        with pytest.raises(ZeroVector):
            compress.quantize(np.array([]), r=4)

    def test_bit_range_enforced(self):
        with pytest.raises(BadBits):
            compress.quantize(np.ones(3), r=0)
        with pytest.raises(BadBits):
            compress.quantize(np.ones(3), r=33)

    def test_deterministic_error_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            x = rng.uniform(-1.0, 1.0, size=256)
            r = int(rng.choice([2, 4, 8]))
            out = compress.dequantize(compress.quantize(x, r))
            norm = np.linalg.norm(x)
            assert np.max(np.abs(out - x)) <= norm / 2 ** (r + 1) + 1e-12

    def test_high_precision_relative_error(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, size=256)
            out = compress.dequantize(compress.quantize(x, 32))
            assert np.linalg.norm(out - x) <= 1e-6 * np.linalg.norm(x)

    def test_all_zero_levels_dequantize_to_zeros(self):
        q = compress.QuantizedVector(
            r=3, norm=2.0, signs=np.zeros(4, dtype=np.uint8), levels=np.zeros(4, dtype=np.uint64)
        )
        assert np.array_equal(compress.dequantize(q), np.zeros(4))

    def test_stochastic_mode_is_unbiased(self):
        x = np.array([0.31, -0.7, 0.12, 0.05, -0.44, 0.29, 0.9, -0.1])
        rng = np.random.default_rng(6)
        draws = np.stack(
            [
                compress.dequantize(compress.quantize(x, 3, mode="stochastic", rng=rng))
                for _ in range(10_000)
            ]
        )
        mean = draws.mean(axis=0)
        stderr = draws.std(axis=0) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(mean - x) <= 3.0 * stderr + 1e-12)

    def test_stochastic_mode_requires_rng(self):
        with pytest.raises(ValueError):
            compress.quantize(np.ones(3), 4, mode="stochastic")


class TestSparsify:
    def test_threshold_zero_keeps_all_nonzeros(self):
        m = np.array([[0.5, 0.0], [-0.2, 1.0]])
        s = compress.sparsify_threshold(m, 0.0)
        assert s.nnz == 3
        assert np.array_equal(s.to_dense(), m)

    def test_threshold_drops_small_magnitudes(self):
        m = np.array([[0.5, -0.01], [0.0, 2.0]])
        s = compress.sparsify_threshold(m, 0.1)
        assert list(s.indices) == [0, 3]
        assert list(s.values) == [0.5, 2.0]

    def test_threshold_huge_cut_empties(self):
        s = compress.sparsify_threshold(np.ones((3, 3)), 1e300)
        assert s.nnz == 0
        assert np.array_equal(s.to_dense(), np.zeros((3, 3)))

    def test_topk_full_k_is_identity_support(self):
        m = np.array([[1.0, 0.0], [-2.0, 3.0]])
        s = compress.sparsify_topk(m, 4)
        assert s.nnz == 3  # zeros never enter the support
        assert np.array_equal(s.to_dense(), m)

    def test_topk_zero_is_empty(self):
        assert compress.sparsify_topk(np.ones((2, 2)), 0).nnz == 0

    def test_topk_selects_largest_magnitudes(self):
        m = np.array([[1.0, -3.0], [2.0, 0.0]])
        s = compress.sparsify_topk(m, 2)
        assert list(s.indices) == [1, 2]
        assert list(s.values) == [-3.0, 2.0]

    def test_topk_breaks_ties_by_flat_index(self):
        m = np.array([[2.0, -2.0], [2.0, 1.0]])
        s = compress.sparsify_topk(m, 2)
        assert list(s.indices) == [0, 1]

    def test_topk_is_best_k_sparse_approximation(self):
        # Brute-force oracle: try every support of size k on 3x3 matrices.
        from itertools import combinations

        rng = np.random.default_rng(7)
        for _ in range(25):
            m = rng.normal(size=(3, 3))
            flat = m.ravel()
            for k in range(0, 4):
                best = min(
                    np.linalg.norm(np.delete(flat, support))
                    for support in combinations(range(9), k)
                )
                ours = np.linalg.norm(m - compress.sparsify_topk(m, k).to_dense())
                assert ours <= best + 1e-12


class TestPayloads:
    def test_dense_bit_count(self):
        p = compress.encode_payload({"a": np.ones((2, 2))}, "dense")
        expected = HEADER_BYTES + tensor_meta_bytes("a") + 4 * 8
        assert compress.payload_bits(p) == expected * 8

    def test_quantized_bit_count_n1024(self):
        x = np.random.default_rng(8).normal(size=(32, 32))
        p = compress.encode_payload({"t": x}, "quantized", r=4)
        expected = HEADER_BYTES + tensor_meta_bytes("t") + quant_body_bytes(1024, 4)
        assert compress.payload_bits(p) == expected * 8
        # Per-element cost is 1 sign + 4 level bits for n divisible by 8.
        assert quant_body_bytes(1024, 4) * 8 == 8 + 64 + 1024 * 5

    def test_empty_payload_is_header_only(self):
        p = compress.encode_payload({}, "dense")
        assert compress.payload_bits(p) == HEADER_BYTES * 8

    def test_monotone_compression(self):
        rng = np.random.default_rng(9)
        for n in (16, 17, 31, 64, 1000):
            x = rng.normal(size=(1, n))
            bits = {
                r: compress.payload_bits(compress.encode_payload({"x": x}, "quantized", r=r))
                for r in (4, 8, 32)
            }
            dense = compress.payload_bits(compress.encode_payload({"x": x}, "dense"))
            assert bits[4] < bits[8] < bits[32] < dense

    def test_dense_roundtrip_is_exact(self):
        rng = np.random.default_rng(10)
        tensors = {"w": rng.normal(size=(3, 5)), "b": rng.normal(size=(1, 5))}
        out = compress.decode_payload(compress.encode_payload(tensors, "dense"))
        assert set(out) == {"w", "b"}
        assert np.array_equal(out["w"], tensors["w"])
        assert np.array_equal(out["b"], tensors["b"])

    def test_quantized_roundtrip_matches_dequantize(self):
        x = np.array([[3.0, 4.0]])
        out = compress.decode_payload(compress.encode_payload({"x": x}, "quantized", r=2))
        assert np.array_equal(out["x"], [[2.5, 3.75]])

    def test_zero_tensor_marker(self):
        tensors = {"z": np.zeros((4, 4)), "x": np.ones((2, 2))}
        for scheme in ("quantized", "lowrank_quantized"):
            out = compress.decode_payload(compress.encode_payload(tensors, scheme, r=8))
            assert np.array_equal(out["z"], np.zeros((4, 4)))
        p = compress.encode_payload({"z": np.zeros((4, 4))}, "quantized", r=8)
        assert compress.payload_bits(p) == (HEADER_BYTES + tensor_meta_bytes("z") + 1) * 8

    def test_lowrank_reconstruction_quality(self):
        rng = np.random.default_rng(11)
        base = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 6))  # exactly rank 3
        p = compress.encode_payload({"m": base}, "lowrank_quantized", r=32, tau_lowrank=1e-6)
        out = compress.decode_payload(p)["m"]
        assert np.linalg.norm(out - base) <= 1e-6 * np.linalg.norm(base)

    def test_lowrank_truncates_before_shipping(self):
        u, v = np.ones((6, 1)), np.ones((5, 1))
        spread = u @ v.T + 0.001 * np.eye(6, 5)  # dominant rank-1 plus noise
        p = compress.encode_payload({"m": spread}, "lowrank_quantized", r=32, tau_lowrank=0.5)
        out = compress.decode_payload(p)["m"]
        assert np.linalg.matrix_rank(out, tol=1e-6) == 1

    def test_lowrank_bias_rows_pass_through_quantized(self):
        bias = np.array([[0.5, -0.25, 0.125]])
        p = compress.encode_payload({"b": bias}, "lowrank_quantized", r=32, tau_lowrank=0.9)
        out = compress.decode_payload(p)["b"]
        assert np.allclose(out, bias, atol=1e-9)

    def test_truncated_stream_is_malformed(self):
        blob = compress.encode_payload({"x": np.ones((2, 2))}, "dense").to_bytes()
        for cut in (1, 8, len(blob) - 1):
            with pytest.raises(MalformedPayload):
                compress.decode_payload(blob[:cut])

    def test_bad_magic_and_version(self):
        blob = compress.encode_payload({"x": np.ones((1, 1))}, "dense").to_bytes()
        with pytest.raises(MalformedPayload):
            compress.decode_payload(b"XXXX" + blob[4:])
        bad_version = blob[:4] + struct.pack("<H", 99) + blob[6:]
        with pytest.raises(MalformedPayload):
            compress.decode_payload(bad_version)

    def test_trailing_garbage_is_malformed(self):
        blob = compress.encode_payload({"x": np.ones((1, 1))}, "dense").to_bytes()
        with pytest.raises(MalformedPayload):
            compress.decode_payload(blob + b"\x00")

    def test_non_finite_tensors_rejected(self):
        with pytest.raises(NonFiniteInput):
            compress.encode_payload({"x": np.array([[np.nan]])}, "dense")

    def test_codec_fuzz_roundtrip(self):
        rng = np.random.default_rng(12)
        schemes = ("dense", "quantized", "lowrank_quantized")
        for trial in range(1000):
            scheme = schemes[trial % 3]
            tensors = {}
            for i in range(int(rng.integers(1, 4))):
                rows = int(rng.integers(1, 9))
                cols = int(rng.integers(1, 9))
                if rng.random() < 0.15:
                    mat = np.zeros((rows, cols))
                else:
                    mat = rng.normal(size=(rows, cols))
                tensors[f"t{i}"] = mat
            r = int(rng.integers(1, 33))
            payload = compress.encode_payload(tensors, scheme, r=r, tau_lowrank=0.01)
            blob = payload.to_bytes()
            rebuilt = compress.CompressedPayload.from_bytes(blob)
            assert rebuilt.to_bytes() == blob
            assert rebuilt.kind == scheme
            decoded = compress.decode_payload(rebuilt)
            assert list(decoded) == list(tensors)
            for name, mat in tensors.items():
                assert decoded[name].shape == mat.shape
                assert np.isfinite(decoded[name]).all()
                if scheme == "dense":
                    assert np.array_equal(decoded[name], mat)
