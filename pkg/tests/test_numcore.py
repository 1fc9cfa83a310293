import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxylesskd.errors import ArgumentError, ShapeError
from proxylesskd.numcore import Rng, derive_seed, logsumexp, matmul, splitmix64, sym_eig

MASK = (1 << 64) - 1


def reference_xoshiro(seed, count):
    """Straight transcription of the published SplitMix64 + xoshiro256** C code."""
    sm = seed
    s = []
    for _ in range(4):
        sm = (sm + 0x9E3779B97F4A7C15) & MASK
        z = sm
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & MASK

    out = []
    for _ in range(count):
        out.append((rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = Rng(1).gaussian(9).reshape(3, 3)
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_example(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_against_triple_loop(self):
        rng = Rng(7)
        a = rng.gaussian(64).reshape(8, 8)
        b = rng.gaussian(64).reshape(8, 8)
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), atol=1e-12, rtol=0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(st.integers(0, 2**32))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, seed):
        rng = Rng(seed)
        a, b, c = (rng.gaussian(16).reshape(4, 4) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-9 * max(1.0, np.linalg.norm(left))


class TestLogsumexp:
    def test_single(self):
        assert logsumexp([3.5]) == 3.5

    def test_pair(self):
        assert logsumexp([2.0, 2.0]) == pytest.approx(2.0 + math.log(2.0), abs=1e-15)

    def test_large_values_do_not_overflow(self):
        value = logsumexp([1000.0, 1000.0])
        assert math.isfinite(value)
        assert value == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            logsumexp([])

    @given(st.lists(st.floats(-1e300, 1e300), min_size=1, max_size=20))
    def test_bounds(self, v):
        value = logsumexp(v)
        assert max(v) <= value <= max(v) + math.log(len(v))


class TestSymEig:
    def test_identity(self):
        vals, _ = sym_eig(np.eye(4))
        np.testing.assert_allclose(vals, 1.0, atol=1e-12)

    def test_diagonal(self):
        vals, vecs = sym_eig(np.diag([1.0, 3.0]))
        np.testing.assert_allclose(vals, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(vecs), [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual(self, seed):
        a = Rng(seed).gaussian(25).reshape(5, 5)
        a = a + a.T
        vals, vecs = sym_eig(a)
        norm = np.linalg.norm(a, 2)
        for lam, v in zip(vals, vecs.T):
            assert np.linalg.norm(a @ v - lam * v) <= 1e-9 * norm
        assert np.all(np.diff(vals) <= 0)

    @given(st.integers(0, 2**32), st.integers(1, 12))
    @settings(max_examples=30, deadline=None)
    def test_trace_and_orthonormality(self, seed, n):
        a = Rng(seed).gaussian(n * n).reshape(n, n)
        a = a @ a.T
        vals, vecs = sym_eig(a)
        assert abs(np.sum(vals) - np.trace(a)) <= 1e-9 * max(1.0, np.trace(a))
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(ArgumentError):
            sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_rejects_non_square(self):
        with pytest.raises(ArgumentError):
            sym_eig(np.ones((2, 3)))


class TestRng:
    def test_splitmix_reference_value(self):
        assert splitmix64(0)[1] == 0xE220A8397B1DCDAF

    @pytest.mark.parametrize("seed", [0, 1, 42, 2**64 - 1])
    def test_matches_reference_transcription(self, seed):
        assert Rng(seed).u64(50).tolist() == reference_xoshiro(seed, 50)

    def test_scalar_and_bulk_streams_agree(self):
        a, b = Rng(9), Rng(9)
        assert [a.next_u64() for _ in range(20)] == b.u64(20).tolist()

    def test_determinism(self):
        assert Rng(123).u64(1000).tolist() == Rng(123).u64(1000).tolist()

    def test_gaussian_moments(self):
        z = Rng(2024).gaussian(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_uniform_range(self):
        u = Rng(5).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_children_are_distinct_and_stable(self):
        root = Rng(77)
        assert root.child(0).u64(4).tolist() == Rng(77).child(0).u64(4).tolist()
        assert root.child(0).u64(4).tolist() != root.child(1).u64(4).tolist()
        assert derive_seed(77, 3, 4) == derive_seed(derive_seed(77, 3), 4)

    def test_permutation_is_permutation(self):
        perm = Rng(3).permutation(100)
        assert sorted(perm.tolist()) == list(range(100))

    def test_beta_mean(self):
        rng = Rng(11)
        draws = [rng.beta(2.0, 5.0) for _ in range(20_000)]
        assert abs(np.mean(draws) - 2.0 / 7.0) < 0.01
