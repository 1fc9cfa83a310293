"""Numerical substrate: matrix helpers, stable reductions, Jacobi eigensolver
and the pinned SplitMix64 / xoshiro256** random number generator.

Matrices are plain ``numpy.float64`` arrays in C (row-major) order.
"""

import math

import numba
import numpy as np

from .errors import ArgumentError, ShapeError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def as_matrix(a, name="matrix"):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def logsumexp(v):
    """log(sum(exp(v))) evaluated with a max shift so large entries never overflow."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ArgumentError("logsumexp of an empty vector")
    v = v.ravel()
    arg = int(np.argmax(v))
    top = float(v[arg])
    rest = np.exp(v - top)
    rest[arg] = 0.0
    # log1p keeps tiny tails (e.g. 1e-25) that log(1 + x) would round away
    return top + math.log1p(float(np.sum(rest)))


def logsumexp_rows(a):
    """Row-wise :func:`logsumexp` for a 2-D array."""
    rows = np.arange(a.shape[0])
    arg = np.argmax(a, axis=1)
    top = a[rows, arg]
    rest = np.exp(a - top[:, None])
    rest[rows, arg] = 0.0
    return top + np.log1p(np.sum(rest, axis=1))


@numba.njit(cache=True)
def _jacobi(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if math.sqrt(off) < tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return max_sweeps


def sym_eig(a, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as orthonormal columns. Each
    eigenvector's largest-magnitude component is made positive so the
    output is unique for simple spectra.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise ArgumentError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if n and float(np.max(np.abs(a - a.T))) > 1e-9 * scale:
        raise ArgumentError("sym_eig needs a symmetric matrix")
    work = 0.5 * (a + a.T)
    vecs = np.eye(n)
    tol = 1e-12 * max(1.0, float(np.linalg.norm(work)))
    _jacobi(work, vecs, tol, max_sweeps)
    vals = np.diag(work).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, np.ascontiguousarray(vecs)


def splitmix64(state):
    """One SplitMix64 step. Returns ``(new_state, output)`` as Python ints."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


@numba.njit(cache=True)
def _xoshiro_fill(s, out):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    five = np.uint64(5)
    nine = np.uint64(9)
    for i in range(out.shape[0]):
        x = s1 * five
        out[i] = ((x << np.uint64(7)) | (x >> np.uint64(57))) * nine
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3


def derive_seed(seed, *path):
    """Deterministic child seed for a position in an experiment tree."""
    for index in path:
        mix = ((int(seed) & MASK64) ^ ((int(index) + 1) * GOLDEN_GAMMA)) & MASK64
        seed = splitmix64(mix)[1]
    return int(seed) & MASK64


class Rng:
    """xoshiro256** seeded through SplitMix64.

    The stream is fixed by the 64-bit seed. Never share one instance between
    threads; use :meth:`child` to derive independent streams.
    """

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @property
    def state(self):
        return tuple(int(w) for w in self._state)

    def child(self, stream_index):
        """Independent generator for ``(seed, stream_index)``."""
        return Rng(derive_seed(self.seed, stream_index))

    def next_u64(self):
        return int(self.u64(1)[0])

    def u64(self, n):
        out = np.empty(int(n), dtype=np.uint64)
        _xoshiro_fill(self._state, out)
        return out

    def uniform(self, n=None):
        """Doubles in [0, 1) built from the top 53 bits of each output."""
        k = 1 if n is None else int(n)
        u = (self.u64(k) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(u[0]) if n is None else u

    def gaussian(self, n=None):
        """Standard normals by Box-Muller; each pair of uniforms gives two draws."""
        k = 1 if n is None else int(n)
        pairs = (k + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return float(z[0]) if n is None else z[:k]

    def below(self, high):
        """Uniform integer in [0, high)."""
        return min(int(self.uniform() * high), high - 1)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = np.arange(n)
        if n < 2:
            return idx
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def gamma(self, shape):
        """Marsaglia-Tsang gamma sampler (shape >= 1 directly, boosted below 1)."""
        if shape < 1.0:
            return self.gamma(shape + 1.0) * self.uniform() ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.gaussian()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            if u == 0.0:
                continue
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def beta(self, a, b):
        x = self.gamma(a)
        y = self.gamma(b)
        return x / (x + y)
