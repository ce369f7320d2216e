"""Dense float64 kernels, activations, losses, and seeded random numbers.

Every numeric value in this package travels as a C-contiguous float64
numpy array.  Matrix products go through :func:`matmul`, which uses a
fixed, documented summation order so that results are reproducible
bit-for-bit and can be checked exactly against a scalar reference
implementation.  No BLAS is used on this path on purpose.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

DTYPE = np.float64

MATRIX_MAGIC = b"RAM1"

# Below this element count the broadcast strategy of matmul is cheaper
# than the rank-1 update loop.  Both strategies produce identical bits.
_BCAST_LIMIT = 1 << 18


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


def require(condition, message):
    if not condition:
        raise ContractViolation(message)


def as_matrix(x):
    """Coerce to a C-contiguous float64 2-D array (no copy when already one)."""
    a = np.ascontiguousarray(x, dtype=DTYPE)
    require(a.ndim == 2, f"expected a 2-D matrix, got shape {a.shape}")
    return a


class Rng:
    """Seeded random stream with platform-independent output.

    Backed by numpy's PCG64 bit generator: the same seed produces the
    same draw sequence everywhere.  Child streams derived with
    :meth:`child` depend only on the parent seed and the key, never on
    how many draws the parent has made, so independent pipeline pieces
    can be reseeded without coordination.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, *keys):
        """Derive an independent stream from this seed and a key path."""
        tag = "/".join(str(k) for k in keys)
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little") >> 1)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)


def matmul(a, b):
    """Matrix product with a fixed, oracle-checkable summation order.

    Element (i, j) is the sum over k of ``a[i, k] * b[k, j]``, accumulated
    sequentially in increasing k from an exact zero.  That is the same
    floating-point order as the scalar triple loop, so results are
    bit-reproducible across platforms and exactly equal to that oracle.
    Two internal strategies share the per-element order and therefore the
    bits: a broadcast-multiply with a middle-axis sum (numpy reduces a
    non-innermost axis strictly sequentially) for small temporaries, and
    a rank-1 update loop otherwise.  The broadcast form is never used
    when the result has a single column, where numpy would switch to
    pairwise summation.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    require(
        a.shape[1] == b.shape[0],
        f"matmul dimension mismatch: {a.shape} x {b.shape}",
    )
    m, k = a.shape
    n = b.shape[1]
    if n > 1 and m * k * n <= _BCAST_LIMIT:
        out = (a[:, :, None] * b[None, :, :]).sum(axis=1)
    else:
        out = np.zeros((m, n), dtype=DTYPE)
        for q in range(k):
            out += a[:, q, None] * b[q, None, :]
    require(np.all(np.isfinite(out)), "matmul produced non-finite values")
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": relu,
}


def activation(kind, x):
    """Elementwise sigmoid, tanh, or relu."""
    require(kind in ACTIVATIONS, f"unknown activation {kind!r}")
    return ACTIVATIONS[kind](np.asarray(x, dtype=DTYPE))


def softmax_rows(x):
    """Row-wise softmax with max subtraction; each row sums to 1."""
    x = as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, targets):
    """Mean negative log probability of the target label per row.

    Probabilities are clamped at 1e-30 before the log so a confidently
    wrong model yields a large finite loss instead of infinity.
    """
    probs = as_matrix(probs)
    targets = np.asarray(targets)
    require(targets.ndim == 1 and len(targets) == probs.shape[0],
            "need one target label per probability row")
    require(np.issubdtype(targets.dtype, np.integer), "targets must be integer labels")
    require(bool(np.all((targets >= 0) & (targets < probs.shape[1]))),
            "target label out of range")
    p = probs[np.arange(len(targets)), targets]
    return float(np.mean(-np.log(np.maximum(p, 1e-30))))


def init_glorot(rng, rows, cols):
    """Uniform Glorot initialization on +-sqrt(6 / (rows + cols))."""
    require(rows >= 1 and cols >= 1, "init_glorot needs positive dimensions")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, (rows, cols)).astype(DTYPE)


def write_matrix(dest, m):
    """Write a matrix in the binary format: b"RAM1", u32 rows, u32 cols (little
    endian), then the float64 row-major payload."""
    m = as_matrix(m)
    payload = struct.pack("<4sII", MATRIX_MAGIC, m.shape[0], m.shape[1])
    payload += m.astype("<f8").tobytes(order="C")
    if hasattr(dest, "write"):
        dest.write(payload)
    else:
        Path(dest).write_bytes(payload)


def read_matrix(src):
    """Read a matrix written by :func:`write_matrix`."""
    if hasattr(src, "read"):
        header = src.read(12)
        require(len(header) == 12, "truncated matrix header")
        magic, rows, cols = struct.unpack("<4sII", header)
        require(magic == MATRIX_MAGIC, f"bad matrix magic {magic!r}")
        raw = src.read(rows * cols * 8)
        require(len(raw) == rows * cols * 8, "truncated matrix payload")
    else:
        data = Path(src).read_bytes()
        require(len(data) >= 12, "truncated matrix header")
        magic, rows, cols = struct.unpack("<4sII", data[:12])
        require(magic == MATRIX_MAGIC, f"bad matrix magic {magic!r}")
        raw = data[12:12 + rows * cols * 8]
        require(len(raw) == rows * cols * 8, "truncated matrix payload")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(DTYPE)
