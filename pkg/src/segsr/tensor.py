"""Dense NCHW tensors, splitmix64 randomness and small shape utilities.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width) in C order, so the flat index of
``(n, c, y, x)`` is ``((n * C + c) * H + y) * W + x``.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when tensor dimensions are invalid or incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


def tensor_new(dims, fill=0.0, dtype="f32") -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid tensor dims {dims}: need four positive sizes")
    return np.full(dims, fill, dtype=DTYPES.get(dtype, dtype))


def _mix(z):
    # works elementwise on uint64 arrays; multiplications wrap mod 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator.

    The k-th output only depends on ``state + k * GAMMA``, which lets
    :meth:`u64_array` produce long runs without a Python loop while staying
    identical to repeated :meth:`next_u64` calls.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MUL1) & MASK64
        z = ((z ^ (z >> 27)) * _MUL2) & MASK64
        return z ^ (z >> 31)

    def u64_array(self, count: int) -> np.ndarray:
        k = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + count * GAMMA) & MASK64
        return out

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.u64_array(count) >> np.uint64(11)).astype(np.float64) / 2.0**53

    def random(self) -> float:
        return (self.next_u64() >> 11) / 2.0**53

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi) (tiny modulo bias is irrelevant here)."""
        return lo + self.next_u64() % (hi - lo)

    def normal(self, count: int) -> np.ndarray:
        # Box-Muller, one normal per uniform pair
        u = self.uniform(2 * count).reshape(2, count)
        return np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            order[i], order[j] = order[j], order[i]
        return order


def rng_next_u64(rng: Rng) -> tuple[int, Rng]:
    """Functional form: returns the next value and a new generator."""
    nxt = Rng(rng.state)
    value = nxt.next_u64()
    return value, nxt


def derive_seed(seed: int, index: int) -> int:
    """Independent stream seed for item ``index`` of a seeded collection."""
    return Rng((int(seed) ^ int(index)) & MASK64).next_u64()


def kaiming_init(rng: Rng, dims, fan_in: int, dtype="f32") -> np.ndarray:
    """Kaiming-uniform values in [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims))
    bound = np.sqrt(6.0 / fan_in)
    u = rng.uniform(count)
    return ((2.0 * u - 1.0) * bound).reshape(dims).astype(DTYPES.get(dtype, dtype))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ShapeError("concat_channels operands need at least one channel")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}: n/h/w differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"cannot concat {a.dtype} with {b.dtype}")
    return np.concatenate([a, b], axis=1)


def argmax_channel(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class index, shape (n, h, w). Ties go to the lowest index."""
    if logits.ndim != 4 or logits.shape[1] < 1:
        raise ShapeError("argmax_channel expects (n, N>=1, h, w) logits")
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=1).astype(np.int64)
