"""Dense float64 matrix helpers and seeded random streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks and the numerically stable variants the rest of
the engine relies on.
"""
from __future__ import annotations

import hashlib

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class ParameterError(ValueError):
    """Raised on invalid scalar arguments (ranges, counts, probabilities)."""


class UndefinedSimilarityError(ValueError):
    """Raised when a cosine similarity is requested for two zero vectors."""


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def transpose(a) -> np.ndarray:
    # copy so the result owns row-major storage
    return np.ascontiguousarray(as_matrix(a).T)


def softmax_rows(a) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``-inf`` (masked positions) receive exactly zero weight
    as long as every row keeps at least one finite entry.
    """
    a = np.asarray(a, dtype=DTYPE)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of two zero vectors is undefined")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class SeededRng:
    """A Philox (counter-based) generator addressed by ``(seed, stream)``.

    Named child streams are derived from the root seed and a stable hash of
    the stream name, so adding a new stream never perturbs existing ones.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "SeededRng":
        key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
        return SeededRng(self.seed, self.stream + (key,))

    # thin passthroughs keep call sites readable
    def uniform(self, lo, hi, size=None):
        return self.generator.uniform(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def get_state(self) -> dict:
        """JSON-serialisable generator state (arrays become lists of ints)."""
        st = self.generator.bit_generator.state
        return {
            "bit_generator": st["bit_generator"],
            "state": {k: np.asarray(v).tolist() for k, v in st["state"].items()},
            "buffer": np.asarray(st["buffer"]).tolist(),
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        st = dict(state)
        st["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()}
        st["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
        self.generator.bit_generator.state = st


def uniform_matrix(rng: SeededRng, rows: int, cols: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ParameterError(f"uniform_matrix requires lo < hi, got lo={lo}, hi={hi}")
    if rows <= 0 or cols <= 0:
        raise ParameterError(f"uniform_matrix requires positive dims, got {rows}x{cols}")
    return rng.uniform(lo, hi, size=(rows, cols)).astype(DTYPE, copy=False)


def content_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
