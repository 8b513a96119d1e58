"""Exact permutation arithmetic on {1..N}.

Conventions, fixed once for the whole package:

* All public indices are 1-based.  Internally images are stored 0-based in a
  read-only int64 array; the private array never leaks through the API.
* ``compose(a, b)`` applies ``b`` first: ``compose(a, b)(x) == a(b(x))``.
  Chains therefore read right-to-left, so an interleaved product
  ``s_k . p_k . ... . s_1 . p_1`` is built by composing from the left.
"""

from __future__ import annotations

import itertools

import numpy as np

ENUMERATE_MAX_N = 8  # 8! = 40320; anything larger is a programming error


class Permutation:
    """A bijection on {1..N}, immutable and hashable."""

    __slots__ = ("_img0", "n")

    def __init__(self, images):
        """Build from a 1-based image sequence: images[j-1] = p(j)."""
        img = np.asarray(images, dtype=np.int64)
        if img.ndim != 1 or img.size == 0:
            raise ValueError("images must be a non-empty 1-d sequence")
        n = img.size
        if img.min() < 1 or img.max() > n or np.unique(img).size != n:
            raise ValueError(f"not a bijection on 1..{n}: {images!r}")
        img0 = img - 1
        img0.setflags(write=False)
        object.__setattr__(self, "_img0", img0)
        object.__setattr__(self, "n", n)

    def __setattr__(self, name, value):
        raise AttributeError("Permutation is immutable")

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        if n < 1:
            raise ValueError("n must be >= 1")
        return cls(np.arange(1, n + 1))

    @classmethod
    def _from_zero_based(cls, img0: np.ndarray) -> "Permutation":
        # internal fast path; caller guarantees img0 is a 0-based bijection
        p = object.__new__(cls)
        img0 = np.ascontiguousarray(img0, dtype=np.int64)
        img0.setflags(write=False)
        object.__setattr__(p, "_img0", img0)
        object.__setattr__(p, "n", img0.size)
        return p

    @property
    def images(self) -> tuple[int, ...]:
        """1-based image tuple (p(1), ..., p(N))."""
        return tuple(int(v) + 1 for v in self._img0)

    def __call__(self, j: int) -> int:
        if not 1 <= j <= self.n:
            raise ValueError(f"index {j} out of range 1..{self.n}")
        return int(self._img0[j - 1]) + 1

    def is_identity(self) -> bool:
        return bool(np.array_equal(self._img0, np.arange(self.n)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Permutation)
            and self.n == other.n
            and np.array_equal(self._img0, other._img0)
        )

    def __hash__(self) -> int:
        return hash((self.n, self._img0.tobytes()))

    def __repr__(self) -> str:
        return f"Permutation({list(self.images)})"

    def to_json(self) -> list[int]:
        """1-based integer array, the package-wide wire format."""
        return list(self.images)

    @classmethod
    def from_json(cls, data) -> "Permutation":
        return cls(data)


def compose(a: Permutation, b: Permutation) -> Permutation:
    """compose(a, b)(x) = a(b(x)); b is applied first."""
    if a.n != b.n:
        raise ValueError(f"dimension mismatch: {a.n} vs {b.n}")
    return Permutation._from_zero_based(a._img0[b._img0])


def inverse(p: Permutation) -> Permutation:
    inv = np.empty(p.n, dtype=np.int64)
    inv[p._img0] = np.arange(p.n)
    return Permutation._from_zero_based(inv)


def agreement(p: Permutation, q: Permutation) -> int:
    """Number of points where p and q agree: |{i : p(i) = q(i)}|."""
    if p.n != q.n:
        raise ValueError(f"dimension mismatch: {p.n} vs {q.n}")
    return int(np.count_nonzero(p._img0 == q._img0))


def sample_uniform(N: int, rng: np.random.Generator) -> Permutation:
    """Uniform draw from S_N via an unbiased shuffle; deterministic per seed."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return Permutation._from_zero_based(rng.permutation(N))


def enumerate_all(N: int):
    """All N! permutations in lexicographic order of their image arrays."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > ENUMERATE_MAX_N:
        raise ValueError(
            f"enumerate_all is capped at N={ENUMERATE_MAX_N} "
            f"({ENUMERATE_MAX_N}! elements); got N={N}"
        )
    return [
        Permutation._from_zero_based(np.array(p, dtype=np.int64))
        for p in itertools.permutations(range(N))
    ]
