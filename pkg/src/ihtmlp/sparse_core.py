"""Sparse iterates, hard thresholding, streaming top-s selection, count sketch.

Everything in this module operates on a flat coordinate space of dimension
``dim`` (for a fused two-layer net that is d*m; for a vector-output net it is
d*m + m*c).  The solver never materializes a dense vector of that size: dense
gradients are consumed one block at a time through :class:`TopSSelector` or
:class:`CountSketch`.

Determinism contract: all top-s selections break magnitude ties toward the
lower flat index, and streaming consumers require block-major,
coordinate-ascending offer order so that runs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SparseWeights",
    "TopSSelector",
    "CountSketch",
    "hard_threshold",
    "sketch_budget",
]


class SparseWeights:
    """Immutable sparse vector: sorted coordinate indices plus their values.

    Invariants enforced at construction:
      * indices strictly increasing, all in ``[0, dim)``;
      * no stored value is exactly zero (zeros are dropped by the factories);
      * all values finite.
    """

    __slots__ = ("dim", "indices", "values")

    def __init__(self, dim, indices, values, _validate=True):
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if _validate:
            if indices.ndim != 1 or values.ndim != 1 or len(indices) != len(values):
                raise ValueError("indices and values must be 1-d and equal length")
            if len(indices) > 0:
                if indices[0] < 0 or indices[-1] >= dim:
                    raise ValueError(f"index out of range for dim={dim}")
                if np.any(np.diff(indices) <= 0):
                    raise ValueError("indices must be strictly increasing")
            if np.any(values == 0.0):
                raise ValueError("exact zeros may not be stored")
            if not np.all(np.isfinite(values)):
                bad = int(indices[~np.isfinite(values)][0])
                raise ValueError(f"non-finite value at coordinate {bad}")
        self.dim = int(dim)
        self.indices = indices
        self.values = values

    @classmethod
    def empty(cls, dim):
        return cls(dim, np.empty(0, np.int64), np.empty(0, np.float64), _validate=False)

    @classmethod
    def from_dense(cls, v):
        """All nonzero coordinates of a dense vector (test/oracle helper)."""
        v = np.asarray(v, dtype=np.float64)
        idx = np.flatnonzero(v)
        return cls(v.size, idx.astype(np.int64), v[idx])

    @property
    def nnz(self):
        return len(self.indices)

    def densify(self):
        """Dense copy; intended for small instances and oracle checks only."""
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def block(self, i, block_dim):
        """Entries falling in block ``i`` of width ``block_dim``.

        Returns ``(local_indices, values)`` with local indices in
        ``[0, block_dim)``.  Views into the underlying arrays, do not mutate.
        """
        lo = np.searchsorted(self.indices, i * block_dim, side="left")
        hi = np.searchsorted(self.indices, (i + 1) * block_dim, side="left")
        return self.indices[lo:hi] - i * block_dim, self.values[lo:hi]

    def blocks_touched(self, block_dim, lo_coord=0, hi_coord=None):
        """Sorted distinct block ids holding at least one entry."""
        hi_coord = self.dim if hi_coord is None else hi_coord
        lo = np.searchsorted(self.indices, lo_coord, side="left")
        hi = np.searchsorted(self.indices, hi_coord, side="left")
        return np.unique((self.indices[lo:hi] - lo_coord) // block_dim)

    def norm(self):
        return float(np.linalg.norm(self.values))

    def __eq__(self, other):
        return (
            isinstance(other, SparseWeights)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"SparseWeights(dim={self.dim}, nnz={self.nnz})"


def hard_threshold(v, s):
    """Keep the ``s`` largest-magnitude coordinates of a dense vector.

    Ties in magnitude are broken toward the lower index; exact zeros are never
    stored, so a vector with fewer than ``s`` nonzeros comes back whole.
    """
    if s < 1:
        raise ValueError("sparsity budget s must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise ValueError(f"non-finite value at coordinate {bad}")
    mag = np.abs(v)
    if s < v.size:
        # lexsort: primary key descending magnitude, secondary ascending index
        order = np.lexsort((np.arange(v.size), -mag))[:s]
    else:
        order = np.arange(v.size)
    keep = order[v[order] != 0.0]
    keep.sort()
    return SparseWeights(v.size, keep.astype(np.int64), v[keep])


class TopSSelector:
    """Streaming top-s accumulator equivalent to whole-vector thresholding.

    Candidates must arrive in strictly increasing flat-index order (the
    block-major, coordinate-ascending order the gradient pass produces); a
    repeated or out-of-order index is rejected because it would break the
    exact equivalence with :func:`hard_threshold` on the concatenated vector.
    Peak memory is ``O(s + largest offered block)``.
    """

    def __init__(self, capacity, dim):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._idx = np.empty(0, np.int64)
        self._val = np.empty(0, np.float64)
        self._last = -1

    def offer(self, index, value):
        """Offer a single candidate coordinate."""
        self.offer_block(int(index), np.asarray([value], dtype=np.float64))

    def offer_block(self, start, values):
        """Offer a contiguous block of candidates ``start, start+1, ...``."""
        values = np.asarray(values, dtype=np.float64)
        if start <= self._last:
            raise ValueError(
                f"coordinate {start} offered out of order (last was {self._last}); "
                "each coordinate may be offered at most once per pass"
            )
        end = start + values.size
        if end > self.dim:
            raise ValueError("block exceeds coordinate space")
        if not np.all(np.isfinite(values)):
            bad = start + int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite value at coordinate {bad}")
        self._last = end - 1
        nz = np.flatnonzero(values)
        if nz.size:
            self._merge(start + nz.astype(np.int64), values[nz])

    def offer_sparse(self, indices, values):
        """Offer candidates at explicit (ascending) flat indices."""
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if indices.size == 0:
            return
        if indices[0] <= self._last or np.any(np.diff(indices) <= 0):
            raise ValueError("indices must be strictly increasing across the pass")
        if indices[-1] >= self.dim:
            raise ValueError("index out of range")
        if not np.all(np.isfinite(values)):
            bad = int(indices[~np.isfinite(values)][0])
            raise ValueError(f"non-finite value at coordinate {bad}")
        self._last = int(indices[-1])
        keep = values != 0.0
        if np.any(keep):
            self._merge(indices[keep], values[keep])

    def _merge(self, idx, val):
        idx = np.concatenate([self._idx, idx])
        val = np.concatenate([self._val, val])
        if idx.size > self.capacity:
            order = np.lexsort((idx, -np.abs(val)))[: self.capacity]
            idx, val = idx[order], val[order]
        self._idx, self._val = idx, val

    def extract(self):
        """Finish the pass: the retained entries as a :class:`SparseWeights`."""
        order = np.argsort(self._idx)
        return SparseWeights(self.dim, self._idx[order], self._val[order], _validate=False)


def sketch_budget(dim, s):
    """Total cell budget 4*s*log2(dim/s), the memory target for the sketch."""
    if not 1 <= s < dim:
        raise ValueError("need 1 <= s < dim for a meaningful sketch")
    return int(np.ceil(4.0 * s * np.log2(dim / s)))


# Multiply-add-shift hashing constants: 64-bit state, top 32 bits kept.
_SHIFT = np.uint64(32)
_ONE = np.uint64(1)


class CountSketch:
    """Signed hashed accumulator for a ``dim``-dimensional vector.

    ``depth`` rows of ``width`` buckets; every coordinate update lands in one
    bucket per row with a pseudorandom sign, and a coordinate query is the
    median over rows of the signed bucket contents.  Updates are linear in the
    accumulated vector for fixed seeds.  The default geometry is 3 rows
    splitting the ``4*s*log2(dim/s)`` cell budget.
    """

    def __init__(self, dim, s, seed=0, depth=3, budget=None):
        self.dim = int(dim)
        self.depth = int(depth)
        self.budget = sketch_budget(dim, s) if budget is None else int(budget)
        self.width = max(1, self.budget // self.depth)
        self.table = np.zeros((self.depth, self.width))
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        raw = rng.integers(0, 2**63, size=(self.depth, 4), dtype=np.uint64)
        # odd multipliers give full-period multiply-shift mixing
        self._mul_idx = raw[:, 0] | _ONE
        self._add_idx = raw[:, 1]
        self._mul_sgn = raw[:, 2] | _ONE
        self._add_sgn = raw[:, 3]

    def _hash(self, indices):
        """Per-row buckets and signs for a batch of coordinates."""
        x = np.asarray(indices, dtype=np.uint64)[None, :]
        h = (self._mul_idx[:, None] * x + self._add_idx[:, None]) >> _SHIFT
        buckets = (h % np.uint64(self.width)).astype(np.int64)
        g = (self._mul_sgn[:, None] * x + self._add_sgn[:, None]) >> _SHIFT
        signs = 1.0 - 2.0 * (g & _ONE).astype(np.float64)
        return buckets, signs

    def _check(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.dim):
            raise ValueError(f"sketch index out of range [0, {self.dim})")
        return indices

    def update(self, index, delta):
        """Accumulate ``delta`` at one coordinate."""
        self.update_many(np.asarray([index]), np.asarray([delta], dtype=np.float64))

    def update_many(self, indices, deltas):
        """Accumulate deltas at distinct coordinates (one blockwise batch)."""
        indices = self._check(indices)
        deltas = np.asarray(deltas, dtype=np.float64)
        if indices.size == 0:
            return
        buckets, signs = self._hash(indices)
        for r in range(self.depth):
            np.add.at(self.table[r], buckets[r], signs[r] * deltas)

    def update_block(self, start, deltas):
        deltas = np.asarray(deltas, dtype=np.float64)
        nz = np.flatnonzero(deltas)
        self.update_many(start + nz.astype(np.int64), deltas[nz])

    def row_estimates(self, indices):
        """Per-row signed estimates, shape ``(depth, len(indices))``."""
        indices = self._check(indices)
        buckets, signs = self._hash(indices)
        return signs * self.table[np.arange(self.depth)[:, None], buckets]

    def query(self, index):
        return float(self.query_many(np.asarray([index]))[0])

    def query_many(self, indices):
        """Median-over-rows estimate of the accumulated coordinates."""
        return np.median(self.row_estimates(indices), axis=0)

    def top_s(self, s, chunk=1 << 15):
        """Indices of the s largest estimated magnitudes, with estimates.

        Streams the whole coordinate space in chunks through a
        :class:`TopSSelector`, so peak memory stays at ``O(s + chunk)``.
        The values are sketch estimates; callers needing exact values refresh
        them in a second pass over the true data.
        """
        sel = TopSSelector(s, self.dim)
        for start in range(0, self.dim, chunk):
            idx = np.arange(start, min(start + chunk, self.dim), dtype=np.int64)
            sel.offer_block(start, self.query_many(idx))
        return sel.extract()
