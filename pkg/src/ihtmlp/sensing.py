"""Implicit gated sensing operator, materialized one column block at a time.

The operator represents the n x (d*m) matrix whose i-th block is
``diag(gate_i) @ X`` with per-column unit normalization, where ``gate_i`` is
the binary activation pattern of generator vector ``h_i`` on the data.  The
full matrix is never assembled; forward and adjoint products stream over
blocks so peak working memory stays at one block plus the sparse iterate.
"""

from __future__ import annotations

import numpy as np

from .sparse_core import SparseWeights

__all__ = ["activation_pattern", "GeneratorSet", "GatedOperator"]


def activation_pattern(X, h):
    """Binary gate vector: entry t is 1 iff row t of X has X[t] @ h >= 0.

    The boundary X[t] @ h == 0 counts as active, so h = 0 gates every row on.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("generator vector must be finite")
    return (X @ h) >= 0.0


class GeneratorSet:
    """The m gate generator vectors, regenerable from (seed, block index).

    In seeded mode no d x m storage is kept: block i's generator is an i.i.d.
    standard normal d-vector drawn from a stream keyed by (seed, i).  Explicit
    overrides (installed by the sequential-convex refresh) shadow the seeded
    draw per block.
    """

    def __init__(self, m, d, seed=None, overrides=None):
        if m < 1 or d < 1:
            raise ValueError("need m >= 1 and d >= 1")
        self.m = int(m)
        self.d = int(d)
        self.seed = seed
        self._overrides = {} if overrides is None else dict(overrides)
        if seed is None and len(self._overrides) != m:
            raise ValueError("explicit mode requires one vector per block")

    @classmethod
    def seeded(cls, m, d, seed):
        return cls(m, d, seed=seed)

    @classmethod
    def explicit(cls, vectors):
        vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
        d = vectors[0].size
        return cls(len(vectors), d, seed=None,
                   overrides={i: v for i, v in enumerate(vectors)})

    def generator(self, i):
        if not 0 <= i < self.m:
            raise IndexError(f"block index {i} out of range [0, {self.m})")
        if i in self._overrides:
            return self._overrides[i]
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), i]))
        return rng.standard_normal(self.d)

    def with_overrides(self, new_overrides):
        merged = dict(self._overrides)
        merged.update(new_overrides)
        return GeneratorSet(self.m, self.d, seed=self.seed, overrides=merged)


class GatedOperator:
    """Blockwise products with the column-normalized gated sensing matrix.

    Column (i, j) of the implicit matrix is ``gate_i * X[:, j]`` scaled to
    unit norm over the full dataset; columns whose gated norm is zero are
    dead and contribute nothing to any product.  Patterns and norms are fixed
    at construction (and at refresh) so minibatch products all see the same
    normalization.

    Read-only after construction; :meth:`refresh_generators` returns a new
    operator rather than mutating.
    """

    def __init__(self, X, generators, normalize=True):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.size == 0:
            raise ValueError("data matrix must be 2-d and nonempty")
        if not np.all(np.isfinite(X)):
            raise ValueError("data matrix must be finite")
        self.X = X
        self.n, self.d = X.shape
        self.generators = generators
        if generators.d != self.d:
            raise ValueError("generator dimension does not match data")
        self.m = generators.m
        self.dim = self.d * self.m
        self.normalize = bool(normalize)

        self.patterns = np.empty((self.m, self.n), dtype=bool)
        for i in range(self.m):
            self.patterns[i] = activation_pattern(X, generators.generator(i))
        # ||gate_i * x_j||_2 over the full dataset, one matmul for all blocks
        sq = self.patterns.astype(np.float64) @ (X * X)
        self.column_norms = np.sqrt(sq)
        self.dead = self.column_norms == 0.0
        with np.errstate(divide="ignore"):
            inv = np.where(self.dead, 0.0, 1.0 / self.column_norms)
        self._inv_norms = inv if self.normalize else (~self.dead).astype(np.float64)

    def _check_block(self, i):
        if not 0 <= i < self.m:
            raise IndexError(f"block index {i} out of range [0, {self.m})")

    def _rows(self, rows):
        if rows is None:
            return self.X, slice(None)
        rows = np.asarray(rows, dtype=np.int64)
        return self.X[rows], rows

    def block_forward(self, i, w_block, rows=None):
        """Contribution of block i: gate_i * (X N_i w_block) on the batch rows."""
        self._check_block(i)
        w_block = np.asarray(w_block, dtype=np.float64)
        Xr, rsel = self._rows(rows)
        scaled = w_block * self._inv_norms[i]
        return (Xr @ scaled) * self.patterns[i][rsel]

    def _forward_cols(self, i, cols, vals, rows=None):
        """Sparse-column forward: only the given block-local columns carry weight."""
        Xr, rsel = self._rows(rows)
        scaled = vals * self._inv_norms[i][cols]
        return (Xr[:, cols] @ scaled) * self.patterns[i][rsel]

    def block_adjoint(self, i, r, rows=None):
        """Block i of the adjoint product: N_i X^T gate_i r on the batch rows."""
        self._check_block(i)
        r = np.asarray(r, dtype=np.float64)
        Xr, rsel = self._rows(rows)
        masked = r * self.patterns[i][rsel]
        return (Xr.T @ masked) * self._inv_norms[i]

    def adjoint_chunk(self, i0, i1, r, rows=None):
        """Adjoint blocks i0..i1-1 as an (i1-i0, d) array, one fused matmul.

        This is the block-size knob: materializing several blocks per chunk
        trades peak memory for fewer, larger matrix products.
        """
        r = np.asarray(r, dtype=np.float64)
        Xr, rsel = self._rows(rows)
        masked = self.patterns[i0:i1, rsel] * r[None, :]
        return (masked @ Xr) * self._inv_norms[i0:i1]

    def forward(self, w, rows=None):
        """A @ w on the batch rows, touching only blocks that intersect supp(w)."""
        if w.dim != self.dim:
            raise ValueError(f"iterate dim {w.dim} != operator dim {self.dim}")
        Xr, rsel = self._rows(rows)
        out = np.zeros(Xr.shape[0])
        for i in w.blocks_touched(self.d):
            cols, vals = w.block(i, self.d)
            out += self._forward_cols(int(i), cols, vals, rows)
        return out

    def residual_gradient(self, residual, rows=None, block_size=1):
        """Stream the gradient A^T residual block by block.

        Yields ``(i, g_i)`` for every block exactly once, in ascending order;
        dead columns come out exactly zero.
        """
        bs = max(1, int(block_size))
        for i0 in range(0, self.m, bs):
            i1 = min(i0 + bs, self.m)
            chunk = self.adjoint_chunk(i0, i1, residual, rows)
            for k in range(i1 - i0):
                yield i0 + k, chunk[k]

    def columns(self, flat_cols, rows=None):
        """Densely assemble a few columns (n_rows x len(flat_cols)).

        Supports the spectral verifier, which needs A_S for small |S|; the
        optimization path never calls this.
        """
        flat_cols = np.asarray(flat_cols, dtype=np.int64)
        Xr, rsel = self._rows(rows)
        out = np.empty((Xr.shape[0], flat_cols.size))
        for k, c in enumerate(flat_cols):
            i, j = divmod(int(c), self.d)
            out[:, k] = self.patterns[i][rsel] * Xr[:, j] * self._inv_norms[i, j]
        return out

    def live_columns(self):
        """Flat indices of columns with nonzero gated norm."""
        return np.flatnonzero(~self.dead.ravel())

    def refresh_generators(self, w, phase):
        """Sequential-convex refresh: re-gate nonzero blocks by their weights.

        ``phase`` is ``"first_epoch"`` (generators held fixed, returns self)
        or ``"after"`` (block i's generator becomes its current weight vector
        whenever that block is nonzero; dead blocks keep their generator).
        """
        if phase == "first_epoch":
            return self
        if phase != "after":
            raise ValueError("phase must be 'first_epoch' or 'after'")
        if w.dim != self.dim:
            raise ValueError("iterate dim does not match operator")
        overrides = {}
        for i in w.blocks_touched(self.d):
            cols, vals = w.block(i, self.d)
            h = np.zeros(self.d)
            h[cols] = vals
            overrides[int(i)] = h
        if not overrides:
            return self
        return GatedOperator(self.X, self.generators.with_overrides(overrides),
                             normalize=self.normalize)

    def predict(self, X_new, w):
        """Evaluate the gated model on fresh rows using training norms."""
        X_new = np.asarray(X_new, dtype=np.float64)
        out = np.zeros(X_new.shape[0])
        for i in w.blocks_touched(self.d):
            cols, vals = w.block(i, self.d)
            gate = activation_pattern(X_new, self.generators.generator(int(i)))
            scaled = vals * self._inv_norms[int(i)][cols]
            out += (X_new[:, cols] @ scaled) * gate
        return out
