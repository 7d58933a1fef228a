"""Kronecker-sum (CP) representation of linear operators and vectors.

An operator is a sum of elementary terms, each a Kronecker product of one
factor per mode.  Mode ``d`` (the last one) is the spatial mode; every
earlier mode enumerates the samples of one parameter.  No rank compression
is ever performed here: the CP format is not closed, so all compression
happens after conversion to the hierarchical Tucker format.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.sparse as sp

DENSE_SIDE_CAP = 4096

IDENTITY = "identity"
DIAGONAL = "diagonal"
SPARSE = "general-sparse"


@dataclass(frozen=True)
class ModeLayout:
    """Mode sizes (n_0, ..., n_d); the last mode is the spatial one."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.dims) == 0:
            raise ValueError("layout needs at least one mode")
        if any(int(n) < 1 for n in self.dims):
            raise ValueError(f"mode sizes must be >= 1, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if self.total_size > 2**53:
            raise ValueError("total size exceeds 2^53; dense conversion impossible")

    @property
    def num_modes(self) -> int:
        return len(self.dims)

    @property
    def spatial_mode(self) -> int:
        return len(self.dims) - 1

    @property
    def total_size(self) -> int:
        return int(np.prod([int(n) for n in self.dims], dtype=object))


class Factor:
    """One per-mode factor of a CP term, tagged so identities cost nothing.

    Kinds: identity, diagonal (stores the diagonal vector) and
    general-sparse (stores a CSR matrix, possibly rectangular).
    """

    __slots__ = ("kind", "rows", "cols", "data")

    def __init__(self, kind, rows, cols, data):
        self.kind = kind
        self.rows = int(rows)
        self.cols = int(cols)
        self.data = data

    @staticmethod
    def identity(n: int) -> "Factor":
        return Factor(IDENTITY, n, n, None)

    @staticmethod
    def diagonal(values) -> "Factor":
        values = np.asarray(values, dtype=float)
        if values.ndim != 1:
            raise ValueError("diagonal factor needs a 1-d array")
        return Factor(DIAGONAL, values.size, values.size, values)

    @staticmethod
    def sparse(matrix) -> "Factor":
        matrix = sp.csr_matrix(matrix).astype(float)
        return Factor(SPARSE, matrix.shape[0], matrix.shape[1], matrix)

    @property
    def is_square(self) -> bool:
        return self.rows == self.cols

    @property
    def is_diagonal(self) -> bool:
        return self.kind in (IDENTITY, DIAGONAL)

    def apply(self, block: np.ndarray) -> np.ndarray:
        """Multiply onto a (cols, m) block or a (cols,) vector."""
        if self.kind == IDENTITY:
            return block
        if self.kind == DIAGONAL:
            if block.ndim == 1:
                return self.data * block
            return self.data[:, None] * block
        return self.data @ block

    def diagonal_vector(self) -> np.ndarray:
        if not self.is_square:
            raise ValueError("diagonal of a rectangular factor is undefined")
        if self.kind == IDENTITY:
            return np.ones(self.rows)
        if self.kind == DIAGONAL:
            return self.data
        return np.asarray(self.data.diagonal())

    def dense(self) -> np.ndarray:
        if self.kind == IDENTITY:
            return np.eye(self.rows)
        if self.kind == DIAGONAL:
            return np.diag(self.data)
        return self.data.toarray()

    def scaled(self, alpha: float) -> "Factor":
        if alpha == 1.0:
            return self
        if self.kind == IDENTITY:
            return Factor.diagonal(np.full(self.rows, float(alpha)))
        if self.kind == DIAGONAL:
            return Factor.diagonal(alpha * self.data)
        return Factor.sparse(self.data * alpha)


class CPOperator:
    """Sum of Kronecker products of per-mode factors.

    ``layout`` describes the input modes; the output mode sizes follow from
    the factor row counts (transfer operators are rectangular in the
    spatial mode, everything else is square).
    """

    def __init__(self, layout: ModeLayout, terms):
        terms = tuple(tuple(term) for term in terms)
        for term in terms:
            if len(term) != layout.num_modes:
                raise ValueError(
                    f"term has {len(term)} factors, layout has {layout.num_modes} modes"
                )
            for mu, factor in enumerate(term):
                if factor.cols != layout.dims[mu]:
                    raise ValueError(
                        f"factor at mode {mu} has {factor.cols} columns, "
                        f"expected {layout.dims[mu]}"
                    )
        if terms:
            out_dims = tuple(f.rows for f in terms[0])
            for term in terms[1:]:
                if tuple(f.rows for f in term) != out_dims:
                    raise ValueError("terms disagree on output mode sizes")
        else:
            out_dims = layout.dims
        self.layout = layout
        self.terms = terms
        self.out_layout = ModeLayout(out_dims)

    @property
    def rank(self) -> int:
        return len(self.terms)

    @property
    def is_square(self) -> bool:
        return self.out_layout.dims == self.layout.dims


class CPVector:
    """Sum of elementary tensors, one vector per mode and term."""

    def __init__(self, layout: ModeLayout, terms):
        terms = tuple(
            tuple(np.asarray(v, dtype=float) for v in term) for term in terms
        )
        for term in terms:
            if len(term) != layout.num_modes:
                raise ValueError("term length does not match layout")
            for mu, vec in enumerate(term):
                if vec.shape != (layout.dims[mu],):
                    raise ValueError(
                        f"vector at mode {mu} has shape {vec.shape}, "
                        f"expected ({layout.dims[mu]},)"
                    )
        self.layout = layout
        self.terms = terms

    @property
    def rank(self) -> int:
        return len(self.terms)


def cp_identity(layout: ModeLayout) -> CPOperator:
    """Rank-1 identity operator on the given layout."""
    return CPOperator(layout, [[Factor.identity(n) for n in layout.dims]])


def cp_ones(layout: ModeLayout) -> CPVector:
    """Rank-1 all-ones vector on the given layout."""
    return CPVector(layout, [[np.ones(n) for n in layout.dims]])


def cp_combine(alpha: float, a: CPOperator, beta: float, b: CPOperator) -> CPOperator:
    """Term-list concatenation realizing alpha*A + beta*B.

    Scalars are folded into the spatial-mode factor of each term so the
    representation is deterministic.  The result has rank exactly
    rank(A) + rank(B); no compression is attempted.
    """
    if a.layout.dims != b.layout.dims or a.out_layout.dims != b.out_layout.dims:
        raise ValueError("operator layouts do not match")
    spatial = a.layout.spatial_mode
    terms = []
    for scalar, op in ((float(alpha), a), (float(beta), b)):
        for term in op.terms:
            term = list(term)
            term[spatial] = term[spatial].scaled(scalar)
            terms.append(term)
    return CPOperator(a.layout, terms)


def cp_scale(alpha: float, a: CPOperator) -> CPOperator:
    """alpha * A with the scalar folded into the spatial factors."""
    spatial = a.layout.spatial_mode
    terms = []
    for term in a.terms:
        term = list(term)
        term[spatial] = term[spatial].scaled(float(alpha))
        terms.append(term)
    return CPOperator(a.layout, terms)


def cp_apply(a: CPOperator, x: CPVector) -> CPVector:
    """Apply the operator factor-wise; result rank is rank(A)*rank(x)."""
    if a.layout.dims != x.layout.dims:
        raise ValueError("operator and vector layouts do not match")
    terms = []
    for op_term in a.terms:
        for vec_term in x.terms:
            terms.append([f.apply(v) for f, v in zip(op_term, vec_term)])
    return CPVector(a.out_layout, terms)


def _check_dense_cap(layout: ModeLayout, cap: int):
    if layout.total_size > cap:
        raise ValueError(
            f"dense conversion of size {layout.total_size} exceeds cap {cap}"
        )


def cp_to_dense(a: CPOperator, cap: int = DENSE_SIDE_CAP) -> np.ndarray:
    """Full Kronecker expansion, term index ascending.  Test oracle only."""
    _check_dense_cap(a.layout, cap)
    _check_dense_cap(a.out_layout, cap)
    n_out = a.out_layout.total_size
    n_in = a.layout.total_size
    result = np.zeros((n_out, n_in))
    for term in a.terms:
        result += reduce(np.kron, [f.dense() for f in term])
    return result


def cp_vector_to_dense(x: CPVector, cap: int = 2**20) -> np.ndarray:
    """Dense tensor (shape = layout dims) of a CP vector."""
    _check_dense_cap(x.layout, cap)
    result = np.zeros(x.layout.dims)
    for term in x.terms:
        result += reduce(np.multiply.outer, term)
    return result
