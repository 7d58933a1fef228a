"""Hierarchical Tucker tensor format.

A tensor over modes {0, .., d} is represented along a balanced binary
dimension tree: every leaf stores a frame (one column per basis vector of
that mode), every inner node stores a transfer tensor expressing its
implied frame in the Kronecker basis of its sons' frames, and the root has
rank one.  Mode subsets are always kept sorted, the first son holding the
lower modes, so Kronecker/flattening conventions agree with C-ordered
``reshape``.

Truncation follows the hierarchical SVD: orthonormalize, accumulate the
reduced Gramians from the root down, eigendecompose them and project every
non-root node.  The discarded singular values are reported because they
bound the truncation error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cp import CPOperator, CPVector, ModeLayout

DENSE_ENTRY_CAP = 2**20

# Singular values this far below the node maximum are numerical noise and
# always dropped during truncation.
RANK_NOISE_REL = 1e-14


class TreeNode:
    __slots__ = ("modes", "left", "right")

    def __init__(self, modes, left=None, right=None):
        self.modes = tuple(modes)
        self.left = left
        self.right = right

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def mode(self) -> int:
        if not self.is_leaf:
            raise ValueError("inner node has no single mode")
        return self.modes[0]

    def __repr__(self):
        return f"TreeNode{self.modes}"


class DimensionTree:
    """Binary dimension tree; nodes are labeled with sorted mode subsets."""

    def __init__(self, root: TreeNode):
        self.root = root
        self._bottom_up = []
        self._collect_bottom_up(root)
        self.leaves = sorted(
            (n for n in self._bottom_up if n.is_leaf), key=lambda n: n.mode
        )
        self.inner_nodes = [n for n in self._bottom_up if not n.is_leaf]

    def _collect_bottom_up(self, node):
        if not node.is_leaf:
            self._collect_bottom_up(node.left)
            self._collect_bottom_up(node.right)
        self._bottom_up.append(node)

    @property
    def num_modes(self) -> int:
        return len(self.root.modes)

    def bottom_up(self):
        """Nodes with sons before parents; deterministic order."""
        return list(self._bottom_up)

    def top_down(self):
        return list(reversed(self._bottom_up))

    def non_root(self):
        return [n for n in self._bottom_up if n is not self.root]

    def same_structure(self, other: "DimensionTree") -> bool:
        def eq(a, b):
            if a.modes != b.modes:
                return False
            if a.is_leaf != b.is_leaf:
                return False
            if a.is_leaf:
                return True
            return eq(a.left, b.left) and eq(a.right, b.right)

        return eq(self.root, other.root)


def balanced_tree(num_modes: int) -> DimensionTree:
    """Canonical balanced tree: first-half/second-half splits by mode order."""
    if num_modes < 1:
        raise ValueError("need at least one mode")

    def build(modes):
        if len(modes) == 1:
            return TreeNode(modes)
        half = (len(modes) + 1) // 2
        return TreeNode(modes, build(modes[:half]), build(modes[half:]))

    return DimensionTree(build(tuple(range(num_modes))))


@dataclass(frozen=True)
class TruncationPolicy:
    rel_tolerance: float
    max_rank: int = 10**9

    def __post_init__(self):
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValueError("rel_tolerance must lie in (0, 1)")
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")

    def tightened(self, factor: float) -> "TruncationPolicy":
        return TruncationPolicy(self.rel_tolerance * factor, self.max_rank)


@dataclass
class TruncationReport:
    """Per-node discarded singular values from one HSVD truncation."""

    discarded: dict
    error_bound: float
    achieved_tolerance: float


class HTTensor:
    """Immutable hierarchical Tucker representation with root rank one."""

    def __init__(self, tree: DimensionTree, dims, frames, transfers):
        self.tree = tree
        self.dims = tuple(int(n) for n in dims)
        self.frames = frames
        self.transfers = transfers
        self._validate()

    def _validate(self):
        if len(self.dims) != self.tree.num_modes:
            raise ValueError("dims do not match tree modes")
        for leaf in self.tree.leaves:
            frame = self.frames[leaf]
            if frame.ndim != 2 or frame.shape[0] != self.dims[leaf.mode]:
                raise ValueError(
                    f"leaf frame for mode {leaf.mode} has shape {frame.shape}"
                )
        for node in self.tree.inner_nodes:
            b = self.transfers[node]
            if b.ndim != 3:
                raise ValueError("transfer tensors must be 3-way")
            if b.shape[1] != self.node_rank(node.left) or b.shape[2] != self.node_rank(
                node.right
            ):
                raise ValueError("transfer tensor shape inconsistent with sons")
        if self.node_rank(self.tree.root) != 1:
            raise ValueError("root rank must be 1")

    def node_rank(self, node: TreeNode) -> int:
        if node.is_leaf:
            return self.frames[node].shape[1]
        return self.transfers[node].shape[0]

    @property
    def max_rank(self) -> int:
        return max(self.node_rank(n) for n in self.tree.bottom_up())

    def ranks(self) -> dict:
        return {n.modes: self.node_rank(n) for n in self.tree.bottom_up()}

    def storage_size(self) -> int:
        """Exact stored-entry count: sum of n*r over leaves plus r*r1*r2."""
        total = 0
        for leaf in self.tree.leaves:
            total += self.frames[leaf].size
        for node in self.tree.inner_nodes:
            total += self.transfers[node].size
        return total


def _single_mode_tensor(tree, dims, column) -> HTTensor:
    return HTTensor(tree, dims, {tree.root: column.reshape(-1, 1)}, {})


def ht_zero(dims, tree: DimensionTree | None = None) -> HTTensor:
    """Canonical all-zeros rank-1 representation."""
    dims = tuple(int(n) for n in dims)
    if tree is None:
        tree = balanced_tree(len(dims))
    if tree.num_modes == 1:
        return _single_mode_tensor(tree, dims, np.zeros(dims[0]))
    frames = {leaf: np.zeros((dims[leaf.mode], 1)) for leaf in tree.leaves}
    transfers = {node: np.ones((1, 1, 1)) for node in tree.inner_nodes}
    return HTTensor(tree, dims, frames, transfers)


def ht_from_cp(x: CPVector, tree: DimensionTree | None = None) -> HTTensor:
    """Exact conversion; every node rank is bounded by the CP rank."""
    dims = x.layout.dims
    if tree is None:
        tree = balanced_tree(len(dims))
    if tree.num_modes != len(dims):
        raise ValueError("tree does not match the vector layout")
    r = x.rank
    if r == 0:
        return ht_zero(dims, tree)
    if tree.num_modes == 1:
        column = np.zeros(dims[0])
        for term in x.terms:
            column += term[0]
        return _single_mode_tensor(tree, dims, column)
    frames = {}
    for leaf in tree.leaves:
        frames[leaf] = np.column_stack([term[leaf.mode] for term in x.terms])
    transfers = {}
    diag = np.zeros((r, r, r))
    idx = np.arange(r)
    diag[idx, idx, idx] = 1.0
    for node in tree.inner_nodes:
        if node is tree.root:
            b = np.zeros((1, r, r))
            b[0, idx, idx] = 1.0
            transfers[node] = b
        else:
            transfers[node] = diag.copy()
    return HTTensor(tree, dims, frames, transfers)


def _dense_frame(x: HTTensor, node: TreeNode) -> np.ndarray:
    if node.is_leaf:
        return x.frames[node]
    u1 = _dense_frame(x, node.left)
    u2 = _dense_frame(x, node.right)
    b = x.transfers[node]
    out = np.einsum("aij,pi,qj->pqa", b, u1, u2, optimize=True)
    return out.reshape(u1.shape[0] * u2.shape[0], b.shape[0])


def ht_to_dense(x: HTTensor, cap: int = DENSE_ENTRY_CAP) -> np.ndarray:
    """Full tensor with shape ``x.dims``; refuses above the entry cap."""
    total = int(np.prod(x.dims, dtype=object))
    if total > cap:
        raise ValueError(f"dense conversion of {total} entries exceeds cap {cap}")
    return _dense_frame(x, x.tree.root)[:, 0].reshape(x.dims)


def matricization(tensor: np.ndarray, row_modes) -> np.ndarray:
    """Unfold a dense tensor: rows indexed by ``row_modes``, columns by the rest."""
    row_modes = sorted(row_modes)
    col_modes = [m for m in range(tensor.ndim) if m not in row_modes]
    perm = row_modes + col_modes
    rows = int(np.prod([tensor.shape[m] for m in row_modes], dtype=object))
    return tensor.transpose(perm).reshape(rows, -1)


def ht_evaluate(x: HTTensor, index) -> float:
    """Single entry of the tensor."""
    index = tuple(int(i) for i in index)
    if len(index) != len(x.dims):
        raise ValueError("index length does not match tensor order")
    for i, n in zip(index, x.dims):
        if not 0 <= i < n:
            raise IndexError(f"index {index} out of range for dims {x.dims}")
    return float(ht_slice(x, dict(enumerate(index)))[()])

def ht_slice(x: HTTensor, fixed: dict) -> np.ndarray:
    """Contract the tensor at fixed indices for a subset of modes.

    Returns the dense array over the remaining free modes (C order); with
    all modes fixed the result is a 0-d array.
    """
    fixed = {int(m): int(i) for m, i in fixed.items()}

    def value(node):
        if node.is_leaf:
            frame = x.frames[node]
            if node.mode in fixed:
                return frame[fixed[node.mode] : fixed[node.mode] + 1, :]
            return frame
        v1 = value(node.left)
        v2 = value(node.right)
        b = x.transfers[node]
        out = np.einsum("aij,pi,qj->pqa", b, v1, v2, optimize=True)
        return out.reshape(v1.shape[0] * v2.shape[0], b.shape[0])

    free_dims = tuple(n for m, n in enumerate(x.dims) if m not in fixed)
    return value(x.tree.root)[:, 0].reshape(free_dims)


def _check_compatible(x: HTTensor, y: HTTensor):
    if x.dims != y.dims or not x.tree.same_structure(y.tree):
        raise ValueError("tensors live on different trees or dims")


def ht_axpy(alpha: float, x: HTTensor, y: HTTensor) -> HTTensor:
    """alpha*x + y without compression; node ranks add."""
    _check_compatible(x, y)
    alpha = float(alpha)
    tree = y.tree
    if tree.num_modes == 1:
        col = alpha * x.frames[x.tree.root][:, 0] + y.frames[tree.root][:, 0]
        return _single_mode_tensor(tree, y.dims, col)

    node_map = dict(zip(x.tree.bottom_up(), tree.bottom_up()))
    frames, transfers = {}, {}
    for leaf_x, leaf_y in ((n, node_map[n]) for n in x.tree.leaves):
        frames[leaf_y] = np.hstack([x.frames[leaf_x], y.frames[leaf_y]])
    for node_x in x.tree.inner_nodes:
        node_y = node_map[node_x]
        bx, by = x.transfers[node_x], y.transfers[node_y]
        r1x, r2x = bx.shape[1], bx.shape[2]
        if node_x is x.tree.root:
            b = np.zeros((1, r1x + by.shape[1], r2x + by.shape[2]))
            b[0, :r1x, :r2x] = alpha * bx[0]
            b[0, r1x:, r2x:] = by[0]
        else:
            b = np.zeros(
                (
                    bx.shape[0] + by.shape[0],
                    r1x + by.shape[1],
                    r2x + by.shape[2],
                )
            )
            b[: bx.shape[0], :r1x, :r2x] = bx
            b[bx.shape[0] :, r1x:, r2x:] = by
        transfers[node_y] = b
    return HTTensor(tree, y.dims, frames, transfers)


def ht_scale(alpha: float, x: HTTensor) -> HTTensor:
    """alpha*x, the scalar carried in the root transfer tensor."""
    if x.tree.num_modes == 1:
        return _single_mode_tensor(x.tree, x.dims, alpha * x.frames[x.tree.root][:, 0])
    transfers = dict(x.transfers)
    transfers[x.tree.root] = float(alpha) * x.transfers[x.tree.root]
    return HTTensor(x.tree, x.dims, dict(x.frames), transfers)


def _pair_gram(bx, by, g_left, g_right):
    # sum_{i,j,k,l} bx[a,i,j] by[b,k,l] g_left[i,k] g_right[j,l]
    t = np.tensordot(bx, g_left, axes=(1, 0))  # (a, j, k)
    t = np.tensordot(t, g_right, axes=(1, 0))  # (a, k, l)
    return np.tensordot(t, by, axes=([1, 2], [1, 2]))  # (a, b)


def ht_inner(x: HTTensor, y: HTTensor) -> float:
    """Frobenius inner product of the represented tensors."""
    _check_compatible(x, y)
    if x.tree.num_modes == 1:
        return float(x.frames[x.tree.root][:, 0] @ y.frames[y.tree.root][:, 0])
    node_map = dict(zip(x.tree.bottom_up(), y.tree.bottom_up()))
    grams = {}
    for node in x.tree.bottom_up():
        if node.is_leaf:
            grams[node] = x.frames[node].T @ y.frames[node_map[node]]
        else:
            bx, by = x.transfers[node], y.transfers[node_map[node]]
            grams[node] = _pair_gram(bx, by, grams[node.left], grams[node.right])
    return float(grams[x.tree.root][0, 0])


def ht_norm(x: HTTensor) -> float:
    return float(np.sqrt(max(ht_inner(x, x), 0.0)))


def ht_apply(a: CPOperator, x: HTTensor) -> HTTensor:
    """Apply a CP operator; node ranks multiply by the operator rank."""
    if a.layout.dims != x.dims:
        raise ValueError("operator layout does not match tensor dims")
    s = a.rank
    out_dims = a.out_layout.dims
    if s == 0:
        return ht_zero(out_dims, x.tree)
    tree = x.tree
    if tree.num_modes == 1:
        col = np.zeros(out_dims[0])
        vec = x.frames[tree.root][:, 0]
        for term in a.terms:
            col += term[0].apply(vec)
        return _single_mode_tensor(tree, out_dims, col)

    frames, transfers = {}, {}
    for leaf in tree.leaves:
        u = x.frames[leaf]
        frames[leaf] = np.hstack([term[leaf.mode].apply(u) for term in a.terms])
    for node in tree.inner_nodes:
        b = x.transfers[node]
        r, r1, r2 = b.shape
        if node is tree.root:
            new = np.zeros((1, s * r1, s * r2))
            for j in range(s):
                new[0, j * r1 : (j + 1) * r1, j * r2 : (j + 1) * r2] = b[0]
        else:
            new = np.zeros((s * r, s * r1, s * r2))
            for j in range(s):
                new[
                    j * r : (j + 1) * r,
                    j * r1 : (j + 1) * r1,
                    j * r2 : (j + 1) * r2,
                ] = b
        transfers[node] = new
    return HTTensor(tree, out_dims, frames, transfers)


def ht_orthonormalize(x: HTTensor) -> HTTensor:
    """Same tensor, every non-root implied frame with orthonormal columns."""
    tree = x.tree
    if tree.num_modes == 1:
        return x
    frames, transfers, r_of = {}, {}, {}
    for node in tree.bottom_up():
        if node.is_leaf:
            q, r = np.linalg.qr(x.frames[node])
            frames[node] = q
            r_of[node] = r
            continue
        # b[a, p, q] = sum_{i,j} B[a,i,j] R1[p,i] R2[q,j]
        b = np.tensordot(x.transfers[node], r_of[node.left], axes=(1, 1))  # (a, j, p)
        b = np.tensordot(b, r_of[node.right], axes=(1, 1))  # (a, p, q)
        if node is tree.root:
            transfers[node] = b
            continue
        r, r1, r2 = b.shape
        v = b.transpose(1, 2, 0).reshape(r1 * r2, r)
        q, rr = np.linalg.qr(v)
        transfers[node] = q.reshape(r1, r2, q.shape[1]).transpose(2, 0, 1)
        r_of[node] = rr
    return HTTensor(tree, x.dims, frames, transfers)


def frame_gramians(x: HTTensor) -> dict:
    """Gram matrix U_t^T U_t of every implied frame (orthonormality check)."""
    grams = {}
    for node in x.tree.bottom_up():
        if node.is_leaf:
            grams[node] = x.frames[node].T @ x.frames[node]
        else:
            b = x.transfers[node]
            grams[node] = _pair_gram(b, b, grams[node.left], grams[node.right])
    return grams


def _reduced_gramians(x: HTTensor) -> dict:
    """Environment Gramians, valid once all non-root frames are orthonormal."""
    grams = {x.tree.root: np.ones((1, 1))}
    for node in x.tree.top_down():
        if node.is_leaf:
            continue
        b = x.transfers[node]
        t = np.tensordot(grams[node], b, axes=(1, 0))  # (a, k, l)
        grams[node.left] = np.tensordot(b, t, axes=([0, 2], [0, 2]))  # (i, k)
        grams[node.right] = np.tensordot(b, t, axes=([0, 1], [0, 1]))  # (j, l)
    return grams


def ht_truncate(x: HTTensor, policy: TruncationPolicy):
    """HSVD truncation.

    Returns ``(tensor, report)``.  The report carries the discarded
    singular values per node and the accumulated error bound
    sqrt(sum of squared discarded values); the two sons of the root share
    one matricization, so that pair is counted once in the bound.  When
    ``max_rank`` forces the error above the tolerance the truncated tensor
    is still returned, with the achieved bound reported.
    """
    tree = x.tree
    m = tree.num_modes
    if m == 1:
        return x, TruncationReport({}, 0.0, 0.0)
    x = ht_orthonormalize(x)
    root_b = x.transfers[tree.root]
    norm = float(np.linalg.norm(root_b))
    if norm == 0.0:
        return ht_zero(x.dims, tree), TruncationReport({}, 0.0, 0.0)

    # Standard root-to-leaves error split; the root pair counts once.
    eps_node = policy.rel_tolerance * norm / np.sqrt(max(2 * m - 3, 1))
    grams = _reduced_gramians(x)
    projections, discarded = {}, {}
    for node in tree.non_root():
        g = grams[node]
        w, vecs = np.linalg.eigh((g + g.T) / 2.0)
        w = np.maximum(w[::-1], 0.0)
        vecs = vecs[:, ::-1]
        sigma = np.sqrt(w)
        r_full = sigma.size
        tail = np.sqrt(np.maximum(np.cumsum(w[::-1])[::-1], 0.0))  # tail[i] = ||sigma[i:]||
        keep = r_full
        for r in range(r_full - 1, 0, -1):
            if tail[r] <= eps_node:
                keep = r
            else:
                break
        noise = RANK_NOISE_REL * sigma[0]
        while keep > 1 and sigma[keep - 1] < noise:
            keep -= 1
        keep = min(keep, policy.max_rank)
        projections[node] = vecs[:, :keep]
        discarded[node] = sigma[keep:]

    frames, transfers = {}, {}
    for node in tree.bottom_up():
        if node.is_leaf:
            frames[node] = x.frames[node] @ projections[node]
            continue
        own = projections.get(node)  # None at the root
        b = np.tensordot(x.transfers[node], projections[node.left], axes=(1, 0))
        b = np.tensordot(b, projections[node.right], axes=(1, 0))  # (a, k, l)
        if own is not None:
            b = np.tensordot(own, b, axes=(0, 0))  # (b, k, l)
        transfers[node] = b

    effective = set(tree.non_root())
    effective.discard(tree.root.right)
    bound_sq = sum(float(np.sum(discarded[n] ** 2)) for n in effective)
    bound = float(np.sqrt(bound_sq))
    report = TruncationReport(
        discarded={n.modes: discarded[n] for n in tree.non_root()},
        error_bound=bound,
        achieved_tolerance=bound / norm,
    )
    return HTTensor(tree, x.dims, frames, transfers), report


def ht_from_dense(tensor: np.ndarray, tree: DimensionTree | None = None) -> HTTensor:
    """Exact HT representation of a dense tensor (test-scale oracle).

    Frames are orthonormal bases of the matricization ranges, so node
    ranks equal the matricization ranks up to numerical rank detection.
    """
    dims = tensor.shape
    if tree is None:
        tree = balanced_tree(len(dims))
    if tree.num_modes != len(dims):
        raise ValueError("tree does not match tensor order")
    if tree.num_modes == 1:
        return _single_mode_tensor(tree, dims, np.asarray(tensor, dtype=float))

    bases = {}
    for node in tree.bottom_up():
        if node is tree.root:
            bases[node] = tensor.reshape(-1, 1).astype(float)
            continue
        mat = matricization(tensor, node.modes)
        u, s, _ = np.linalg.svd(mat, full_matrices=False)
        if s.size and s[0] > 0:
            rank = max(int(np.sum(s > RANK_NOISE_REL * s[0] * max(mat.shape))), 1)
        else:
            rank = 1
        bases[node] = u[:, :rank]

    frames, transfers = {}, {}
    for node in tree.bottom_up():
        if node.is_leaf:
            frames[node] = bases[node]
            continue
        u1, u2, ut = bases[node.left], bases[node.right], bases[node]
        ut3 = ut.reshape(u1.shape[0], u2.shape[0], ut.shape[1])
        transfers[node] = np.einsum("pi,qj,pqa->aij", u1, u2, ut3, optimize=True)
    return HTTensor(tree, dims, frames, transfers)
