"""Finite-difference discretization of the parameter-dependent diffusion problem.

The diffusion coefficient is 1 everywhere plus an extra p^(nu) on the
nu-th cookie box, so the operator family is A(p) = A0 + sum p^(nu) A_nu
with A0 the full constant-coefficient stiffness matrix and A_nu the local
stiffness of the unit indicator on cookie nu.  A(p) stays symmetric
positive definite for every p >= 0, including p = 0.

Matrices are assembled in a 2*h^2-scaled form whose entries are exact
dyadic rationals; Galerkin coarsening is carried out on those exact
matrices so that zero patterns (and hence the disjoint-support property of
the cookie diagonals) survive coarsening without floating-point fuzz.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cp import CPOperator, CPVector, Factor, ModeLayout

COARSEST_POINTS = 7


@dataclass(frozen=True)
class CookieGeometry:
    """Axis-aligned domain with disjoint axis-aligned cookie boxes.

    ``domain`` and every cookie are tuples of (lo, hi) pairs, one per
    spatial axis.  Cookie edges must lie on the unit-cell lattice spanned
    by ``cell_size`` and the boxes must keep a positive distance from each
    other, otherwise the diagonal supports of the local stiffness matrices
    would overlap on coarse grids.
    """

    domain: tuple
    cookies: tuple
    cell_size: float = 1.0

    def __post_init__(self):
        domain = tuple(tuple(float(v) for v in ax) for ax in self.domain)
        cookies = tuple(
            tuple(tuple(float(v) for v in ax) for ax in box) for box in self.cookies
        )
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "cookies", cookies)
        if self.spatial_dim not in (1, 2):
            raise ValueError("only 1d and 2d geometries are supported")
        extents = [hi - lo for lo, hi in domain]
        if any(e <= 0 for e in extents):
            raise ValueError("domain box is degenerate")
        if self.spatial_dim == 2 and abs(extents[0] - extents[1]) > 1e-12 * extents[0]:
            raise ValueError("2d domain must be square (single mesh width)")
        for b, box in enumerate(cookies):
            if len(box) != self.spatial_dim:
                raise ValueError(f"cookie {b} dimensionality mismatch")
            for ax, (lo, hi) in enumerate(box):
                if hi <= lo:
                    raise ValueError(f"cookie {b} is degenerate on axis {ax}")
                dlo, dhi = domain[ax]
                if lo < dlo or hi > dhi:
                    raise ValueError(f"cookie {b} leaves the domain on axis {ax}")
                for edge in (lo, hi):
                    steps = (edge - dlo) / self.cell_size
                    if abs(steps - round(steps)) > 1e-9:
                        raise ValueError(
                            f"cookie {b} edge {edge} not aligned to the "
                            f"cell lattice (cell_size={self.cell_size})"
                        )
        for i in range(len(cookies)):
            for j in range(i + 1, len(cookies)):
                if _box_distance(cookies[i], cookies[j]) <= 0.0:
                    raise ValueError(f"cookies {i} and {j} have no positive gap")

    @property
    def spatial_dim(self) -> int:
        return len(self.domain)

    @property
    def num_cookies(self) -> int:
        return len(self.cookies)


def _box_distance(a, b) -> float:
    gap_sq = 0.0
    for (alo, ahi), (blo, bhi) in zip(a, b):
        gap = max(blo - ahi, alo - bhi, 0.0)
        gap_sq += gap * gap
    return float(np.sqrt(gap_sq))


@dataclass(frozen=True)
class GridLevel:
    """Uniform grid with Dirichlet boundary rows eliminated."""

    level: int
    points_per_axis: int
    mesh_width: float
    spatial_dim: int

    @property
    def spatial_size(self) -> int:
        return self.points_per_axis**self.spatial_dim


def grid_levels(geometry: CookieGeometry, max_level: int) -> list[GridLevel]:
    """Levels 0..max_level with n_l = 2^(l+3) - 1 interior points per axis."""
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    lo, hi = geometry.domain[0]
    extent = hi - lo
    levels = []
    for lvl in range(max_level + 1):
        n = 2 ** (lvl + 3) - 1
        levels.append(GridLevel(lvl, n, extent / (n + 1), geometry.spatial_dim))
    return levels


@dataclass(frozen=True)
class ParameterGrid:
    """Per-cookie sample vectors, strictly increasing and nonnegative."""

    samples: tuple

    def __post_init__(self):
        samples = tuple(np.asarray(s, dtype=float) for s in self.samples)
        object.__setattr__(self, "samples", samples)
        for nu, s in enumerate(samples):
            if s.ndim != 1 or s.size == 0:
                raise ValueError(f"parameter axis {nu} must be a nonempty vector")
            if np.any(s < 0):
                raise ValueError(f"parameter axis {nu} has negative samples")
            if np.any(np.diff(s) <= 0):
                raise ValueError(f"parameter axis {nu} is not strictly increasing")

    @staticmethod
    def uniform(start: float, step: float, count: int, axes: int) -> "ParameterGrid":
        vec = start + step * np.arange(count)
        return ParameterGrid(tuple(vec.copy() for _ in range(axes)))

    @property
    def num_parameters(self) -> int:
        return len(self.samples)

    def sizes(self) -> tuple:
        return tuple(s.size for s in self.samples)


def stencil_1d(sigma_left, sigma_center, sigma_right, h) -> np.ndarray:
    """Three-point stencil [u_{i-1}, u_i, u_{i+1}] coefficients."""
    if h <= 0:
        raise ValueError("mesh width must be positive")
    return (1.0 / h**2) * np.array(
        [
            -(sigma_left + sigma_center) / 2.0,
            (sigma_left + 2.0 * sigma_center + sigma_right) / 2.0,
            -(sigma_center + sigma_right) / 2.0,
        ]
    )


def stencil_2d(sigma_center, sigma_west, sigma_east, sigma_south, sigma_north, h):
    """Five-point stencil coefficients [center, west, east, south, north]."""
    if h <= 0:
        raise ValueError("mesh width must be positive")
    return (1.0 / (2.0 * h**2)) * np.array(
        [
            sigma_west + sigma_south + 4.0 * sigma_center + sigma_north + sigma_east,
            -(sigma_center + sigma_west),
            -(sigma_center + sigma_east),
            -(sigma_center + sigma_south),
            -(sigma_center + sigma_north),
        ]
    )


def _axis_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    h = (hi - lo) / (n + 1)
    return lo + h * np.arange(n + 2)


def _indicator_1d(nodes, box) -> np.ndarray:
    (lo, hi), = box
    return ((nodes >= lo) & (nodes <= hi)).astype(float)


def _scaled_stiffness_1d(sigma: np.ndarray) -> sp.csr_matrix:
    """2*h^2 times the 1d stiffness matrix for nodal sigma values."""
    n = sigma.size - 2
    center = sigma[:-2] + 2.0 * sigma[1:-1] + sigma[2:]
    lower = -(sigma[1:-2] + sigma[2:-1])
    m = sp.diags([lower, center, lower], offsets=[-1, 0, 1], format="csr")
    m.eliminate_zeros()
    return m


def _scaled_stiffness_2d(sigma: np.ndarray) -> sp.csr_matrix:
    """2*h^2 times the 2d stiffness; sigma on the full (n+2)x(n+2) node grid.

    sigma[ix, iy] is the value at (x_ix, y_iy); unknowns are flattened
    y-major, x fastest: k = (iy-1)*n + (ix-1).
    """
    n = sigma.shape[0] - 2
    c = sigma[1:-1, 1:-1]
    w = sigma[:-2, 1:-1]
    e = sigma[2:, 1:-1]
    s = sigma[1:-1, :-2]
    nn = sigma[1:-1, 2:]

    def k_index(ix, iy):
        return (iy * n + ix).ravel()

    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows, cols, vals = [], [], []

    rows.append(k_index(ix, iy))
    cols.append(k_index(ix, iy))
    vals.append((w + s + 4.0 * c + nn + e).ravel())

    west = ix > 0
    rows.append(k_index(ix[west], iy[west]))
    cols.append(k_index(ix[west] - 1, iy[west]))
    vals.append(-(c[west] + w[west]))

    east = ix < n - 1
    rows.append(k_index(ix[east], iy[east]))
    cols.append(k_index(ix[east] + 1, iy[east]))
    vals.append(-(c[east] + e[east]))

    south = iy > 0
    rows.append(k_index(ix[south], iy[south]))
    cols.append(k_index(ix[south], iy[south] - 1))
    vals.append(-(c[south] + s[south]))

    north = iy < n - 1
    rows.append(k_index(ix[north], iy[north]))
    cols.append(k_index(ix[north], iy[north] + 1))
    vals.append(-(c[north] + nn[north]))

    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n, n * n),
    ).tocsr()
    m.eliminate_zeros()
    return m


def _restriction_1d_scaled(n_fine: int) -> sp.csr_matrix:
    """Integer restriction rows [1 2 1]; the true R is this over 4."""
    if n_fine < 3 or n_fine % 2 == 0:
        raise ValueError("fine grid size must be odd and >= 3")
    n_coarse = (n_fine - 1) // 2
    rows = np.repeat(np.arange(n_coarse), 3)
    cols = (2 * np.arange(n_coarse)[:, None] + np.arange(3)[None, :]).ravel()
    vals = np.tile(np.array([1.0, 2.0, 1.0]), n_coarse)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_coarse, n_fine))


class AffineOperatorFamily:
    """Per-level spatial matrices A^(0..d) plus grid and transfer data.

    The finest level is assembled from the stencils; every coarser level is
    the exact Galerkin product R A P, never re-discretized.
    """

    def __init__(self, geometry, levels, scaled_matrices, scales):
        self.geometry = geometry
        self.levels = list(levels)
        self._scaled = [list(mats) for mats in scaled_matrices]
        self._scales = list(scales)
        self._matrices = [
            [(m * s).tocsr() for m in mats]
            for mats, s in zip(self._scaled, self._scales)
        ]
        for mats in self._matrices:
            for m in mats:
                m.eliminate_zeros()

    @property
    def num_cookies(self) -> int:
        return len(self._matrices[0]) - 1

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def spatial_dim(self) -> int:
        return self.levels[0].spatial_dim

    def matrices(self, level: int) -> list:
        """[A^(0), A^(1), ..., A^(d)] at the given level."""
        return self._matrices[level]

    def scaled_matrices(self, level: int) -> list:
        return self._scaled[level]

    def scale(self, level: int) -> float:
        return self._scales[level]

    def diagonals(self, level: int) -> list:
        return [np.asarray(m.diagonal()) for m in self._matrices[level]]

    def restriction_matrix(self, level: int) -> sp.csr_matrix:
        """Spatial restriction from ``level`` to ``level - 1``."""
        if level < 1:
            raise ValueError("level 0 has no transfer")
        n_fine = self.levels[level].points_per_axis
        r1 = _restriction_1d_scaled(n_fine) / 4.0
        if self.spatial_dim == 1:
            return r1.tocsr()
        return sp.kron(r1, r1, format="csr")

    def prolongation_matrix(self, level: int) -> sp.csr_matrix:
        r = self.restriction_matrix(level)
        return (2.0**self.spatial_dim * r.T).tocsr()

    def diag_supports_disjoint(self, level: int) -> bool:
        diags = self.diagonals(level)[1:]
        for i in range(len(diags)):
            for j in range(i + 1, len(diags)):
                if np.any((diags[i] != 0.0) & (diags[j] != 0.0)):
                    return False
        return True

    @classmethod
    def from_matrices(cls, matrices, spatial_dim=1, mesh_width=1.0):
        """Single-level family from explicit matrices (synthetic tests)."""
        mats = [sp.csr_matrix(m).astype(float) for m in matrices]
        n = mats[0].shape[0]
        points = n if spatial_dim == 1 else int(round(np.sqrt(n)))
        level = GridLevel(0, points, mesh_width, spatial_dim)
        return cls(None, [level], [mats], [1.0])


def assemble_affine_family(geometry: CookieGeometry, max_level: int) -> AffineOperatorFamily:
    """Assemble the finest level from stencils and Galerkin-coarsen down."""
    levels = grid_levels(geometry, max_level)
    finest = levels[-1]
    n = finest.points_per_axis
    lo, hi = geometry.domain[0]
    nodes_x = _axis_nodes(lo, hi, n)

    scaled = []
    if geometry.spatial_dim == 1:
        scaled.append(_scaled_stiffness_1d(np.ones(n + 2)))
        for box in geometry.cookies:
            scaled.append(_scaled_stiffness_1d(_indicator_1d(nodes_x, box)))
    else:
        ylo, yhi = geometry.domain[1]
        nodes_y = _axis_nodes(ylo, yhi, n)
        xs, ys = np.meshgrid(nodes_x, nodes_y, indexing="ij")
        scaled.append(_scaled_stiffness_2d(np.ones((n + 2, n + 2))))
        for (bx, by) in geometry.cookies:
            inside = (
                (xs >= bx[0]) & (xs <= bx[1]) & (ys >= by[0]) & (ys <= by[1])
            ).astype(float)
            scaled.append(_scaled_stiffness_2d(inside))

    per_level = [None] * (max_level + 1)
    per_level[max_level] = scaled
    for lvl in range(max_level, 0, -1):
        per_level[lvl - 1] = _galerkin_scaled(
            per_level[lvl], levels[lvl].points_per_axis, geometry.spatial_dim
        )
    scales = [1.0 / (2.0 * g.mesh_width**2) for g in levels]
    family = AffineOperatorFamily(geometry, levels, per_level, scales)
    for lvl in range(max_level + 1):
        diags = family.diagonals(lvl)
        for nu, d in enumerate(diags):
            if np.any(d < 0):
                raise ValueError(f"negative diagonal in A^({nu}) at level {lvl}")
    return family


def _galerkin_scaled(scaled_mats, n_fine, spatial_dim):
    """Exact triple product on the 2*h^2-scaled matrices.

    With R_tilde = 4R and P = 2 R^T the coarse scaled matrix is
    R_tilde M R_tilde^T / 2 in 1d and / 16 in 2d; all values stay dyadic.
    """
    rt = _restriction_1d_scaled(n_fine)
    if spatial_dim == 2:
        rt = sp.kron(rt, rt, format="csr")
        divisor = 16.0
    else:
        divisor = 2.0
    out = []
    for m in scaled_mats:
        coarse = (rt @ m @ rt.T) / divisor
        coarse = coarse.tocsr()
        coarse.eliminate_zeros()
        out.append(coarse)
    return out


def galerkin_coarsen(family: AffineOperatorFamily, level: int) -> list:
    """Coarse matrices R A^(nu) P computed from the stored fine level."""
    if level < 1:
        raise ValueError("level 0 has no coarser level")
    scaled = _galerkin_scaled(
        family.scaled_matrices(level),
        family.levels[level].points_per_axis,
        family.spatial_dim,
    )
    s = family.scale(level - 1)
    return [(m * s).tocsr() for m in scaled]


def operator_layout(family, pgrid: ParameterGrid, level: int) -> ModeLayout:
    """Mode mu < d carries parameter p^(d - mu); the last mode is spatial."""
    d = pgrid.num_parameters
    if family.num_cookies != d:
        raise ValueError("parameter grid does not match the number of cookies")
    dims = tuple(pgrid.samples[d - mu - 1].size for mu in range(d))
    return ModeLayout(dims + (family.levels[level].spatial_size,))


def assemble_cp_operator(family, pgrid: ParameterGrid, level: int) -> CPOperator:
    """Rank-(d+1) operator: one background term plus one term per cookie."""
    layout = operator_layout(family, pgrid, level)
    d = pgrid.num_parameters
    mats = family.matrices(level)
    terms = [
        [Factor.identity(layout.dims[mu]) for mu in range(d)]
        + [Factor.sparse(mats[0])]
    ]
    for nu in range(1, d + 1):
        term = [Factor.identity(layout.dims[mu]) for mu in range(d)]
        term[d - nu] = Factor.diagonal(pgrid.samples[nu - 1])
        term.append(Factor.sparse(mats[nu]))
        terms.append(term)
    return CPOperator(layout, terms)


def assemble_rhs(family, pgrid: ParameterGrid, level: int) -> CPVector:
    """Constant right-hand side f = 1: a rank-1 all-ones tensor."""
    layout = operator_layout(family, pgrid, level)
    return CPVector(layout, [[np.ones(n) for n in layout.dims]])


def transfer_ops(family, pgrid: ParameterGrid, level: int):
    """Rank-1 CP restriction and prolongation from ``level`` to ``level-1``."""
    if level < 1:
        raise ValueError("level 0 has no transfer")
    layout = operator_layout(family, pgrid, level)
    d = pgrid.num_parameters
    r_sp = family.restriction_matrix(level)
    p_sp = family.prolongation_matrix(level)
    ids = [Factor.identity(layout.dims[mu]) for mu in range(d)]
    r_op = CPOperator(layout, [ids + [Factor.sparse(r_sp)]])
    coarse_layout = operator_layout(family, pgrid, level - 1)
    p_op = CPOperator(coarse_layout, [ids + [Factor.sparse(p_sp)]])
    return r_op, p_op


def diag_decompose(family, level: int, nu: int) -> list:
    """Split diag(A^(nu)) into sum of c_gamma * indicator, c ascending.

    Grouping happens on the exact 2*h^2-scaled diagonal, then scales back,
    so the recomposition reproduces diag(A^(nu)) bit for bit.
    """
    if not 1 <= nu <= family.num_cookies:
        raise ValueError(f"cookie index {nu} out of range")
    scaled_diag = np.asarray(family.scaled_matrices(level)[nu].diagonal())
    s = family.scale(level)
    values = np.unique(scaled_diag[scaled_diag > 0])
    groups = []
    for v in values:
        if groups and abs(v - groups[-1][0]) <= 1e-12 * abs(v):
            groups[-1][1] |= scaled_diag == v
        else:
            groups.append([v, scaled_diag == v])
    return [(v * s, mask.astype(float)) for v, mask in groups]


def spectrum_bounds(family, pgrid: ParameterGrid, level: int, variant: str):
    """Exact inclusion interval [a, b] for the chosen diagonal.

    "exact-diag" bounds diag(A(p)) over the sample box; "tilde-diag"
    bounds the separable majorant whose cookie coefficients are the
    maximal diagonal entries.  Both rely on the diagonals being
    entrywise nonnegative, which makes the entries monotone in p.
    """
    diags = family.diagonals(level)
    d0 = diags[0]
    p_min = [s[0] for s in pgrid.samples]
    p_max = [s[-1] for s in pgrid.samples]
    if variant == "exact-diag":
        lo = d0.copy()
        hi = d0.copy()
        for nu in range(1, len(diags)):
            lo = lo + p_min[nu - 1] * diags[nu]
            hi = hi + p_max[nu - 1] * diags[nu]
        a, b = float(lo.min()), float(hi.max())
    elif variant == "tilde-diag":
        c = [float(diags[nu].max()) for nu in range(1, len(diags))]
        a = float(d0.min()) + sum(cv * pv for cv, pv in zip(c, p_min))
        b = float(d0.max()) + sum(cv * pv for cv, pv in zip(c, p_max))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if a <= 0:
        raise ValueError("diagonal lower bound is not positive")
    return a, b
