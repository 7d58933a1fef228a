"""Dense per-parameter reference computations certifying the theory numerically.

Everything here works on explicit matrices at desk scale: assemble A(p),
factorize it, measure smoothing norms ||A S^nu||_2, exponential-sum
inverse errors, the Galerkin identity, two-grid contraction numbers and
solution slices.  These paths share no code with the low-rank solver they
certify.

Parameter sweeps run on a thread pool capped by the TENSORMG_THREADS
environment variable (the dense kernels release the GIL in BLAS).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg as sla

from .discretize import ParameterGrid, spectrum_bounds
from .expsum import build_inverse_diag_exact, build_inverse_diag_modified, build_tilde_diag, weights_for_interval
from .htucker import HTTensor, ht_slice
from .multigrid import APPROX_JACOBI, MODIFIED_JACOBI, RICHARDSON

DENSE_SIZE_CAP = 4096
SVD_SIDE_CAP = 2048
BOUND_SLACK = 1e-10


def _thread_count() -> int:
    raw = os.environ.get("TENSORMG_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def _sweep(fn, items):
    workers = _thread_count()
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_parameters(pgrid: ParameterGrid, per_axis: int):
    """Endpoint-including sweep points taken from the grid, cartesian product."""
    axes = []
    for s in pgrid.samples:
        if per_axis >= s.size:
            axes.append(list(s))
        else:
            idx = np.linspace(0, s.size - 1, per_axis).round().astype(int)
            axes.append(list(s[idx]))
    return [tuple(p) for p in product(*axes)]


def sample_parameter_indices(pgrid: ParameterGrid, per_axis: int):
    axes = []
    for s in pgrid.samples:
        if per_axis >= s.size:
            axes.append(list(range(s.size)))
        else:
            axes.append(list(np.linspace(0, s.size - 1, per_axis).round().astype(int)))
    return [tuple(i) for i in product(*axes)]


def spectral_norm(m: np.ndarray) -> float:
    """Largest singular value; exact SVD below the side cap, else power steps."""
    if max(m.shape) <= SVD_SIDE_CAP:
        return float(np.linalg.norm(m, 2))
    v = np.full(m.shape[1], 1.0 / np.sqrt(m.shape[1]))
    mt_m = m.T @ m
    val = 0.0
    for _ in range(100):
        v = mt_m @ v
        val = np.linalg.norm(v)
        if val == 0.0:
            return 0.0
        v /= val
    return float(np.sqrt(val))


def eta0(nu: int) -> float:
    """nu^nu / (nu+1)^(nu+1), the sharp constant of the smoothing lemma."""
    if nu == 0:
        return 1.0
    return float(np.exp(nu * np.log(nu) - (nu + 1) * np.log(nu + 1)))


def dense_assemble(family, p, level: int = 0) -> np.ndarray:
    """A^(0) + sum_nu p^(nu) A^(nu) as a dense symmetric matrix."""
    mats = family.matrices(level)
    if len(p) != len(mats) - 1:
        raise ValueError("parameter vector length does not match the family")
    _check_cap(mats[0].shape[0])
    out = mats[0].toarray()
    for nu, val in enumerate(p, start=1):
        out += float(val) * mats[nu].toarray()
    return out


def _check_cap(n: int):
    if n > DENSE_SIZE_CAP:
        raise ValueError(f"dense oracle size {n} exceeds cap {DENSE_SIZE_CAP}")


def dense_solve(family, p, f, level: int = 0) -> np.ndarray:
    """Direct SPD solve of A(p) u = f."""
    a = dense_assemble(family, p, level)
    try:
        factor = sla.cho_factor(a)
    except sla.LinAlgError as exc:
        raise ValueError(f"A(p) is not positive definite at p={p}") from exc
    return sla.cho_solve(factor, np.asarray(f, dtype=float))


def dense_inverse_diag_values(family, pgrid, level, weights, variant, p) -> np.ndarray:
    """Diagonal of the approximate inverse at one parameter point.

    Both variants act entrywise: the modified one applies E_k to the
    separable majorant, the exact one to the true operator diagonal.
    """
    if variant == MODIFIED_JACOBI:
        td = build_tilde_diag(family, pgrid, level)
        return weights(td.slice_values(p))
    if variant == APPROX_JACOBI:
        diags = family.diagonals(level)
        d = diags[0].copy()
        for nu, val in enumerate(p, start=1):
            d += float(val) * diags[nu]
        return weights(d)
    raise ValueError(f"unknown inverse-diag variant {variant!r}")


@dataclass
class SmoothingReport:
    """Measured ||A S^nu|| / ||A|| maxima against the theorem bound."""

    kind: str
    omega: float
    nus: list
    max_ratio: list
    bound: list
    eta: list
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def rows(self):
        return list(zip(self.nus, self.max_ratio, self.bound, self.eta))


def _smoother_matrices(family, pgrid, level, kind, omega, expsum_k, p_samples):
    """Per-sample (A, S, bound_factor) triples for the requested smoother."""
    results = []
    if kind in (MODIFIED_JACOBI, APPROX_JACOBI):
        variant_bounds = "tilde-diag" if kind == MODIFIED_JACOBI else "exact-diag"
        a_lo, b_hi = spectrum_bounds(family, pgrid, level, variant_bounds)
        weights = weights_for_interval(expsum_k, a_lo, b_hi)
        mats = [
            (p, dense_assemble(family, p, level)) for p in p_samples
        ]
        evs = [
            dense_inverse_diag_values(family, pgrid, level, weights, kind, p)
            for p, _ in mats
        ]
        if omega is None:
            rho = max(
                np.max(np.abs(np.linalg.eigvals(e[:, None] * a)))
                for (_, a), e in zip(mats, evs)
            )
            omega = 0.95 / float(rho)
        for (p, a), e in zip(mats, evs):
            s = np.eye(a.shape[0]) - omega * (e[:, None] * a)
            results.append((p, a, s, 1.0 / (2.0 * omega)))
        return omega, results
    if kind == RICHARDSON:
        c0 = 1.0 if omega is None else float(omega)
        if not 0 < c0 <= 1:
            raise ValueError("richardson damping constant c0 must lie in (0, 1]")
        for p in p_samples:
            a = dense_assemble(family, p, level)
            rho = float(np.max(np.abs(np.linalg.eigvalsh(a))))
            omega_p = c0 / rho
            s = np.eye(a.shape[0]) - omega_p * a
            results.append((p, a, s, 1.0 / (2.0 * c0)))
        return c0, results
    if kind == "jacobi":
        # classical damped Jacobi with the exact diagonal, for the textbook bound
        mats = [(p, dense_assemble(family, p, level)) for p in p_samples]
        if omega is None:
            rho = max(
                np.max(np.abs(np.linalg.eigvals(a / np.diag(a)[:, None])))
                for _, a in mats
            )
            omega = 1.0 / float(rho)
        for p, a in mats:
            s = np.eye(a.shape[0]) - omega * (a / np.diag(a)[:, None])
            results.append((p, a, s, 1.0 / (2.0 * omega)))
        return omega, results
    raise ValueError(f"unknown smoother kind {kind!r}")


def verify_smoothing(
    family,
    pgrid,
    level,
    kind,
    nu_max: int = 32,
    samples_per_axis: int = 5,
    omega: float | None = None,
    expsum_k: int = 10,
) -> SmoothingReport:
    """Check ||A(p) S(p)^nu||_2 <= bound_factor * ||A(p)||_2 / (nu + 1).

    For Richardson the factor is 1/(2 c0) with omega(p) = c0 / rho(A(p));
    for the Jacobi variants it is 1/(2 omega) with a global omega <= omega0.
    Violations beyond a 1e-10 relative slack are collected per (nu, p).
    """
    p_samples = sample_parameters(pgrid, samples_per_axis)
    omega_used, triples = _smoother_matrices(
        family, pgrid, level, kind, omega, expsum_k, p_samples
    )
    nus = list(range(1, nu_max + 1))

    def ratios_for(triple):
        _, a, s, _ = triple
        norm_a = spectral_norm(a)
        out = []
        m = a.copy()
        for _ in nus:
            m = m @ s
            out.append(spectral_norm(m) / norm_a)
        return out

    all_ratios = _sweep(ratios_for, triples)
    max_ratio, bounds, etas, violations = [], [], [], []
    for j, nu in enumerate(nus):
        bound = triples[0][3] / (nu + 1.0)
        bounds.append(bound)
        etas.append(eta0(nu))
        worst = 0.0
        for (p, _, _, factor), ratios in zip(triples, all_ratios):
            ratio = ratios[j]
            worst = max(worst, ratio)
            if ratio > factor / (nu + 1.0) * (1.0 + BOUND_SLACK) + BOUND_SLACK:
                violations.append((nu, p, ratio, factor / (nu + 1.0)))
        max_ratio.append(worst)
    return SmoothingReport(kind, omega_used, nus, max_ratio, bounds, etas, violations)


@dataclass
class InverseDiagReport:
    variant: str
    k: int
    measured: float
    certified_eps: float
    gap_to_exact: float | None = None

    @property
    def ok(self) -> bool:
        return self.measured <= self.certified_eps


def verify_inverse_diag(
    family, pgrid, level, k: int, variant: str, samples_per_axis: int = 5
) -> InverseDiagReport:
    """Measured 2-norm error of the built approximate inverse diagonal.

    The error of a diagonal matrix is the largest entrywise deviation, so
    the check scans |1/d_i - e_i| over sampled parameter grid points.  The
    modified variant is measured against the majorant it approximates and
    additionally reports the unbounded gap to the true inverse diagonal.
    """
    diags = family.diagonals(level)
    idx_samples = sample_parameter_indices(pgrid, samples_per_axis)
    if variant == APPROX_JACOBI:
        a_lo, b_hi = spectrum_bounds(family, pgrid, level, "exact-diag")
        w = weights_for_interval(k, a_lo, b_hi)
        op = build_inverse_diag_exact(family, pgrid, level, w)
    elif variant == MODIFIED_JACOBI:
        td = build_tilde_diag(family, pgrid, level)
        a_lo, b_hi = td.bounds()
        w = weights_for_interval(k, a_lo, b_hi)
        op = build_inverse_diag_modified(td, w)
    else:
        raise ValueError(f"unknown variant {variant!r}")

    d = pgrid.num_parameters
    measured = 0.0
    gap = 0.0
    td = build_tilde_diag(family, pgrid, level)
    for idx in idx_samples:
        p = tuple(pgrid.samples[nu][idx[nu]] for nu in range(d))
        evec = np.zeros(diags[0].size)
        for term in op.terms:
            block = term[d].diagonal_vector().copy()
            for mu in range(d):
                block *= term[mu].diagonal_vector()[idx[d - 1 - mu]]
            evec += block
        exact_diag = diags[0].copy()
        for nu, val in enumerate(p, start=1):
            exact_diag += float(val) * diags[nu]
        if variant == APPROX_JACOBI:
            measured = max(measured, float(np.max(np.abs(1.0 / exact_diag - evec))))
        else:
            tilde = td.slice_values(p)
            measured = max(measured, float(np.max(np.abs(1.0 / tilde - evec))))
            gap = max(gap, float(np.max(np.abs(1.0 / exact_diag - evec))))
    return InverseDiagReport(
        variant, k, measured, w.eps, gap if variant == MODIFIED_JACOBI else None
    )


@dataclass
class GalerkinReport:
    max_deviation: float
    per_level: dict
    tolerance: float = 1e-12

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance


def verify_galerkin(family, pgrid, samples_per_axis: int = 3) -> GalerkinReport:
    """Entrywise-max relative deviation of R A(p) P from the stored coarse A."""
    p_samples = sample_parameters(pgrid, samples_per_axis)
    per_level = {}
    worst = 0.0
    for level in range(1, family.num_levels):
        r = family.restriction_matrix(level)
        pmat = family.prolongation_matrix(level)
        fine = family.matrices(level)
        coarse = family.matrices(level - 1)
        level_worst = 0.0
        for p in p_samples:
            af = fine[0].copy()
            ac = coarse[0].copy()
            for nu, val in enumerate(p, start=1):
                af = af + float(val) * fine[nu]
                ac = ac + float(val) * coarse[nu]
            diff = r @ af @ pmat - ac
            denom = float(np.max(np.abs(ac.toarray())))
            level_worst = max(level_worst, float(np.max(np.abs(diff.toarray()))) / denom)
        per_level[level] = level_worst
        worst = max(worst, level_worst)
    return GalerkinReport(worst, per_level)


@dataclass
class TwoGridReport:
    rows: list  # (nu, p, norm)
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def two_grid_contraction(
    family,
    pgrid,
    level,
    nu_list=(2, 5, 10),
    samples_per_axis: int = 5,
    kind: str = MODIFIED_JACOBI,
    omega: float | None = None,
    expsum_k: int = 10,
) -> TwoGridReport:
    """Spectral norms of [I - P A_c(p)^{-1} R A(p)] S(p)^nu.

    Asserts contraction (< 1) for nu >= 2 and monotone decay in nu per
    sample; the pure coarse-grid correction (nu = 0) is a projector and
    may legitimately have norm >= 1.
    """
    if level < 1:
        raise ValueError("two-grid check needs a coarser level")
    p_samples = sample_parameters(pgrid, samples_per_axis)
    _, triples = _smoother_matrices(
        family, pgrid, level, kind, omega, expsum_k, p_samples
    )
    r = family.restriction_matrix(level).toarray()
    pmat = family.prolongation_matrix(level).toarray()
    nu_list = sorted(nu_list)

    def norms_for(triple):
        p, a, s, _ = triple
        ac = dense_assemble(family, p, level - 1)
        cgc = np.eye(a.shape[0]) - pmat @ np.linalg.solve(ac, r @ a)
        out = []
        m = np.eye(a.shape[0])
        done = 0
        for nu in nu_list:
            for _ in range(nu - done):
                m = m @ s
            done = nu
            out.append(spectral_norm(cgc @ m))
        return out

    all_norms = _sweep(norms_for, triples)
    rows, violations = [], []
    for (p, _, _, _), norms in zip(triples, all_norms):
        for nu, val in zip(nu_list, norms):
            rows.append((nu, p, val))
            if nu >= 2 and val >= 1.0:
                violations.append(("contraction", nu, p, val))
        for j in range(1, len(nu_list)):
            if norms[j] > norms[j - 1] * (1.0 + BOUND_SLACK):
                violations.append(
                    ("monotonicity", nu_list[j], p, norms[j] - norms[j - 1])
                )
    return TwoGridReport(rows, violations)


def slice_error(
    x: HTTensor, family, pgrid, level, p_indices=None, samples_per_axis: int = 5
) -> float:
    """Max relative l2 error of parameter slices against direct dense solves."""
    d = pgrid.num_parameters
    if p_indices is None:
        p_indices = sample_parameter_indices(pgrid, samples_per_axis)
    n = family.levels[level].spatial_size
    _check_cap(n)
    f = np.ones(n)
    worst = 0.0
    for idx in p_indices:
        p = tuple(pgrid.samples[nu][idx[nu]] for nu in range(d))
        u_ref = dense_solve(family, p, f, level)
        fixed = {mu: idx[d - 1 - mu] for mu in range(d)}
        u_slice = ht_slice(x, fixed).reshape(-1)
        worst = max(
            worst, float(np.linalg.norm(u_slice - u_ref) / np.linalg.norm(u_ref))
        )
    return worst
