"""Exponential-sum approximation of 1/x and separable approximate inverses.

E_k(x) = sum_m alpha_m * exp(-beta_m * x) approximates 1/x on an interval
[a, b].  Because a Kronecker-sum diagonal commutes termwise, E_k applied to
it factorizes into a sum of elementary tensors, which yields low-rank CP
approximate inverses of the operator diagonal.

Weights come from trapezoid (sinc) quadrature of 1/x = int exp(-x e^t + t) dt
with step pi/sqrt(k); the node offset is tuned against the sampled
sup-error.  Externally computed weight tables can be loaded from a small
text format and are re-certified by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cp import CPOperator, Factor, ModeLayout
from .discretize import diag_decompose, operator_layout, spectrum_bounds

CERT_GRID_POINTS = 10**4
CERT_RANGE_LIMIT = 1e6
# Sampled sup-errors are inflated by this factor to cover points between
# certification grid nodes.
CERT_SAFETY = 1.02


@dataclass(frozen=True)
class ExpSumWeights:
    """Positive weights (alpha_m, beta_m) with a certified sup-error on [a, b]."""

    alpha: np.ndarray
    beta: np.ndarray
    interval: tuple
    eps: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if alpha.shape != beta.shape or alpha.ndim != 1 or alpha.size == 0:
            raise ValueError("alpha and beta must be matching nonempty vectors")
        if np.any(alpha <= 0) or np.any(beta <= 0):
            raise ValueError("weights must be strictly positive")
        a, b = self.interval
        if not 0 < a < b:
            raise ValueError("interval must satisfy 0 < a < b")

    @property
    def k(self) -> int:
        return self.alpha.size

    def __call__(self, x) -> np.ndarray:
        """Evaluate E_k(x) elementwise."""
        x = np.asarray(x, dtype=float)
        return np.exp(-np.outer(self.beta, x.ravel())).T.dot(self.alpha).reshape(x.shape)


def _certification_grid(a: float, b: float) -> np.ndarray:
    hi = min(b, CERT_RANGE_LIMIT * a)
    return np.geomspace(a, hi, CERT_GRID_POINTS)


def _sampled_sup(alpha, beta, grid) -> float:
    approx = np.exp(-np.outer(beta, grid)).T.dot(alpha)
    return float(np.max(np.abs(1.0 / grid - approx)))


def _tail_bound(alpha, beta, x: float) -> float:
    # Beyond x both 1/x and E_k decrease, so the sup is bounded there.
    return 1.0 / x + float(np.sum(alpha * np.exp(-beta * x)))


def certify(alpha, beta, a: float, b: float) -> float:
    """Measured sup-error over the certification grid, plus the open tail."""
    grid = _certification_grid(a, b)
    eps = CERT_SAFETY * _sampled_sup(alpha, beta, grid)
    if b > CERT_RANGE_LIMIT * a:
        eps = max(eps, _tail_bound(alpha, beta, grid[-1]))
    return eps


def _trapezoid_weights(k: int, step: float, shift: float):
    t = shift + step * (np.arange(k) - (k - 1) / 2.0)
    beta = np.exp(t)
    alpha = step * beta
    return alpha, beta


def sinc_weights(k: int, big_r: float, step: float | None = None) -> ExpSumWeights:
    """Trapezoid-quadrature weights for 1/x on [1, R], offset tuned.

    The default step pi/sqrt(k) follows the quadrature analysis for the
    half-infinite interval; ``big_r`` may be ``inf``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not big_r > 1:
        raise ValueError("R must exceed 1")
    if step is None:
        step = math.pi / math.sqrt(k)
    tune_hi = min(big_r, CERT_RANGE_LIMIT)
    tune_grid = np.geomspace(1.0, tune_hi, 2000)

    def objective(shift):
        alpha, beta = _trapezoid_weights(k, step, shift)
        err = _sampled_sup(alpha, beta, tune_grid)
        if np.isinf(big_r):
            err = max(err, _tail_bound(alpha, beta, tune_grid[-1]))
        return err

    shifts = np.linspace(-8.0, 4.0, 49)
    best = min(shifts, key=objective)
    lo, hi = best - 0.5, best + 0.5
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc, fd = objective(c), objective(d)
    for _ in range(40):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = objective(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = objective(d)
    shift = (lo + hi) / 2.0
    alpha, beta = _trapezoid_weights(k, step, shift)
    return ExpSumWeights(alpha, beta, (1.0, big_r), certify(alpha, beta, 1.0, big_r))


def scale_weights(w: ExpSumWeights, a: float) -> ExpSumWeights:
    """Move weights from [1, R] to [a, a*R]; the sup-error scales by 1/a."""
    if a <= 0:
        raise ValueError("scaling factor must be positive")
    lo, hi = w.interval
    return ExpSumWeights(w.alpha / a, w.beta / a, (a * lo, a * hi), w.eps / a)


def save_weights(w: ExpSumWeights, path) -> None:
    """Write the text format: 'k R' then one 'alpha beta' line per term."""
    lo, hi = w.interval
    big_r = hi / lo
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{w.k} {big_r!r}\n")
        for am, bm in zip(w.alpha * lo, w.beta * lo):
            fh.write(f"{am:.17e} {bm:.17e}\n")


def load_weights(path) -> ExpSumWeights:
    """Read a weight file for [1, R]; the sup-error is re-certified."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected two values")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: empty weight file")
    k, big_r = rows[0]
    k = int(k)
    if k != len(rows) - 1:
        raise ValueError(f"{path}: header announces {k} terms, found {len(rows) - 1}")
    alpha = np.array([r[0] for r in rows[1:]])
    beta = np.array([r[1] for r in rows[1:]])
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError(f"{path}: weights must be positive")
    return ExpSumWeights(alpha, beta, (1.0, big_r), certify(alpha, beta, 1.0, big_r))


def weights_for_interval(k: int, a: float, b: float, margin: float = 0.01) -> ExpSumWeights:
    """Tuned weights covering [a, b] with a relative safety margin."""
    a_m = a * (1.0 - margin)
    b_m = b * (1.0 + margin)
    return scale_weights(sinc_weights(k, b_m / a_m), a_m)


@dataclass(frozen=True)
class TildeDiagonal:
    """Separable majorant of the operator diagonal.

    Mode mu stores (c, values): the parameter sample vector with
    c = max_i diag(A^(nu))_i for parameter modes (nu = d - mu), and
    diag(A^(0)) with c = 1 for the spatial mode.
    """

    layout: ModeLayout
    entries: tuple  # one (c, values) pair per mode

    def bounds(self) -> tuple:
        lo = sum(c * float(v.min()) for c, v in self.entries)
        hi = sum(c * float(v.max()) for c, v in self.entries)
        return lo, hi

    def slice_values(self, p) -> np.ndarray:
        """Diagonal of the majorant at one parameter point p = (p^(1)..p^(d))."""
        d = len(self.entries) - 1
        c_sp, d0 = self.entries[-1]
        total = c_sp * d0.copy()
        for mu in range(d):
            c, _ = self.entries[mu]
            total += c * float(p[d - mu - 1])
        return total


def build_tilde_diag(family, pgrid, level: int) -> TildeDiagonal:
    """Majorant with cookie coefficients c_nu = max diag(A^(nu))."""
    layout = operator_layout(family, pgrid, level)
    diags = family.diagonals(level)
    d = pgrid.num_parameters
    entries = []
    for mu in range(d):
        nu = d - mu
        entries.append((float(diags[nu].max()), pgrid.samples[nu - 1]))
    entries.append((1.0, diags[0]))
    return TildeDiagonal(layout, tuple(entries))


def _require_coverage(w: ExpSumWeights, a: float, b: float):
    lo, hi = w.interval
    if lo > a or hi < b:
        raise ValueError(
            f"weight interval [{lo:g}, {hi:g}] does not cover the "
            f"diagonal spectrum [{a:g}, {b:g}]"
        )


def build_inverse_diag_modified(td: TildeDiagonal, w: ExpSumWeights) -> CPOperator:
    """Rank-k separable approximate inverse of the majorant diagonal.

    Term m is the Kronecker product of exp(-beta_m c_mu D^(mu)) over all
    modes; alpha_m is folded into the spatial factor.  The result is
    symmetric positive definite by construction.
    """
    a, b = td.bounds()
    _require_coverage(w, a, b)
    terms = []
    for m in range(w.k):
        term = []
        for mu, (c, values) in enumerate(td.entries):
            factor = np.exp(-w.beta[m] * c * values)
            if mu == len(td.entries) - 1:
                factor = w.alpha[m] * factor
            term.append(Factor.diagonal(factor))
        terms.append(term)
    return CPOperator(td.layout, terms)


def build_inverse_diag_exact(family, pgrid, level: int, w: ExpSumWeights) -> CPOperator:
    """Rank-(k*d) approximate inverse of the exact operator diagonal.

    Requires every cookie diagonal to be a single multiple of an indicator
    (L_nu = 1), the indicators to be pairwise disjoint and to cover all
    spatial indices.  Term (m, nu) places exp(-beta_m c_nu p^(nu)) on the
    parameter mode d - nu and alpha_m exp(-beta_m diag A^(0)) restricted to
    cookie nu's support on the spatial mode.
    """
    layout = operator_layout(family, pgrid, level)
    d = pgrid.num_parameters
    decomps = []
    for nu in range(1, d + 1):
        parts = diag_decompose(family, level, nu)
        if len(parts) != 1:
            raise ValueError(
                f"cookie {nu} has L={len(parts)} distinct diagonal values; "
                "the exact builder needs L=1 (use the modified variant)"
            )
        decomps.append(parts[0])
    coverage = np.zeros(layout.dims[-1])
    for _, indicator in decomps:
        coverage += indicator
    if np.any(coverage > 1.0):
        raise ValueError("cookie diagonal supports overlap")
    if np.any(coverage < 1.0):
        raise ValueError(
            "cookie diagonal supports do not cover all spatial indices; "
            "the separable representation would vanish there "
            "(use the modified variant)"
        )
    a, b = spectrum_bounds(family, pgrid, level, "exact-diag")
    _require_coverage(w, a, b)
    d0 = family.diagonals(level)[0]
    terms = []
    for m in range(w.k):
        spatial_exp = w.alpha[m] * np.exp(-w.beta[m] * d0)
        for nu in range(1, d + 1):
            c_nu, indicator = decomps[nu - 1]
            term = [Factor.identity(layout.dims[mu]) for mu in range(d)]
            term[d - nu] = Factor.diagonal(
                np.exp(-w.beta[m] * c_nu * pgrid.samples[nu - 1])
            )
            term.append(Factor.diagonal(spatial_exp * indicator))
            terms.append(term)
    return CPOperator(layout, terms)
