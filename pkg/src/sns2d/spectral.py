"""Linear operators and norms: projection, Stokes semigroup, Sobolev/Lp/Besov."""

import math
from dataclasses import dataclass

import numpy as np

from .fields import SpectralField, TensorField
from .grid import TWO_PI, grid_for


def leray_project(vector_coeffs: np.ndarray, cutoff: int) -> SpectralField:
    """Project plain vector Fourier coefficients onto the divergence-free basis.

    ``vector_coeffs`` has shape (2, S, S), S = 2*cutoff + 1, centered layout
    (index [j, k1+N, k2+N]).  The k = 0 entry is ignored (zero-average
    constraint) and only the stored half is read; for Hermitian input this is
    the exact orthogonal projection onto divergence-free, zero-mean fields.
    """
    g = grid_for(cutoff)
    S = 2 * cutoff + 1
    vector_coeffs = np.asarray(vector_coeffs, dtype=np.complex128)
    if vector_coeffs.shape != (2, S, S):
        raise ValueError(
            f"expected vector coefficients of shape (2, {S}, {S}), "
            f"got {vector_coeffs.shape}"
        )
    v1 = vector_coeffs[0, g.k1 + cutoff, g.k2 + cutoff]
    v2 = vector_coeffs[1, g.k1 + cutoff, g.k2 + cutoff]
    # <u, e_k> with e_k = (i/2pi)(k_perp/|k|) exp(ik.x)
    c = -TWO_PI * 1j * (v1 * g.k2 - v2 * g.k1) / g.kabs
    return SpectralField(g, c)


def stokes_apply(u: SpectralField) -> SpectralField:
    """Stokes operator: multiply each mode by -|k|^2."""
    return u.with_coeffs(u.coeffs * (-u.grid.ksq))


def heat_semigroup(u: SpectralField, t: float, alpha: float = 0.0) -> SpectralField:
    """exp(t(A - alpha)) u: each mode decays by exp(-t(|k|^2 + alpha))."""
    if t < 0:
        raise ValueError(f"semigroup time must be >= 0, got {t}")
    return u.with_coeffs(u.coeffs * np.exp(-t * (u.grid.ksq + alpha)))


def fractional_power(u: SpectralField, r: float) -> SpectralField:
    """(-A)^r u: multiply each mode by |k|^(2r)."""
    return u.with_coeffs(u.coeffs * u.grid.ksq**r)


def sobolev_norm(u: SpectralField, s: float = 0.0) -> float:
    """H^s norm (sum over the full lattice of |c_k|^2 |k|^(2s))^(1/2).

    s = 0 is the H (= L^2) norm, s = 1 the V norm.
    """
    return math.sqrt(2.0 * float(np.sum(np.abs(u.coeffs) ** 2 * u.grid.ksq**s)))


def h_inner(u: SpectralField, v: SpectralField) -> float:
    """Real inner product of H, computed from the stored half-lattice."""
    u._check(v)
    return 2.0 * float(np.real(np.sum(u.coeffs * np.conj(v.coeffs))))


def h_norm_of(coeffs: np.ndarray) -> float:
    """H norm from a raw half-lattice coefficient vector."""
    return math.sqrt(2.0 * float(np.sum(np.abs(coeffs) ** 2)))


def lp_norm(u: SpectralField, p: float, grid_factor: int = 2) -> float:
    """L^p(D) norm of the pointwise Euclidean speed |u(x)|.

    Reconstructs on an oversampled uniform grid and applies the uniform-grid
    quadrature rule; exact for p = 2 (Parseval), spectrally accurate
    otherwise.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    size = u.grid.physical_size(grid_factor)
    phys = u.to_grid(size)
    speed = np.sqrt(phys[0] ** 2 + phys[1] ** 2)
    cell = (TWO_PI / size) ** 2
    return float((np.sum(speed**p) * cell) ** (1.0 / p))


def block_of(ksq: float) -> int:
    """Dyadic block index q with 2^(q-1) < |k| <= 2^q (|k| = 1 lands in q = 0)."""
    q = 0
    while ksq > 4.0**q:
        q += 1
    return q


def block_count(cutoff: int) -> int:
    """Number of dyadic blocks needed to cover max(|k1|,|k2|) <= cutoff."""
    return block_of(2.0 * cutoff * cutoff) + 1


def dyadic_block(u: SpectralField, q: int) -> SpectralField:
    """Frequency annulus 2^(q-1) < |k| <= 2^q of u; q = 0 keeps |k| = 1.

    The blocks partition the retained modes, so summing over q recovers u.
    """
    if q < 0:
        raise ValueError(f"block index must be >= 0, got {q}")
    g = u.grid
    lo = 4.0 ** (q - 1)
    hi = 4.0**q
    mask = (g.ksq > lo) & (g.ksq <= hi)
    return u.with_coeffs(np.where(mask, u.coeffs, 0.0))


def besov_norm(u: SpectralField, sigma: float, p: float, grid_factor: int = 2) -> float:
    """Besov norm (sum_q 2^(p q sigma) |block_q u|_Lp^p)^(1/p)."""
    total = 0.0
    for q in range(block_count(u.cutoff)):
        bq = dyadic_block(u, q)
        if not np.any(bq.coeffs):
            continue
        total += 2.0 ** (p * q * sigma) * lp_norm(bq, p, grid_factor) ** p
    return float(total ** (1.0 / p))


def tensor_sobolev_norm(t: TensorField, sigma: float) -> float:
    """Four-component Sobolev norm of a tensor field.

    Uses bracket weights (1 + |k|^2)^sigma on the full scalar lattice so the
    constant mode participates with weight one; coefficients are measured in
    the orthonormal scalar basis exp(ik.x)/(2pi).  Coincides with the usual
    Sobolev norm up to the equivalence constants of the convention.
    """
    n = t.grid.cutoff
    freqs = np.arange(-n, n + 1, dtype=np.float64)
    ksq = freqs[:, None] ** 2 + freqs[None, :] ** 2
    w = (1.0 + ksq) ** sigma
    total = np.sum(np.abs(t.comps) ** 2 * w[None, None, :, :])
    return float(TWO_PI * math.sqrt(float(total)))


@dataclass(frozen=True)
class BesovParams:
    """Exponents for trajectory-space Besov norms.

    ``sigma`` (< 0) and ``p`` set the space the sup-in-time distance is
    measured in; ``alpha`` and ``beta`` set the auxiliary time-integrated
    norm.  ``validate`` enforces the admissible window used by the
    convergence experiments.
    """

    sigma: float
    p: float
    alpha: float
    beta: float

    def validate(self):
        if self.p < 2:
            raise ValueError(f"p must be >= 2, got {self.p}")
        floor = max(-2.0 / self.p, 2.0 / self.p - 1.0)
        if not (self.sigma > floor):
            raise ValueError(
                f"sigma must satisfy sigma > max(-2/p, 2/p - 1) = {floor}; "
                f"got sigma={self.sigma}, p={self.p}"
            )
        if not (self.sigma < 0.0):
            raise ValueError(f"sigma must be negative, got {self.sigma}")
        if not (2.0 / self.p > self.alpha > -self.sigma > 0.0):
            raise ValueError(
                "alpha must satisfy 2/p > alpha > -sigma > 0; "
                f"got alpha={self.alpha}, sigma={self.sigma}, p={self.p}"
            )
        if self.beta < 2:
            raise ValueError(f"beta must be >= 2, got {self.beta}")
        mid = self.alpha / 2.0 - 1.0 / self.beta
        if not (-0.5 + 1.0 / self.p < mid < self.sigma / 2.0):
            raise ValueError(
                "alpha, beta must satisfy -1/2 + 1/p < alpha/2 - 1/beta < sigma/2; "
                f"got alpha/2 - 1/beta = {mid}"
            )
        return self

    def min_initial_regularity(self) -> float:
        """Smallest Sobolev exponent required of the initial condition."""
        return self.sigma + 1.0 - 2.0 / self.p
