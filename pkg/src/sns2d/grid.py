"""Wavenumber bookkeeping for zero-mean fields on the periodic square [0, 2*pi]^2.

Fields live on the integer frequency lattice with the zero mode removed.
Only half of the lattice is stored: the coefficient at -k is the complex
conjugate of the coefficient at k, so the stored half determines a
real-valued field.  The stored half is {k2 > 0} union {k2 == 0, k1 > 0}.
"""

import functools

import numpy as np
from scipy.fft import next_fast_len

TWO_PI = 2.0 * np.pi


class SpectralGrid:
    """Square Galerkin truncation max(|k1|, |k2|) <= cutoff with half-lattice layout.

    The divergence-free orthonormal basis element attached to wavenumber k is

        e_k(x) = (i / 2*pi) * (k_perp / |k|) * exp(i k.x),   k_perp = (k2, -k1).

    The unimodular phase i makes the reality constraint the standard Hermitian
    symmetry coeff(-k) = conj(coeff(k)).  ``basis1``/``basis2`` hold the plain
    Fourier coefficients of e_k's two velocity components.
    """

    def __init__(self, cutoff: int):
        cutoff = int(cutoff)
        if cutoff < 1:
            raise ValueError(f"cutoff must be a positive integer, got {cutoff}")
        self.cutoff = cutoff
        rng = np.arange(-cutoff, cutoff + 1)
        K1, K2 = np.meshgrid(rng, rng, indexing="ij")
        K1, K2 = K1.ravel(), K2.ravel()
        half = (K2 > 0) | ((K2 == 0) & (K1 > 0))
        self.k1 = np.ascontiguousarray(K1[half])
        self.k2 = np.ascontiguousarray(K2[half])
        self.ksq = (self.k1**2 + self.k2**2).astype(np.float64)
        self.kabs = np.sqrt(self.ksq)
        self.perp1 = self.k2 / self.kabs
        self.perp2 = -self.k1 / self.kabs
        self.basis1 = (1j / TWO_PI) * self.perp1
        self.basis2 = (1j / TWO_PI) * self.perp2
        self.n_modes = self.k1.size
        self._index = None
        self._embed = {}

    def __repr__(self):
        return f"SpectralGrid(cutoff={self.cutoff}, n_modes={self.n_modes})"

    @property
    def mode_index(self):
        """dict mapping stored (k1, k2) -> position in the coefficient vector."""
        if self._index is None:
            self._index = {
                (int(a), int(b)): i
                for i, (a, b) in enumerate(zip(self.k1, self.k2))
            }
        return self._index

    def physical_size(self, grid_factor: int = 2) -> int:
        """FFT-friendly physical grid size, at least 2*cutoff + 1.

        The lower bound keeps the mode embedding collision-free and makes
        trapezoid quadrature of quadratic quantities exact.
        """
        if grid_factor < 2:
            raise ValueError("grid_factor must be >= 2")
        return next_fast_len(max(grid_factor * self.cutoff, 2 * self.cutoff + 1))

    def embedding(self, size: int):
        """Flat scatter indices into an FFT array of shape (size, size).

        Returns (pos, neg): indices of the stored modes and of their
        conjugates.  Requires size >= 2*cutoff + 1 so that no two retained
        modes collide modulo size.
        """
        if size < 2 * self.cutoff + 1:
            raise ValueError(
                f"physical size {size} too small for cutoff {self.cutoff}"
            )
        cached = self._embed.get(size)
        if cached is None:
            pos = (self.k1 % size) * size + (self.k2 % size)
            neg = ((-self.k1) % size) * size + ((-self.k2) % size)
            cached = (pos, neg)
            self._embed[size] = cached
        return cached


@functools.lru_cache(maxsize=None)
def grid_for(cutoff: int) -> SpectralGrid:
    """Shared immutable grid instance for the given truncation."""
    return SpectralGrid(cutoff)
