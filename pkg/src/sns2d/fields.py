"""Divergence-free spectral velocity fields and Fourier tensor fields."""

import numpy as np
from scipy.fft import fft2, ifft2

from .grid import SpectralGrid, grid_for


class SpectralField:
    """Zero-mean, divergence-free velocity field on the periodic square.

    Stores one complex coefficient per half-lattice mode in the orthonormal
    divergence-free basis; the conjugate half is implicit, so the field is
    real-valued and exactly divergence-free by construction.  Instances are
    immutable: operations return fresh fields.
    """

    __slots__ = ("grid", "coeffs")

    def __init__(self, grid: SpectralGrid, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.shape != (grid.n_modes,):
            raise ValueError(
                f"expected {grid.n_modes} coefficients for cutoff "
                f"{grid.cutoff}, got shape {coeffs.shape}"
            )
        object.__setattr__(self, "grid", grid)
        c = coeffs.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def __setattr__(self, name, value):
        raise AttributeError("SpectralField is immutable")

    @property
    def cutoff(self) -> int:
        return self.grid.cutoff

    @classmethod
    def zero(cls, cutoff: int) -> "SpectralField":
        g = grid_for(cutoff)
        return cls(g, np.zeros(g.n_modes, dtype=np.complex128))

    @classmethod
    def from_modes(cls, cutoff: int, modes: dict) -> "SpectralField":
        """Build a field from {(k1, k2): coefficient}.

        Keys on the implicit half are folded onto the stored half as
        conjugates, preserving realness.
        """
        g = grid_for(cutoff)
        c = np.zeros(g.n_modes, dtype=np.complex128)
        for (k1, k2), val in modes.items():
            if (k1, k2) in g.mode_index:
                c[g.mode_index[(k1, k2)]] += val
            elif (-k1, -k2) in g.mode_index:
                c[g.mode_index[(-k1, -k2)]] += np.conj(val)
            else:
                raise KeyError(f"mode {(k1, k2)} outside cutoff {cutoff}")
        return cls(g, c)

    @classmethod
    def random(cls, cutoff, rng, amplitude=1.0, decay=0.0):
        """Random field with coefficients ~ amplitude * |k|^(-decay) * CN(0, 1)."""
        g = grid_for(cutoff)
        xi = rng.standard_normal((2, g.n_modes))
        c = (xi[0] + 1j * xi[1]) / np.sqrt(2.0)
        c *= amplitude * g.ksq ** (-decay / 2.0)
        return cls(g, c)

    def with_coeffs(self, coeffs: np.ndarray) -> "SpectralField":
        return SpectralField(self.grid, coeffs)

    def __add__(self, other):
        self._check(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralField(self.grid, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.grid, -self.coeffs)

    def _check(self, other):
        if not isinstance(other, SpectralField):
            raise TypeError("expected a SpectralField")
        if other.grid.cutoff != self.grid.cutoff:
            raise ValueError(
                f"cutoff mismatch: {self.grid.cutoff} vs {other.grid.cutoff}"
            )

    def velocity_coeffs(self) -> np.ndarray:
        """Plain Fourier coefficients of the velocity, shape (2, S, S).

        Centered layout: index [j, k1 + N, k2 + N] holds the component-j
        coefficient of exp(i k.x), N = cutoff, S = 2N + 1.
        """
        g = self.grid
        n = g.cutoff
        S = 2 * n + 1
        out = np.zeros((2, S, S), dtype=np.complex128)
        v1 = self.coeffs * g.basis1
        v2 = self.coeffs * g.basis2
        out[0, g.k1 + n, g.k2 + n] = v1
        out[1, g.k1 + n, g.k2 + n] = v2
        out[0, n - g.k1, n - g.k2] = np.conj(v1)
        out[1, n - g.k1, n - g.k2] = np.conj(v2)
        return out

    def to_grid(self, size: int = None, grid_factor: int = 2) -> np.ndarray:
        """Velocity samples on a size x size uniform grid, shape (2, size, size)."""
        g = self.grid
        if size is None:
            size = g.physical_size(grid_factor)
        pos, neg = g.embedding(size)
        v1 = self.coeffs * g.basis1
        v2 = self.coeffs * g.basis2
        u = np.zeros((2, size * size), dtype=np.complex128)
        u[0, pos] = v1
        u[0, neg] = np.conj(v1)
        u[1, pos] = v2
        u[1, neg] = np.conj(v2)
        u = u.reshape(2, size, size)
        phys = ifft2(u, axes=(1, 2)).real * (size * size)
        return phys


def divergence_residual(field: SpectralField) -> float:
    """max_k |k . u_hat(k)| / max_k |u_hat(k)| over the reconstructed velocity."""
    vhat = field.velocity_coeffs()
    n = field.cutoff
    freqs = np.arange(-n, n + 1)
    dot = freqs[:, None] * vhat[0] + freqs[None, :] * vhat[1]
    scale = np.max(np.abs(vhat))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(dot)) / scale)


def taylor_green(cutoff: int, amplitude: float = 1.0) -> SpectralField:
    """Taylor-Green-type low-mode field u = a*(sin x1 cos x2, -cos x1 sin x2)."""
    # sin x1 cos x2 = (e^{i(x1+x2)} + e^{i(x1-x2)} - e^{-i(x1-x2)} - e^{-i(x1+x2)}) / 4i
    vhat = np.zeros((2, 2 * cutoff + 1, 2 * cutoff + 1), dtype=np.complex128)
    n = cutoff
    q = amplitude / 4.0
    for (a, b), s1, s2 in [
        ((1, 1), -1j * q, 1j * q),
        ((1, -1), -1j * q, -1j * q),
        ((-1, 1), 1j * q, 1j * q),
        ((-1, -1), 1j * q, -1j * q),
    ]:
        vhat[0, n + a, n + b] = s1
        vhat[1, n + a, n + b] = s2
    from .spectral import leray_project

    return leray_project(vhat, cutoff)


class TensorField:
    """2x2 matrix-valued field as Fourier coefficients on the full lattice.

    ``comps[i, j]`` holds the centered coefficients of component (i+1, j+1)
    in the plain exponential basis, shape (S, S) with S = 2*cutoff + 1; each
    component is Hermitian-symmetric (real in physical space).
    """

    __slots__ = ("grid", "comps")

    def __init__(self, grid: SpectralGrid, comps: np.ndarray):
        comps = np.asarray(comps, dtype=np.complex128)
        S = 2 * grid.cutoff + 1
        if comps.shape != (2, 2, S, S):
            raise ValueError(f"expected shape (2, 2, {S}, {S}), got {comps.shape}")
        object.__setattr__(self, "grid", grid)
        c = comps.copy()
        c.flags.writeable = False
        object.__setattr__(self, "comps", c)

    def __setattr__(self, name, value):
        raise AttributeError("TensorField is immutable")

    @property
    def cutoff(self) -> int:
        return self.grid.cutoff

    def zero_mode(self) -> np.ndarray:
        """The (2, 2) matrix of k = 0 coefficients (spatial means)."""
        n = self.grid.cutoff
        return np.real(self.comps[:, :, n, n]).copy()

    def component_grid(self, i: int, j: int, size: int) -> np.ndarray:
        """Physical samples of component (i, j) on a size x size grid."""
        return scalar_to_grid(self.comps[i, j], size)

    def __sub__(self, other):
        if not isinstance(other, TensorField):
            raise TypeError("expected a TensorField")
        if other.grid.cutoff != self.grid.cutoff:
            raise ValueError("cutoff mismatch")
        return TensorField(self.grid, self.comps - other.comps)

    def hermitian_defect(self) -> float:
        flipped = np.conj(self.comps[:, :, ::-1, ::-1])
        return float(np.max(np.abs(self.comps - flipped)))


def scalar_to_grid(centered: np.ndarray, size: int) -> np.ndarray:
    """Sample a scalar field given centered coefficients on a size x size grid."""
    S = centered.shape[0]
    n = (S - 1) // 2
    if size < S:
        raise ValueError(f"size {size} too small for {S} retained frequencies")
    freqs = np.arange(-n, n + 1)
    rows = freqs % size
    work = np.zeros((size, size), dtype=np.complex128)
    work[np.ix_(rows, rows)] = centered
    return ifft2(work).real * (size * size)


def scalar_from_grid(phys: np.ndarray, cutoff: int) -> np.ndarray:
    """Centered Fourier coefficients (|k_i| <= cutoff) of grid samples."""
    size = phys.shape[0]
    if size < 2 * cutoff + 1:
        raise ValueError("grid too coarse for requested cutoff")
    work = fft2(phys) / (size * size)
    freqs = np.arange(-cutoff, cutoff + 1) % size
    return work[np.ix_(freqs, freqs)]


FIELD_HEADER = "sns2d-field v1"


def save_field(field: SpectralField, path):
    """Write a field as CSV rows (k1, k2, re, im) for the stored half-lattice.

    The header records the truncation and the coefficient convention; the
    conjugate half is implicit.
    """
    lines = [
        f"# {FIELD_HEADER}",
        f"# cutoff={field.cutoff}",
        "# basis=divergence-free orthonormal, e_k = (i/2pi)(k_perp/|k|) exp(ik.x)",
        "# layout=k1,k2,re,im (conjugate modes implicit)",
        "k1,k2,re,im",
    ]
    g = field.grid
    for a, b, c in zip(g.k1, g.k2, field.coeffs):
        lines.append(f"{a},{b},{float(c.real)!r},{float(c.imag)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path) -> SpectralField:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != f"# {FIELD_HEADER}":
        raise ValueError(f"{path}: not a {FIELD_HEADER} file")
    cutoff = None
    rows = []
    for ln in lines[1:]:
        if ln.startswith("# cutoff="):
            cutoff = int(ln.split("=", 1)[1])
        elif ln.startswith("#") or ln == "k1,k2,re,im" or not ln:
            continue
        else:
            rows.append(ln.split(","))
    if cutoff is None:
        raise ValueError(f"{path}: missing cutoff header")
    g = grid_for(cutoff)
    c = np.zeros(g.n_modes, dtype=np.complex128)
    for k1, k2, re, im in rows:
        c[g.mode_index[(int(k1), int(k2))]] = float(re) + 1j * float(im)
    return SpectralField(g, c)
