"""Periodic-grid geometry and truncated Fourier transforms on the unit torus.

All fields live on uniform grids over [0, 1)^d with integer frequencies.
The forward transform is normalised by the number of grid points,

    F[v](k) = (1 / prod(n)) * sum_x v(x) * exp(-i 2 pi k.x),

so coefficients of a band-limited function do not depend on the sampling
resolution.  Only a truncated half-spectrum is stored: both signs of each
frequency are kept along every dimension except the last, where only
non-negative frequencies are retained and the inverse transform completes
the spectrum by Hermitian symmetry.

The heat semigroup acts diagonally in this basis: mode k is damped by
exp(-4 pi^2 |k|^2 tau), which is the decaying solution multiplier of the
heat equation on the torus.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as _fft

FOUR_PI_SQ = 4.0 * np.pi ** 2


class ConfigError(ValueError):
    """Raised when grids, mode sets, or shapes are inconsistent."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the unit torus [0, 1)^d.

    Parameters
    ----------
    n : tuple of int
        Points per dimension.  Each count must be even and at least 4,
        so that every retained mode set has an alias-free home.
    """

    n: tuple[int, ...]

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        object.__setattr__(self, "n", n)
        if len(n) < 1:
            raise ConfigError("grid needs at least one dimension")
        for nj in n:
            if nj < 4 or nj % 2 != 0:
                raise ConfigError(f"grid sizes must be even and >= 4, got {n}")

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def num_points(self) -> int:
        return int(np.prod(self.n))

    def coords(self) -> list[np.ndarray]:
        """Per-dimension coordinate arrays x_j = m_j / n_j."""
        return [np.arange(nj) / nj for nj in self.n]

    def meshgrid(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.coords(), indexing="ij"))


@dataclass(frozen=True)
class ModeSet:
    """Retained frequency multi-indices under the half-spectrum convention.

    Keeps |k_j| <= kmax_j - 1 for every dimension except the last, and
    0 <= k_d <= kmax_d - 1 along the last.  A mode set is compatible with a
    grid when 2 * kmax_j <= n_j for all j, which guarantees the retained
    modes are alias-free.
    """

    kmax: tuple[int, ...]

    def __post_init__(self):
        kmax = tuple(int(v) for v in self.kmax)
        object.__setattr__(self, "kmax", kmax)
        if len(kmax) < 1 or any(k < 1 for k in kmax):
            raise ConfigError(f"mode truncations must be >= 1, got {kmax}")

    @property
    def d(self) -> int:
        return len(self.kmax)

    @property
    def axis_counts(self) -> tuple[int, ...]:
        return _axis_counts(self.kmax)

    @property
    def count(self) -> int:
        """Number of retained modes."""
        return int(np.prod(self.axis_counts))

    def axis_freqs(self) -> list[np.ndarray]:
        """Signed integer frequencies kept along each axis, in FFT order."""
        return [f.copy() for f in _axis_freqs(self.kmax)]

    def require_compatible(self, grid: Grid) -> None:
        if grid.d != self.d:
            raise ConfigError(f"mode set rank {self.d} != grid rank {grid.d}")
        for kj, nj in zip(self.kmax, grid.n):
            if 2 * kj > nj:
                raise ConfigError(
                    f"kmax={self.kmax} aliases on grid n={grid.n}: need 2*kmax <= n"
                )


@dataclass(frozen=True)
class FrequencyLattice:
    """Squared frequency norms s(k) = sum_j k_j^2 over a retained mode set."""

    sq_norms: np.ndarray  # (K,) integer-valued

    @classmethod
    def from_modes(cls, modes: ModeSet) -> "FrequencyLattice":
        return cls(sq_norms=_sq_norms(modes.kmax).copy())

    @property
    def eigenvalues(self) -> np.ndarray:
        """Magnitudes 4 pi^2 s(k) of the torus Laplacian eigenvalues."""
        return FOUR_PI_SQ * self.sq_norms


@dataclass
class Field:
    """Real channel-valued function sampled on a periodic grid.

    Values are stored as a (*n, c) array, so channels vary fastest in the
    row-major memory layout.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expect = tuple(self.grid.n)
        if self.values.ndim != self.grid.d + 1 or self.values.shape[:-1] != expect:
            raise ConfigError(
                f"field values shape {self.values.shape} does not match grid "
                f"{expect} + channel axis"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def channel_means(self) -> np.ndarray:
        return self.values.reshape(-1, self.channels).mean(axis=0)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class SpectralField:
    """Complex coefficients of a Field on a truncated half-spectrum.

    Coefficients are stored flat as a (K, c) array, where K enumerates the
    retained modes in C order of the per-axis frequency lists.
    """

    modes: ModeSet
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.modes.count:
            raise ConfigError(
                f"coefficient shape {self.coeffs.shape} does not match "
                f"{self.modes.count} retained modes"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("spectral coefficients must be finite")

    @property
    def channels(self) -> int:
        return self.coeffs.shape[-1]


# ---------------------------------------------------------------------------
# cached index machinery
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _axis_counts(kmax: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(2 * k - 1 for k in kmax[:-1]) + (kmax[-1],)


@lru_cache(maxsize=None)
def _axis_freqs(kmax: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    freqs = []
    for k in kmax[:-1]:
        freqs.append(np.r_[0:k, -(k - 1):0].astype(np.int64))
    freqs.append(np.arange(kmax[-1], dtype=np.int64))
    return tuple(freqs)


@lru_cache(maxsize=None)
def _sq_norms(kmax: tuple[int, ...]) -> np.ndarray:
    grids = np.meshgrid(*_axis_freqs(kmax), indexing="ij")
    s = sum(g.astype(np.int64) ** 2 for g in grids)
    return s.reshape(-1)


@lru_cache(maxsize=None)
def _full_positions(n: tuple[int, ...], kmax: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    """Per-axis positions of retained frequencies in the full FFT layout."""
    return tuple(f % nj for f, nj in zip(_axis_freqs(kmax), n))


@lru_cache(maxsize=None)
def _rfft_positions(n: tuple[int, ...], kmax: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    """Per-axis positions in the rfftn layout (last axis halved)."""
    pos = list(_full_positions(n, kmax))
    pos[-1] = _axis_freqs(kmax)[-1].copy()
    return tuple(pos)


def _check_compat(n: tuple[int, ...], kmax: tuple[int, ...]) -> None:
    ModeSet(kmax).require_compatible(Grid(n))


def _block_index(positions: tuple[np.ndarray, ...]):
    """Open-mesh index tuple addressing a Cartesian block of mode positions."""
    return (Ellipsis, *np.ix_(*positions), slice(None))


# ---------------------------------------------------------------------------
# raw transform kernels (batched: arrays shaped (..., *n, c) / (..., K, c))
# ---------------------------------------------------------------------------

def forward_modes(values: np.ndarray, n: tuple[int, ...], kmax: tuple[int, ...]) -> np.ndarray:
    """Normalised forward transform truncated to the retained modes."""
    _check_compat(n, kmax)
    d = len(n)
    axes = tuple(range(values.ndim - 1 - d, values.ndim - 1))
    spec = _fft.rfftn(values, axes=axes, norm="forward")
    block = spec[_block_index(_rfft_positions(n, kmax))]
    lead = values.shape[: values.ndim - 1 - d]
    k_total = int(np.prod(_axis_counts(kmax)))
    return np.ascontiguousarray(block).reshape(*lead, k_total, values.shape[-1])


def inverse_modes(coeffs: np.ndarray, n: tuple[int, ...], kmax: tuple[int, ...]) -> np.ndarray:
    """Real field reconstructed from retained modes by Hermitian completion."""
    _check_compat(n, kmax)
    d = len(n)
    counts = _axis_counts(kmax)
    lead = coeffs.shape[:-2]
    c = coeffs.shape[-1]
    block = coeffs.reshape(*lead, *counts, c)
    rshape = (*lead, *n[:-1], n[-1] // 2 + 1, c)
    spec = np.zeros(rshape, dtype=np.complex128)
    spec[_block_index(_rfft_positions(n, kmax))] = block
    axes = tuple(range(spec.ndim - 1 - d, spec.ndim - 1))
    return _fft.irfftn(spec, s=n, axes=axes, norm="forward")


def forward_modes_adjoint(grad: np.ndarray, n: tuple[int, ...], kmax: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`forward_modes`: zero-padded normalised inverse.

    Equal to Re(ifftn(scatter(grad))) with the 1/N normalisation.  Because
    the inverse real transform implicitly adds the Hermitian mirror of every
    positive last-axis mode, those entries are halved before scattering.
    """
    d = len(n)
    counts = _axis_counts(kmax)
    lead = grad.shape[:-2]
    c = grad.shape[-1]
    block = grad.reshape(*lead, *counts, c).copy()
    block[..., 1:, :] *= 0.5
    rshape = (*lead, *n[:-1], n[-1] // 2 + 1, c)
    spec = np.zeros(rshape, dtype=np.complex128)
    spec[_block_index(_rfft_positions(n, kmax))] = block
    axes = tuple(range(spec.ndim - 1 - d, spec.ndim - 1))
    return _fft.irfftn(spec, s=n, axes=axes, norm="backward")


def inverse_modes_adjoint(grad: np.ndarray, n: tuple[int, ...], kmax: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`inverse_modes` on a real cotangent field.

    Gathers the unscaled forward transform at the retained modes; a mode
    with positive last-axis frequency also collects the conjugate of its
    Hermitian mirror, which for a real cotangent equals the mode itself,
    hence the factor two.
    """
    d = len(n)
    axes = tuple(range(grad.ndim - 1 - d, grad.ndim - 1))
    spec = _fft.rfftn(grad, axes=axes, norm="backward")
    counts = _axis_counts(kmax)
    block = np.ascontiguousarray(spec[_block_index(_rfft_positions(n, kmax))])
    block[..., 1:, :] *= 2.0
    lead = grad.shape[: grad.ndim - 1 - d]
    return block.reshape(*lead, int(np.prod(counts)), grad.shape[-1])


def diffusion_multiplier(sq_norms: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Heat-kernel damping exp(-4 pi^2 s(k) tau_c), shaped (K, c)."""
    tau = np.asarray(tau, dtype=np.float64)
    return np.exp(-FOUR_PI_SQ * np.asarray(sq_norms, dtype=np.float64)[:, None] * tau[None, :])


# ---------------------------------------------------------------------------
# public operations on wrapper types
# ---------------------------------------------------------------------------

def forward_fft(field: Field, modes: ModeSet) -> SpectralField:
    """Truncated normalised Fourier transform of a real field.

    Raises
    ------
    ConfigError
        If the mode set aliases on the field's grid.
    """
    modes.require_compatible(field.grid)
    coeffs = forward_modes(field.values, field.grid.n, modes.kmax)
    return SpectralField(modes=modes, coeffs=coeffs)


def inverse_fft(spectral: SpectralField, grid: Grid) -> Field:
    """Real field reconstructed from a truncated half-spectrum."""
    spectral.modes.require_compatible(grid)
    values = inverse_modes(spectral.coeffs, grid.n, spectral.modes.kmax)
    return Field(grid=grid, values=values)


def diffuse(spectral: SpectralField, tau) -> SpectralField:
    """Apply the heat semigroup for per-channel times tau >= 0.

    Coefficient (k, c) is scaled by exp(-4 pi^2 s(k) tau_c); the mean mode
    k = 0 is left unchanged.  Nonnegative times compose additively
    (semigroup property) and never increase the L2 norm.
    """
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (spectral.channels,))
    if np.any(tau < 0):
        raise ValueError(f"diffusion times must be nonnegative, got {tau}")
    mult = diffusion_multiplier(_sq_norms(spectral.modes.kmax), tau)
    return SpectralField(modes=spectral.modes, coeffs=spectral.coeffs * mult)


def spectral_gradient(spectral: SpectralField, grid: Grid) -> Field:
    """Spatial gradient evaluated spectrally.

    Multiplies mode k of channel c by i 2 pi k_j and inverts, returning a
    field with c*d channels ordered channel-major: the gradient of channel
    c along dimension j lands in output channel c*d + j.
    """
    spectral.modes.require_compatible(grid)
    kmax = spectral.modes.kmax
    counts = _axis_counts(kmax)
    freq_grids = np.meshgrid(*_axis_freqs(kmax), indexing="ij")
    c = spectral.channels
    parts = []
    for j in range(len(kmax)):
        factor = (2j * np.pi * freq_grids[j].reshape(-1).astype(np.float64))[:, None]
        parts.append(inverse_modes(spectral.coeffs * factor, grid.n, kmax))
    stacked = np.stack(parts, axis=-1)  # (*n, c, d)
    return Field(grid=grid, values=stacked.reshape(*grid.n, c * len(kmax)))


# ---------------------------------------------------------------------------
# full-spectrum helpers (used by the synthetic data generators)
# ---------------------------------------------------------------------------

def rfft_sq_norm_grid(n: tuple[int, ...]) -> np.ndarray:
    """Integer |k|^2 on the full rfftn layout of an n-point grid."""
    freqs = [np.rint(np.fft.fftfreq(nj) * nj).astype(np.int64) for nj in n[:-1]]
    freqs.append(np.arange(n[-1] // 2 + 1, dtype=np.int64))
    grids = np.meshgrid(*freqs, indexing="ij")
    return sum(g ** 2 for g in grids)


def rfft_derivative_factors(n: tuple[int, ...]) -> list[np.ndarray]:
    """Spectral derivative multipliers i 2 pi k_j on the rfftn layout.

    Nyquist rows are zeroed so differentiation stays skew-adjoint on the
    real grid, which keeps grid-space divergence-form operators symmetric.
    """
    factors = []
    for j in range(len(n)):
        axis_freqs = []
        for ax, nj in enumerate(n[:-1]):
            f = np.rint(np.fft.fftfreq(nj) * nj).astype(np.int64)
            f[np.abs(f) == nj // 2] = 0
            axis_freqs.append(f)
        f_last = np.arange(n[-1] // 2 + 1, dtype=np.int64)
        f_last[f_last == n[-1] // 2] = 0
        axis_freqs.append(f_last)
        grids = np.meshgrid(*axis_freqs, indexing="ij")
        factors.append(2j * np.pi * grids[j].astype(np.float64))
    return factors
