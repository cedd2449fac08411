"""IR and Raman spectra from dipole and polarizability time series.

Spectra are the Fourier transform of the biased autocorrelation of the
mean-subtracted, Hann-tapered series, multiplied by ``omega**2``. Time steps
are in fs, frequencies are reported in THz and cm^-1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import InsufficientDataError, ParseError, ShapeError

MIN_FRAMES = 16
THZ_TO_CM = 33.35641


@dataclass
class Spectrum:
    thz: np.ndarray
    wavenumber: np.ndarray
    intensity: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.thz[1] - self.thz[0]) if len(self.thz) > 1 else 0.0


@dataclass
class RamanSpectrum:
    thz: np.ndarray
    wavenumber: np.ndarray
    isotropic: np.ndarray
    anisotropic: np.ndarray


def decompose_polarizability(alpha) -> Tuple[np.ndarray, np.ndarray]:
    """``alpha = gamma * I + beta`` with ``beta`` traceless; works on stacks ``(..., 3, 3)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-2:] != (3, 3):
        raise ShapeError(f"polarizability must end in (3, 3), got {alpha.shape}")
    gamma = np.trace(alpha, axis1=-2, axis2=-1) / 3.0
    beta = alpha - gamma[..., None, None] * np.eye(3)
    return gamma, beta


def _as_series(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1) if x.ndim != 1 else x[:, None]


def autocorrelation(x) -> np.ndarray:
    """Biased ACF ``C(tau) = 1/T sum_t x(t) . x(t + tau)`` via zero-padded FFT."""
    x = _as_series(x)
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size, axis=0)
    acf = np.fft.irfft((f * f.conj()).real, n=size, axis=0)[:n]
    return acf.sum(axis=1) / n


def autocorrelation_direct(x) -> np.ndarray:
    x = _as_series(x)
    n = len(x)
    return np.asarray([np.sum(x[: n - tau] * x[tau:]) for tau in range(n)]) / n


def _prepare(x, window: str) -> np.ndarray:
    x = _as_series(x)
    if len(x) < MIN_FRAMES:
        raise InsufficientDataError(f"need at least {MIN_FRAMES} frames, got {len(x)}")
    x = x - x.mean(axis=0)
    if window == "hann":
        x = x * np.hanning(len(x))[:, None]
    elif window != "none":
        raise ValueError(f"unknown window {window!r}")
    return x


def _acf_transform(acf: np.ndarray, dt: float, padding: int):
    """Real FT of the even extension of ``acf`` on a grid of ``padding * 2T`` points."""
    n = len(acf)
    size = max(padding, 1) * 2 * n
    full = np.zeros(size)
    full[:n] = acf
    full[size - n + 1:] = acf[1:][::-1]
    spec = np.fft.rfft(full).real * dt
    freq = np.fft.rfftfreq(size, d=dt)
    return freq * 1e3, spec  # 1/fs -> THz


def power_spectrum(x, dt: float, padding: int = 4, window: str = "hann") -> Spectrum:
    """FT of the autocorrelation without the ``omega**2`` factor or normalization."""
    thz, spec = _acf_transform(autocorrelation(_prepare(x, window)), dt, padding)
    return Spectrum(thz, thz * THZ_TO_CM, spec)


def _weighted(thz, spec):
    omega = 2.0 * np.pi * thz
    return omega**2 * spec


def _normalize(*arrays):
    peak = max(float(np.max(np.abs(a))) for a in arrays)
    if peak <= 0.0:
        return arrays
    return tuple(a / peak for a in arrays)


def ir_spectrum(dipoles, dt: float, padding: int = 4, window: str = "hann", normalize: bool = True) -> Spectrum:
    """IR intensity ``omega^2 FT<mu(0) . mu(t)>`` from a ``(T, 3)`` dipole series."""
    d = np.asarray(dipoles, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ShapeError(f"dipole series must have shape (T, 3), got {d.shape}")
    ps = power_spectrum(d, dt, padding, window)
    inten = _weighted(ps.thz, ps.intensity)
    if normalize:
        (inten,) = _normalize(inten)
    return Spectrum(ps.thz, ps.wavenumber, inten)


def raman_spectra(alphas, dt: float, padding: int = 4, window: str = "hann", normalize: bool = True) -> RamanSpectrum:
    """Isotropic and anisotropic Raman intensities from a ``(T, 3, 3)`` polarizability series.

    Both are normalized by their common peak so their ratio is kept.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 3 or a.shape[1:] != (3, 3):
        raise ShapeError(f"polarizability series must have shape (T, 3, 3), got {a.shape}")
    a = 0.5 * (a + a.transpose(0, 2, 1))
    gamma, beta = decompose_polarizability(a)
    iso = power_spectrum(gamma, dt, padding, window)
    # Tr(beta(0) beta(t)) for symmetric beta is the sum over all 9 components
    aniso = power_spectrum(beta.reshape(len(beta), 9), dt, padding, window)
    r_iso, r_aniso = _weighted(iso.thz, iso.intensity), _weighted(aniso.thz, aniso.intensity)
    if normalize:
        r_iso, r_aniso = _normalize(r_iso, r_aniso)
    return RamanSpectrum(iso.thz, iso.wavenumber, r_iso, r_aniso)


def peak_frequency(spectrum: Spectrum) -> float:
    return float(spectrum.thz[int(np.argmax(spectrum.intensity))])


# -- trajectory I/O ----------------------------------------------------------------


def read_tensor_series(path) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Read ``(dipoles, polarizabilities)`` from a columnar text file or extended XYZ.

    Text files hold one frame per row with 3 (dipole), 9 (polarizability,
    row-major) or 12 (dipole then polarizability) columns; ``#`` starts a
    comment. Extended-XYZ files use the ``dipole`` and ``polarizability`` keys.
    """
    path = str(path)
    if path.endswith(".xyz") or path.endswith(".extxyz"):
        from .extxyz import read_extxyz

        frames = read_extxyz(path)
        mu = [f.dipole for f in frames]
        al = [f.polarizability for f in frames]
        dip = np.asarray(mu) if all(m is not None for m in mu) and mu else None
        pol = np.asarray(al) if all(a is not None for a in al) and al else None
        return dip, pol
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise ParseError(f"non-numeric value in {line!r}", lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"expected {len(rows[0])} columns, got {len(rows[-1])}", lineno)
    data = np.asarray(rows)
    width = data.shape[1] if data.ndim == 2 else 0
    if width == 3:
        return data, None
    if width == 9:
        return None, data.reshape(-1, 3, 3)
    if width == 12:
        return data[:, :3], data[:, 3:].reshape(-1, 3, 3)
    raise ParseError(f"trajectory rows need 3, 9 or 12 columns, got {width}")


def write_spectrum(path, columns: dict) -> None:
    names = list(columns)
    data = np.column_stack([columns[k] for k in names])
    np.savetxt(path, data, header=" ".join(names), fmt="%.10e")
