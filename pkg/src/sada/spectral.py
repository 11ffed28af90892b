"""Fourier conventions: centered unitary spectra, basis images and basis noise.

All transforms use orthonormal scaling in both directions and a centered
layout, so the DC bin of an ``H x W`` grid sits at row ``H // 2``, column
``W // 2``. Frequency coordinates ``(i, j)`` are offsets from that center,
``i`` in ``[-(H // 2), (H - 1) // 2]``.

Arrays follow the channels-first convention ``(..., C, H, W)``; every
function operates on the last two axes and broadcasts over the rest.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sada._util import (
    fingerprint_arrays,
    read_grid_csv,
    read_json,
    write_grid_csv,
    write_json,
)
from sada.errors import InvalidInputError

_AXES = (-2, -1)


@dataclass(frozen=True)
class SpectrumPair:
    """Centered amplitude and phase grids of an image, same shape as the image."""

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise InvalidInputError(
                f"amplitude {self.amplitude.shape} and phase {self.phase.shape} differ in shape"
            )


@dataclass(frozen=True)
class MeanAmplitudeSpectrum:
    """Mean source amplitude spectrum collapsed to one ``H x W`` grid."""

    values: np.ndarray
    source_fingerprint: str
    channels_policy: str = "channel_mean"
    fft_norm: str = "backward"

    @property
    def shape(self):
        return self.values.shape

    @property
    def fingerprint(self):
        return fingerprint_arrays(self.values, extra=self.source_fingerprint + self.fft_norm)

    def at(self, i, j):
        H, W = self.values.shape
        check_frequency(i, j, H, W)
        return float(self.values[i + H // 2, j + W // 2])


def centered_fft(x):
    return np.fft.fftshift(np.fft.fft2(x, axes=_AXES, norm="ortho"), axes=_AXES)


def centered_ifft(z):
    return np.fft.ifft2(np.fft.ifftshift(z, axes=_AXES), axes=_AXES, norm="ortho")


def _check_pixels(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise InvalidInputError(f"image needs at least 2x2 spatial extent, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("image contains non-finite pixels")
    return x


def decompose(image):
    """Split an image (or batch) into centered amplitude and phase.

    Args:
      image: real array ``(..., H, W)``. Channels are transformed independently.

    Returns:
      SpectrumPair with amplitude >= 0 and phase in (-pi, pi].
    """
    z = centered_fft(_check_pixels(image))
    return SpectrumPair(np.abs(z), np.angle(z))


def combine(amplitude, phase):
    """Unclamped real reconstruction ``Re(IFFT[A * exp(i P)])``."""
    return np.real(centered_ifft(amplitude * np.exp(1j * phase)))


def reconstruct(spectrum, clamp=True, return_residual=False):
    """Inverse of :func:`decompose`.

    The real part of the inverse transform is kept. When the amplitude is not
    Hermitian-symmetric the discarded imaginary part can be large; pass
    ``return_residual=True`` to get its max magnitude as a diagnostic.
    """
    amp = np.asarray(spectrum.amplitude, dtype=np.float64)
    if np.any(amp < 0):
        raise InvalidInputError("amplitude must be nonnegative")
    z = centered_ifft(amp * np.exp(1j * np.asarray(spectrum.phase, dtype=np.float64)))
    out = np.real(z)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    if return_residual:
        return out, float(np.max(np.abs(np.imag(z)))) if z.size else 0.0
    return out


def frequency_bounds(n):
    return -(n // 2), (n - 1) // 2


def check_frequency(i, j, H, W):
    lo_i, hi_i = frequency_bounds(H)
    lo_j, hi_j = frequency_bounds(W)
    if not (lo_i <= i <= hi_i and lo_j <= j <= hi_j):
        raise InvalidInputError(
            f"frequency ({i}, {j}) outside [{lo_i}, {hi_i}] x [{lo_j}, {hi_j}] for a {H}x{W} grid"
        )


def twin_frequency(i, j, H, W):
    """Centered coordinates of the conjugate bin ``(-i, -j)``, wrapped onto the grid."""
    lo_i, _ = frequency_bounds(H)
    lo_j, _ = frequency_bounds(W)
    return (-i - lo_i) % H + lo_i, (-j - lo_j) % W + lo_j


def twin_index_grids(H, W):
    """Array-index maps sending each centered bin to its conjugate twin.

    ``g[..., rows, cols]`` is the grid with every bin replaced by its twin.
    """
    r = np.arange(H)
    c = np.arange(W)
    # index k <-> centered freq k - H//2; twin freq -(k - H//2) -> index (H//2 - (k - H//2)) mod H
    tr = (2 * (H // 2) - r) % H
    tc = (2 * (W // 2) - c) % W
    return np.meshgrid(tr, tc, indexing="ij")


def canonical_mask(H, W):
    """True on one representative of every conjugate pair (self-paired bins included)."""
    rows, cols = twin_index_grids(H, W)
    flat = np.arange(H * W).reshape(H, W)
    return flat <= rows * W + cols


def hermitian_mirror(grid):
    """Copy each canonical bin's value onto its twin, making the grid point-symmetric."""
    H, W = grid.shape[-2:]
    rows, cols = twin_index_grids(H, W)
    return np.where(canonical_mask(H, W), grid, grid[..., rows, cols])


def hermitian_average(grid):
    H, W = grid.shape[-2:]
    rows, cols = twin_index_grids(H, W)
    return 0.5 * (grid + grid[..., rows, cols])


def frequency_pairs(H, W):
    """Canonical representative ``(i, j)`` of every conjugate pair, row-major order."""
    mask = canonical_mask(H, W)
    rows, cols = np.nonzero(mask)
    return [(int(r) - H // 2, int(c) - W // 2) for r, c in zip(rows, cols)]


def basis_image(i, j, H, W):
    """Unit-norm real image whose spectrum lives only on bins (i, j) and (-i, -j).

    The pair is canonicalized first so that ``basis_image(i, j)`` and
    ``basis_image(-i, -j)`` are bit-identical. Self-paired bins (DC and the
    Nyquist corners of even grids) receive a single nonzero entry.
    """
    check_frequency(i, j, H, W)
    ti, tj = twin_frequency(i, j, H, W)
    a = (i + H // 2) * W + (j + W // 2)
    b = (ti + H // 2) * W + (tj + W // 2)
    if b < a:
        i, j, ti, tj = ti, tj, i, j
    z = np.zeros((H, W), dtype=np.complex128)
    z[i + H // 2, j + W // 2] = 1.0
    z[ti + H // 2, tj + W // 2] = 1.0
    u = np.real(centered_ifft(z))
    return u / np.linalg.norm(u)


def _sign(r):
    if r not in (-1, 1):
        raise InvalidInputError(f"r must be -1 or +1, got {r}")
    return float(r)


def basis_noise(i, j, epsilon, r, H, W):
    """Fourier basis noise ``r * epsilon * U_ij``; its l2 norm is ``epsilon``."""
    if epsilon < 0:
        raise InvalidInputError("epsilon must be nonnegative")
    return _sign(r) * float(epsilon) * basis_image(i, j, H, W)


def amplitude_modulated_noise(i, j, D, r):
    """Basis noise scaled by the mean source amplitude at (i, j)."""
    H, W = D.shape
    return _sign(r) * D.at(i, j) * basis_image(i, j, H, W)


def mean_amplitude(images, fft_norm="backward", chunk=512):
    """Average amplitude spectrum over a dataset.

    Args:
      images: array ``(N, C, H, W)`` / ``(N, H, W)``, a sequence of equally
        shaped arrays, or any object with an ``images`` attribute.
      fft_norm: FFT normalization the magnitudes are expressed in. The
        default ``"backward"`` is the plain unnormalized forward FFT, i.e.
        the unitary amplitude times ``sqrt(H * W)``; at that level, basis
        noise of norm ``D(i, j)`` is large enough to expose the low-frequency
        fragility of digit classifiers. ``"ortho"`` returns the unitary
        amplitudes produced by :func:`decompose`.
      chunk: images transformed per FFT call.

    Returns:
      MeanAmplitudeSpectrum whose grid is the per-channel means averaged
      over channels.
    """
    if fft_norm not in ("backward", "ortho"):
        raise InvalidInputError("fft_norm must be 'backward' or 'ortho'")
    images = getattr(images, "images", images)
    if not isinstance(images, np.ndarray):
        images = list(images)
        if not images:
            raise InvalidInputError("cannot average over an empty dataset")
        shapes = {np.shape(x) for x in images}
        if len(shapes) != 1:
            raise InvalidInputError(f"heterogeneous image shapes: {sorted(shapes)}")
        images = np.stack(images)
    if images.shape[0] == 0:
        raise InvalidInputError("cannot average over an empty dataset")
    if images.ndim == 3:
        images = images[:, None]
    total = np.zeros(images.shape[1:], dtype=np.float64)
    for start in range(0, len(images), chunk):
        block = _check_pixels(images[start:start + chunk])
        total += np.abs(centered_fft(block)).sum(axis=0)
    per_channel = total / len(images)
    values = per_channel.mean(axis=0)
    if fft_norm == "backward":
        values = values * np.sqrt(images.shape[-2] * images.shape[-1])
    fp = fingerprint_arrays(np.asarray(images, dtype=np.float32))
    return MeanAmplitudeSpectrum(values=values, source_fingerprint=fp, fft_norm=fft_norm)


def save_mean_amplitude(D, stem):
    """Write ``<stem>.csv`` (row-major centered grid) and ``<stem>.json`` sidecar."""
    stem = Path(stem)
    write_grid_csv(stem.with_suffix(".csv"), D.values)
    H, W = D.shape
    write_json(
        stem.with_suffix(".json"),
        {
            "height": H,
            "width": W,
            "channels_policy": D.channels_policy,
            "source_fingerprint": D.source_fingerprint,
            "fft_norm": D.fft_norm,
        },
    )
    return stem.with_suffix(".csv"), stem.with_suffix(".json")


def load_mean_amplitude(stem):
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    values = read_grid_csv(stem.with_suffix(".csv"))
    if values.shape != (meta["height"], meta["width"]):
        raise InvalidInputError(f"CSV grid {values.shape} disagrees with sidecar dimensions")
    return MeanAmplitudeSpectrum(
        values=values,
        source_fingerprint=meta["source_fingerprint"],
        channels_policy=meta.get("channels_policy", "channel_mean"),
        fft_norm=meta.get("fft_norm", "backward"),
    )
