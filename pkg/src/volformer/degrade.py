"""Low-resolution volume synthesis by k-space truncation.

HR volume -> centred 3D FFT -> keep the central block (outer frequencies
dropped) -> inverse FFT on the smaller grid -> trilinear resize back to the
HR grid. The result has the HR dimensions but only the retained band.

Conventions pinned here:

* k-space is stored DC-centred (``fftshift`` layout); for an even axis of
  length n the DC bin sits at index n // 2.
* The retained block of length m starts at ``n//2 - m//2``, i.e. on even
  sizes it keeps one more negative than positive frequency. Its lowest
  (Nyquist) plane is replaced by the mean of the -m/2 and +m/2 bins of the
  source spectrum, which keeps the block Hermitian for real input.
* Each LR sample is placed at the centre of the HR voxels it covers, which
  is the geometry trilinear resizing with half-voxel centres expects.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import resize_trilinear_array
from .volume import Volume

DEFAULT_FACTORS = (2, 2, 1)
IMAG_TOLERANCE = 1e-5


class DegradeError(ValueError):
    """Invalid truncation request or non-real inverse transform."""


@dataclass
class KSpace:
    data: np.ndarray  # complex128, DC-centred

    @property
    def dims(self):
        return self.data.shape

    def energy(self):
        return float(np.sum(np.abs(self.data) ** 2))


def _spatial(v):
    if isinstance(v, Volume):
        return v.array.astype(np.float64)
    arr = np.asarray(v, dtype=np.float64)
    return arr[0] if arr.ndim == 4 else arr


def fft3d(v):
    """Unnormalised forward DFT (DC bin = sum of voxels), centred."""
    return KSpace(np.fft.fftshift(np.fft.fftn(_spatial(v))))


def ifft3d(k, check_real=True):
    """Inverse of :func:`fft3d`; returns the real part as float64.

    With ``check_real`` a residual imaginary component above
    ``IMAG_TOLERANCE`` (max-abs) raises :class:`DegradeError`.
    """
    img = np.fft.ifftn(np.fft.ifftshift(k.data))
    if check_real:
        residue = float(np.abs(img.imag).max()) if img.size else 0.0
        if residue > IMAG_TOLERANCE:
            raise DegradeError(f"inverse FFT has imaginary residue {residue:.3g} > {IMAG_TOLERANCE}")
    return img.real


def _check_factors(dims, factors):
    factors = tuple(int(f) for f in factors)
    if len(factors) != 3 or min(factors) < 1:
        raise DegradeError(f"factors must be three positive ints, got {factors}")
    for n, f in zip(dims, factors):
        if n % f:
            raise DegradeError(f"factor {f} does not divide axis length {n}")
    return factors


def truncate_kspace(k, factors=DEFAULT_FACTORS, hermitian=True):
    """Keep the centred ``dims / factors`` block of a centred spectrum.

    With ``hermitian`` the Nyquist plane of every reduced even-length axis
    averages the two source bins that alias onto it.
    """
    factors = _check_factors(k.dims, factors)
    data = k.data
    for axis, (n, f) in enumerate(zip(k.dims, factors)):
        if f == 1:
            continue
        m = n // f
        start = n // 2 - m // 2
        block = np.take(data, np.arange(start, start + m), axis=axis)
        if hermitian and m % 2 == 0:
            upper = np.take(data, [n // 2 + m // 2], axis=axis)
            lower = np.take(block, [0], axis=axis)
            idx = [slice(None)] * 3
            idx[axis] = slice(0, 1)
            block[tuple(idx)] = 0.5 * (lower + upper)
        data = block
    return KSpace(np.ascontiguousarray(data))


def _centre_on_voxels(k, factors):
    """Phase ramp on a full-size spectrum so that, after truncation, LR
    sample x' lands on HR position f*x' + (f-1)/2."""
    out = k.data.copy()
    for axis, (n, f) in enumerate(zip(k.dims, factors)):
        if f == 1:
            continue
        freqs = np.arange(n) - n // 2
        shape = [1, 1, 1]
        shape[axis] = n
        out *= np.exp(2j * np.pi * freqs * ((f - 1) / 2.0) / n).reshape(shape)
    return KSpace(out)


def trilinear_resize(v, target):
    """Resize with half-voxel-centred linear interpolation on each axis."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three positive ints, got {target}")
    arr = resize_trilinear_array(_spatial(v), target)
    if isinstance(v, Volume):
        return Volume(arr.astype(np.float32), spacing=v.spacing, id=v.id)
    return arr


def degrade(hr, factors=DEFAULT_FACTORS):
    """Simulate a low-resolution acquisition of ``hr`` at the HR grid size."""
    dims = hr.dims
    factors = _check_factors(dims, factors)
    k = _centre_on_voxels(fft3d(hr), factors)
    small = truncate_kspace(k, factors)
    # inverse transform on the small grid; rescale so DC keeps the mean
    scale = np.prod(small.dims) / np.prod(dims)
    low = ifft3d(KSpace(small.data * scale))
    up = resize_trilinear_array(low, dims)
    out = np.clip(up, 0.0, 1.0).astype(np.float32)
    return Volume(out, spacing=hr.spacing, id=hr.id)
