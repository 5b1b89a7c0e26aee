"""Frequency-domain masking used by the detail branch.

``freq_mask`` takes an image (or batch of images) to its 2D spectrum and
zeroes every bin inside a circular low-frequency region around the origin;
``ifft_to_real`` maps a spectrum back to the spatial domain. Both are plain
tensor ops, so gradients flow through the composition.
"""

from __future__ import annotations

import warnings

import torch

IMAG_RESIDUAL_TOL = 1e-5

_mask_cache: dict[tuple, torch.Tensor] = {}


class AsymmetricSpectrumWarning(UserWarning):
    """Discarded imaginary part was larger than the symmetric-input bound."""


def lowpass_removal_mask(height: int, width: int, cutoff_fraction: float,
                         device=None, dtype=torch.float32) -> torch.Tensor:
    """Binary (H, W) mask: 0 inside the removed low-frequency disk, 1 outside.

    The disk has radius ``cutoff_fraction`` times the Nyquist radius (0.5 in
    normalized frequency), measured radially around the zero-frequency
    origin. The DC bin is always removed.
    """
    if not 0.0 <= cutoff_fraction <= 1.0:
        raise ValueError(f"cutoff_fraction must be in [0, 1], got {cutoff_fraction}")
    key = (height, width, float(cutoff_fraction), str(device), dtype)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    fy = torch.fft.fftfreq(height, device=device, dtype=torch.float64)
    fx = torch.fft.fftfreq(width, device=device, dtype=torch.float64)
    dist = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    keep = dist > cutoff_fraction * 0.5
    keep[0, 0] = False  # DC always removed
    mask = keep.to(dtype)
    _mask_cache[key] = mask
    return mask


def freq_mask(x: torch.Tensor, cutoff_fraction: float) -> torch.Tensor:
    """High-pass spectrum of ``x``: fft2 over the last two dims, low bins zeroed.

    Accepts real (..., H, W) input of at least 2x2 spatial extent and returns
    a complex tensor of the same shape.
    """
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError(f"spatial dims must be at least 2x2, got {tuple(x.shape[-2:])}")
    spectrum = torch.fft.fft2(x)
    mask = lowpass_removal_mask(x.shape[-2], x.shape[-1], cutoff_fraction,
                                device=x.device, dtype=spectrum.real.dtype)
    return spectrum * mask


def ifft_to_real(spectrum: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Inverse 2D FFT, returning the real part.

    For conjugate-symmetric spectra (any masked spectrum of a real image)
    the imaginary residual is numerical noise; if ``check`` is set and the
    residual exceeds the bound, a diagnostic warning is emitted.
    """
    out = torch.fft.ifft2(spectrum)
    if check and not spectrum.requires_grad:
        scale = out.real.abs().max().item()
        residual = out.imag.abs().max().item()
        if residual > IMAG_RESIDUAL_TOL * max(1.0, scale):
            warnings.warn(
                f"imaginary residual {residual:.3e} exceeds {IMAG_RESIDUAL_TOL:.0e}; "
                "input spectrum was not conjugate-symmetric",
                AsymmetricSpectrumWarning,
            )
    return out.real


def high_pass(x: torch.Tensor, cutoff_fraction: float, check: bool = True) -> torch.Tensor:
    """Spatial-domain high-pass filter: ifft_to_real(freq_mask(x))."""
    return ifft_to_real(freq_mask(x, cutoff_fraction), check=check)
