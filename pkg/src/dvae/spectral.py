"""Frequency-domain operators: 2D DFT, level-indexed low-pass masks for
latent grids, the matched Gaussian image blur, and spectral diagnostics.

Levels 0..3 attenuate {0, 25, 50, 75}% of frequency bins (highest radial
frequency first) in the latent, matched by image blurs sigma {0, 0.05,
0.25, 0.5}. Masks are hard binary projections, so applying a level twice
equals applying it once.
"""

import math

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, linear_map

LEVELS = (0, 1, 2, 3)
ATTENUATION_FRACTIONS = {0: 0.0, 1: 0.25, 2: 0.5, 3: 0.75}
BLUR_SIGMAS = {0: 0.0, 1: 0.05, 2: 0.25, 3: 0.5}

# max radial frequency: (0.5, 0.5) corner of the unshifted spectrum
_R_MAX = math.sqrt(0.5)

_MASK_CACHE = {}


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _fft_last(a, inverse):
    """Unnormalized DFT along the last axis; radix-2 when possible."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    sgn = 1.0 if inverse else -1.0
    if _is_pow2(n):
        a = np.ascontiguousarray(a[..., _bit_reverse_indices(n)])
        size = 2
        while size <= n:
            half = size // 2
            tw = np.exp(sgn * 2j * np.pi * np.arange(half) / size)
            v = a.reshape(a.shape[:-1] + (n // size, size))
            even = v[..., :half].copy()
            odd = v[..., half:] * tw
            v[..., :half] = even + odd
            v[..., half:] = even - odd
            size *= 2
        return a
    # naive path: multiply by the DFT matrix
    jk = np.outer(np.arange(n), np.arange(n))
    w = np.exp(sgn * 2j * np.pi * jk / n)
    return a @ w


def _dft2_core(x, inverse=False):
    """2D DFT over the last two axes of a (possibly stacked) array."""
    a = np.asarray(x, dtype=np.complex128)
    a = _fft_last(a, inverse)
    a = np.swapaxes(_fft_last(np.swapaxes(a, -1, -2), inverse), -1, -2)
    if inverse:
        a = a / (x.shape[-2] * x.shape[-1])
    return a


def dft2(grid):
    """Forward unnormalized 2D DFT of a real H x W grid."""
    g = np.asarray(grid)
    if g.ndim != 2 or g.size == 0:
        raise ShapeError(f"dft2: expected a non-empty 2D grid, got shape {g.shape}")
    return _dft2_core(g, inverse=False)


def idft2(spectrum):
    """Inverse of dft2 (normalized by 1/(H*W))."""
    s = np.asarray(spectrum, dtype=np.complex128)
    if s.ndim != 2 or s.size == 0:
        raise ShapeError(f"idft2: expected a non-empty 2D spectrum, got shape {s.shape}")
    return _dft2_core(s, inverse=True)


def _radial_freq_grid(h, w):
    """r(u,v) = sqrt(fu^2 + fv^2) with fu = min(u, H-u)/H, over the unshifted layout."""
    fu = np.minimum(np.arange(h), h - np.arange(h)) / h
    fv = np.minimum(np.arange(w), w - np.arange(w)) / w
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def build_mask(level, h, w):
    """Binary mask zeroing the top attenuation fraction of bins by radial
    frequency; conjugate-symmetric pairs are zeroed together, DC is kept."""
    if level not in LEVELS:
        raise ValueError(f"build_mask: invalid attenuation level {level!r}")
    if h < 2 or w < 2:
        raise ShapeError(f"build_mask: grid must be at least 2x2, got {h}x{w}")
    key = (level, h, w)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached

    mask = np.ones((h, w), dtype=np.float32)
    frac = ATTENUATION_FRACTIONS[level]
    if frac > 0.0:
        r = _radial_freq_grid(h, w)
        order = sorted(((r[u, v], u, v) for u in range(h) for v in range(w)))
        target = int(math.floor(frac * h * w + 0.5))
        zeroed = 0
        for _, u, v in reversed(order):
            if zeroed >= target:
                break
            if (u, v) == (0, 0) or mask[u, v] == 0.0:
                continue
            mask[u, v] = 0.0
            zeroed += 1
            pu, pv = (h - u) % h, (w - v) % w
            if (pu, pv) != (u, v) and mask[pu, pv] == 1.0:
                mask[pu, pv] = 0.0
                zeroed += 1
    mask.setflags(write=False)
    _MASK_CACHE[key] = mask
    return mask


def _lowpass_data(z, mask):
    spec = _dft2_core(z, inverse=False)
    out = _dft2_core(spec * mask, inverse=True)
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue >= 1e-5:
        raise NumericError(f"latent_lowpass: imaginary residue {residue:.3e} exceeds 1e-5")
    return out.real.astype(np.float32)


def latent_lowpass(z, level, mask=None):
    """Hard spectral low-pass applied per channel over the last two axes.

    Accepts ndarray stacks [..., h, w] or a Tensor (recorded on the tape;
    the projection is self-adjoint, so the backward pass reapplies it).
    """
    is_tensor = isinstance(z, Tensor)
    arr = z.data if is_tensor else np.asarray(z, dtype=np.float32)
    if arr.ndim < 2:
        raise ShapeError(f"latent_lowpass: need at least 2 axes, got shape {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    if mask is None:
        mask = build_mask(level, h, w)
    elif mask.shape != (h, w):
        raise ShapeError(f"latent_lowpass: mask {mask.shape} does not match grid {h}x{w}")
    if level == 0 and np.all(mask == 1.0):
        return z if is_tensor else arr.copy()
    if is_tensor:
        return linear_map(z, lambda d: _lowpass_data(d, mask),
                          lambda g: _lowpass_data(g, mask), name="latent_lowpass")
    return _lowpass_data(arr, mask)


def gaussian_kernel(sigma):
    """Normalized 1D Gaussian taps with radius max(1, ceil(3*sigma))."""
    if sigma < 0:
        raise ValueError(f"gaussian_kernel: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = max(1, math.ceil(3.0 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(x, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    # boundary reflection; folding taps back preserves each pixel's total weight
    xp = np.pad(x, pad, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(xp, len(kernel), axis=axis)
    return np.tensordot(win, kernel, axes=([-1], [0]))


def gaussian_blur(x, sigma):
    """Separable Gaussian blur with reflection padding over the last two axes."""
    if sigma < 0:
        raise ValueError(f"gaussian_blur: sigma must be >= 0, got {sigma}")
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim < 2:
        raise ShapeError(f"gaussian_blur: need at least 2 axes, got shape {arr.shape}")
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel(sigma)
    out = _blur_axis(arr, k, arr.ndim - 2)
    out = _blur_axis(out, k, arr.ndim - 1)
    return out.astype(np.float32)


def image_lowpass(x, level):
    """The image-side operator matched to `latent_lowpass` at the same level."""
    if level not in LEVELS:
        raise ValueError(f"image_lowpass: invalid attenuation level {level!r}")
    return gaussian_blur(x, BLUR_SIGMAS[level])


def radial_energy_spectrum(grid):
    """Spectral energy per radial shell (equal width in r), DC excluded."""
    g = np.asarray(grid)
    if g.ndim != 2 or min(g.shape) < 2:
        raise ShapeError(f"radial_energy_spectrum: expected a 2D grid >= 2x2, got {g.shape}")
    h, w = g.shape
    nbins = min(h, w) // 2
    energy = np.abs(_dft2_core(g)) ** 2
    r = _radial_freq_grid(h, w)
    idx = np.minimum((r / (_R_MAX / nbins)).astype(np.int64), nbins - 1)
    out = np.zeros(nbins, dtype=np.float64)
    flat_idx, flat_e = idx.ravel(), energy.ravel()
    np.add.at(out, flat_idx, flat_e)
    out[idx[0, 0]] -= energy[0, 0]  # DC excluded
    return out


def high_freq_energy_fraction(z, cutoff_fraction):
    """Share of non-DC spectral energy above the radial cutoff, averaged
    over channels. Zero-energy channels contribute 0."""
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError(f"cutoff_fraction must be in (0,1), got {cutoff_fraction}")
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"high_freq_energy_fraction: expected [c,h,w] or [h,w], got {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    r = _radial_freq_grid(h, w)
    high = r > cutoff_fraction * _R_MAX
    non_dc = np.ones((h, w), dtype=bool)
    non_dc[0, 0] = False
    fracs = []
    for c in range(arr.shape[0]):
        energy = np.abs(_dft2_core(arr[c])) ** 2
        total = float(energy[non_dc].sum())
        fracs.append(float(energy[high & non_dc].sum()) / total if total > 0 else 0.0)
    return float(np.mean(fracs))
