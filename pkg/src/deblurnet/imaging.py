"""Raster, Fourier and resampling primitives.

Images are 2-D float64 arrays indexed ``[row, col]``. Kernels are stored
center-at-middle; before entering the Fourier domain they are moved so the
center sits at index ``(0, 0)`` (see :func:`kernel_to_origin`), which keeps
circular convolution free of any net translation.

The inverse transform carries the ``1/(H*W)`` factor (numpy convention).
"""

import numpy as np

from .errors import DimensionError
from .validation import check_image, check_kernel

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def fft2(img):
    img = np.asarray(img)
    if img.ndim < 2 or img.shape[-1] == 0 or img.shape[-2] == 0:
        raise DimensionError(f"cannot transform array of shape {img.shape}")
    return np.fft.fft2(img)


def ifft2(spec):
    """Inverse transform, returning the real part."""
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] == 0 or spec.shape[-2] == 0:
        raise DimensionError(f"cannot transform array of shape {spec.shape}")
    return np.fft.ifft2(spec).real


def pad_or_embed(ker, shape):
    """Embed ``ker`` centered into a zero array of ``shape``.

    The center pixel ``(n//2, m//2)`` of the kernel lands on ``(H//2, W//2)``.
    """
    ker = np.asarray(ker, dtype=np.float64)
    H, W = shape
    kh, kw = ker.shape
    if kh > H or kw > W:
        raise DimensionError(f"kernel {ker.shape} does not fit into {tuple(shape)}")
    out = np.zeros((H, W))
    r0 = H // 2 - kh // 2
    c0 = W // 2 - kw // 2
    out[r0:r0 + kh, c0:c0 + kw] = ker
    return out


def crop_center(img, shape):
    """Inverse of :func:`pad_or_embed`: take the centered ``shape`` window."""
    img = np.asarray(img)
    H, W = img.shape[-2:]
    h, w = shape
    if h > H or w > W:
        raise DimensionError(f"cannot crop {img.shape} to larger {tuple(shape)}")
    r0 = H // 2 - h // 2
    c0 = W // 2 - w // 2
    return img[..., r0:r0 + h, c0:c0 + w]


def kernel_to_origin(ker, shape):
    """Embed ``ker`` into ``shape`` with its center wrapped to index (0, 0)."""
    return np.fft.ifftshift(pad_or_embed(ker, shape))


def kernel_from_origin(img, size):
    """Extract a ``size x size`` kernel from an origin-centered full frame.

    This is the adjoint of :func:`kernel_to_origin`.
    """
    return crop_center(np.fft.fftshift(img, axes=(-2, -1)), (size, size))


def kernel_otf(ker, shape):
    """Transfer function of ``ker`` at image size ``shape``."""
    return np.fft.fft2(kernel_to_origin(ker, shape))


def convolve_circular(img, ker):
    """Circular convolution of ``img`` with a centered odd kernel."""
    img = check_image(img)
    ker = check_kernel(ker)
    if ker.shape[0] > min(img.shape):
        raise DimensionError(
            f"kernel of size {ker.shape[0]} is larger than image {img.shape}")
    return ifft2(fft2(img) * kernel_otf(ker, img.shape))


def barthann(n):
    """Modified Bartlett-Hann window of length ``n`` with exact zero endpoints."""
    if n <= 0:
        return np.zeros(0)
    if n == 1:
        return np.ones(1)
    t = np.arange(n) / (n - 1) - 0.5
    w = 0.62 - 0.48 * np.abs(t) + 0.38 * np.cos(2 * np.pi * t)
    w[0] = w[-1] = 0.0
    # the formula peaks at exactly 1 for the middle sample of odd n
    if n % 2:
        w[n // 2] = 1.0
    return w


def _border_profile(n, margin):
    prof = np.ones(n)
    if margin > 0:
        ramp = barthann(2 * margin + 1)[:margin]
        prof[:margin] = ramp
        prof[n - margin:] = ramp[::-1]
    return prof


def barthann_border_window(shape, margin):
    """Separable taper: 1 inside, Barthann fade to 0 over ``margin`` pixels.

    Parameters
    ----------
    shape : (int, int)
        Image shape ``(H, W)``.
    margin : int
        Width of the fading band on every side.
    """
    H, W = shape
    margin = int(margin)
    if H <= 0 or W <= 0:
        raise DimensionError(f"invalid window shape {tuple(shape)}")
    if margin < 0 or 2 * margin > min(H, W):
        raise DimensionError(f"margin {margin} too large for shape {tuple(shape)}")
    return np.outer(_border_profile(H, margin), _border_profile(W, margin))


def _filter_axis_wrap(img, taps, axis):
    r = len(taps) // 2
    out = np.zeros_like(img)
    for i, t in enumerate(taps):
        out += t * np.roll(img, i - r, axis=axis)
    return out


def downsample2(img):
    """Binomial low-pass then keep every second sample (floor halving)."""
    img = check_image(img)
    H, W = img.shape
    if H // 2 < 1 or W // 2 < 1:
        raise DimensionError(f"cannot downsample image of shape {img.shape}")
    low = _filter_axis_wrap(_filter_axis_wrap(img, _BINOMIAL5, 0), _BINOMIAL5, 1)
    return low[0:2 * (H // 2):2, 0:2 * (W // 2):2]


def _linear_axis(img, n_out, axis):
    n_in = img.shape[axis]
    scale = n_in / n_out
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a * (1 - frac) + b * frac


def upsample2(img):
    """Double both dimensions by bilinear interpolation (pixel-center aligned)."""
    img = check_image(img)
    H, W = img.shape
    return _linear_axis(_linear_axis(img, 2 * H, 0), 2 * W, 1)


def gaussian_blur_circular(img, sigma):
    if sigma <= 0:
        return np.array(img, dtype=np.float64)
    H, W = img.shape
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    g = np.exp(-2 * (np.pi * sigma) ** 2 * (fx ** 2 + fy ** 2))
    return ifft2(fft2(img) * g)


def resize(img, shape):
    """Bilinear resize to ``shape`` with a Gaussian anti-alias prefilter."""
    img = check_image(img)
    H, W = img.shape
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise DimensionError(f"invalid target shape {(h, w)}")
    if (h, w) == (H, W):
        return img.copy()
    f = min(h / H, w / W)
    if f < 1:
        img = gaussian_blur_circular(img, 0.5 * (1.0 / f - 1.0))
    return _linear_axis(_linear_axis(img, h, 0), w, 1)


def identity_kernel(size):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k
