"""Closed-form Fourier-domain estimation layers ("quotient layers").

Kernel estimation solves

    min_k  sum_i ||k * x_i - y_i||^2 + beta_k ||k||^2

in one step as ``k = F^-1[ sum_i conj(X_i) Y_i / (sum_i |X_i|^2 + beta_k) ]``.
Image estimation is the same computation with a single pair (kernel, blurry).

All spectra are half-plane real FFTs; the operands are real images so the
omitted half is fixed by Hermitian symmetry.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ShapeError
from .imaging import kernel_from_origin, kernel_to_origin
from .validation import check_kernel

DEFAULT_BETA_K = 1e-4


def _rfft(a):
    return np.fft.rfft2(a, axes=(-2, -1))


def _irfft(a, shape):
    return np.fft.irfft2(a, s=shape, axes=(-2, -1))


@dataclass(frozen=True)
class QuotientTape:
    """Cached spectra of one quotient-layer evaluation.

    ``X`` and ``Y`` have a leading feature axis. ``num`` is
    ``sum_i conj(X_i) Y_i`` and ``den`` is ``sum_i |X_i|^2 + beta``.
    """

    X: np.ndarray
    Y: np.ndarray
    num: np.ndarray
    den: np.ndarray
    shape: tuple
    beta: float
    kernel_size: int = 0


def _as_stack(feats, name):
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be a stack of 2-D images, got {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} holds no feature images")
    return arr


def quotient_forward(x_stack, y_stack, beta):
    X = _rfft(x_stack)
    Y = _rfft(y_stack)
    num = np.sum(np.conj(X) * Y, axis=0)
    den = np.sum(X.real ** 2 + X.imag ** 2, axis=0) + beta
    shape = x_stack.shape[-2:]
    return _irfft(num / den, shape), QuotientTape(X, Y, num, den, tuple(shape), float(beta))


def quotient_backward(tape, delta):
    """Gradients of ``<delta, quotient_forward(x, y, beta)>``.

    Returns ``(dx, dy, dbeta)`` with ``dx``/``dy`` stacked like the inputs.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != tape.shape:
        raise ShapeError(f"gradient shape {delta.shape} != layer shape {tape.shape}")
    D = _rfft(delta)
    den = tape.den
    den2 = den * den
    # 2 Re(conj(num) D) is shared by every x-gradient
    cross = 2.0 * (tape.num.real * D.real + tape.num.imag * D.imag) / den2
    dx = _irfft(np.conj(D) * tape.Y / den - cross * tape.X, tape.shape)
    dy = _irfft(tape.X * D / den, tape.shape)
    # d(num/den)/dbeta = -num/den^2
    dbeta = -float(np.sum(_irfft(tape.num / den2, tape.shape) * delta))
    return dx, dy, dbeta


def kernel_estimate_forward(x_tilde, y_tilde, beta_k=DEFAULT_BETA_K):
    """Estimate a full-frame kernel image from feature pairs.

    Parameters
    ----------
    x_tilde, y_tilde : array_like, shape (n, H, W) or (H, W)
        Sharp-side and blurry-side feature images.
    beta_k : float
        Tikhonov weight on the kernel, must be positive.

    Returns
    -------
    kernel_image : ndarray, shape (H, W)
        Kernel with its center at index (0, 0) (wrap-around layout).
    tape : QuotientTape
    """
    xs = _as_stack(x_tilde, "x_tilde")
    ys = _as_stack(y_tilde, "y_tilde")
    if xs.shape != ys.shape:
        raise ShapeError(f"x_tilde {xs.shape} and y_tilde {ys.shape} differ")
    if not beta_k > 0:
        raise ValueError(f"beta_k must be positive, got {beta_k}")
    return quotient_forward(xs, ys, beta_k)


def kernel_estimate_backward(tape, delta_k):
    return quotient_backward(tape, delta_k)


def image_estimate_forward(kernel, y, beta_x):
    """Tikhonov deconvolution of ``y`` by a centered kernel."""
    kernel = check_kernel(kernel)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"blurry image must be 2-D, got {y.shape}")
    if kernel.shape[0] > min(y.shape):
        raise DimensionError(f"kernel {kernel.shape} larger than image {y.shape}")
    if not beta_x > 0:
        raise ValueError(f"beta_x must be positive, got {beta_x}")
    k_full = kernel_to_origin(kernel, y.shape)
    x, tape = quotient_forward(k_full[None], y[None], beta_x)
    tape = QuotientTape(tape.X, tape.Y, tape.num, tape.den, tape.shape, tape.beta,
                        kernel.shape[0])
    return x, tape


def image_estimate_backward(tape, delta_x):
    """Returns ``(delta_kernel, delta_y, delta_beta_x)``."""
    dk_full, dy, dbeta = quotient_backward(tape, delta_x)
    return kernel_from_origin(dk_full[0], tape.kernel_size), dy[0], dbeta


def image_estimate_gradient_prior(kernel, y, beta):
    """Tikhonov deconvolution with a penalty on image gradients.

    Solves ``min_x ||k * x - y||^2 + beta (||d_h x||^2 + ||d_v x||^2)`` with
    circular forward differences, again in one Fourier-domain step. The DC
    bin is not penalized, so the image mean is preserved exactly.
    """
    kernel = check_kernel(kernel)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"blurry image must be 2-D, got {y.shape}")
    if kernel.shape[0] > min(y.shape):
        raise DimensionError(f"kernel {kernel.shape} larger than image {y.shape}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    H, W = y.shape
    K = _rfft(kernel_to_origin(kernel, y.shape))
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.rfftfreq(W)[None, :]
    # |1 - e^{-i w}|^2 = 4 sin^2(w / 2)
    grad = 4.0 * np.sin(np.pi * fx) ** 2 + 4.0 * np.sin(np.pi * fy) ** 2
    den = K.real ** 2 + K.imag ** 2 + beta * grad
    den[0, 0] = max(den[0, 0], 1e-300)
    return _irfft(np.conj(K) * _rfft(y) / den, y.shape)
