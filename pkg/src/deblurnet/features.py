"""Learned feature extraction: convolution bank, tanh, pixel-wise recombination.

One stage maps its input channels (blurry image, plus the current latent
estimate for later stages) to pairs of gradient-like images
``(x_tilde_i, y_tilde_i)`` that feed the kernel quotient layer::

    h_0 = tanh(f * inputs + b_0)
    h_l = tanh(W_l h_{l-1} + b_l)          (pixel-wise, l = 1..L)
    y_tilde = alpha h_L,   x_tilde = beta h_L

Convolutions are circular so the whole stage stays consistent with the
Fourier-domain layers downstream.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .imaging import kernel_from_origin
from .validation import check_random_state

DEFAULT_BETA_X = 1e-2


@dataclass(frozen=True)
class ArchSpec:
    """Shape of one stage's feature extractor."""

    num_filters: int = 32
    filter_size: int = 7
    hidden: tuple = (32,)
    num_pairs: int = 2
    in_channels: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.filter_size % 2 == 0 or self.filter_size < 1:
            raise ValueError(f"filter_size must be odd, got {self.filter_size}")
        if self.num_filters < 1 or self.num_pairs < 1 or self.in_channels < 1:
            raise ValueError("num_filters, num_pairs and in_channels must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self):
        return {"num_filters": self.num_filters, "filter_size": self.filter_size,
                "hidden": list(self.hidden), "num_pairs": self.num_pairs,
                "in_channels": self.in_channels, "bias": self.bias}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


@dataclass
class StageParams:
    """Learned parameters of one stage.

    ``log_beta_x`` is the unconstrained log of the image-estimation
    regularizer, so ``beta_x = exp(log_beta_x)`` stays positive.
    """

    arch: ArchSpec
    conv_w: np.ndarray
    conv_b: np.ndarray
    hidden_w: list
    hidden_b: list
    alpha: np.ndarray
    beta: np.ndarray
    log_beta_x: np.ndarray = field(default_factory=lambda: np.array(np.log(DEFAULT_BETA_X)))

    @property
    def beta_x(self):
        return float(np.exp(self.log_beta_x))

    def named_arrays(self):
        """Ordered mapping name -> parameter array (views, safe to update in place)."""
        out = {"conv_w": self.conv_w}
        if self.arch.bias:
            out["conv_b"] = self.conv_b
        for i, (w, b) in enumerate(zip(self.hidden_w, self.hidden_b)):
            out[f"hidden{i}_w"] = w
            if self.arch.bias:
                out[f"hidden{i}_b"] = b
        out["alpha"] = self.alpha
        out["beta"] = self.beta
        out["log_beta_x"] = self.log_beta_x
        return out

    def num_parameters(self):
        return int(sum(a.size for a in self.named_arrays().values()))

    def copy(self):
        return StageParams(
            self.arch, self.conv_w.copy(), self.conv_b.copy(),
            [w.copy() for w in self.hidden_w], [b.copy() for b in self.hidden_b],
            self.alpha.copy(), self.beta.copy(), self.log_beta_x.copy())

    def check(self):
        a = self.arch
        if self.conv_w.shape != (a.num_filters, a.in_channels, a.filter_size, a.filter_size):
            raise ShapeError(f"conv weights {self.conv_w.shape} do not match {a}")
        width = a.num_filters
        for w in self.hidden_w:
            if w.ndim != 2 or w.shape[1] != width:
                raise ShapeError(f"hidden weights {w.shape} do not chain from width {width}")
            width = w.shape[0]
        if self.alpha.shape != (a.num_pairs, width) or self.beta.shape != (a.num_pairs, width):
            raise ShapeError("recombiner shapes do not match the last hidden width")
        for arr in self.named_arrays().values():
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter value")


def init_params(arch, rng=None, beta_x=DEFAULT_BETA_X):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, ``beta_x`` = 1e-2."""
    rng = check_random_state(rng)
    s = arch.filter_size
    fan_in = arch.in_channels * s * s
    lim = 1.0 / np.sqrt(fan_in)
    conv_w = rng.uniform(-lim, lim, size=(arch.num_filters, arch.in_channels, s, s))
    conv_b = np.zeros(arch.num_filters)
    hidden_w, hidden_b = [], []
    width = arch.num_filters
    for h in arch.hidden:
        lim = 1.0 / np.sqrt(width)
        hidden_w.append(rng.uniform(-lim, lim, size=(h, width)))
        hidden_b.append(np.zeros(h))
        width = h
    lim = 1.0 / np.sqrt(width)
    alpha = rng.uniform(-lim, lim, size=(arch.num_pairs, width))
    beta = rng.uniform(-lim, lim, size=(arch.num_pairs, width))
    return StageParams(arch, conv_w, conv_b, hidden_w, hidden_b, alpha, beta,
                       np.array(np.log(beta_x)))


@dataclass
class FeatureImages:
    """Paired feature stacks, each of shape ``(count, H, W)``."""

    x_tilde: np.ndarray
    y_tilde: np.ndarray

    @property
    def count(self):
        return self.x_tilde.shape[0]


@dataclass
class FeatureTape:
    inputs_f: np.ndarray
    filters_f: np.ndarray
    activations: list
    shape: tuple


def _filters_spectrum(conv_w, shape):
    F, C, s, _ = conv_w.shape
    H, W = shape
    if s > H or s > W:
        raise ShapeError(f"filter size {s} exceeds image {shape}")
    full = np.zeros((F, C, H, W))
    r0, c0 = H // 2 - s // 2, W // 2 - s // 2
    full[:, :, r0:r0 + s, c0:c0 + s] = conv_w
    full = np.fft.ifftshift(full, axes=(-2, -1))
    return np.fft.rfft2(full, axes=(-2, -1))


def _check_inputs(inputs, params):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.ndim != 3 or inputs.shape[0] != params.arch.in_channels:
        raise ShapeError(
            f"stage expects {params.arch.in_channels} input channel(s), got {inputs.shape}")
    return inputs


def conv_forward(inputs, conv_w, conv_b=None):
    """Circular multi-channel convolution bank.

    ``hidden_j = sum_c f_{j,c} * input_c + bias_j`` with output shape
    ``(num_filters, H, W)``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[0] != conv_w.shape[1]:
        raise ShapeError(f"bank has {conv_w.shape[1]} channels, input has {inputs.shape[0]}")
    shape = inputs.shape[-2:]
    In = np.fft.rfft2(inputs, axes=(-2, -1))
    Wf = _filters_spectrum(conv_w, shape)
    out = np.fft.irfft2(np.einsum("fcyx,cyx->fyx", Wf, In), s=shape, axes=(-2, -1))
    if conv_b is not None:
        out += conv_b[:, None, None]
    return out


def _mix(w, h, b=None):
    n = h.shape[0]
    out = (w @ h.reshape(n, -1)).reshape((w.shape[0],) + h.shape[1:])
    if b is not None:
        out += b[:, None, None]
    return out


def stage_features_forward(inputs, params):
    """Run one feature extractor; returns ``(FeatureImages, FeatureTape)``."""
    inputs = _check_inputs(inputs, params)
    shape = inputs.shape[-2:]
    bias = params.arch.bias
    In = np.fft.rfft2(inputs, axes=(-2, -1))
    Wf = _filters_spectrum(params.conv_w, shape)
    a = np.fft.irfft2(np.einsum("fcyx,cyx->fyx", Wf, In), s=shape, axes=(-2, -1))
    if bias:
        a += params.conv_b[:, None, None]
    h = np.tanh(a)
    acts = [h]
    for w, b in zip(params.hidden_w, params.hidden_b):
        h = np.tanh(_mix(w, h, b if bias else None))
        acts.append(h)
    feats = FeatureImages(_mix(params.beta, h), _mix(params.alpha, h))
    return feats, FeatureTape(In, Wf, acts, tuple(shape))


def stage_features_backward(tape, delta_x, delta_y, params):
    """Backpropagate feature gradients.

    Returns
    -------
    delta_inputs : ndarray, shape (in_channels, H, W)
    grads : dict
        Same keys as ``params.named_arrays()``; ``log_beta_x`` is zero here
        (it only enters through the image-estimation layer).
    """
    delta_x = np.asarray(delta_x, dtype=np.float64)
    delta_y = np.asarray(delta_y, dtype=np.float64)
    h = tape.activations[-1]
    n_pairs = params.arch.num_pairs
    if delta_x.shape != (n_pairs,) + tape.shape or delta_y.shape != delta_x.shape:
        raise ShapeError(f"feature gradients {delta_x.shape}/{delta_y.shape} do not match tape")
    bias = params.arch.bias
    grads = {}
    hw = h.reshape(h.shape[0], -1)
    grads["alpha"] = delta_y.reshape(n_pairs, -1) @ hw.T
    grads["beta"] = delta_x.reshape(n_pairs, -1) @ hw.T
    dh = _mix(params.alpha.T, delta_y) + _mix(params.beta.T, delta_x)
    for i in range(len(params.hidden_w) - 1, -1, -1):
        h = tape.activations[i + 1]
        prev = tape.activations[i]
        da = dh * (1.0 - h * h)
        grads[f"hidden{i}_w"] = da.reshape(da.shape[0], -1) @ prev.reshape(prev.shape[0], -1).T
        if bias:
            grads[f"hidden{i}_b"] = da.sum(axis=(1, 2))
        dh = _mix(params.hidden_w[i].T, da)
    h0 = tape.activations[0]
    da = dh * (1.0 - h0 * h0)
    if bias:
        grads["conv_b"] = da.sum(axis=(1, 2))
    Da = np.fft.rfft2(da, axes=(-2, -1))
    corr = np.fft.irfft2(np.conj(tape.inputs_f)[None] * Da[:, None], s=tape.shape, axes=(-2, -1))
    grads["conv_w"] = kernel_from_origin(corr, params.arch.filter_size)
    delta_inputs = np.fft.irfft2(np.einsum("fcyx,fyx->cyx", np.conj(tape.filters_f), Da),
                                 s=tape.shape, axes=(-2, -1))
    grads["log_beta_x"] = np.zeros(())
    ordered = {k: grads[k] for k in params.named_arrays()}
    return delta_inputs, ordered


def stage_features_infer(inputs, params, chunk_rows=64):
    """Memory-lean forward pass without a tape.

    Filters are processed one at a time and the pixel-wise layers run over
    row blocks, so peak memory stays near one ``(num_filters, H, W)`` array.
    """
    inputs = _check_inputs(inputs, params)
    shape = inputs.shape[-2:]
    H, W = shape
    bias = params.arch.bias
    In = np.fft.rfft2(inputs, axes=(-2, -1))
    F, C, s, _ = params.conv_w.shape
    h0 = np.empty((F, H, W))
    for f in range(F):
        Wf = _filters_spectrum(params.conv_w[f:f + 1], shape)[0]
        a = np.fft.irfft2(np.sum(Wf * In, axis=0), s=shape)
        if bias:
            a += params.conv_b[f]
        np.tanh(a, out=h0[f])
    n = params.arch.num_pairs
    xt = np.empty((n, H, W))
    yt = np.empty((n, H, W))
    for r in range(0, H, chunk_rows):
        h = h0[:, r:r + chunk_rows]
        for w, b in zip(params.hidden_w, params.hidden_b):
            h = np.tanh(_mix(w, h, b if bias else None))
        xt[:, r:r + chunk_rows] = _mix(params.beta, h)
        yt[:, r:r + chunk_rows] = _mix(params.alpha, h)
    return FeatureImages(xt, yt)
