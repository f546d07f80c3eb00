"""Stages, single-scale networks and the coarse-to-fine cascade.

A stage is feature extraction -> border taper -> kernel quotient layer ->
crop/clamp/normalize -> image quotient layer. A :class:`ScaleNetwork`
chains stages at one resolution; a :class:`MultiScaleModel` chains scales
from the coarsest kernel size to the finest.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ShapeError
from .features import (ArchSpec, StageParams, init_params, stage_features_backward,
                       stage_features_forward, stage_features_infer)
from .imaging import (barthann_border_window, crop_center, identity_kernel, kernel_from_origin,
                      kernel_to_origin, pad_or_embed, resize)
from .quotient import (DEFAULT_BETA_K, image_estimate_backward, image_estimate_forward,
                       image_estimate_gradient_prior, kernel_estimate_backward,
                       kernel_estimate_forward)
from .validation import check_image, check_kernel_size, check_random_state

FORMAT_VERSION = 1
DEGENERATE_SUM = 1e-12


@dataclass
class PostprocessTape:
    kernel: np.ndarray
    mask: np.ndarray
    total: float
    degenerate: bool
    frame_shape: tuple


def _postprocess(raw, kernel_size):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < kernel_size or raw.shape[1] < kernel_size:
        raise DimensionError(f"raw kernel image {raw.shape} smaller than {kernel_size}")
    crop = kernel_from_origin(raw, kernel_size)
    mask = crop > 0
    clipped = np.where(mask, crop, 0.0)
    total = float(clipped.sum())
    if total <= DEGENERATE_SUM:
        return PostprocessTape(identity_kernel(kernel_size), mask, total, True, raw.shape)
    return PostprocessTape(clipped / total, mask, total, False, raw.shape)


def kernel_postprocess(raw, kernel_size):
    """Crop, clamp negatives and renormalize a raw quotient-layer output.

    ``raw`` is a full frame in wrap-around layout (kernel center at (0, 0)),
    as produced by :func:`~deblurnet.quotient.kernel_estimate_forward`.

    Returns
    -------
    kernel : ndarray, shape (kernel_size, kernel_size)
        Nonnegative, sums to one. The identity kernel if nothing survives
        the clamp.
    degenerate : bool
    """
    tape = _postprocess(raw, check_kernel_size(kernel_size))
    return tape.kernel, tape.degenerate


def kernel_postprocess_backward(tape, delta_kernel):
    """Map a kernel gradient back to the raw frame.

    Clamped entries and degenerate outputs pass no gradient; the
    normalization is differentiated exactly.
    """
    if tape.degenerate:
        return np.zeros(tape.frame_shape)
    k = tape.kernel
    d_clipped = (delta_kernel - np.sum(delta_kernel * k)) / tape.total
    d_crop = np.where(tape.mask, d_clipped, 0.0)
    return kernel_to_origin(d_crop, tape.frame_shape)


def border_window_for(shape, kernel_size):
    return barthann_border_window(shape, (kernel_size + 1) // 2)


@dataclass
class StageTape:
    features: object
    window: np.ndarray
    quotient: object
    post: PostprocessTape
    image: object
    has_latent: bool


@dataclass
class StageResult:
    kernel_raw: np.ndarray
    kernel: np.ndarray
    latent: np.ndarray
    degenerate: bool
    tape: StageTape = None


def _stage_inputs(blurry, latent, stage):
    if stage.arch.in_channels == 2:
        if latent is None:
            raise ShapeError("stage expects a latent image as second channel")
        if latent.shape != blurry.shape:
            raise ShapeError(f"latent {latent.shape} and blurry {blurry.shape} differ")
        return np.stack([blurry, latent])
    if latent is not None:
        raise ShapeError("single-channel stage received a latent image")
    return blurry[None]


def stage_forward(blurry, latent, stage, beta_k, kernel_size, keep_tape=True, window=None):
    """One feature -> kernel -> image iteration.

    Parameters
    ----------
    blurry : ndarray (H, W)
    latent : ndarray (H, W) or None
        Present iff ``stage.arch.in_channels == 2``.
    stage : StageParams
    beta_k : float
    kernel_size : int
    keep_tape : bool
        Keep intermediates for :func:`stage_backward`.
    """
    inputs = _stage_inputs(blurry, latent, stage)
    if window is None:
        window = border_window_for(blurry.shape, kernel_size)
    if keep_tape:
        feats, ftape = stage_features_forward(inputs, stage)
    else:
        feats, ftape = stage_features_infer(inputs, stage), None
    raw, qtape = kernel_estimate_forward(feats.x_tilde * window, feats.y_tilde * window, beta_k)
    post = _postprocess(raw, kernel_size)
    latent_next, itape = image_estimate_forward(post.kernel, blurry, stage.beta_x)
    tape = StageTape(ftape, window, qtape, post, itape, latent is not None) if keep_tape else None
    return StageResult(raw, post.kernel, latent_next, post.degenerate, tape)


def stage_backward(stage, tape, delta_kernel=None, delta_latent=None):
    """Backpropagate through one stage.

    Returns
    -------
    grads : dict
        Keyed like ``stage.named_arrays()``.
    delta_blurry : ndarray
    delta_latent_in : ndarray or None
        Gradient w.r.t. the latent image the stage consumed.
    delta_beta_k : float
    """
    K = tape.post.kernel.shape[0]
    dkernel = np.zeros((K, K)) if delta_kernel is None else np.array(delta_kernel, dtype=np.float64)
    dblurry = np.zeros(tape.window.shape)
    dlog_beta_x = 0.0
    if delta_latent is not None:
        dk_img, dy_img, dbx = image_estimate_backward(tape.image, delta_latent)
        dkernel = dkernel + dk_img
        dblurry += dy_img
        dlog_beta_x = dbx * stage.beta_x
    draw = kernel_postprocess_backward(tape.post, dkernel)
    dxt, dyt, dbeta_k = kernel_estimate_backward(tape.quotient, draw)
    dinputs, grads = stage_features_backward(
        tape.features, dxt * tape.window, dyt * tape.window, stage)
    grads["log_beta_x"] = np.array(dlog_beta_x)
    dblurry += dinputs[0]
    dlatent_in = dinputs[1] if tape.has_latent else None
    return grads, dblurry, dlatent_in, dbeta_k


@dataclass
class ScaleNetwork:
    """Stage stack trained for one kernel size."""

    stages: list
    kernel_size: int
    beta_k: float = DEFAULT_BETA_K

    def check(self, warm=False):
        check_kernel_size(self.kernel_size)
        if not self.beta_k > 0:
            raise ValueError("beta_k must be positive")
        if not self.stages:
            raise ShapeError("a scale network needs at least one stage")
        for i, st in enumerate(self.stages):
            st.check()
            want = 2 if (i > 0 or warm) else 1
            if st.arch.in_channels != want:
                raise ShapeError(f"stage {i} has in_channels={st.arch.in_channels}, expected {want}")

    def num_parameters(self):
        return sum(s.num_parameters() for s in self.stages)


@dataclass
class ScaleOutput:
    kernel: np.ndarray
    latent: np.ndarray
    stage_results: list
    degenerate: bool


def scale_forward(blurry, warm_latent, net, keep_tape=True, num_stages=None):
    """Chain the stages of ``net``; the first one consumes ``warm_latent`` if given."""
    blurry = check_image(blurry, "blurry")
    if min(blurry.shape) < net.kernel_size:
        raise DimensionError(f"image {blurry.shape} smaller than kernel {net.kernel_size}")
    window = border_window_for(blurry.shape, net.kernel_size)
    latent = warm_latent
    results = []
    stages = net.stages if num_stages is None else net.stages[:num_stages]
    for stage in stages:
        res = stage_forward(blurry, latent, stage, net.beta_k, net.kernel_size,
                            keep_tape=keep_tape, window=window)
        results.append(res)
        latent = res.latent
    last = results[-1]
    return ScaleOutput(last.kernel, last.latent, results, any(r.degenerate for r in results))


def scale_backward(net, out, delta_kernel, first_trainable=0):
    """Gradients of a loss on the final kernel w.r.t. every stage.

    Stages before ``first_trainable`` are not visited and get ``None``.
    Returns ``(grads_per_stage, delta_blurry, delta_warm_latent, delta_beta_k)``.
    """
    n = len(out.stage_results)
    grads = [None] * n
    dkernel = delta_kernel
    dlatent = None
    dblurry = np.zeros_like(out.latent)
    dwarm = None
    dbeta_k = 0.0
    for i in range(n - 1, first_trainable - 1, -1):
        g, db, dl, dbk = stage_backward(net.stages[i], out.stage_results[i].tape, dkernel, dlatent)
        grads[i] = g
        dblurry += db
        dbeta_k += dbk
        dkernel, dlatent = None, dl
        if i == 0:
            dwarm = dl
    return grads, dblurry, dwarm, dbeta_k


@dataclass
class MultiScaleModel:
    """Coarse-to-fine cascade of scale networks."""

    scales: list
    format_version: int = FORMAT_VERSION
    resize_policy: str = "kernel-ratio"
    sharpen_sigma: float = None
    metadata: dict = field(default_factory=dict)

    @property
    def kernel_sizes(self):
        return [s.kernel_size for s in self.scales]

    def check(self):
        if not self.scales:
            raise ShapeError("model has no scales")
        sizes = self.kernel_sizes
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"kernel sizes must be strictly increasing, got {sizes}")
        if self.resize_policy not in ("kernel-ratio", "factor2"):
            raise ShapeError(f"unknown resize policy {self.resize_policy!r}")
        for i, net in enumerate(self.scales):
            net.check(warm=i > 0)
        return self

    def num_parameters(self):
        return sum(s.num_parameters() for s in self.scales)

    def scale_shapes(self, shape, upto=None):
        """Image shape used at each of the first ``upto`` scales.

        ``shape`` is the image size at scale ``upto`` (default: the finest
        scale, i.e. full resolution).
        """
        H, W = shape
        ref_index = len(self.scales) - 1 if upto is None else upto
        n = ref_index + 1 if upto is None else upto
        ref = self.scales[ref_index].kernel_size
        out = []
        for i, net in enumerate(self.scales[:n]):
            if self.resize_policy == "factor2":
                f = 0.5 ** (ref_index - i)
            else:
                f = net.kernel_size / ref
            out.append((max(1, int(round(H * f))), max(1, int(round(W * f)))))
        return out


def stage_archs(num_stages, base, warm=False, wide_last=None):
    """Per-stage architectures: stage 1 single-channel, later ones two-channel.

    ``wide_last`` overrides ``num_pairs`` for the third and later stages.
    """
    out = []
    for i in range(num_stages):
        pairs = base.num_pairs
        if wide_last is not None and i >= 2:
            pairs = wide_last
        ch = 2 if (i > 0 or warm) else 1
        out.append(ArchSpec(base.num_filters, base.filter_size, base.hidden, pairs, ch, base.bias))
    return out


def build_scale(kernel_size, num_stages, base_arch, rng=None, warm=False, wide_last=None,
                beta_k=DEFAULT_BETA_K):
    rng = check_random_state(rng)
    stages = [init_params(a, rng) for a in stage_archs(num_stages, base_arch, warm, wide_last)]
    return ScaleNetwork(stages, check_kernel_size(kernel_size), beta_k)


PRESETS = {
    # conv(32) -> tanh -> mix 32 -> tanh -> 4 feature images; eight in stage 3
    "paper-3stage": dict(arch=ArchSpec(32, 7, (32,), 2), num_stages=3, wide_last=4),
    "desk": dict(arch=ArchSpec(2, 7, (4,), 2), num_stages=2, wide_last=None),
}


def build_model(kernel_sizes=(17, 25, 33), preset="paper-3stage", rng=None, num_stages=None,
                arch=None, resize_policy="kernel-ratio", sharpen_sigma="auto",
                beta_k=DEFAULT_BETA_K):
    """Freshly initialized multi-scale model.

    ``sharpen_sigma="auto"`` enables the sigma=0.5 kernel sharpening when the
    finest kernel is 33 px or larger.
    """
    rng = check_random_state(rng)
    p = PRESETS[preset]
    arch = arch or p["arch"]
    n = num_stages or p["num_stages"]
    scales = [build_scale(k, n, arch, rng, warm=i > 0, wide_last=p["wide_last"], beta_k=beta_k)
              for i, k in enumerate(kernel_sizes)]
    if sharpen_sigma == "auto":
        sharpen_sigma = 0.5 if max(kernel_sizes) >= 33 else None
    return MultiScaleModel(scales, FORMAT_VERSION, resize_policy, sharpen_sigma).check()


@dataclass
class DeblurResult:
    kernel: np.ndarray
    latent: np.ndarray
    per_scale_kernels: list
    timings: dict
    degenerate: bool = False
    warnings: list = field(default_factory=list)


def estimate_kernel(blurry, model, upto=None):
    """Run the cascade and return ``(kernel, per_scale_kernels, latent, degenerate)``.

    ``latent`` is the last stage estimate of the last scale that ran. With
    ``upto`` only the first ``upto`` scales run, ``blurry`` being given at
    the resolution of scale ``upto``.
    """
    shapes = model.scale_shapes(blurry.shape, upto)
    latent = None
    per_scale = []
    degenerate = False
    for i, (net, shp) in enumerate(zip(model.scales, shapes)):
        y = blurry if shp == blurry.shape else resize(blurry, shp)
        if min(shp) < net.kernel_size:
            raise DimensionError(f"scale {i} image {shp} smaller than kernel {net.kernel_size}")
        warm = None if latent is None else resize(latent, shp)
        out = scale_forward(y, warm, net, keep_tape=False)
        per_scale.append(out.kernel)
        latent = out.latent
        degenerate = degenerate or out.degenerate
    return per_scale[-1], per_scale, latent, degenerate


def warm_latent(blurry, model, upto):
    """Latent estimate of the coarser scales ``0..upto-1``, resized to ``blurry``."""
    if upto <= 0:
        return None
    latent = estimate_kernel(blurry, model, upto)[2]
    return resize(latent, blurry.shape)


PRIORS = ("intensity", "gradient")
GRADIENT_PRIOR_BETA = 0.05


def restore_image(kernel, blurry, beta, prior="intensity"):
    """Non-blind restoration used after kernel estimation.

    ``"intensity"`` is the image-estimation layer of the network (penalty on
    pixel values); ``"gradient"`` penalizes image gradients instead.
    """
    if prior == "intensity":
        return image_estimate_forward(kernel, blurry, beta)[0]
    if prior == "gradient":
        return image_estimate_gradient_prior(kernel, blurry, beta)
    raise ValueError(f"unknown restoration prior {prior!r}; expected one of {PRIORS}")


def default_restore_beta(model, prior="intensity"):
    """Learned ``beta_x`` of the finest stage, or the fixed gradient-prior weight."""
    if prior == "gradient":
        return GRADIENT_PRIOR_BETA
    return model.scales[-1].stages[-1].beta_x


def multiscale_deblur(blurry, model, restore=True, beta_x=None, prior="intensity"):
    """Blind deblurring of a grayscale image.

    Returns a :class:`DeblurResult` whose ``kernel`` comes from the finest
    scale (optionally sharpened) and whose ``latent`` is the restoration
    with the finest stage's learned ``beta_x`` (or the given override).
    ``prior="gradient"`` restores with a gradient penalty instead, whose
    weight defaults to :data:`GRADIENT_PRIOR_BETA`.
    """
    blurry = check_image(blurry, "blurry")
    if prior not in PRIORS:
        raise ValueError(f"unknown restoration prior {prior!r}; expected one of {PRIORS}")
    finest = model.scales[-1].kernel_size
    if min(blurry.shape) < finest:
        raise DimensionError(f"image {blurry.shape} smaller than finest kernel {finest}")
    t0 = time.perf_counter()
    kernel, per_scale, latent, degenerate = estimate_kernel(blurry, model)
    if model.sharpen_sigma:
        kernel = kernel_sharpen_gaussian(kernel, model.sharpen_sigma)
    t1 = time.perf_counter()
    notes = []
    if degenerate:
        notes.append("degenerate kernel estimate replaced by the identity kernel")
        warnings.warn(notes[-1], RuntimeWarning)
    if restore:
        bx = default_restore_beta(model, prior) if beta_x is None else beta_x
        latent = restore_image(kernel, blurry, bx, prior)
    t2 = time.perf_counter()
    timings = {"kernel_ms": 1e3 * (t1 - t0), "restore_ms": 1e3 * (t2 - t1)}
    return DeblurResult(kernel, latent, per_scale, timings, degenerate, notes)


def gaussian_psf(sigma, radius=None):
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    ax = np.arange(-radius, radius + 1)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def kernel_sharpen_gaussian(kernel, sigma=0.5, reg=1e-3):
    """Deconvolve ``kernel`` by a small Gaussian, then crop/clamp/normalize."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    kernel = np.asarray(kernel, dtype=np.float64)
    K = kernel.shape[0]
    g = gaussian_psf(sigma)
    n = 2 * K + g.shape[0]
    shape = (n, n)
    Kf = np.fft.fft2(kernel_to_origin(kernel, shape))
    Gf = np.fft.fft2(kernel_to_origin(g, shape))
    sharp = np.fft.ifft2(np.conj(Gf) * Kf / (np.abs(Gf) ** 2 + reg)).real
    return kernel_postprocess(sharp, K)[0]


def embed_kernel(kernel, size):
    """Center ``kernel`` in a ``size x size`` frame (or center-crop it)."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.shape[0] <= size:
        return pad_or_embed(k, (size, size))
    return crop_center(k, (size, size))
