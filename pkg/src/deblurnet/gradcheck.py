"""Finite-difference verification of every hand-written backward pass.

Each check draws a random instance, contracts the layer output with a random
weight image to get a scalar loss, and compares the analytical gradient of
that loss with five-point central differences. The error of an entry is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6 * max|numeric|)

so entries many orders below the gradient's scale (where the difference
quotient has no significant digits) cannot dominate the result. Entries
where both values are below ``ABS_FLOOR`` (e.g. a parameter that cannot
influence the loss) count as agreeing.
"""

import time
from dataclasses import dataclass

import numpy as np

from .features import ArchSpec, init_params, stage_features_backward, stage_features_forward
from .pipeline import scale_backward, scale_forward
from .pipeline import ScaleNetwork, stage_archs
from .quotient import (image_estimate_backward, image_estimate_forward, kernel_estimate_backward,
                       kernel_estimate_forward)
from .synth import TrajectoryConfig, sample_kernel
from .training import kernel_l2_loss, kernel_loss
from .validation import check_random_state

DEFAULT_TOL = 1e-4
EPS = 1e-4
SCALE_EPS = 1e-6
ABS_FLOOR = 1e-10


def relative_error(analytic, numeric, abs_floor=ABS_FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    floor = max(1e-6 * float(np.max(np.abs(n))), 1e-300)
    big = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.maximum(big, floor)
    # both below the difference quotient's noise level: agree by definition
    err[big < abs_floor] = 0.0
    return float(np.max(err))


def _stencil(f, h):
    # five-point central difference, truncation error O(h^4)
    return (f(-2 * h) - 8 * f(-h) + 8 * f(h) - f(2 * h)) / (12 * h)


def numeric_gradient(loss, x, eps=EPS, signature=None):
    """Central differences of ``loss()`` w.r.t. every entry of ``x`` (perturbed in place).

    If ``signature()`` is given (e.g. the active set of a clamp), entries
    whose stencil changes it straddle a kink; they are returned as NaN and
    ignored by :func:`relative_error`.
    """
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    base = signature() if signature else None
    for i in range(flat.size):
        old = flat[i]
        kink = []

        def f(d):
            flat[i] = old + d
            val = loss()
            if signature and not kink and signature() != base:
                kink.append(True)
            return val

        try:
            gflat[i] = _stencil(f, eps)
        finally:
            flat[i] = old
        if kink:
            gflat[i] = np.nan
    return g


def numeric_scalar(loss_of, value, eps=None):
    eps = eps or EPS * min(1.0, abs(value))
    return _stencil(lambda d: loss_of(value + d), eps)


@dataclass
class LayerResult:
    layer: str
    max_rel_error: float
    instances: int
    tol: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tol)


def _scale(g, name, corrupt):
    return g * 1.01 if corrupt and name in corrupt else g


def _kernel_instance(rng, shape, count, K):
    k = sample_kernel(TrajectoryConfig(kernel_size=K, num_samples=64), rng)
    x = rng.standard_normal((count,) + shape)
    y = rng.standard_normal((count,) + shape)
    return x, y, k


def check_kernel_quotient(rng, shape=(12, 12), count=2, beta_k=None, corrupt=None):
    """Errors for the kernel quotient w.r.t. x_tilde, y_tilde and beta_k."""
    x, y, _ = _kernel_instance(rng, shape, count, 5)
    beta = beta_k if beta_k is not None else float(rng.uniform(0.05, 1.0))
    w = rng.standard_normal(shape)

    def loss():
        return float(np.sum(kernel_estimate_forward(x, y, beta)[0] * w))

    _, tape = kernel_estimate_forward(x, y, beta)
    dx, dy, db = kernel_estimate_backward(tape, w)
    nb = numeric_scalar(lambda b: float(np.sum(kernel_estimate_forward(x, y, b)[0] * w)), beta)
    return {
        "kernel_quotient.x_tilde": relative_error(_scale(dx, "kernel_quotient.x_tilde", corrupt),
                                                  numeric_gradient(loss, x)),
        "kernel_quotient.y_tilde": relative_error(_scale(dy, "kernel_quotient.y_tilde", corrupt),
                                                  numeric_gradient(loss, y)),
        "kernel_quotient.beta_k": relative_error(_scale(db, "kernel_quotient.beta_k", corrupt), nb),
    }


def check_image_quotient(rng, shape=(12, 12), K=5, corrupt=None):
    """Errors for the image quotient w.r.t. kernel, blurry image and beta_x."""
    k = sample_kernel(TrajectoryConfig(kernel_size=K, num_samples=64), rng)
    y = rng.standard_normal(shape)
    beta = float(rng.uniform(0.01, 0.5))
    w = rng.standard_normal(shape)

    def loss():
        return float(np.sum(image_estimate_forward(k, y, beta)[0] * w))

    _, tape = image_estimate_forward(k, y, beta)
    dk, dy, db = image_estimate_backward(tape, w)
    nb = numeric_scalar(lambda b: float(np.sum(image_estimate_forward(k, y, b)[0] * w)), beta)
    return {
        "image_quotient.kernel": relative_error(_scale(dk, "image_quotient.kernel", corrupt),
                                                numeric_gradient(loss, k)),
        "image_quotient.y": relative_error(_scale(dy, "image_quotient.y", corrupt),
                                           numeric_gradient(loss, y)),
        "image_quotient.beta_x": relative_error(_scale(db, "image_quotient.beta_x", corrupt), nb),
    }


def check_postprocess(rng, shape=(12, 12), K=5, corrupt=None):
    """Error of the kernel loss gradient w.r.t. the raw quotient frame."""
    raw = rng.standard_normal(shape)
    # keep entries away from the clamp boundary
    raw[np.abs(raw) < 1e-3] = 1e-3
    target = sample_kernel(TrajectoryConfig(kernel_size=K, num_samples=64), rng)
    _, delta = kernel_l2_loss(raw, target)
    num = numeric_gradient(lambda: kernel_l2_loss(raw, target)[0], raw)
    return {"postprocess+loss.raw": relative_error(_scale(delta, "postprocess+loss.raw", corrupt),
                                                   num)}


TINY_ARCH = ArchSpec(num_filters=2, filter_size=3, hidden=(3,), num_pairs=2)


def check_features(rng, shape=(12, 12), in_channels=2, corrupt=None):
    """Errors of the feature extractor w.r.t. its parameters and inputs."""
    arch = ArchSpec(TINY_ARCH.num_filters, TINY_ARCH.filter_size, TINY_ARCH.hidden,
                    TINY_ARCH.num_pairs, in_channels)
    params = init_params(arch, rng)
    for b in [params.conv_b] + params.hidden_b:
        b[...] = rng.uniform(-0.3, 0.3, size=b.shape)
    inputs = rng.standard_normal((in_channels,) + shape)
    wx = rng.standard_normal((arch.num_pairs,) + shape)
    wy = rng.standard_normal((arch.num_pairs,) + shape)

    def loss():
        f, _ = stage_features_forward(inputs, params)
        return float(np.sum(f.x_tilde * wx) + np.sum(f.y_tilde * wy))

    _, tape = stage_features_forward(inputs, params)
    dinputs, grads = stage_features_backward(tape, wx, wy, params)
    out = {"features.inputs": relative_error(_scale(dinputs, "features.inputs", corrupt),
                                             numeric_gradient(loss, inputs))}
    for name, arr in params.named_arrays().items():
        if name == "log_beta_x":
            continue
        key = f"features.{name}"
        out[key] = relative_error(_scale(grads[name], key, corrupt), numeric_gradient(loss, arr))
    return out


def check_scale(rng, shape=(16, 16), K=5, num_stages=2, corrupt=None):
    """End-to-end: kernel loss of a multi-stage scale w.r.t. every parameter.

    Uses a small step: the negativity clamp makes the loss only piecewise
    smooth, and a wide stencil would straddle its kinks.
    """
    net = ScaleNetwork([init_params(a, rng) for a in stage_archs(num_stages, TINY_ARCH)],
                       K, beta_k=float(rng.uniform(0.05, 0.5)))
    y = rng.standard_normal(shape)
    target = sample_kernel(TrajectoryConfig(kernel_size=K, num_samples=64), rng)

    masks = []

    def loss():
        out = scale_forward(y, None, net)
        masks[:] = [r.tape.post.mask.tobytes() for r in out.stage_results]
        return kernel_loss(out.kernel, target)[0]

    def signature():
        return tuple(masks)

    loss()
    out_f = scale_forward(y, None, net)
    _, dk = kernel_loss(out_f.kernel, target)
    grads, dblurry, _, dbk = scale_backward(net, out_f, dk)
    res = {"scale.blurry": relative_error(_scale(dblurry, "scale.blurry", corrupt),
                                          numeric_gradient(loss, y, SCALE_EPS, signature))}
    worst = 0.0
    for i, st in enumerate(net.stages):
        for name, arr in st.named_arrays().items():
            worst = max(worst, relative_error(_scale(grads[i][name], "scale.params", corrupt),
                                              numeric_gradient(loss, arr, SCALE_EPS, signature)))
    res["scale.params"] = worst

    def loss_bk(b):
        saved = net.beta_k
        net.beta_k = b
        try:
            return loss()
        finally:
            net.beta_k = saved

    res["scale.beta_k"] = relative_error(_scale(dbk, "scale.beta_k", corrupt),
                                         numeric_scalar(loss_bk, net.beta_k, SCALE_EPS))
    return res


CHECKS = {
    "kernel_quotient": check_kernel_quotient,
    "image_quotient": check_image_quotient,
    "postprocess": check_postprocess,
    "features": check_features,
    "scale": check_scale,
}

DEFAULT_INSTANCES = {"kernel_quotient": 50, "image_quotient": 50, "postprocess": 10,
                     "features": 5, "scale": 2}


def run_gradcheck(seed=0, instances=None, tol=DEFAULT_TOL, corrupt=None, checks=None):
    """Run the suite; returns a list of :class:`LayerResult` (one per layer).

    ``corrupt`` is a set of layer names whose analytical gradient is
    deliberately scaled by 1.01 (fault injection for testing the harness).
    """
    rng = check_random_state(seed)
    counts = dict(DEFAULT_INSTANCES)
    if isinstance(instances, int):
        counts = {k: instances for k in counts}
    elif instances:
        counts.update(instances)
    worst, n, secs = {}, {}, {}
    for name in checks or CHECKS:
        fn = CHECKS[name]
        for _ in range(counts[name]):
            t0 = time.perf_counter()
            errs = fn(rng, corrupt=corrupt)
            dt = time.perf_counter() - t0
            for layer, e in errs.items():
                worst[layer] = max(worst.get(layer, 0.0), e)
                n[layer] = n.get(layer, 0) + 1
                secs[layer] = secs.get(layer, 0.0) + dt / len(errs)
    return [LayerResult(k, worst[k], n[k], tol, secs[k]) for k in worst]


def format_table(results):
    lines = [f"{'layer':<28} {'max_rel_err':>12} {'n':>4}  status"]
    for r in results:
        lines.append(f"{r.layer:<28} {r.max_rel_error:>12.3e} {r.instances:>4}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
