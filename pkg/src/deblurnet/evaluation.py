"""Kernel and image error metrics, runtime tables and evaluation records."""

import csv
import io
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .imaging import pad_or_embed
from .synth import center_of_mass


def _shift_zero(img, dr, dc):
    out = np.zeros_like(img)
    H, W = img.shape
    src = img[max(0, -dr):H - max(0, dr), max(0, -dc):W - max(0, dc)]
    out[max(0, dr):max(0, dr) + src.shape[0], max(0, dc):max(0, dc) + src.shape[1]] = src
    return out


def kernel_mse(estimated, truth):
    """Mean squared kernel error after integer center-of-mass alignment.

    The smaller kernel is embedded (centered) into the larger one. The
    estimate is shifted by the rounded difference of the centers of mass
    inside a frame padded so that no mass is lost; the squared differences
    are summed and divided by the number of kernel pixels.
    """
    a = np.asarray(estimated, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    n = max(a.shape[0], b.shape[0])
    pad = n
    frame = (n + 2 * pad, n + 2 * pad)
    a = pad_or_embed(a, frame)
    b = pad_or_embed(b, frame)
    if a.sum() > 0 and b.sum() > 0:
        ca, cb = center_of_mass(a), center_of_mass(b)
        dr, dc = (int(np.rint(cb[i] - ca[i])) for i in range(2))
        dr = max(-pad, min(pad, dr))
        dc = max(-pad, min(pad, dc))
        a = _shift_zero(a, dr, dc)
    return float(np.sum((a - b) ** 2) / (n * n))


def psnr(a, b, border=0, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images.

    ``border`` pixels are excluded on every side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if border:
        a = a[border:-border, border:-border]
        b = b[border:-border, border:-border]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class RuntimeTable:
    rows: list = field(default_factory=list)   # (image_dim, kernel_size, median_s, runs)

    def __len__(self):
        return len(self.rows)

    def to_text(self):
        lines = [f"{'image':>11} {'kernel':>7} {'median_s':>10}"]
        for dim, k, med, _ in self.rows:
            lines.append(f"{f'{dim}x{dim}':>11} {f'{k}x{k}':>7} {med:>10.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_dim", "kernel_size", "median_s", "run1_s", "run2_s", "run3_s"])
        for dim, k, med, runs in self.rows:
            w.writerow([dim, k, f"{med:.6f}"] + [f"{r:.6f}" for r in runs])
        return buf.getvalue()


TABLE1_IMAGE_DIMS = (255, 300, 600, 900, 1200, 1500, 2048)
TABLE1_KERNEL_SIZES = (17, 25, 33)


def _timing_model(model, kernel_size):
    from .pipeline import build_model
    if model.scales[-1].kernel_size == kernel_size:
        return model
    base = model.scales[-1].stages[0].arch
    # runtime does not depend on the weights: same architecture, fresh weights
    return build_model((kernel_size,), arch=base, num_stages=len(model.scales[-1].stages),
                       rng=0, sharpen_sigma=None)


def runtime_table(model, sizes, repeats=3, rng=None):
    """Median wall time of kernel estimation per ``(image_dim, kernel_size)`` cell.

    Cells whose kernel size differs from the model's finest scale are timed
    on a freshly initialized single-scale model of the same architecture.
    """
    from .pipeline import estimate_kernel
    rng = np.random.default_rng(rng)
    table = RuntimeTable()
    for dim, k in sizes:
        m = _timing_model(model, k)
        img = rng.random((dim, dim))
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            estimate_kernel(img, m)
            runs.append(time.perf_counter() - t0)
        table.rows.append((int(dim), int(k), statistics.median(runs), runs))
    return table


@dataclass
class EvalRecord:
    sample_id: str
    kernel_mse: float
    psnr_db: float
    wall_ms: dict
    model_id: str
    config_hash: str

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return d


def evaluate_sample(model, sample_id, blurry, kernel, sharp=None, model_ids=None):
    """Deblur one synthetic sample and score kernel and restoration."""
    from .modelio import config_hash, model_id
    from .pipeline import multiscale_deblur
    res = multiscale_deblur(blurry, model)
    mse = kernel_mse(res.kernel, kernel)
    border = kernel.shape[0] // 2
    p = psnr(res.latent, sharp, border=border) if sharp is not None else float("nan")
    mid, chash = model_ids or (model_id(model), config_hash(model))
    return EvalRecord(str(sample_id), mse, p, dict(res.timings), mid, chash)


def evaluate(model, samples):
    """Evaluate an iterable of ``(id, blurry, kernel, sharp)`` tuples."""
    from .modelio import config_hash, model_id
    ids = (model_id(model), config_hash(model))
    return [evaluate_sample(model, sid, y, k, x, ids) for sid, y, k, x in samples]


def summarize(records):
    mses = [r.kernel_mse for r in records]
    ps = [r.psnr_db for r in records if np.isfinite(r.psnr_db)]
    return {
        "count": len(records),
        "kernel_mse_mean": float(np.mean(mses)) if mses else float("nan"),
        "psnr_db_mean": float(np.mean(ps)) if ps else float("nan"),
        "kernel_ms_mean": float(np.mean([r.wall_ms["kernel_ms"] for r in records]))
        if records else float("nan"),
    }


def input_size_sweep(model, samples, crops=(96, 128, 160, 192, 224, 255)):
    """Mean kernel MSE when estimating from centered crops of each size.

    ``samples`` are ``(blurry, kernel)`` pairs; crops larger than the image
    are skipped. Returns a list of ``(crop, mean_mse)``.
    """
    from .pipeline import estimate_kernel
    out = []
    for c in crops:
        errs = []
        for y, k in samples:
            if c > min(y.shape) or c < model.scales[-1].kernel_size:
                continue
            r0 = (y.shape[0] - c) // 2
            c0 = (y.shape[1] - c) // 2
            est = estimate_kernel(y[r0:r0 + c, c0:c0 + c], model)[0]
            errs.append(kernel_mse(est, k))
        if errs:
            out.append((int(c), float(np.mean(errs))))
    return out


# thresholds: key -> (summary field, comparison)
THRESHOLD_KEYS = {
    "kernel_mse_max": ("kernel_mse_mean", "max"),
    "psnr_db_min": ("psnr_db_mean", "min"),
    "kernel_ms_max": ("kernel_ms_mean", "max"),
}


def check_thresholds(summary, thresholds):
    """List of human-readable violations (empty if all thresholds hold)."""
    from .errors import ConfigError
    violations = []
    for key, limit in thresholds.items():
        if key not in THRESHOLD_KEYS:
            raise ConfigError(f"unknown threshold {key!r}")
        name, kind = THRESHOLD_KEYS[key]
        value = summary[name]
        bad = not np.isfinite(value) or (value > limit if kind == "max" else value < limit)
        if bad:
            violations.append(f"{name}={value:.6g} violates {key}={limit}")
    return violations
