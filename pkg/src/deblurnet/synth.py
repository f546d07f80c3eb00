"""Training data synthesis: camera-shake kernels and blurred observations.

Trajectories draw their x and y coordinates independently from a zero-mean
Gaussian process with covariance

    k(t, t') = sf^2 (1 + sqrt(5) d / l + 5 d^2 / (3 l^2)) exp(-sqrt(5) d / l),

d = |t - t'|, on ``t = linspace(0, 1, num_samples)``.
"""

import functools
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, NumericError
from .imaging import convolve_circular, identity_kernel
from .validation import check_image, check_kernel_size, check_random_state

IMAGE_EXTENSIONS = (".png", ".pgm")


@dataclass(frozen=True)
class TrajectoryConfig:
    length_scale: float = 0.3
    signal_std: float = 0.25
    num_samples: int = 256
    kernel_size: int = 17
    substeps: int = 4

    def __post_init__(self):
        if not self.length_scale > 0 or not self.signal_std > 0:
            raise ValueError("length_scale and signal_std must be positive")
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        check_kernel_size(self.kernel_size)

    def to_dict(self):
        return asdict(self)


def matern_covariance(t1, t2, length_scale=0.3, signal_std=0.25):
    d = np.abs(np.subtract.outer(np.asarray(t1, float), np.asarray(t2, float)))
    r = np.sqrt(5.0) * d / length_scale
    return signal_std ** 2 * (1.0 + r + r * r / 3.0) * np.exp(-r)


@functools.lru_cache(maxsize=16)
def _cholesky(num_samples, length_scale, signal_std):
    t = np.linspace(0.0, 1.0, num_samples)
    cov = matern_covariance(t, t, length_scale, signal_std)
    jitter = 1e-10
    eye = np.eye(num_samples)
    while jitter <= 1e-4:
        try:
            L = np.linalg.cholesky(cov + jitter * eye)
            L.setflags(write=False)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NumericError("GP covariance factorization failed after jitter escalation")


def sample_trajectory(cfg, rng=None):
    """Draw a 2-D camera path, shape ``(num_samples, 2)`` as (x, y)."""
    rng = check_random_state(rng)
    L = _cholesky(cfg.num_samples, cfg.length_scale, cfg.signal_std)
    z = rng.standard_normal((cfg.num_samples, 2))
    return L @ z


def _splat(points, size):
    """Bilinear splatting of unit masses; first moments are preserved exactly."""
    ker = np.zeros((size, size))
    x, y = points[:, 0], points[:, 1]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(ker, (y0 + dy, x0 + dx), w)
    return ker


def rasterize_kernel(path, kernel_size, substeps=4):
    """Render a trajectory into a centered, normalized blur kernel.

    The path is densified by linear interpolation, centered on its center of
    mass and scaled isotropically so that every sample keeps one pixel of
    margin. A zero-extent path yields the identity kernel.
    """
    size = check_kernel_size(kernel_size)
    path = np.asarray(path, dtype=np.float64)
    if len(path) > 1 and substeps > 1:
        a, b = path[:-1], path[1:]
        s = (np.arange(substeps) / substeps)[None, :, None]
        dense = (a[:, None] * (1 - s) + b[:, None] * s).reshape(-1, 2)
        pts = np.vstack([dense, path[-1:]])
    else:
        pts = path
    com = pts.mean(axis=0)
    dev = np.abs(pts - com).max()
    if not np.isfinite(dev) or dev <= 1e-12:
        return identity_kernel(size)
    c = (size - 1) / 2.0
    reach = (size - 3) / 2.0
    if reach <= 0:
        return identity_kernel(size)
    pts = c + (pts - com) * (reach / dev)
    ker = _splat(pts, size)
    return ker / ker.sum()


def center_of_mass(ker):
    ker = np.asarray(ker)
    total = ker.sum()
    rows, cols = np.indices(ker.shape)
    return float((rows * ker).sum() / total), float((cols * ker).sum() / total)


def sample_kernel(cfg, rng=None):
    rng = check_random_state(rng)
    return rasterize_kernel(sample_trajectory(cfg, rng), cfg.kernel_size, cfg.substeps)


def reject_flat(sharp, threshold=0.05, min_fraction=0.06):
    """True if fewer than ``min_fraction`` of pixels have both |dx|, |dy| >= threshold.

    Forward differences with wrap-around, so every pixel has both.
    """
    sharp = check_image(sharp, "sharp")
    dx = np.roll(sharp, -1, axis=1) - sharp
    dy = np.roll(sharp, -1, axis=0) - sharp
    strong = (np.abs(dx) >= threshold) & (np.abs(dy) >= threshold)
    return bool(np.count_nonzero(strong) < min_fraction * sharp.size)


@dataclass
class BlurSample:
    sharp: np.ndarray
    kernel: np.ndarray
    blurry: np.ndarray
    noise_sigma: float


def random_crop(img, size, rng):
    H, W = img.shape
    h, w = size
    if H < h or W < w:
        raise DimensionError(f"source {img.shape} smaller than crop {tuple(size)}")
    r = int(rng.integers(0, H - h + 1))
    c = int(rng.integers(0, W - w + 1))
    return img[r:r + h, c:c + w]


def make_sample(sharp_source, kernel, noise_sigma=0.01, rng=None, size=(256, 256)):
    """Blur a (cropped) sharp image and add i.i.d. Gaussian noise."""
    rng = check_random_state(rng)
    src = check_image(sharp_source, "sharp_source")
    sharp = src if src.shape == tuple(size) else random_crop(src, size, rng).copy()
    blurry = convolve_circular(sharp, kernel)
    if noise_sigma > 0:
        blurry = blurry + rng.normal(0.0, noise_sigma, size=blurry.shape)
    return BlurSample(sharp, np.asarray(kernel, float), blurry, float(noise_sigma))


def procedural_scene(shape, rng=None, num_shapes=None):
    """Dead-leaves style scene: flat and grating-textured leaves, mild shading.

    Stands in for a natural-image corpus in tests and smoke runs.
    """
    rng = check_random_state(rng)
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    img = np.full(shape, rng.uniform(0.2, 0.8))
    n = num_shapes or max(8, (H * W) // 150)
    scale = min(H, W)
    for _ in range(n):
        r = scale * 0.4 * rng.uniform(0.02, 1.0) ** 2 + 1.5
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        v = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            th = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            w = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            mask = (np.abs(u) < r) & (np.abs(w) < r * rng.uniform(0.2, 1.0))
        if rng.random() < 0.75:
            # oriented grating texture inside the leaf
            freq = rng.uniform(0.3, 1.2)
            phi = rng.uniform(0, np.pi)
            amp = rng.uniform(0.05, 0.2)
            tex = amp * np.sin(freq * ((xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)))
            img[mask] = v + tex[mask]
        else:
            img[mask] = v
    ramp = rng.uniform(-0.1, 0.1) * (xx / W) + rng.uniform(-0.1, 0.1) * (yy / H)
    return np.clip(img + ramp, 0.0, 1.0)


def scan_corpus(root):
    """Sorted list of PNG/PGM files below ``root`` (recursive)."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"corpus directory not found: {root}")
    found = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f.lower().endswith(IMAGE_EXTENSIONS):
                found.append(os.path.join(dirpath, f))
    return sorted(found)


class ImageSource:
    """Random sharp crops, either from a file corpus or procedural scenes.

    Parameters
    ----------
    paths : list of str or None
        Image files; ``None`` selects procedural scenes.
    size : (int, int)
        Crop shape.
    seed : int
        Seed of the deterministic file permutation.
    """

    def __init__(self, paths=None, size=(256, 256), seed=0):
        self.paths = list(paths) if paths is not None else None
        self.size = tuple(size)
        if self.paths is not None:
            if not self.paths:
                raise ValueError("image corpus is empty")
            order = np.random.default_rng(seed).permutation(len(self.paths))
            self.paths = [self.paths[i] for i in order]
        self._cache = {}

    def _load(self, path):
        if path not in self._cache:
            from .imageio import read_gray
            self._cache[path] = read_gray(path)
        return self._cache[path]

    def draw(self, rng):
        if self.paths is None:
            return procedural_scene(self.size, rng)
        for _ in range(len(self.paths)):
            img = self._load(self.paths[int(rng.integers(len(self.paths)))])
            if img.shape[0] >= self.size[0] and img.shape[1] >= self.size[1]:
                return random_crop(img, self.size, rng).copy()
        raise DimensionError(f"no corpus image is at least {self.size}")


@dataclass
class SynthConfig:
    trajectory: TrajectoryConfig = TrajectoryConfig()
    noise_sigma: float = 0.01
    image_size: int = 256
    max_rejections: int = 100


class SampleStream:
    """Infinite iterator of accepted :class:`BlurSample` objects.

    All randomness comes from ``rng``; its state (and hence the stream) can
    be saved and restored with :meth:`get_state` / :meth:`set_state`.
    """

    def __init__(self, source, cfg=SynthConfig(), rng=None):
        self.source = source
        self.cfg = cfg
        self.rng = check_random_state(rng)
        self.accepted = 0
        self.rejected = 0

    def __iter__(self):
        return self

    def __next__(self):
        for _ in range(self.cfg.max_rejections):
            sharp = self.source.draw(self.rng)
            if reject_flat(sharp):
                self.rejected += 1
                continue
            self.accepted += 1
            kernel = sample_kernel(self.cfg.trajectory, self.rng)
            return make_sample(sharp, kernel, self.cfg.noise_sigma, self.rng, sharp.shape)
        raise ValueError("too many flat images rejected in a row; check the corpus")

    @property
    def rejection_rate(self):
        n = self.accepted + self.rejected
        return self.rejected / n if n else 0.0

    def get_state(self):
        return {"rng": self.rng.bit_generator.state, "accepted": self.accepted,
                "rejected": self.rejected}

    def set_state(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.accepted = state["accepted"]
        self.rejected = state["rejected"]


def worker_rng(master_seed, worker_index):
    """Independent stream for one synthesis worker (seed = master + index)."""
    return np.random.default_rng(int(master_seed) + int(worker_index))
