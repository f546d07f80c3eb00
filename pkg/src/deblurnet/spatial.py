"""Spatially-varying blur through overlapping, locally uniform patches.

The image is covered by an overlapping grid of patches whose windows form a
partition of unity. A kernel is estimated independently in every patch
(from windowed, cropped feature images), optionally projected onto a basis
of kernels induced by rigid camera motions (in-plane translations and
rotations) with hard thresholding of the motion coefficients, and the image
is restored patch by patch and blended with the same windows.
"""

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse

from .errors import DimensionError, ShapeError
from .imaging import barthann, barthann_border_window, identity_kernel
from .pipeline import _postprocess, default_restore_beta, restore_image, warm_latent
from .quotient import DEFAULT_BETA_K, kernel_estimate_forward
from .features import stage_features_infer
from .validation import check_image, check_kernel_size


@dataclass
class PatchGrid:
    """Overlapping patches with partition-of-unity windows.

    The windows are separable: ``windows[r] = outer(wy[i], wx[j])`` where
    ``wy``/``wx`` are per-axis partitions of unity.
    """

    shape: tuple
    patch_size: tuple
    overlap: float
    starts_y: np.ndarray
    starts_x: np.ndarray
    weights_y: list
    weights_x: list

    @property
    def grid_shape(self):
        return len(self.starts_y), len(self.starts_x)

    def __len__(self):
        return len(self.starts_y) * len(self.starts_x)

    def index(self, r):
        return divmod(r, len(self.starts_x))

    def slices(self, r):
        i, j = self.index(r)
        ph, pw = self.patch_size
        return (slice(self.starts_y[i], self.starts_y[i] + ph),
                slice(self.starts_x[j], self.starts_x[j] + pw))

    def window(self, r):
        i, j = self.index(r)
        return np.outer(self.weights_y[i], self.weights_x[j])

    def center(self, r):
        """Patch center ``(row, col)`` in image coordinates."""
        i, j = self.index(r)
        ph, pw = self.patch_size
        return self.starts_y[i] + (ph - 1) / 2.0, self.starts_x[j] + (pw - 1) / 2.0

    def window_sum(self):
        total = np.zeros(self.shape)
        for r in range(len(self)):
            total[self.slices(r)] += self.window(r)
        return total

    def crop(self, img, r):
        return img[..., self.slices(r)[0], self.slices(r)[1]]


def patch_count(dim, patch, overlap):
    """Patches needed along one axis."""
    if patch >= dim:
        return 1
    return int(math.ceil((dim - overlap * patch) / ((1.0 - overlap) * patch) - 1e-9))


def _axis_layout(dim, patch, overlap):
    n = patch_count(dim, patch, overlap)
    starts = np.rint(np.linspace(0, dim - patch, n)).astype(int)
    # inner samples of a longer Barthann window: strictly positive everywhere
    prof = barthann(patch + 2)[1:-1] if patch > 1 else np.ones(1)
    total = np.zeros(dim)
    for s in starts:
        total[s:s + patch] += prof
    return starts, [prof / total[s:s + patch] for s in starts]


def build_patch_grid(shape, patch_size, overlap=0.5):
    """Overlapping patch grid over an image of ``shape``.

    Parameters
    ----------
    shape : (int, int)
    patch_size : int or (int, int)
    overlap : float
        Fraction in ``[0, 1)``.
    """
    H, W = (int(s) for s in shape)
    ph, pw = (patch_size, patch_size) if np.isscalar(patch_size) else patch_size
    ph, pw = int(ph), int(pw)
    if not 0.0 <= overlap < 1.0:
        raise DimensionError(f"overlap must be in [0, 1), got {overlap}")
    if ph < 1 or pw < 1 or ph > H or pw > W:
        raise DimensionError(f"patch {(ph, pw)} does not fit image {(H, W)}")
    sy, wy = _axis_layout(H, ph, overlap)
    sx, wx = _axis_layout(W, pw, overlap)
    return PatchGrid((H, W), (ph, pw), float(overlap), sy, sx, wy, wx)


@dataclass
class LocalKernelField:
    kernels: np.ndarray           # (R, K, K)
    eta: float = 1.0
    degenerate: np.ndarray = None  # (R,) bool
    coefficients: np.ndarray = None

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.kernels), dtype=bool)

    @property
    def kernel_size(self):
        return self.kernels.shape[-1]


def local_kernels_direct(x_tilde, y_tilde, grid, kernel_size, beta_k=DEFAULT_BETA_K):
    """Per-patch kernel estimates from full-image feature images.

    Every patch takes the windowed crop of all feature images, tapers its
    own border and solves the kernel quotient at patch resolution. The raw
    estimate is cropped, clamped and normalized; patches without usable
    signal get an all-zero kernel and are flagged degenerate.
    """
    K = check_kernel_size(kernel_size)
    xs = np.asarray(x_tilde, dtype=np.float64)
    ys = np.asarray(y_tilde, dtype=np.float64)
    if xs.ndim == 2:
        xs, ys = xs[None], ys[None]
    if xs.shape != ys.shape or xs.shape[1:] != tuple(grid.shape):
        raise ShapeError(f"features {xs.shape}/{ys.shape} do not match grid {grid.shape}")
    if K > min(grid.patch_size):
        raise DimensionError(f"kernel {K} larger than patch {grid.patch_size}")
    taper = barthann_border_window(grid.patch_size, (K + 1) // 2)
    kernels = np.zeros((len(grid), K, K))
    degenerate = np.zeros(len(grid), dtype=bool)
    for r in range(len(grid)):
        w = grid.window(r) * taper
        xp = grid.crop(xs, r) * w
        yp = grid.crop(ys, r) * w
        raw, _ = kernel_estimate_forward(xp, yp, beta_k)
        tape = _postprocess(raw, K)
        if tape.degenerate:
            degenerate[r] = True
        else:
            kernels[r] = tape.kernel
    return LocalKernelField(kernels, 1.0, degenerate)


def _splat_delta(kernel, pos):
    """Bilinear unit mass at ``pos = (row, col)``; False if it leaves the support."""
    K = kernel.shape[0]
    tol = 1e-9
    if not all(-tol <= v <= K - 1 + tol for v in pos):
        return False
    r, c = (min(max(v, 0.0), K - 1.0) for v in pos)
    r0, c0 = int(math.floor(r)), int(math.floor(c))
    fr, fc = r - r0, c - c0
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (1, 0, fr * (1 - fc)),
                      (0, 1, (1 - fr) * fc), (1, 1, fr * fc)):
        if w:
            kernel[r0 + dr, c0 + dc] += w
    return True


def motion_displacement(motion, point, image_center):
    """Displacement ``(d_row, d_col)`` of ``point`` under ``motion = (dx, dy, theta)``.

    The rotation is about the image center; ``dx`` is along columns.
    """
    dx, dy, th = motion
    py, px = point[0] - image_center[0], point[1] - image_center[1]
    c, s = math.cos(th), math.sin(th)
    rx = c * px - s * py
    ry = s * px + c * py
    return ry - py + dy, rx - px + dx


@dataclass
class MotionBasis:
    motions: list
    matrix: object            # sparse (R*K*K, M)
    kernel_size: int
    num_patches: int
    excluded: list = field(default_factory=list)

    def column_kernels(self, m):
        """Local kernels ``(R, K, K)`` of basis motion ``m``."""
        col = self.matrix[:, m].toarray().ravel()
        K = self.kernel_size
        return col.reshape(self.num_patches, K, K)

    @functools.cached_property
    def normalized(self):
        """Basis with unit-l2-norm columns (sparse)."""
        norms = np.sqrt(np.asarray(self.matrix.multiply(self.matrix).sum(axis=0))).ravel()
        return sparse.csc_matrix(self.matrix @ sparse.diags(1.0 / norms))

    @functools.cached_property
    def orthonormal(self):
        """Dense orthonormal system spanning the basis columns."""
        u, sv, _ = np.linalg.svd(self.normalized.toarray(), full_matrices=False)
        return u[:, sv > sv[0] * 1e-10]


def default_motions(kernel_size, max_angle_deg=2.0, angle_step_deg=0.25):
    rad = kernel_size // 2
    shifts = range(-rad, rad + 1)
    n_ang = int(round(max_angle_deg / angle_step_deg))
    angles = np.deg2rad(np.arange(-n_ang, n_ang + 1) * angle_step_deg)
    return [(float(dx), float(dy), float(a)) for a in angles for dy in shifts for dx in shifts]


def build_motion_basis(image_shape, grid, kernel_size, motions=None):
    """Per-patch delta kernels induced by rigid camera motions.

    Each motion shifts a patch center by some displacement; the local
    kernel of that motion is a unit mass at the kernel center plus that
    displacement, splatted bilinearly. Motions that push any patch outside
    the kernel support are dropped with a warning.
    """
    K = check_kernel_size(kernel_size)
    motions = default_motions(K) if motions is None else [tuple(map(float, m)) for m in motions]
    if not motions:
        raise ValueError("empty motion grid")
    H, W = image_shape
    ic = ((H - 1) / 2.0, (W - 1) / 2.0)
    c = (K - 1) / 2.0
    R = len(grid)
    rows, cols, vals, kept, excluded = [], [], [], [], []
    for m in motions:
        block = np.zeros((R, K, K))
        ok = True
        for r in range(R):
            d = motion_displacement(m, grid.center(r), ic)
            if not _splat_delta(block[r], (c + d[0], c + d[1])):
                ok = False
                break
        if not ok:
            excluded.append(m)
            continue
        nz = np.flatnonzero(block)
        rows.append(nz)
        cols.append(np.full(len(nz), len(kept)))
        vals.append(block.ravel()[nz])
        kept.append(m)
    if excluded:
        warnings.warn(f"{len(excluded)} motions exceed the kernel support and were excluded",
                      RuntimeWarning)
    if not kept:
        raise DimensionError("no motion fits inside the kernel support")
    mat = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(R * K * K, len(kept)))
    return MotionBasis(kept, mat, K, R, excluded)


def threshold_top(mu, eta):
    """Keep the ``ceil(eta * len(mu))`` largest-magnitude entries (ties: lower index)."""
    mu = np.asarray(mu, dtype=np.float64)
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    keep = math.ceil(eta * mu.size)
    out = np.zeros_like(mu)
    idx = np.argsort(-np.abs(mu), kind="stable")[:keep]
    out[idx] = mu[idx]
    return out


DENSE_LIMIT = 30_000_000   # matrix entries solved densely


def _fista_nnls(A, b, iters=500):
    """Nonnegative least squares by accelerated projected gradient (sparse ``A``)."""
    v = np.random.default_rng(0).standard_normal(A.shape[1])
    for _ in range(50):    # power iteration for the Lipschitz constant
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    lip = float(np.linalg.norm(A.T @ (A @ v))) or 1.0
    x = z = np.zeros(A.shape[1])
    t = 1.0
    for _ in range(iters):
        x_new = np.maximum(z - (A.T @ (A @ z - b)) / lip, 0.0)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
    return x


def motion_coefficients(field, basis, method="nnls"):
    """Analysis step: motion coefficients of a local kernel field.

    ``"nnls"`` fits a nonnegative combination of the unit-norm basis
    columns (a kernel is a nonnegative density over camera poses).
    ``"orthonormal"`` expands the field in an orthonormal system spanning
    the basis; with ``eta = 1`` this is the orthogonal projection onto the
    span. Coefficients refer to the unit-norm columns resp. the orthonormal
    system; :func:`synthesize_field` inverts either.
    """
    k = np.asarray(field.kernels, dtype=np.float64).ravel()
    if method == "nnls":
        A = basis.normalized
        if A.shape[0] * A.shape[1] <= DENSE_LIMIT:
            return optimize.nnls(A.toarray(), k, maxiter=10 * A.shape[1])[0]
        return _fista_nnls(A, k)
    if method == "orthonormal":
        return basis.orthonormal.T @ k
    raise ValueError(f"unknown projection method {method!r}")


def synthesize_field(mu, basis, method="nnls"):
    K = basis.kernel_size
    A = basis.normalized if method == "nnls" else basis.orthonormal
    return np.asarray(A @ np.asarray(mu)).reshape(basis.num_patches, K, K)


def project_and_threshold(field, basis, eta=1.0, method="nnls"):
    """Project local kernels on the motion basis, sparsify, resynthesize.

    Returns a new :class:`LocalKernelField`; every local kernel is clamped
    to be nonnegative and renormalized. An all-zero coefficient vector (or
    a patch without positive mass) yields identity kernels flagged as
    degenerate.
    """
    if field.kernels.shape[0] != basis.num_patches or field.kernel_size != basis.kernel_size:
        raise ShapeError("field and basis dimensions differ")
    mu_t = threshold_top(motion_coefficients(field, basis, method), eta)
    synth = synthesize_field(mu_t, basis, method)
    K = basis.kernel_size
    R = basis.num_patches
    out = np.empty((R, K, K))
    degenerate = np.zeros(R, dtype=bool)
    all_zero = not np.any(mu_t)
    for r in range(R):
        k = np.clip(synth[r], 0.0, None)
        s = k.sum()
        if all_zero or s <= 1e-12:
            out[r] = identity_kernel(K)
            degenerate[r] = True
        else:
            out[r] = k / s
    return LocalKernelField(out, eta, degenerate, mu_t)


def _crop_indices(start, patch, margin, dim):
    """Wrapped indices of a patch enlarged by ``margin``, and the patch offset.

    If the enlarged crop would not fit, the whole (rolled) axis is used.
    """
    if patch + 2 * margin >= dim:
        margin = (dim - patch) // 2
        idx = np.arange(start - margin, start - margin + dim) % dim
        return idx, margin
    return np.arange(start - margin, start + patch + margin) % dim, margin


def eff_restore(blurry, field, grid, beta_x, margin=None, prior="intensity"):
    """Patch-wise Tikhonov deconvolution blended by the grid windows.

    Each patch is deconvolved on a crop enlarged by ``margin`` pixels on
    every side (wrapping at the image border; default two patch sizes) so
    that the circular boundary of the local problem stays away from the
    kept region. ``prior`` selects the restoration penalty (see
    :func:`~deblurnet.pipeline.restore_image`).
    """
    y = check_image(blurry, "blurry")
    if y.shape != tuple(grid.shape):
        raise ShapeError(f"image {y.shape} does not match grid {grid.shape}")
    K = field.kernel_size
    ph, pw = grid.patch_size
    if margin is None:
        margin = max(4 * K, 2 * ph, 2 * pw)
    H, W = y.shape
    out = np.zeros_like(y)
    for r in range(len(grid)):
        sl_y, sl_x = grid.slices(r)
        ri, my = _crop_indices(sl_y.start, ph, int(margin), H)
        ci, mx = _crop_indices(sl_x.start, pw, int(margin), W)
        x = restore_image(field.kernels[r], y[np.ix_(ri, ci)], beta_x, prior)
        out[sl_y, sl_x] += grid.window(r) * x[my:my + ph, mx:mx + pw]
    return out


@dataclass
class SpatialResult:
    field: LocalKernelField
    latent: np.ndarray
    grid: PatchGrid
    basis: MotionBasis = None


def spatially_varying_deblur(blurry, model, patch_size=None, overlap=0.5, eta=1.0,
                             motions=None, project=True, beta_x=None, prior="intensity"):
    """Blind deblurring with a locally varying kernel.

    The coarser scales run as usual and provide the warm latent image; each
    stage of the finest scale then estimates one kernel per patch from its
    (full-image) feature images and restores the latent patch-wise.
    ``beta_x`` overrides the weight of the final restoration and ``prior``
    selects its penalty; intermediate stages always use their own layer.
    """
    y = check_image(blurry, "blurry")
    net = model.scales[-1]
    K = net.kernel_size
    if patch_size is None:
        patch_size = max(K, int(round(0.25 * min(y.shape))))
    grid = build_patch_grid(y.shape, patch_size, overlap)
    basis = build_motion_basis(y.shape, grid, K, motions) if project else None
    latent = warm_latent(y, model, len(model.scales) - 1)
    fld = None
    for i, stage in enumerate(net.stages):
        inputs = y[None] if latent is None else np.stack([y, latent])
        feats = stage_features_infer(inputs, stage)
        fld = local_kernels_direct(feats.x_tilde, feats.y_tilde, grid, K, net.beta_k)
        if project:
            fld = project_and_threshold(fld, basis, eta)
        else:
            for r in np.flatnonzero(fld.degenerate):
                fld.kernels[r] = identity_kernel(K)
        last = i == len(net.stages) - 1
        if last:
            bx = default_restore_beta(model, prior) if beta_x is None else beta_x
            latent = eff_restore(y, fld, grid, bx, prior=prior)
        else:
            latent = eff_restore(y, fld, grid, stage.beta_x)
    return SpatialResult(fld, latent, grid, basis)


def kernel_mosaic(field, grid, gap=1):
    """Tile the local kernels at their grid positions, each scaled to max 1."""
    gy, gx = grid.grid_shape
    K = field.kernel_size
    mosaic = np.ones((gy * (K + gap) + gap, gx * (K + gap) + gap))
    for r in range(len(grid)):
        i, j = grid.index(r)
        k = field.kernels[r]
        m = k.max()
        tile = k / m if m > 0 else k
        y0, x0 = gap + i * (K + gap), gap + j * (K + gap)
        mosaic[y0:y0 + K, x0:x0 + K] = tile
    return mosaic
