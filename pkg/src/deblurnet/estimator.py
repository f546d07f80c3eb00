"""scikit-learn style wrapper around training and blind deblurring."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .pipeline import build_model, estimate_kernel, multiscale_deblur
from .synth import ImageSource, SynthConfig, TrajectoryConfig
from .training import (TRAIN_PRESETS, OptimizerConfig, TrainSchedule, train_multiscale)
from .validation import check_image, check_random_state


class _ArraySource:
    """Random crops from in-memory sharp images."""

    def __init__(self, images, size):
        self.images = images
        self.size = tuple(size)
        self.paths = None

    def draw(self, rng):
        from .synth import random_crop
        img = self.images[int(rng.integers(len(self.images)))]
        return random_crop(img, self.size, rng).copy()


class BlindDeblurrer(TransformerMixin, BaseEstimator):
    """Trainable blind deconvolution.

    ``fit`` trains a multi-scale network on synthetic blur generated from
    sharp training images (or procedural scenes when none are given);
    ``predict`` returns kernel estimates and ``transform`` deblurred images.

    Parameters
    ----------
    kernel_sizes : tuple of int
        Kernel size of every scale, coarse to fine.
    preset : {"desk", "paper-3stage"}
    num_stages : int
    n_steps : int
        Training steps per scale.
    image_size : int
        Training crop size at the finest scale.
    noise_sigma : float
    learning_rate : float or None
        ADADELTA step factor; ``None`` uses the preset's value.
    stage_init : {"fresh", "copy"} or None
    random_state : int, Generator or None

    Attributes
    ----------
    model_ : MultiScaleModel
    reports_ : list of TrainingReport
    """

    def __init__(self, kernel_sizes=(9,), preset="desk", num_stages=2, n_steps=2000,
                 image_size=64, noise_sigma=0.01, learning_rate=None, stage_init=None,
                 random_state=None):
        self.kernel_sizes = kernel_sizes
        self.preset = preset
        self.num_stages = num_stages
        self.n_steps = n_steps
        self.image_size = image_size
        self.noise_sigma = noise_sigma
        self.learning_rate = learning_rate
        self.stage_init = stage_init
        self.random_state = random_state

    def _schedule(self):
        preset = TRAIN_PRESETS.get(self.preset, {})
        add = max(1, self.n_steps // self.num_stages)
        return TrainSchedule(total_steps=self.n_steps, steps_per_stage_add=add,
                             freeze_steps_after_add=max(0, min(1000, add // 10)),
                             max_stages=self.num_stages,
                             checkpoint_every=0,
                             stage_init=self.stage_init or preset.get("stage_init", "fresh"))

    def fit(self, X=None, y=None):
        """Train on sharp images ``X`` (list of 2-D arrays) or procedural scenes.

        ``y`` is ignored.
        """
        rng = check_random_state(self.random_state)
        preset = TRAIN_PRESETS.get(self.preset, {})
        lr = self.learning_rate if self.learning_rate is not None else preset.get(
            "adadelta_lr", 0.01)
        sizes = tuple(int(k) for k in self.kernel_sizes)
        size = (self.image_size, self.image_size)
        if X is None:
            source = ImageSource(None, size)
        else:
            imgs = [check_image(x, "X[i]") for x in X]
            if not imgs:
                raise ValueError("X is empty")
            source = _ArraySource(imgs, size)
        model = build_model(sizes, preset=self.preset, rng=rng, num_stages=1)
        cfg = SynthConfig(TrajectoryConfig(kernel_size=sizes[-1]), self.noise_sigma,
                          self.image_size)
        self.model_, self.reports_ = train_multiscale(
            model, source, cfg, self._schedule(), OptimizerConfig(adadelta_lr=lr), rng)
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained model."""
        est = cls(kernel_sizes=tuple(model.kernel_sizes), **params)
        est.model_ = model
        est.reports_ = []
        return est

    def _images(self, X):
        single = isinstance(X, np.ndarray) and X.ndim == 2
        imgs = [X] if single else list(X)
        return single, [check_image(x, "X") for x in imgs]

    def predict(self, X):
        """Kernel estimate(s) for blurry image(s) ``X``."""
        check_is_fitted(self, "model_")
        single, imgs = self._images(X)
        out = [estimate_kernel(x, self.model_)[0] for x in imgs]
        return out[0] if single else np.stack(out)

    def transform(self, X):
        """Deblurred image(s) for blurry image(s) ``X``."""
        check_is_fitted(self, "model_")
        single, imgs = self._images(X)
        out = [multiscale_deblur(x, self.model_).latent for x in imgs]
        return out[0] if single else out

    def score(self, X, y):
        """Negative mean kernel MSE against true kernels ``y``."""
        from .evaluation import kernel_mse
        _, imgs = self._images(X)
        kernels = [y] if isinstance(y, np.ndarray) and y.ndim == 2 else list(y)
        est = [estimate_kernel(x, self.model_)[0] for x in imgs]
        return -float(np.mean([kernel_mse(e, k) for e, k in zip(est, kernels)]))
