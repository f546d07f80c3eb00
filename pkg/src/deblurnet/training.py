"""End-to-end training on synthetic blur samples.

The loss is the squared L2 distance between the post-processed kernel of
the last stage and the ground-truth kernel. Training starts with one stage;
new stages are appended on a fixed schedule, with the older stages frozen
for a while after each addition. Samples whose loss exceeds a multiple of
the running mean are not back-propagated.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .features import ArchSpec, init_params
from .imaging import crop_center, pad_or_embed
from .pipeline import (_postprocess, kernel_postprocess_backward, scale_backward, scale_forward,
                       stage_archs, warm_latent)
from .validation import check_random_state

log = logging.getLogger(__name__)

BETA_X_BOUNDS = (1e-8, 1e3)


@dataclass
class OptimizerConfig:
    method: str = "adadelta"
    adadelta_lr: float = 0.01
    adadelta_decay: float = 0.95
    adadelta_eps: float = 1e-6
    sgd_lr: float = 0.01

    def __post_init__(self):
        if self.method not in ("adadelta", "sgd"):
            raise ConfigError(f"unknown optimizer {self.method!r}")
        if not 0 < self.adadelta_decay < 1:
            raise ConfigError("adadelta_decay must be in (0, 1)")
        if not (self.adadelta_lr > 0 and self.sgd_lr > 0 and self.adadelta_eps > 0):
            raise ConfigError("learning rates and eps must be positive")


@dataclass
class TrainSchedule:
    total_steps: int = 2000
    steps_per_stage_add: int = 1_000_000
    freeze_steps_after_add: int = 1000
    max_stages: int = 3
    loss_skip_factor: float = 10.0
    running_loss_decay: float = 0.999
    batch_size: int = 1
    checkpoint_every: int = 0
    learn_beta_k: bool = False
    stage_init: str = "fresh"

    def __post_init__(self):
        if self.stage_init not in ("fresh", "copy"):
            raise ConfigError(f"unknown stage_init {self.stage_init!r}")
        for name in ("total_steps", "steps_per_stage_add", "max_stages", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.freeze_steps_after_add < 0 or self.checkpoint_every < 0:
            raise ConfigError("freeze_steps_after_add and checkpoint_every must be >= 0")
        if not self.loss_skip_factor > 0 or not 0 < self.running_loss_decay < 1:
            raise ConfigError("invalid skip factor or running-loss decay")


def copy_stage_into(prev, new):
    """Warm-start ``new`` from ``prev``.

    Weights on channels ``prev`` lacks (the latent image of a freshly
    two-channel stage) are zero, so the new stage initially reproduces the
    features of ``prev`` from the blurry image. Arrays whose shapes differ
    keep their fresh initialization.
    """
    out = new.copy()
    src = prev.named_arrays()
    for name, arr in out.named_arrays().items():
        p = src.get(name)
        if p is None:
            continue
        if p.shape == arr.shape:
            arr[...] = p
        elif name == "conv_w" and p.shape[1] < arr.shape[1] and p.shape[0] == arr.shape[0]:
            arr[...] = 0.0
            arr[:, :p.shape[1]] = p
    return out


def embed_target(target, size):
    t = np.asarray(target, dtype=np.float64)
    if t.shape[0] == size:
        return t
    if t.shape[0] < size:
        return pad_or_embed(t, (size, size))
    return crop_center(t, (size, size))


def kernel_loss(kernel, target):
    """``sum (kernel - target)^2`` and its gradient w.r.t. ``kernel``."""
    diff = kernel - embed_target(target, kernel.shape[0])
    return float(np.sum(diff * diff)), 2.0 * diff


def kernel_l2_loss(predicted_raw, target, kernel_size=None):
    """Loss of a raw quotient-layer frame against a target kernel.

    Returns ``(loss, delta)`` with ``delta`` the gradient w.r.t. the raw
    frame (zero outside the crop and where negatives were clamped).
    """
    size = kernel_size or np.shape(target)[0]
    tape = _postprocess(predicted_raw, size)
    loss, dk = kernel_loss(tape.kernel, target)
    return loss, kernel_postprocess_backward(tape, dk)


def adadelta_step(params, grads, state, cfg):
    """In-place ADADELTA update of every array in ``params``.

    ``state`` maps names to ``(E[g^2], E[dx^2])`` accumulators and is
    created on first use. Returns ``(params, state)``.
    """
    rho, eps, lr = cfg.adadelta_decay, cfg.adadelta_eps, cfg.adadelta_lr
    for name, p in params.items():
        g = grads[name]
        if name not in state:
            state[name] = (np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))
        eg2, edx2 = state[name]
        eg2 *= rho
        eg2 += (1 - rho) * g * g
        dx = -lr * np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1 - rho) * dx * dx
        p += dx
    return params, state


def sgd_step(params, grads, cfg):
    for name, p in params.items():
        p -= cfg.sgd_lr * grads[name]
    return params


@dataclass
class StepRecord:
    step: int
    loss: float
    running_loss: float
    skipped: bool
    stage_count: int


@dataclass
class TrainingReport:
    records: list = field(default_factory=list)
    stage_add_steps: list = field(default_factory=list)
    skipped: int = 0
    seen: int = 0

    @property
    def skip_rate(self):
        return self.skipped / self.seen if self.seen else 0.0

    @property
    def loss_curve(self):
        return [r.loss for r in self.records]

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


class Trainer:
    """Trains one scale of a :class:`~deblurnet.pipeline.MultiScaleModel`.

    Coarser scales (index < ``scale_index``) are frozen and only provide the
    warm latent image for the trained scale.

    Parameters
    ----------
    model : MultiScaleModel
    stream : iterator of BlurSample
        Samples at the trained scale's resolution and kernel size.
    schedule : TrainSchedule
    opt : OptimizerConfig
    scale_index : int, optional
        Defaults to the finest scale.
    base_arch : ArchSpec, optional
        Architecture template for stages added during training.
    wide_last : int, optional
        ``num_pairs`` for the third and later stages.
    """

    def __init__(self, model, stream, schedule=None, opt=None, scale_index=None,
                 base_arch=None, wide_last=None, rng=None, on_record=None, on_checkpoint=None):
        self.model = model
        self.stream = stream
        self.schedule = schedule or TrainSchedule()
        self.opt = opt or OptimizerConfig()
        self.scale_index = len(model.scales) - 1 if scale_index is None else scale_index
        self.net = model.scales[self.scale_index]
        first = self.net.stages[0].arch
        self.base_arch = base_arch or ArchSpec(first.num_filters, first.filter_size,
                                               first.hidden, first.num_pairs, 1, first.bias)
        self.wide_last = wide_last
        self.rng = check_random_state(rng)
        self.step = 0
        self.running_loss = None
        self.freeze_until = 0
        self.opt_state = {}
        self.report = TrainingReport()
        self.on_record = on_record
        self.on_checkpoint = on_checkpoint
        self._beta_k_param = np.array(math.log(self.net.beta_k))

    @property
    def warm(self):
        return self.scale_index > 0

    def trainable_stage_start(self):
        if self.step < self.freeze_until:
            return len(self.net.stages) - 1
        return 0

    def _maybe_add_stage(self):
        s = self.schedule
        if self.step > 0 and self.step % s.steps_per_stage_add == 0 \
                and len(self.net.stages) < s.max_stages:
            n = len(self.net.stages) + 1
            arch = stage_archs(n, self.base_arch, self.warm, self.wide_last)[-1]
            new = init_params(arch, self.rng)
            if s.stage_init == "copy":
                new = copy_stage_into(self.net.stages[-1], new)
            self.net.stages.append(new)
            self.freeze_until = self.step + s.freeze_steps_after_add
            self.report.stage_add_steps.append(self.step)
            log.info("added stage %d at step %d", n, self.step)
            if self.on_checkpoint and s.checkpoint_every:
                self.on_checkpoint(self)

    def _sample_gradients(self, sample, first_trainable):
        warm = warm_latent(sample.blurry, self.model, self.scale_index) if self.warm else None
        out = scale_forward(sample.blurry, warm, self.net)
        loss, dk = kernel_loss(out.kernel, sample.kernel)
        return loss, out, dk, warm

    def train_step(self):
        """Process one (mini)batch and apply at most one parameter update."""
        self._maybe_add_stage()
        s = self.schedule
        first = self.trainable_stage_start()
        acc = {}
        dbeta_k = 0.0
        losses = []
        any_skipped = False
        for _ in range(s.batch_size):
            sample = next(self.stream)
            loss, out, dk, _ = self._sample_gradients(sample, first)
            if self.running_loss is None:
                self.running_loss = loss
            skip = loss > s.loss_skip_factor * self.running_loss
            self.running_loss = (s.running_loss_decay * self.running_loss
                                 + (1 - s.running_loss_decay) * loss)
            self.report.seen += 1
            losses.append(loss)
            if skip:
                self.report.skipped += 1
                any_skipped = True
                continue
            grads, _, _, dbk = scale_backward(self.net, out, dk, first_trainable=first)
            dbeta_k += dbk
            for i in range(first, len(self.net.stages)):
                for name, g in grads[i].items():
                    key = f"stage{i}.{name}"
                    acc[key] = acc[key] + g if key in acc else np.array(g, dtype=np.float64)
        if acc:
            params = {k: v for k, v in self.trainable_params(first).items() if k in acc}
            if s.learn_beta_k:
                params["log_beta_k"] = self._beta_k_param
                acc["log_beta_k"] = np.array(dbeta_k * self.net.beta_k)
            if self.opt.method == "adadelta":
                adadelta_step(params, acc, self.opt_state, self.opt)
            else:
                sgd_step(params, acc, self.opt)
            self._clip_beta_x()
            if s.learn_beta_k:
                self.net.beta_k = float(np.exp(self._beta_k_param))
        rec = StepRecord(self.step, float(np.mean(losses)), float(self.running_loss),
                         any_skipped, len(self.net.stages))
        self.report.records.append(rec)
        if self.on_record:
            self.on_record(rec)
        self.step += 1
        if s.checkpoint_every and self.on_checkpoint and self.step % s.checkpoint_every == 0:
            self.on_checkpoint(self)
        return rec

    def trainable_params(self, first=None):
        first = self.trainable_stage_start() if first is None else first
        out = {}
        for i in range(first, len(self.net.stages)):
            for name, arr in self.net.stages[i].named_arrays().items():
                out[f"stage{i}.{name}"] = arr
        return out

    def _clip_beta_x(self):
        lo, hi = (math.log(b) for b in BETA_X_BOUNDS)
        for st in self.net.stages:
            np.clip(st.log_beta_x, lo, hi, out=st.log_beta_x)

    def run(self, steps=None):
        """Train until ``schedule.total_steps`` (or ``steps`` more steps)."""
        end = self.schedule.total_steps if steps is None else self.step + steps
        while self.step < end:
            self.train_step()
        return self.model, self.report

    # checkpointing -------------------------------------------------------

    def state_dict(self):
        extra_tensors = {}
        for name, (eg2, edx2) in self.opt_state.items():
            extra_tensors[f"opt.{name}.eg2"] = eg2
            extra_tensors[f"opt.{name}.edx2"] = edx2
        extra_tensors["log_beta_k"] = self._beta_k_param
        state = {
            "step": self.step,
            "running_loss": self.running_loss,
            "freeze_until": self.freeze_until,
            "scale_index": self.scale_index,
            "stage_add_steps": self.report.stage_add_steps,
            "skipped": self.report.skipped,
            "seen": self.report.seen,
            "rng": self.rng.bit_generator.state,
            "stream": self.stream.get_state() if hasattr(self.stream, "get_state") else None,
            "opt_names": sorted(self.opt_state),
            "base_arch": self.base_arch.to_dict(),
            "wide_last": self.wide_last,
        }
        return state, extra_tensors

    def save_checkpoint(self, path, extra=None):
        """Full-precision model plus trainer, optimizer, RNG and stream state."""
        from .modelio import save_model
        state, tensors = self.state_dict()
        header = dict(extra or {})
        header["trainer"] = state
        save_model(self.model, path, dtype="<f8", extra=header, extra_tensors=tensors)

    def restore_stream(self):
        """Apply stream state read from a checkpoint to ``self.stream``."""
        state = getattr(self, "_pending_stream_state", None)
        if state is not None and hasattr(self.stream, "set_state"):
            self.stream.set_state(state)
            self._pending_stream_state = None

    @classmethod
    def from_checkpoint(cls, path, stream, schedule=None, opt=None, **kw):
        from .modelio import load_model
        model, extra, tensors = load_model(path, with_extra=True)
        state = extra.get("trainer")
        if state is None:
            raise ConfigError(f"{path} is a model file without trainer state")
        tr = cls(model, stream, schedule, opt, scale_index=state["scale_index"],
                 base_arch=ArchSpec.from_dict(state["base_arch"]),
                 wide_last=state["wide_last"], **kw)
        tr.step = state["step"]
        tr.running_loss = state["running_loss"]
        tr.freeze_until = state["freeze_until"]
        tr.report.stage_add_steps = list(state["stage_add_steps"])
        tr.report.skipped = state["skipped"]
        tr.report.seen = state["seen"]
        tr.rng.bit_generator.state = state["rng"]
        tr._pending_stream_state = state["stream"]
        tr.restore_stream()
        for name in state["opt_names"]:
            tr.opt_state[name] = (np.array(tensors[f"opt.{name}.eg2"]),
                                  np.array(tensors[f"opt.{name}.edx2"]))
        tr._beta_k_param = np.array(tensors["log_beta_k"]).reshape(())
        return tr


def train(model, stream, schedule=None, opt=None, rng=None, **kw):
    """Convenience wrapper: train the finest scale; returns ``(model, report)``."""
    if stream is None:
        raise ConfigError("no training data stream")
    tr = Trainer(model, stream, schedule, opt, rng=rng, **kw)
    try:
        return tr.run()
    except StopIteration:
        if tr.step == 0:
            raise ConfigError("training data stream is empty") from None
        raise ConfigError(f"training data stream ran out after {tr.step} steps") from None


def hand_crafted_features(blurry):
    """Raw-gradient baseline features: [-1, 1] differences of the blurry image.

    Returns ``(x_tilde, y_tilde)`` with the same gradients on both sides.
    """
    gx = np.roll(blurry, -1, axis=1) - blurry
    gy = np.roll(blurry, -1, axis=0) - blurry
    g = np.stack([gx, gy])
    return g, g.copy()


# Optimizer / schedule overrides that go with each architecture preset. The
# small desk network learns far too slowly with the 0.01 step factor used at
# paper scale, and warm-starting added stages keeps the short schedule from
# regressing when a stage is appended halfway through.
TRAIN_PRESETS = {
    "paper-3stage": dict(adadelta_lr=0.01, stage_init="fresh"),
    "desk": dict(adadelta_lr=1.0, stage_init="copy"),
}


def train_multiscale(model, source, synth_cfg, schedule=None, opt=None, rng=None,
                     image_size=None, on_record=None):
    """Train every scale in turn, coarsest first, with coarser scales frozen.

    ``synth_cfg.image_size`` (or ``image_size``) is the finest-scale crop;
    coarser scales use the same crop resized by the model's scale policy,
    with kernels sampled at their own size.

    Returns ``(model, reports)`` with one report per scale.
    """
    from dataclasses import replace

    from .synth import ImageSource, SampleStream
    rng = check_random_state(rng)
    size = image_size or synth_cfg.image_size
    shapes = model.scale_shapes((size, size))
    reports = []
    for i, net in enumerate(model.scales):
        shp = shapes[i]
        src = ImageSource(source.paths, shp) if isinstance(source, ImageSource) else source
        cfg = replace(synth_cfg, image_size=shp[0],
                      trajectory=replace(synth_cfg.trajectory, kernel_size=net.kernel_size))
        stream = SampleStream(src, cfg, np.random.default_rng(rng.integers(2**63)))
        tr = Trainer(model, stream, schedule, opt, scale_index=i, rng=rng, on_record=on_record)
        tr.run()
        reports.append(tr.report)
    return model, reports
