"""Declarative run configuration (TOML).

Every tunable lives in one section per module. Unknown sections or keys are
rejected, values are type-checked against the defaults, and the effective
configuration (defaults filled in) is what gets persisted next to outputs.
"""

import copy

import tomli
import tomli_w

from .errors import ConfigError

DEFAULTS = {
    "run": {
        "seed": 0,
        "threads": 1,
        "report_every": 50,
    },
    "model": {
        "preset": "desk",
        "kernel_sizes": [9],
        "num_stages": 2,
        "resize_policy": "kernel-ratio",
        "sharpen_sigma": "auto",        # "auto", "none" or a number
        "beta_k": 1e-4,
    },
    "synth": {
        "length_scale": 0.3,
        "signal_std": 0.25,
        "num_samples": 256,
        "substeps": 4,
        "noise_sigma": 0.01,
        "image_size": 64,
        "max_rejections": 100,
        "corpus": "",                    # empty: procedural scenes
    },
    "optimizer": {
        "method": "adadelta",
        "adadelta_lr": "preset",         # "preset" or a number
        "adadelta_decay": 0.95,
        "adadelta_eps": 1e-6,
        "sgd_lr": 0.01,
    },
    "schedule": {
        "total_steps": 2000,
        "steps_per_stage_add": 1000,
        "freeze_steps_after_add": 100,
        "loss_skip_factor": 10.0,
        "running_loss_decay": 0.999,
        "batch_size": 1,
        "checkpoint_every": 500,
        "learn_beta_k": False,
        "stage_init": "preset",          # "preset", "fresh" or "copy"
    },
    "spatial": {
        "patch_size": 0,                 # 0: a quarter of the smaller image side
        "overlap": 0.5,
        "eta": 1.0,
    },
}

# keys whose value may be a string sentinel instead of the default's type
_FLEXIBLE = {("model", "sharpen_sigma"), ("optimizer", "adadelta_lr"),
             ("schedule", "stage_init")}


def _check_value(section, key, value, default):
    if (section, key) in _FLEXIBLE:
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"[{section}] {key}: expected a number or string")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, "
                          f"got {value!r}")
    return value


class RunConfig:
    """Nested ``section -> key -> value`` document with defaults materialized."""

    def __init__(self, data=None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self.update(data)

    def update(self, data):
        for section, values in data.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                self.data[section][key] = _check_value(section, key, value,
                                                       DEFAULTS[section][key])
        return self

    def set(self, section, key, value):
        """Override one value (``None`` leaves it unchanged)."""
        if value is not None:
            self.update({section: {key: value}})

    def __getitem__(self, section):
        return self.data[section]

    def to_toml(self):
        return tomli_w.dumps(self.data)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_toml())

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls(data)

    # module-level views ---------------------------------------------------

    def trajectory(self, kernel_size=None):
        from .synth import TrajectoryConfig
        s = self["synth"]
        return TrajectoryConfig(s["length_scale"], s["signal_std"], s["num_samples"],
                                kernel_size or self["model"]["kernel_sizes"][-1], s["substeps"])

    def synth(self):
        from .synth import SynthConfig
        s = self["synth"]
        return SynthConfig(self.trajectory(), s["noise_sigma"], s["image_size"],
                           s["max_rejections"])

    def _preset_training(self):
        from .training import TRAIN_PRESETS
        return TRAIN_PRESETS.get(self["model"]["preset"], {})

    def optimizer(self):
        from .training import OptimizerConfig
        o = dict(self["optimizer"])
        if o["adadelta_lr"] == "preset":
            o["adadelta_lr"] = self._preset_training().get("adadelta_lr", 0.01)
        if isinstance(o["adadelta_lr"], str):
            raise ConfigError("[optimizer] adadelta_lr must be a number or 'preset'")
        return OptimizerConfig(**o)

    def schedule(self):
        from .training import TrainSchedule
        s = dict(self["schedule"])
        if s["stage_init"] == "preset":
            s["stage_init"] = self._preset_training().get("stage_init", "fresh")
        s["max_stages"] = self["model"]["num_stages"]
        return TrainSchedule(**s)

    def sharpen_sigma(self):
        v = self["model"]["sharpen_sigma"]
        if v == "auto":
            return "auto"
        if v == "none":
            return None
        if isinstance(v, str):
            raise ConfigError("[model] sharpen_sigma must be 'auto', 'none' or a number")
        return float(v)
