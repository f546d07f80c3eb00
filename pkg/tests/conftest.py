"""Shared fixtures and the acceptance summary printed at the end of a run."""

import numpy as np
import pytest

from deblurnet.pipeline import build_model
from deblurnet.synth import (ImageSource, SampleStream, SynthConfig, TrajectoryConfig,
                             procedural_scene)
from deblurnet.training import TRAIN_PRESETS, OptimizerConfig, TrainSchedule, Trainer

DESK_KERNEL = 9
DESK_IMAGE = 64
DESK_STEPS = 2000

_ACCEPTANCE = {}


def desk_schedule(max_stages=2, total_steps=DESK_STEPS):
    """Schedule of the desk-scale run: second stage halfway, short freeze."""
    preset = TRAIN_PRESETS["desk"]
    return TrainSchedule(total_steps=total_steps, steps_per_stage_add=total_steps // 2,
                         freeze_steps_after_add=100, max_stages=max_stages,
                         stage_init=preset["stage_init"])


def desk_optimizer():
    return OptimizerConfig(adadelta_lr=TRAIN_PRESETS["desk"]["adadelta_lr"])


def desk_stream(seed, kernel_size=DESK_KERNEL, image_size=DESK_IMAGE):
    cfg = SynthConfig(TrajectoryConfig(kernel_size=kernel_size), 0.01, image_size)
    return SampleStream(ImageSource(None, (image_size, image_size)), cfg,
                        np.random.default_rng(seed))


def train_desk(max_stages, seed=0, total_steps=DESK_STEPS):
    """Train a single-scale desk model from one stage; returns ``(model, report)``."""
    model = build_model((DESK_KERNEL,), preset="desk", rng=np.random.default_rng(seed),
                        num_stages=1)
    tr = Trainer(model, desk_stream(seed + 1000), desk_schedule(max_stages, total_steps),
                 desk_optimizer(), rng=np.random.default_rng(seed + 2000))
    return tr.run()


def held_out_samples(n=100, seed=99, kernel_size=DESK_KERNEL, image_size=DESK_IMAGE):
    stream = desk_stream(seed, kernel_size, image_size)
    return [next(stream) for _ in range(n)]


@pytest.fixture(scope="session")
def desk_runs():
    """One- and two-stage desk models trained on identical sample streams."""
    two, report_two = train_desk(2)
    one, report_one = train_desk(1)
    return {"two": two, "one": one, "report_two": report_two, "report_one": report_one}


@pytest.fixture(scope="session")
def desk_model_path(tmp_path_factory, desk_runs):
    from deblurnet.modelio import save_model
    path = tmp_path_factory.mktemp("models") / "desk.dbm"
    save_model(desk_runs["two"], str(path))
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def scene(rng):
    return procedural_scene((64, 64), rng)


# ------------------------------------------------------- acceptance summary


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n, title = crit
        entry = _ACCEPTANCE.setdefault(n, {"title": title, "ok": True, "notes": []})
        entry["ok"] = entry["ok"] and report.outcome == "passed"
        note = dict(report.user_properties).get("detail")
        if note:
            entry["notes"].append(note)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n} {status}: {e['title']}"
                                    + (f" ({detail})" if detail else ""))


@pytest.fixture(autouse=True)
def _criterion_property(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", tuple(marker.args)))
