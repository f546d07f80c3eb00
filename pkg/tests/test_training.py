import json

import numpy as np
import pytest

from deblurnet.errors import ConfigError
from deblurnet.features import ArchSpec, init_params
from deblurnet.imaging import identity_kernel
from deblurnet.pipeline import build_model
from deblurnet.synth import ImageSource, SampleStream, SynthConfig, TrajectoryConfig
from deblurnet.training import (OptimizerConfig, TrainSchedule, Trainer, adadelta_step,
                                copy_stage_into, hand_crafted_features, kernel_l2_loss,
                                kernel_loss, sgd_step, train, train_multiscale)


def small_stream(seed=0, K=5, size=24):
    cfg = SynthConfig(TrajectoryConfig(kernel_size=K, num_samples=64), 0.01, size)
    return SampleStream(ImageSource(None, (size, size)), cfg, np.random.default_rng(seed))


def small_model(seed=0, K=5, stages=1):
    return build_model((K,), preset="desk", rng=np.random.default_rng(seed), num_stages=stages)


def all_params(model):
    return {f"{i}.{j}.{k}": v.copy() for i, s in enumerate(model.scales)
            for j, st in enumerate(s.stages) for k, v in st.named_arrays().items()}


class TestLosses:
    def test_kernel_loss_value_and_gradient(self, rng):
        k, t = rng.random((5, 5)), rng.random((5, 5))
        loss, g = kernel_loss(k, t)
        assert loss == pytest.approx(np.sum((k - t) ** 2))
        np.testing.assert_allclose(g, 2 * (k - t))

    def test_target_embedded_when_smaller(self):
        loss, _ = kernel_loss(np.pad(identity_kernel(3), 1), identity_kernel(3))
        assert loss == 0.0

    def test_l2_loss_on_raw_frame(self, rng):
        t = rng.random((5, 5))
        t /= t.sum()
        from deblurnet.imaging import kernel_to_origin
        loss, delta = kernel_l2_loss(kernel_to_origin(t, (12, 12)), t)
        assert loss == pytest.approx(0.0, abs=1e-28)
        assert delta.shape == (12, 12)


class TestOptimizers:
    def test_adadelta_first_step(self):
        p = {"w": np.array([0.5])}
        adadelta_step(p, {"w": np.array([1.0])}, {}, OptimizerConfig())
        dx = -0.01 * np.sqrt(1e-6) / np.sqrt(0.05 + 1e-6)
        np.testing.assert_allclose(p["w"], 0.5 + dx, rtol=0, atol=1e-15)

    def test_adadelta_zero_gradient_is_noop(self):
        p = {"w": np.ones(3)}
        state = {}
        adadelta_step(p, {"w": np.zeros(3)}, state, OptimizerConfig())
        np.testing.assert_array_equal(p["w"], 1.0)
        assert "w" in state

    def test_adadelta_descends_quadratic(self):
        p = {"w": np.array([3.0, -2.0])}
        state = {}
        cfg = OptimizerConfig(adadelta_lr=1.0)
        for _ in range(3000):
            adadelta_step(p, {"w": 2 * p["w"]}, state, cfg)
        assert np.abs(p["w"]).max() < 0.5

    def test_sgd(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([2.0])}, OptimizerConfig(method="sgd", sgd_lr=0.1))
        assert p["w"][0] == pytest.approx(0.8)

    @pytest.mark.parametrize("kw", [dict(method="adam"), dict(adadelta_decay=1.0),
                                    dict(adadelta_lr=0.0), dict(adadelta_eps=-1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            OptimizerConfig(**kw)


class TestSchedule:
    @pytest.mark.parametrize("kw", [dict(total_steps=0), dict(stage_init="random"),
                                    dict(freeze_steps_after_add=-1), dict(loss_skip_factor=0),
                                    dict(running_loss_decay=1.0), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainSchedule(**kw)

    def test_defaults(self):
        s = TrainSchedule()
        assert (s.loss_skip_factor, s.running_loss_decay, s.freeze_steps_after_add,
                s.max_stages) == (10.0, 0.999, 1000, 3)


class TestCopyStage:
    def test_new_channel_zeroed(self, rng):
        prev = init_params(ArchSpec(2, 3, (3,), 2, 1), rng)
        new = copy_stage_into(prev, init_params(ArchSpec(2, 3, (3,), 2, 2), rng))
        np.testing.assert_array_equal(new.conv_w[:, :1], prev.conv_w)
        assert not new.conv_w[:, 1].any()
        np.testing.assert_array_equal(new.alpha, prev.alpha)

    def test_reproduces_previous_features(self, rng, scene):
        from deblurnet.features import stage_features_forward
        prev = init_params(ArchSpec(2, 3, (3,), 2, 1), rng)
        new = copy_stage_into(prev, init_params(ArchSpec(2, 3, (3,), 2, 2), rng))
        a, _ = stage_features_forward(scene[None], prev)
        b, _ = stage_features_forward(np.stack([scene, rng.random(scene.shape)]), new)
        np.testing.assert_allclose(b.x_tilde, a.x_tilde, atol=1e-12)


class TestTrainer:
    def test_records_and_determinism(self):
        runs = []
        for _ in range(2):
            m = small_model()
            tr = Trainer(m, small_stream(), TrainSchedule(total_steps=5),
                         OptimizerConfig(adadelta_lr=1.0), rng=np.random.default_rng(0))
            _, rep = tr.run()
            runs.append((all_params(m), rep.loss_curve))
        assert len(runs[0][1]) == 5
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])

    def test_parameters_change(self):
        m = small_model()
        before = all_params(m)
        Trainer(m, small_stream(), TrainSchedule(total_steps=2),
                OptimizerConfig(adadelta_lr=1.0)).run()
        after = all_params(m)
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_first_running_loss_is_first_loss(self):
        tr = Trainer(small_model(), small_stream(), TrainSchedule(total_steps=1))
        rec = tr.train_step()
        assert rec.running_loss == pytest.approx(rec.loss)

    def test_stage_added_and_capped(self):
        m = small_model()
        tr = Trainer(m, small_stream(), TrainSchedule(total_steps=7, steps_per_stage_add=3,
                                                      freeze_steps_after_add=1, max_stages=2))
        _, rep = tr.run()
        assert rep.stage_add_steps == [3]
        assert [r.stage_count for r in rep.records] == [1, 1, 1, 2, 2, 2, 2]
        assert m.scales[0].stages[1].arch.in_channels == 2

    def test_batch_accumulates(self):
        stream = small_stream()
        tr = Trainer(small_model(), stream, TrainSchedule(total_steps=2, batch_size=3))
        _, rep = tr.run()
        assert rep.seen == 6 and len(rep.records) == 2

    def test_learn_beta_k(self):
        m = small_model()
        tr = Trainer(m, small_stream(), TrainSchedule(total_steps=3, learn_beta_k=True),
                     OptimizerConfig(adadelta_lr=1.0))
        tr.run()
        assert m.scales[0].beta_k != 1e-4

    def test_report_jsonl(self):
        _, rep = Trainer(small_model(), small_stream(), TrainSchedule(total_steps=2)).run()
        rows = [json.loads(l) for l in rep.to_jsonl().splitlines()]
        assert [r["step"] for r in rows] == [0, 1]
        assert set(rows[0]) == {"step", "loss", "running_loss", "skipped", "stage_count"}

    def test_checkpoint_resume_bit_identical(self, tmp_path):
        sched = TrainSchedule(total_steps=6, steps_per_stage_add=2, freeze_steps_after_add=1,
                              max_stages=2)
        opt = OptimizerConfig(adadelta_lr=1.0)
        full = small_model()
        Trainer(full, small_stream(), sched, opt, rng=np.random.default_rng(1)).run()

        part = small_model()
        tr = Trainer(part, small_stream(), sched, opt, rng=np.random.default_rng(1))
        tr.run(steps=3)
        path = str(tmp_path / "ck.dbm")
        tr.save_checkpoint(path)
        resumed = Trainer.from_checkpoint(path, small_stream(seed=123), sched, opt)
        assert resumed.step == 3
        resumed.run()
        a, b = all_params(full), all_params(resumed.model)
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_model_file_is_not_a_checkpoint(self, tmp_path):
        from deblurnet.modelio import save_model
        path = str(tmp_path / "m.dbm")
        save_model(small_model(), path)
        with pytest.raises(ConfigError):
            Trainer.from_checkpoint(path, small_stream())

    def test_train_empty_stream(self):
        with pytest.raises(ConfigError):
            train(small_model(), iter([]), TrainSchedule(total_steps=2))
        with pytest.raises(ConfigError):
            train(small_model(), None)

    def test_multiscale_trains_every_scale(self):
        m = build_model((5, 9), preset="desk", rng=np.random.default_rng(0), num_stages=1)
        cfg = SynthConfig(TrajectoryConfig(num_samples=64), 0.01, 36)
        _, reports = train_multiscale(m, ImageSource(None, (36, 36)), cfg,
                                      TrainSchedule(total_steps=2), rng=np.random.default_rng(0))
        assert len(reports) == 2 and all(len(r.records) == 2 for r in reports)


class TestBaselineFeatures:
    def test_forward_differences(self, rng):
        y = rng.random((6, 7))
        x, yy = hand_crafted_features(y)
        np.testing.assert_allclose(x[0], np.roll(y, -1, axis=1) - y)
        np.testing.assert_allclose(x[1], np.roll(y, -1, axis=0) - y)
        np.testing.assert_array_equal(x, yy)
        assert x is not yy
