import copy
import math

import numpy as np
import pytest

import duet.training as training
from duet.diffusion import build_cosine_schedule
from duet.model import BackboneConfig, Vocab, init_params
from duet.numerics import Adam, NonFiniteError, Rng, Tape
from duet.training import (
    IGNORE,
    StageConfig,
    TrainLog,
    apply_zero_mask,
    joint_loss,
    learning_rate,
    lm_targets,
    train_stage,
    train_stage1,
    train_stage2,
)


class TestZeroMask:
    def test_p_zero_keeps_everything(self):
        frames = Rng(1).normal((20, 4))
        masked, v = apply_zero_mask(frames, 0.0, Rng(2).stream("m"))
        assert (v == 1).all()
        assert np.array_equal(masked, frames)

    def test_p_one_drops_everything(self):
        frames = Rng(1).normal((20, 4))
        masked, v = apply_zero_mask(frames, 1.0, Rng(2).stream("m"))
        assert (v == 0).all()
        assert (masked == 0).all()

    def test_partial_mask_rows(self):
        frames = Rng(1).normal((50, 3))
        masked, v = apply_zero_mask(frames, 0.5, Rng(2).stream("m"))
        assert set(np.unique(v)) <= {0, 1}
        for i in range(50):
            if v[i]:
                assert np.array_equal(masked[i], frames[i])
            else:
                assert (masked[i] == 0).all()

    def test_same_stream_same_mask(self):
        frames = Rng(1).normal((30, 2))
        _, v1 = apply_zero_mask(frames, 0.4, Rng(7).stream(("mask", 0)))
        _, v2 = apply_zero_mask(frames, 0.4, Rng(7).stream(("mask", 0)))
        assert np.array_equal(v1, v2)

    def test_validates_probability(self):
        with pytest.raises(ValueError):
            apply_zero_mask(np.zeros((2, 2)), 1.5, Rng(1))


class TestLmTargets:
    def test_hand_example(self):
        v = Vocab(5)
        out = lm_targets(2, 3, v)
        assert list(out) == [IGNORE, IGNORE, v.bos, IGNORE, v.cont, v.cont, v.eos]

    def test_single_frame_targets_eos(self):
        v = Vocab(5)
        out = lm_targets(1, 1, v)
        assert list(out) == [IGNORE, v.bos, IGNORE, v.eos]

    def test_supervised_count(self):
        v = Vocab(9)
        out = lm_targets(4, 6, v)
        assert out.shape == (12,)
        assert (out != IGNORE).sum() == 1 + 6


class TestLearningRate:
    CFG = StageConfig(stage=1, steps=1000, lr_start=1e-5, lr_peak=4e-4,
                      lr_warmup=100)

    def test_warmup_endpoints(self):
        assert learning_rate(self.CFG, 0) == 1e-5
        assert learning_rate(self.CFG, 100) == 4e-4
        mid = learning_rate(self.CFG, 50)
        assert 1e-5 < mid < 4e-4

    def test_cosine_decay(self):
        span = 900
        mid = learning_rate(self.CFG, 100 + span // 2)
        assert math.isclose(mid, 4e-4 / 2, rel_tol=1e-12)
        assert learning_rate(self.CFG, 1000) == 0.0
        assert learning_rate(self.CFG, 5000) == 0.0

    def test_monotone_after_warmup(self):
        lrs = [learning_rate(self.CFG, s) for s in range(100, 1001, 50)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_stage2_constant(self):
        cfg = StageConfig(stage=2, steps=100, lr_const=2e-4)
        assert learning_rate(cfg, 0) == 2e-4
        assert learning_rate(cfg, 99) == 2e-4

    def test_validation(self):
        with pytest.raises(ValueError):
            StageConfig(stage=3)
        with pytest.raises(ValueError):
            StageConfig(steps=0)


class TestJointLoss:
    SCHED = build_cosine_schedule(8)

    def test_total_is_sum_of_parts(self, tiny_params, small_corpus):
        batch = joint_loss(tiny_params, small_corpus.train[:2], 0.3,
                           self.SCHED, Rng(3).stream("s"))
        assert math.isfinite(batch.total.item())
        assert math.isclose(batch.total.item(), batch.lm + batch.diff, rel_tol=1e-12)
        assert batch.lm > 0 and batch.diff > 0

    def test_deterministic_per_stream(self, tiny_params, small_corpus):
        a = joint_loss(tiny_params, small_corpus.train[:2], 0.3,
                       self.SCHED, Rng(3).stream(("step", 5)))
        b = joint_loss(tiny_params, small_corpus.train[:2], 0.3,
                       self.SCHED, Rng(3).stream(("step", 5)))
        assert a.total.item() == b.total.item()
        c = joint_loss(tiny_params, small_corpus.train[:2], 0.3,
                       self.SCHED, Rng(3).stream(("step", 6)))
        assert c.total.item() != a.total.item()

    def test_mask_plans_recorded(self, tiny_params, small_corpus):
        utts = small_corpus.train[:3]
        batch = joint_loss(tiny_params, utts, 1.0, self.SCHED, Rng(4).stream("s"))
        assert len(batch.mask_plans) == 3
        for plan, utt in zip(batch.mask_plans, utts):
            assert plan.p_mask == 1.0
            assert plan.v.shape == (len(utt.frames),)
            assert (plan.v == 0).all()

    def test_gradients_reach_both_partitions(self, tiny_params, small_corpus):
        names = ["backbone.tok_emb", "backbone.cond_proj.w", "head.in_proj.w",
                 "backbone.lm_head.w"]
        leaves = [tiny_params.tensors[n] for n in names]
        with Tape() as tape:
            batch = joint_loss(tiny_params, small_corpus.train[:2], 0.3,
                               self.SCHED, Rng(5).stream("s"))
        grads = tape.gradients(batch.total, leaves)
        for name, g in zip(names, grads):
            assert np.abs(g).max() > 0, name

    def test_unconditional_drop_changes_loss(self, tiny_params, small_corpus):
        base = joint_loss(tiny_params, small_corpus.train[:2], 0.0,
                          self.SCHED, Rng(6).stream("s"))
        drop = joint_loss(tiny_params, small_corpus.train[:2], 0.0,
                          self.SCHED, Rng(6).stream("s"), p_uncond=1.0)
        assert base.lm == drop.lm
        assert base.diff != drop.diff

    def test_loss_descends_under_adam(self, tiny_config, small_corpus):
        params = init_params(tiny_config, Rng(8))
        adam = Adam({n: params.tensors[n] for n in params.trainable_names()},
                    lr=3e-3)
        losses = []
        for step in range(12):
            with Tape() as tape:
                batch = joint_loss(params, small_corpus.train[:2], 0.3,
                                   self.SCHED, Rng(9).stream(("step", step)))
            names = params.trainable_names()
            grads = dict(zip(names, tape.gradients(
                batch.total, [params.tensors[n] for n in names])))
            adam.step(grads)
            losses.append(batch.total.item())
        assert np.mean(losses[-4:]) < np.mean(losses[:4])


def quick_cfg(**kw) -> StageConfig:
    base = dict(stage=1, steps=4, batch_size=2, eval_every=2, eval_steps=2,
                schedule_T=8, val_cap=1, lr_warmup=2, patience=10)
    base.update(kw)
    return StageConfig(**base)


class TestTrainStage:
    def test_tiny_run_shape(self, tiny_config, small_corpus):
        res = train_stage1(quick_cfg(), small_corpus, Rng(30),
                           model_config=tiny_config)
        assert res.status == "completed"
        assert res.step == 4
        assert [e.step for e in res.log.evals] == [0, 2, 4]
        assert len(res.log.steps) == 4
        assert res.best_step in (0, 2, 4)
        assert math.isfinite(res.best_metric)
        # the best snapshot is a separate object from the live params
        assert res.params is not res.final_params

    def test_stage_guards(self, tiny_config, small_corpus):
        with pytest.raises(ValueError):
            train_stage1(quick_cfg(stage=2), small_corpus, Rng(1),
                         model_config=tiny_config)
        params = init_params(tiny_config, Rng(1))
        with pytest.raises(ValueError):
            train_stage2(params, quick_cfg(stage=1), small_corpus, Rng(1))

    def test_stage2_freezes_backbone(self, tiny_config, small_corpus):
        s1 = init_params(tiny_config, Rng(31))
        theta_before = s1.partition_hash("theta")
        phi_before = s1.partition_hash("phi")
        res = train_stage2(s1, quick_cfg(stage=2), small_corpus, Rng(32))
        assert res.final_params.partition_hash("theta") == theta_before
        assert res.params.partition_hash("theta") == theta_before
        assert res.final_params.partition_hash("phi") != phi_before
        # the caller's params object is left untouched
        assert s1.partition_hash("theta") == theta_before
        assert s1.partition_hash("phi") == phi_before
        assert s1.theta_trainable and s1.phi_trainable
        assert not res.final_params.theta_trainable

    def test_diverged_status(self, tiny_config, small_corpus, monkeypatch):
        def explode(*a, **kw):
            raise NonFiniteError("nan in loss")
        monkeypatch.setattr(training, "joint_loss", explode)
        res = train_stage1(quick_cfg(), small_corpus, Rng(33),
                           model_config=tiny_config)
        assert res.status == "diverged"
        assert res.step == 0

    def test_early_stopping(self, tiny_config, small_corpus, monkeypatch):
        monkeypatch.setattr(training, "_validation_ter", lambda *a: (0.5, 0.5))
        res = train_stage1(quick_cfg(steps=10, patience=2), small_corpus,
                           Rng(34), model_config=tiny_config)
        assert res.status == "early_stopped"
        assert res.best_step == 0
        assert res.step == 4  # stopped after the second non-improving eval

    def test_on_eval_callback(self, tiny_config, small_corpus):
        seen = []
        train_stage1(quick_cfg(), small_corpus, Rng(35), model_config=tiny_config,
                     on_eval=lambda step, params, adam, log: seen.append(step))
        assert seen == [0, 2, 4]

    def test_partial_window_final_eval(self, tiny_config, small_corpus):
        res = train_stage1(quick_cfg(steps=3), small_corpus, Rng(36),
                           model_config=tiny_config)
        assert [e.step for e in res.log.evals] == [0, 2, 3]


class TestResume:
    def test_resume_matches_uninterrupted(self, tiny_config, small_corpus, monkeypatch):
        """Stopping at an eval point and restarting from captured state must
        replay the uninterrupted run bit for bit."""
        ters = iter([(0.9, 0.9), (0.8, 0.8), (0.7, 0.7)])
        monkeypatch.setattr(training, "_validation_ter",
                            lambda *a: next(ters))
        cfg = quick_cfg(steps=6, eval_every=3)

        captured = {}

        def capture(step, params, adam, log):
            if step == 3 and "snap" not in captured:
                captured["snap"] = {k: t.data.copy()
                                    for k, t in params.tensors.items()}
                captured["adam"] = adam.state_dict()
                captured["log"] = copy.deepcopy(log)
                captured["metric"] = log.evals[-1].ter_free_running

        full_init = init_params(tiny_config, Rng(40))
        full = train_stage(full_init, small_corpus, cfg, Rng(41), on_eval=capture)
        assert full.step == 6

        ters = iter([(0.7, 0.7)])  # only the final eval remains after resume
        resumed_params = init_params(tiny_config, Rng(40))
        for name, arr in captured["snap"].items():
            resumed_params.tensors[name].data = arr.copy()
        adam = Adam({n: resumed_params.tensors[n]
                     for n in resumed_params.trainable_names()})
        adam.load_state_dict(captured["adam"])
        resumed = train_stage(
            resumed_params, small_corpus, cfg, Rng(41), start_step=3, adam=adam,
            log=captured["log"],
            best_init=(captured["metric"], 3, captured["snap"], 0))

        for name in full.final_params.names():
            assert np.array_equal(full.final_params.tensors[name].data,
                                  resumed.final_params.tensors[name].data), name
        assert [e.as_dict() for e in full.log.evals] \
            == [e.as_dict() for e in resumed.log.evals]
        assert full.best_step == resumed.best_step == 6
        for name in full.params.names():
            assert np.array_equal(full.params.tensors[name].data,
                                  resumed.params.tensors[name].data), name
