"""Bi-level training: inner adaptation, meta updates, schedules, Adam."""

from dataclasses import replace

import numpy as np
import pytest

from docttt import ops
from docttt.docgen import CorpusConfig, generate_corpus, DocDataset
from docttt.meta import (
    AdamConfig,
    CurriculumSchedule,
    MetaConfig,
    TrainState,
    TrainingData,
    adam_step,
    corrupt_teacher_input,
    derive_rng,
    inner_adapt,
    meta_step,
    phase1_batch,
    phase2_batch,
    run_phase,
    supervised_step,
    supervised_step_batched,
)
from docttt.model import ArchConfig, init_params
from docttt.tensor import ParamSet, Tensor, grad
from docttt.tokens import Dictionary, TokenSequence

D = Dictionary()
ARCH = ArchConfig()


def tiny_batch(rng, n=2, size=(32, 64)):
    batch = []
    for _ in range(n):
        img = rng.random(size).astype(np.float32)
        content = [int(rng.integers(2, 29)) for _ in range(4)]
        batch.append((img, TokenSequence([0] + content + [1])))
    return batch


@pytest.fixture(scope="module")
def params():
    return init_params(ARCH, seed=3)


class TestInnerAdapt:
    def test_zero_lr_is_bit_identical(self, params):
        cfg = replace(MetaConfig(), inner_lr=0.0)
        img = np.random.default_rng(0).random((32, 64)).astype(np.float32)
        adapted = inner_adapt(params, img, cfg, np.random.default_rng(1))
        for a, b in zip(adapted.all_params().values(), params.all_params().values()):
            assert a is b

    def test_zero_steps_is_bit_identical(self, params):
        cfg = replace(MetaConfig(), inner_steps=0)
        img = np.random.default_rng(0).random((32, 64)).astype(np.float32)
        adapted = inner_adapt(params, img, cfg, np.random.default_rng(1))
        for a, b in zip(adapted.all_params().values(), params.all_params().values()):
            assert a is b

    def test_primary_head_untouched_bitwise(self, params):
        cfg = MetaConfig()
        img = np.random.default_rng(2).random((32, 64)).astype(np.float32)
        adapted = inner_adapt(params, img, cfg, np.random.default_rng(3))
        for name in params.primary.names():
            assert adapted.primary[name] is params.primary[name]
        # shared and auxiliary moved
        assert any(
            not np.array_equal(adapted.shared[n].data, params.shared[n].data)
            for n in params.shared.names()
        )

    def test_second_order_dependence_retained(self, params):
        cfg = replace(MetaConfig(), inner_steps=1, first_order=False)
        img = np.random.default_rng(4).random((32, 64)).astype(np.float32)
        adapted = inner_adapt(params, img, cfg, np.random.default_rng(5))
        probe = ops.sum_(ops.square(adapted.shared["conv0.w"]))
        (g,) = grad(probe, [params.shared["conv0.w"]])
        assert np.abs(g.data).max() > 0

    def test_first_order_detaches(self, params):
        cfg = replace(MetaConfig(), inner_steps=1, first_order=True)
        img = np.random.default_rng(6).random((32, 64)).astype(np.float32)
        adapted = inner_adapt(params, img, cfg, np.random.default_rng(7))
        probe = ops.sum_(ops.square(adapted.shared["conv0.b"]))
        (g,) = grad(probe, [params.shared["conv0.b"]])
        # theta' = theta - beta*const, so d(theta'^2)/d(theta) = 2*theta'
        expect = 2.0 * adapted.shared["conv0.b"].data
        assert np.allclose(g.data, expect, atol=1e-6)

    def test_label_free_interface(self):
        # The adaptation path receives only the image (no token argument).
        import inspect

        sig = inspect.signature(inner_adapt)
        assert "target" not in sig.parameters
        assert "tokens" not in sig.parameters


class TestScalarToyHypergradient:
    def test_hand_value(self):
        w = Tensor(np.array(2.0), requires_grad=True, dtype=np.float64)
        l_aux = ops.square(w)
        (g,) = grad(l_aux, [w], create_graph=True)
        w_prime = ops.sub(w, ops.mul(g, ops.as_tensor(0.1, w)))
        assert float(w_prime.data) == pytest.approx(1.6, abs=1e-12)
        l_pri = ops.square(ops.sub(w_prime, ops.as_tensor(1.0, w)))
        (hyper,) = grad(l_pri, [w])
        assert float(hyper.data) == pytest.approx(0.96, abs=1e-8)

    def test_first_order_hand_value(self):
        w = Tensor(np.array(2.0), requires_grad=True, dtype=np.float64)
        l_aux = ops.square(w)
        (g,) = grad(l_aux, [w], create_graph=False)
        w_prime = ops.sub(w, ops.mul(g, ops.as_tensor(0.1, w)))
        l_pri = ops.square(ops.sub(w_prime, ops.as_tensor(1.0, w)))
        (hyper,) = grad(l_pri, [w])
        assert float(hyper.data) == pytest.approx(1.2, abs=1e-8)

    def test_finite_difference_oracle(self):
        def objective(w0: float) -> float:
            w = Tensor(np.array(w0), requires_grad=True, dtype=np.float64)
            (g,) = grad(ops.square(w), [w], create_graph=True)
            w_prime = ops.sub(w, ops.mul(g, ops.as_tensor(0.1, w)))
            return float(ops.square(ops.sub(w_prime, ops.as_tensor(1.0, w))).data)

        h = 1e-6
        fd = (objective(2 + h) - objective(2 - h)) / (2 * h)
        assert fd == pytest.approx(0.96, abs=1e-6)


class TestMetaStep:
    def test_inner_steps_zero_matches_supervised_bitwise(self, params):
        rng = np.random.default_rng(8)
        batch = tiny_batch(rng)
        cfg = replace(MetaConfig(), inner_steps=0)
        s_meta = TrainState.fresh(params.copy(), seed=5)
        s_sup = TrainState.fresh(params.copy(), seed=5)
        out_meta, _ = meta_step(s_meta, batch, cfg, D)
        out_sup, _ = supervised_step(s_sup, batch, cfg, D, aux_weight=0.0)
        for (n1, t1), (n2, t2) in zip(
            out_meta.params.all_params().items(), out_sup.params.all_params().items()
        ):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data), n1

    def test_zero_inner_lr_matches_supervised_bitwise(self, params):
        rng = np.random.default_rng(9)
        batch = tiny_batch(rng)
        cfg = replace(MetaConfig(), inner_lr=0.0)
        out_meta, _ = meta_step(TrainState.fresh(params.copy(), seed=6), batch, cfg, D)
        out_sup, _ = supervised_step(
            TrainState.fresh(params.copy(), seed=6), batch, cfg, D, aux_weight=0.0
        )
        for t1, t2 in zip(
            out_meta.params.all_params().values(), out_sup.params.all_params().values()
        ):
            assert np.array_equal(t1.data, t2.data)

    def test_auxiliary_head_receives_meta_gradient(self, params):
        # Second-order only: the aux head shapes the inner update.
        rng = np.random.default_rng(10)
        batch = tiny_batch(rng, n=1)
        cfg = replace(MetaConfig(), inner_steps=1, first_order=False)
        state = TrainState.fresh(params.copy(), seed=7)
        out, _ = meta_step(state, batch, cfg, D)
        moved = any(
            not np.array_equal(out.params.auxiliary[n].data, params.auxiliary[n].data)
            for n in params.auxiliary.names()
        )
        assert moved

    def test_step_counter_increments(self, params):
        rng = np.random.default_rng(11)
        state = TrainState.fresh(params.copy(), seed=8)
        out, _ = meta_step(state, tiny_batch(rng), MetaConfig(), D)
        assert out.step == state.step + 1


class TestAdam:
    def test_three_step_hand_recurrence(self):
        cfg = replace(
            MetaConfig(), outer_lr=0.01, adam=AdamConfig(beta1=0.9, beta2=0.999, eps=1e-8)
        )
        p0 = 0.7
        grads = [0.3, -0.5, 0.2]
        params = ParamSet({"w": Tensor(np.array([p0]), requires_grad=True, dtype=np.float64)})
        from docttt.model import ModelParams

        mp = ModelParams(params, ParamSet(), ParamSet(), ARCH)
        state = TrainState.fresh(mp, seed=0)
        # reference recurrence in float64
        m = v = 0.0
        ref = p0
        for t, g in enumerate(grads, start=1):
            state = adam_step(state, {"w": np.array([g])}, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            ref -= 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            assert float(state.params.shared["w"].data[0]) == pytest.approx(ref, abs=1e-10)


class TestCorruptTeacherInput:
    def test_p_zero_identity(self):
        seq = TokenSequence([0, 5, 6, 30, 7, 1])
        out = corrupt_teacher_input(seq, 0.0, np.random.default_rng(0), D)
        assert out == seq

    def test_p_one_changes_every_alphabet_token(self):
        content = [D.char_id(c) for c in "abcdef"]
        seq = TokenSequence([0] + content + [1])
        out = corrupt_teacher_input(seq, 1.0, np.random.default_rng(1), D)
        for orig, new in zip(seq, out):
            if D.is_alpha(orig):
                assert new != orig and D.is_alpha(new)
            else:
                assert new == orig

    def test_markers_and_specials_never_corrupted(self):
        seq = TokenSequence([0, D.open_id("page"), D.char_id("a"), D.close_id("page"), 1])
        out = corrupt_teacher_input(seq, 1.0, np.random.default_rng(2), D)
        assert out[0] == 0 and out[-1] == 1
        assert out[1] == D.open_id("page") and out[3] == D.close_id("page")

    def test_corruption_rate_binomial_bound(self):
        n = 10000
        content = [D.char_id("a")] * n
        seq = TokenSequence([0] + content + [1])
        out = corrupt_teacher_input(seq, 0.2, np.random.default_rng(3), D)
        changed = sum(1 for a, b in zip(seq, out) if a != b)
        assert 0.18 <= changed / n <= 0.22

    def test_replacement_uniform_over_other_tokens(self):
        # 'a' must never map to itself and should cover many alternatives.
        seq = TokenSequence([0] + [D.char_id("a")] * 2000 + [1])
        out = corrupt_teacher_input(seq, 1.0, np.random.default_rng(4), D)
        repl = {t for t in list(out)[1:-1]}
        assert D.char_id("a") not in repl
        assert len(repl) > 20


class TestCurriculum:
    def test_synthetic_fraction_endpoints(self):
        sched = CurriculumSchedule()
        assert sched.synthetic_fraction(0.0) == pytest.approx(0.9)
        assert sched.synthetic_fraction(1.0) == pytest.approx(0.2)

    def test_fraction_monotone_decreasing(self):
        sched = CurriculumSchedule()
        values = [sched.synthetic_fraction(p) for p in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_dropout_ramps_then_holds(self):
        sched = CurriculumSchedule(dropout_max=0.2, dropout_ramp=0.5)
        assert sched.dropout_rate(0.0) == 0.0
        assert sched.dropout_rate(0.25) == pytest.approx(0.1)
        assert sched.dropout_rate(0.5) == pytest.approx(0.2)
        assert sched.dropout_rate(0.9) == pytest.approx(0.2)

    def test_complexity_is_step_function(self):
        sched = CurriculumSchedule()
        s0 = sched.complexity(0.0)
        s1 = sched.complexity(1.0)
        assert s0[2] < s1[2]  # chars grow


class TestRunPhase:
    def test_zero_steps_only_sets_phase_tag(self, params):
        state = TrainState.fresh(params.copy(), seed=1)
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        out = run_phase(state, 1, data, MetaConfig(), steps=0)
        assert out.phase == 1
        assert out.step == state.step
        for a, b in zip(out.params.all_params().values(), params.all_params().values()):
            assert np.array_equal(a.data, b.data)

    def test_invalid_phase_rejected(self, params):
        state = TrainState.fresh(params.copy(), seed=1)
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        with pytest.raises(ValueError):
            run_phase(state, 3, data, MetaConfig(), steps=0)

    def test_phase2_requires_dataset(self, params):
        state = TrainState.fresh(params.copy(), seed=1)
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        with pytest.raises(ValueError):
            run_phase(state, 2, data, replace(MetaConfig(), batch_size=2), steps=1)

    def test_log_file_format(self, params, tmp_path):
        state = TrainState.fresh(params.copy(), seed=2)
        cfg = replace(MetaConfig(), batch_size=2)
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        log = tmp_path / "train.log"
        run_phase(state, 1, data, cfg, steps=2, log_path=log)
        lines = log.read_text().splitlines()
        assert lines[0].split("\t") == ["step", "loss_pri", "loss_aux", "synth_frac", "dropout"]
        assert len(lines) == 3
        assert len(lines[1].split("\t")) == 5

    def test_phase1_loss_decreases_over_200_steps(self, tmp_path):
        # Direction-only check on a fixed seed; complexity pinned so the
        # smoothed loss is comparable across the whole run.
        fixed = CurriculumSchedule(complexity_steps=((0.0, 1, 1, 6),))
        cfg = replace(MetaConfig(), outer_lr=3e-3, batch_size=4, curriculum=fixed)
        state = TrainState.fresh(init_params(ARCH, seed=0), seed=0)
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        log = tmp_path / "p1.log"
        state = run_phase(state, 1, data, cfg, steps=200, log_path=log, val_every=0)
        rows = [line.split("\t") for line in log.read_text().splitlines()[1:]]
        losses = [float(r[1]) for r in rows]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])


class TestPhaseBatches:
    def test_phase2_mix_follows_schedule(self, params, tmp_path):
        corpus = CorpusConfig(n_train_synth=4, n_train_real=4, n_val=2, n_test=2)
        root = generate_corpus(corpus, tmp_path / "data", D)
        data = TrainingData(dictionary=D, corpus=corpus, dataset=DocDataset(root, D))
        cfg = replace(MetaConfig(), batch_size=64)
        state = TrainState.fresh(params.copy(), seed=9)
        batch0 = phase2_batch(state, data, cfg, 0.0)
        assert len(batch0) == 64
        # at progress 0 the synthetic share should hover near 0.9
        synth_ids = set(data.dataset.split_ids("train_synth"))
        # phase2_batch returns raw arrays; recount via picking rng directly
        count = 0
        for slot in range(64):
            rng = derive_rng(state.seed, "pick", state.step, slot)
            if rng.random() < 0.9:
                count += 1
        assert count / 64 > 0.75

    def test_phase1_heights_follow_complexity(self, params):
        data = TrainingData(dictionary=D, corpus=CorpusConfig())
        cfg = replace(MetaConfig(), batch_size=2)
        state = TrainState.fresh(params.copy(), seed=10)
        early = phase1_batch(state, data, cfg, 0.0)
        late = phase1_batch(state, data, cfg, 0.95)
        assert early[0][0].shape[0] < late[0][0].shape[0]
