import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avur.amf_decoder import (
    AmfLayer,
    AvsrModel,
    ModelConfig,
    NBestList,
    TrainConfig,
    TrainingDiverged,
    amf_layer,
    amplitude_gate,
    beam_search,
    check_divergence,
    decode_step,
    greedy_decode,
    make_batch,
    probe_attention,
    read_nbest,
    train_stage1,
    uncertainty,
    write_nbest,
)
from avur.data import CLEAN, NoiseSpec, ToyTaskConfig, encode_split, gen_dataset
from avur.numerics import AttentionConfig, Param, Tensor, backward, check_gradients, mul, sum_all

TINY = dict(num_symbols=3, num_visemes=2, audio_in_dim=4, visual_in_dim=4, audio_dim=8, visual_dim=8, num_heads=2,
            decoder_layers=1, max_context=6)


def _tiny_model(seed=0, **kw):
    return AvsrModel(ModelConfig(**{**TINY, **kw, "seed": seed}))


def _memories(model, seed=0, frames=6):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(frames, model.config.audio_dim))), Tensor(rng.normal(size=(frames, 8)))


def _sharpen(model, factor=4.0):
    model.decoder.out.weight.value *= factor
    model.decoder.out.bias.value = np.random.default_rng(9).normal(size=model.decoder.out.bias.value.shape)


@pytest.fixture(scope="module")
def toy():
    task = ToyTaskConfig(n_train=16, n_dev=4, n_test=4, seed=5)
    data = gen_dataset(task)
    model = AvsrModel(ModelConfig(seed=1, max_context=16))
    return model, encode_split(model, data.train, NoiseSpec(CLEAN), 0)


class TestUncertainty:
    @pytest.mark.parametrize("t", range(2, 65))
    def test_uniform_and_one_hot(self, t):
        assert abs(uncertainty(np.full(t, 1.0 / t)) - 1.0) <= 1e-12
        onehot = np.zeros(t)
        onehot[t // 2] = 1.0
        assert uncertainty(onehot) == 0.0

    def test_half_half(self):
        assert abs(uncertainty([0.5, 0.5, 0.0, 0.0]) - 0.5) < 1e-15

    def test_single_frame_is_zero(self):
        assert uncertainty([1.0]) == 0.0

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=30).filter(lambda x: sum(x) > 0))
    def test_in_unit_interval(self, w):
        p = np.asarray(w) / sum(w)
        assert 0.0 <= uncertainty(p) <= 1.0


class TestAmplitudeGate:
    def test_values(self):
        assert amplitude_gate(0.3, 0.0, 0.0) == 0.5
        assert amplitude_gate(0.5, 2.0, -1.0) == 0.5
        assert amplitude_gate(0.5, 0.0, 40.0) > 1 - 1e-15

    @given(st.floats(0, 1), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_strictly_inside(self, s, a, b):
        assert 0.0 < amplitude_gate(s, a, b) < 1.0

    def test_increasing_in_uncertainty(self):
        s = np.linspace(0, 1, 50)
        assert (np.diff(amplitude_gate(s, 1.5, -0.3)) > 0).all()


class TestProbe:
    def _layer(self, d=4):
        layer = AmfLayer(AttentionConfig(d, 1), np.random.default_rng(0))
        layer.probe_wq.value = np.eye(d)
        layer.probe_wk.value = np.eye(d)
        return layer

    def test_self_similarity_peak(self):
        x = 3 * np.eye(4)
        a = probe_attention(x, x, self._layer()).value
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
        assert (a.argmax(axis=1) == np.arange(4)).all()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        layer = AmfLayer(AttentionConfig(4, 2), rng)
        q, xa = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        want = np.zeros((2, 3))
        for i in range(2):
            s = [(q[i] @ layer.probe_wq.value) @ (xa[t] @ layer.probe_wk.value) / 2.0 for t in range(3)]
            e = np.exp(np.array(s) - max(s))
            want[i] = e / e.sum()
        np.testing.assert_allclose(probe_attention(q, xa, layer).value, want, atol=1e-14)

    def test_no_gradient_into_queries_or_audio(self):
        rng = np.random.default_rng(2)
        layer = AmfLayer(AttentionConfig(4, 2), rng)
        q, xa = Param(rng.normal(size=(2, 4))), Param(rng.normal(size=(3, 4)))
        backward(sum_all(mul(probe_attention(q, xa, layer), Tensor(rng.normal(size=(2, 3))))))
        assert not q.grad.any() and not xa.grad.any()
        assert layer.probe_wq.grad.any()


class TestAmfLayer:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        layer = AmfLayer(AttentionConfig(4, 2), rng)
        return layer, rng.normal(size=(2, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))

    def test_zero_direction_identity(self):
        layer, x, xa, xv = self._setup()
        np.testing.assert_array_equal(amf_layer(x, xa, xv, layer).value, x)

    def test_direction_sign_flip(self):
        layer, x, xa, xv = self._setup(1)
        layer.dir_att.value[:] = 0.8
        up = amf_layer(x, xa, xv, layer).value - x
        layer.dir_att.value[:] = -0.8
        down = amf_layer(x, xa, xv, layer).value - x
        np.testing.assert_allclose(up, -down, atol=1e-14)

    def test_matches_manual_evaluation(self):
        layer, x, xa, xv = self._setup(2)
        layer.dir_att.value[:], layer.dir_ff.value[:] = 0.6, -0.4
        layer.gate_slope.value[:], layer.gate_offset.value[:] = 2.0, -0.5

        def ln(z, m):
            mu = z.mean(axis=1, keepdims=True)
            var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
            return (z - mu) / np.sqrt(var + m.eps) * m.gain.value + m.shift.value

        q = ln(x, layer.ln_att)
        a = probe_attention(q, xa, layer).value
        s = -(a * np.log(a)).sum(axis=1, keepdims=True) / math.log(5)
        g = 1 / (1 + np.exp(-(2.0 * s - 0.5)))
        c = layer.visual_xattn(Tensor(q), Tensor(xv), Tensor(xv)).value
        x1 = x + math.tanh(0.6) * g * c
        ff = layer.ffw(Tensor(ln(x1, layer.ln_ff))).value
        want = x1 + math.tanh(-0.4) * g * ff
        np.testing.assert_allclose(amf_layer(x, xa, xv, layer).value, want, atol=1e-12)

    def test_gradient_check(self):
        layer, x, xa, xv = self._setup(3)
        layer.dir_att.value[:], layer.dir_ff.value[:] = 0.5, 0.3
        xp, vp = Param(x), Param(xv)
        w = Tensor(np.random.default_rng(0).normal(size=(2, 4)))
        errs = check_gradients(lambda: sum_all(mul(amf_layer(xp, xa, vp, layer), w)), [xp, vp] + layer.trainable())
        assert max(errs.values()) <= 1e-4


class TestDecoder:
    def test_distribution_normalised(self):
        model = _tiny_model()
        xa, xv = _memories(model)
        p = decode_step([model.config.bos, 0, 2], xa, xv, model)
        assert abs(p.sum() - 1.0) <= 1e-12

    def test_zero_gates_equal_audio_only(self):
        model = _tiny_model()
        xa, xv = _memories(model)
        prefix = [model.config.bos, 1, 0]
        np.testing.assert_array_equal(decode_step(prefix, xa, xv, model), decode_step(prefix, xa, None, model))

    def test_prefix_checks(self):
        model = _tiny_model()
        xa, _ = _memories(model)
        with pytest.raises(ValueError):
            decode_step([0, 1], xa, None, model)
        with pytest.raises(ValueError):
            decode_step([model.config.bos] + [0] * 6, xa, None, model)

    def test_teacher_forced_loss_gradient(self, toy):
        model, utts = toy
        batch = make_batch(utts[:2], model.config.bos, model.config.eos)
        for layer in model.amf:
            layer.dir_att.value[:], layer.dir_ff.value[:] = 0.3, -0.2
        for b in model.sma.blocks:
            b.out_gate.value[:] = 0.4
        model.set_trainable([model.amf[0], model.sma.blocks[2], model.projector])
        a = model.amf[0]
        params = [a.dir_att, a.dir_ff, a.gate_slope, a.gate_offset, a.visual_xattn.o_proj.bias,
                  model.sma.blocks[2].out_gate, model.sma.blocks[2].cross_attn.v_proj.bias, model.projector.bias]
        try:
            errs = check_gradients(lambda: model.loss(batch), params)
        finally:
            for layer in model.amf:
                layer.dir_att.value[:], layer.dir_ff.value[:] = 0.0, 0.0
            for b in model.sma.blocks:
                b.out_gate.value[:] = 0.0
            model.freeze()
        assert max(errs.values()) <= 1e-4


def _enumerate(model, xa, xv, max_len):
    """Every EOS-terminated sequence within max_len generated tokens, with length-normalised scores."""
    cfg = model.config
    out = []
    for n in range(max_len):
        for seq in itertools.product(range(cfg.num_symbols), repeat=n):
            prefix = [cfg.bos]
            total = 0.0
            for tok in list(seq) + [cfg.eos]:
                total += math.log(decode_step(prefix, xa, xv, model)[tok])
                prefix.append(tok)
            out.append((total / (n + 1), seq))
    return sorted(out, key=lambda e: (-e[0], e[1]))


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_width_matches_enumeration(self, seed):
        model = _tiny_model(seed, num_symbols=2)
        _sharpen(model)
        xa, xv = _memories(model, seed)
        ref = _enumerate(model, xa, xv, 3)
        nb = beam_search(model, xa, xv, beam_width=27, n=len(ref), max_len=3)
        assert nb.candidates == [s for _, s in ref]
        np.testing.assert_allclose(nb.infer_scores, [v for v, _ in ref], atol=1e-12)

    def test_width_one_is_greedy(self):
        model = _tiny_model(3)
        _sharpen(model)
        xa, xv = _memories(model, 3)
        assert beam_search(model, xa, xv, 1, 1, max_len=5).top == greedy_decode(model, xa, xv, max_len=5)

    def test_candidates_distinct_and_sorted(self):
        model = _tiny_model(4)
        xa, xv = _memories(model, 4)
        nb = beam_search(model, xa, xv, 6, 5, max_len=5)
        assert len(nb) == 5 and len(set(nb.candidates)) == 5
        assert all(a >= b for a, b in zip(nb.infer_scores, nb.infer_scores[1:]))

    def test_forced_termination_flagged(self):
        model = _tiny_model(5)
        model.decoder.out.bias.value[0, model.config.eos] = -50.0
        xa, xv = _memories(model, 5)
        nb = beam_search(model, xa, xv, 3, 2, max_len=3)
        assert all(nb.forced) and all(len(c) == 3 for c in nb.candidates)

    def test_width_below_n_rejected(self):
        model = _tiny_model()
        xa, xv = _memories(model)
        with pytest.raises(ValueError):
            beam_search(model, xa, xv, 2, 3)


class TestNBestFiles:
    def test_round_trip(self, tmp_path):
        lists = [NBestList("u1", [(1, 2), (3,), ()], [-0.1, -0.2, -1.5]), NBestList("u2", [(0,), (1,)], [-1 / 3, -2.0])]
        write_nbest(tmp_path / "nb.tsv", lists)
        back = read_nbest(tmp_path / "nb.tsv")
        assert [(b.uid, b.candidates, b.infer_scores) for b in back] == \
            [(a.uid, a.candidates, a.infer_scores) for a in lists]
        assert (tmp_path / "nb.tsv").read_text().splitlines()[0] == "u1\t1\t1 2\t-0.1"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_nbest(tmp_path / "absent.tsv")

    def test_duplicate_candidates_rejected(self):
        with pytest.raises(ValueError):
            NBestList("u", [(1,), (1,)], [0.0, -1.0])


class TestTraining:
    def test_zero_lr_is_null_update(self, toy):
        model, utts = toy
        before = {k: v.copy() for k, v in model.state_dict().items()}
        train_stage1(utts, model, TrainConfig(steps=3, lr=0.0, batch_size=4))
        after = model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_encoders_unchanged_after_100_steps(self, toy):
        model, utts = toy
        enc = {k: v.copy() for k, v in model.state_dict().items() if "encoder" in k}
        dec = {k: v.copy() for k, v in model.state_dict().items() if k.startswith("decoder")}
        res = train_stage1(utts, model, TrainConfig(steps=100, lr=1e-3, batch_size=4, log_every=0))
        state = model.state_dict()
        assert all(np.array_equal(v, state[k]) for k, v in enc.items())
        assert all(np.array_equal(v, state[k]) for k, v in dec.items())
        assert not np.array_equal(state["amf.0.dir_att"], 0.0)
        assert len(res.losses) == 100

    def test_unfrozen_encoder_rejected(self, toy):
        model, utts = toy
        model.audio_encoder.unfreeze()
        try:
            with pytest.raises(ValueError):
                train_stage1(utts, model, TrainConfig(steps=1))
        finally:
            model.audio_encoder.freeze()


class TestDivergence:
    def test_window_then_trigger(self):
        losses, initial = [], None
        for step, v in enumerate([1.0] * 10 + [5.0, 11.0]):
            losses.append(v)
            if v > 10:
                with pytest.raises(TrainingDiverged):
                    check_divergence(losses, initial, "t", step)
            else:
                initial = check_divergence(losses, initial, "t", step)
        assert initial == 1.0

    def test_non_finite(self):
        with pytest.raises(TrainingDiverged):
            check_divergence([float("nan")], None, "t", 0)
