import math

import numpy as np
import pytest

from avur.data import (
    CLEAN,
    NoiseSpec,
    ToyTaskConfig,
    babble_stream,
    dump_config,
    energy,
    gen_dataset,
    load_config,
    load_dataset,
    measured_snr,
    mix_noise,
    sample_symbols,
    save_dataset,
    splice,
)
from avur.encoders import AUDIO, FeatureSequence

SMALL = dict(n_train=20, n_dev=5, n_test=5)


def _audio(seed=0, n=12):
    return FeatureSequence(np.random.default_rng(seed).normal(size=(n, 4)), 100.0, AUDIO)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = ToyTaskConfig(vocab_size=6, num_visemes=3, viseme_map=(0, 1, 2, 0, 1, 2), jitter=0.25, seed=4)
        (tmp_path / "c.ini").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.ini") == cfg

    def test_sectionless_file(self, tmp_path):
        (tmp_path / "c.ini").write_text("vocab_size = 10\nnum_visemes = 4\n")
        cfg = load_config(tmp_path / "c.ini")
        assert (cfg.vocab_size, cfg.num_visemes) == (10, 4)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[task]\nvocab = 10\n")
        with pytest.raises(KeyError):
            load_config(tmp_path / "c.ini")

    @pytest.mark.parametrize("kw", [dict(vocab_size=0), dict(num_visemes=30), dict(min_len=6, max_len=5),
                                    dict(sampler="zipf"), dict(viseme_map=tuple(range(20)))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ToyTaskConfig(**kw)


class TestGenDataset:
    def test_deterministic(self):
        a, b = gen_dataset(ToyTaskConfig(**SMALL)), gen_dataset(ToyTaskConfig(**SMALL))
        for ua, ub in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(ua.tokens, ub.tokens)
            np.testing.assert_array_equal(ua.audio.frames, ub.audio.frames)
            np.testing.assert_array_equal(ua.visual.frames, ub.visual.frames)

    def test_seed_changes_data(self):
        a, b = gen_dataset(ToyTaskConfig(**SMALL)), gen_dataset(ToyTaskConfig(seed=1, **SMALL))
        assert any(not np.array_equal(x.tokens, y.tokens) for x, y in zip(a.train, b.train))

    def test_viseme_collapse(self):
        vmap = (0, 0, 1, 1, 2, 2)
        ds = gen_dataset(ToyTaskConfig(vocab_size=6, num_visemes=3, viseme_map=vmap, jitter=0.0, **SMALL))
        u = ds.train[0]
        np.testing.assert_array_equal(u.visual.frames, ds.viseme_embeddings[np.asarray(vmap)[u.tokens]])
        np.testing.assert_array_equal(ds.viseme_embeddings[vmap[0]], ds.viseme_embeddings[vmap[1]])

    def test_shapes_and_rates(self):
        cfg = ToyTaskConfig(**SMALL)
        for u in gen_dataset(cfg).train:
            assert cfg.min_len <= len(u.tokens) <= cfg.max_len
            assert u.audio.length == 4 * u.visual.length == 4 * len(u.tokens)
            assert u.audio.frame_rate_hz == 4 * u.visual.frame_rate_hz

    def test_uniform_marginals_within_three_sigma(self):
        cfg = ToyTaskConfig(sampler="uniform", n_train=1000, n_dev=1, n_test=1, min_len=10, max_len=10)
        toks = np.concatenate([u.tokens for u in gen_dataset(cfg).train])
        assert toks.size == 10_000
        p = 1 / cfg.vocab_size
        sigma = math.sqrt(toks.size * p * (1 - p))
        assert np.abs(np.bincount(toks, minlength=cfg.vocab_size) - toks.size * p).max() <= 3 * sigma

    def test_markov_transitions_within_three_sigma(self):
        trans = ToyTaskConfig().transition_matrix()
        np.testing.assert_allclose(trans.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(trans.sum(axis=1), 1.0, atol=1e-12)
        toks = sample_symbols(trans, 10_001, np.random.default_rng(0))
        a = int(np.bincount(toks[:-1]).argmax())
        nxt = toks[1:][toks[:-1] == a]
        counts = np.bincount(nxt, minlength=20)
        sigma = np.sqrt(nxt.size * trans[a] * (1 - trans[a]))
        assert (np.abs(counts - nxt.size * trans[a]) <= 3 * sigma).all()

    def test_save_load_round_trip(self, tmp_path):
        ds = gen_dataset(ToyTaskConfig(**SMALL))
        save_dataset(tmp_path / "d.npz", ds)
        back = load_dataset(tmp_path / "d.npz")
        assert back.config == ds.config and back.viseme_map == ds.viseme_map
        for name in ("train", "dev", "test"):
            for u, v in zip(ds.splits[name], back.splits[name]):
                assert u.uid == v.uid
                np.testing.assert_array_equal(u.tokens, v.tokens)
                np.testing.assert_array_equal(u.audio.frames, v.audio.frames)
                np.testing.assert_array_equal(u.visual.frames, v.visual.frames)
                assert u.visual.frame_rate_hz == v.visual.frame_rate_hz

    def test_splice_keeps_alignment(self):
        ds = gen_dataset(ToyTaskConfig(jitter=0.0, **SMALL))
        u = splice(ds.train[0], ds.train[1], 8, np.random.default_rng(0), "s")
        assert len(u.tokens) == 8
        np.testing.assert_array_equal(u.audio.frames[::4], ds.symbol_embeddings[u.tokens])


class TestMixNoise:
    def test_clean_passthrough(self):
        a = _audio()
        assert mix_noise(a, NoiseSpec(CLEAN), 0) is a

    @pytest.mark.parametrize("snr", [10.0, 0.0, -5.0])
    def test_target_snr(self, snr):
        a = _audio()
        out = mix_noise(a, NoiseSpec(snr, "gaussian"), 3)
        assert abs(measured_snr(a.frames, out.frames - a.frames) - snr) <= 1e-6

    def test_minus_ten_db_is_ten_times_energy(self):
        a = _audio()
        noise = np.random.default_rng(1).normal(size=a.frames.shape)
        n0 = mix_noise(a, NoiseSpec(0.0), None, noise=noise).frames - a.frames
        n10 = mix_noise(a, NoiseSpec(-10.0), None, noise=noise).frames - a.frames
        assert abs(energy(n10) / energy(n0) - 10.0) <= 1e-9
        assert abs(energy(n0) - energy(a.frames)) <= 1e-12

    def test_zero_energy_signal(self):
        with pytest.raises(ValueError):
            mix_noise(FeatureSequence(np.zeros((4, 2)), 100.0, AUDIO), NoiseSpec(0.0, "gaussian"), 0)

    def test_babble_is_deterministic_and_needs_three(self):
        others = [_audio(s, n) for s, n in ((1, 5), (2, 9), (3, 12), (4, 7))]
        a = mix_noise(_audio(), NoiseSpec(5.0), 7, others)
        b = mix_noise(_audio(), NoiseSpec(5.0), 7, others)
        np.testing.assert_array_equal(a.frames, b.frames)
        with pytest.raises(ValueError):
            babble_stream(12, others[:2], np.random.default_rng(0))

    @pytest.mark.parametrize("snr,kind", [(math.nan, "babble"), (-math.inf, "babble"), (0.0, "pink")])
    def test_bad_spec(self, snr, kind):
        with pytest.raises(ValueError):
            NoiseSpec(snr, kind)
