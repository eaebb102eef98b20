import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avur.encoders import (
    AUDIO,
    VISUAL,
    FeatureSequence,
    Projector,
    ToyEncoder,
    project,
    resample_matrix,
    resample_to,
)
from avur.numerics import Param, Tensor, backward, check_gradients, mul, sum_all


def _encoder(fpt=4, modality=AUDIO, seed=3):
    return ToyEncoder(20, 8, 16, 4, 4, fpt, 100.0 / (4 // fpt), modality, seed=seed)


class TestToyEncoder:
    def test_deterministic_without_noise(self):
        a = _encoder().encode([1, 2, 3])
        b = _encoder().encode([1, 2, 3])
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_noise_changes_frames_not_shape(self):
        enc = _encoder()
        toks = [4, 5, 6]
        n1 = np.random.default_rng(1).normal(size=(12, 8))
        n2 = np.random.default_rng(2).normal(size=(12, 8))
        a, b = enc.encode(toks, n1), enc.encode(toks, n2)
        assert a.frames.shape == b.frames.shape
        assert not np.array_equal(a.frames, b.frames)

    def test_audio_emits_four_frames_per_visual_frame(self):
        toks = [0, 1, 2, 3, 4]
        assert _encoder(4).encode(toks).length == 20
        assert _encoder(1, VISUAL).encode(toks).length == 5

    def test_unknown_token(self):
        with pytest.raises(KeyError):
            _encoder().encode([1, 25])

    def test_layer_range(self):
        enc = _encoder()
        with pytest.raises(ValueError):
            enc.encode([1], layer=5)
        assert enc.encode([1, 2], layer=2).dim == 16

    def test_frozen_encoder_gets_no_gradient(self):
        enc = _encoder()
        assert enc.frozen
        x = Param(enc.embed([1, 2, 3]))
        backward(sum_all(enc.forward(x)[-1]))
        assert all(not p.grad.any() for p in enc.params())
        assert x.grad.any()


class TestFeatureSequence:
    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError):
            FeatureSequence(np.zeros((0, 3)), 100.0, AUDIO)
        with pytest.raises(ValueError):
            FeatureSequence(np.array([[np.nan]]), 100.0, AUDIO)
        with pytest.raises(ValueError):
            FeatureSequence(np.zeros((2, 2)), 100.0, "video")


class TestResample:
    def test_identity_when_lengths_match(self):
        x = FeatureSequence(np.random.default_rng(0).normal(size=(6, 3)), 25.0, VISUAL)
        np.testing.assert_array_equal(resample_to(x, 6).frames, x.frames)

    @given(st.integers(1, 12), st.integers(1, 40))
    def test_constant_stays_constant(self, src, tgt):
        x = FeatureSequence(np.full((src, 2), 1.5), 25.0, VISUAL)
        y = resample_to(x, tgt)
        assert y.length == tgt
        np.testing.assert_allclose(y.frames, 1.5, atol=1e-14)

    def test_ramp_fractions(self):
        y = resample_to(FeatureSequence(np.array([[0.0], [1.0]]), 25.0, VISUAL), 5)
        np.testing.assert_allclose(y.frames[:, 0], [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)

    def test_rows_are_convex_weights(self):
        r = resample_matrix(5, 17)
        np.testing.assert_allclose(r.sum(axis=1), 1.0)
        assert (r >= 0).all()

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resample_to(FeatureSequence(np.zeros((2, 1)), 25.0, VISUAL), 0)

    def test_gradient_flows_to_input(self):
        x = Param(np.random.default_rng(1).normal(size=(3, 2)))
        w = Tensor(np.random.default_rng(2).normal(size=(8, 2)))
        assert max(check_gradients(lambda: sum_all(mul(resample_to(x, 8), w)), [x]).values()) <= 1e-8


class TestProject:
    def test_identity(self):
        x = FeatureSequence(np.random.default_rng(0).normal(size=(4, 3)), 100.0, AUDIO)
        np.testing.assert_array_equal(project(x, np.eye(3), np.zeros(3)).frames, x.frames)

    def test_bias_only(self):
        x = FeatureSequence(np.random.default_rng(0).normal(size=(4, 3)), 100.0, AUDIO)
        b = np.array([1.0, -2.0])
        np.testing.assert_array_equal(project(x, np.zeros((3, 2)), b).frames, np.tile(b, (4, 1)))

    def test_matches_per_frame_loop(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        got = project(FeatureSequence(x, 100.0, AUDIO), w, b).frames
        want = np.array([[sum(x[t, i] * w[i, j] for i in range(3)) + b[j] for j in range(4)] for t in range(5)])
        np.testing.assert_allclose(got, want, atol=1e-13)

    @settings(max_examples=25)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_affine_part_is_linear(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        p = Projector(3, 2, rng)
        p.bias.value = rng.normal(size=(1, 2))
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        f = lambda z: p(Tensor(z)).value - p(Tensor(np.zeros_like(z))).value  # noqa: E731
        np.testing.assert_allclose(f(alpha * x + beta * y), alpha * f(x) + beta * f(y), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project(FeatureSequence(np.zeros((2, 3)), 100.0, AUDIO), np.zeros((4, 2)), np.zeros(2))
