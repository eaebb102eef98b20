"""Frozen toy encoders, the time resampler and the visual projector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Param,
    Tensor,
    add,
    matmul,
    no_grad,
    uniform_init,
)

AUDIO = "audio"
VISUAL = "visual"


@dataclass
class FeatureSequence:
    """Time-major frames (T x D) with a frame rate and modality tag."""

    frames: np.ndarray
    frame_rate_hz: float
    modality: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("FeatureSequence needs a non-empty T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("FeatureSequence frames must be finite")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")
        if self.modality not in (AUDIO, VISUAL):
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    angles = pos * rates
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


class EncoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.ln1(x)
        x = add(x, self.attn(h, h, h, mask))
        return add(x, self.ffn(self.ln2(x)))


class ToyEncoder(Module):
    """Symbol-driven stand-in for a pretrained speech or lip encoder.

    ``embed`` turns a symbol sequence into raw input frames
    (``frames_per_token`` copies of a per-symbol vector); ``forward`` runs a
    pre-norm transformer stack and keeps every layer's output.
    """

    def __init__(self, vocab_size: int, in_dim: int, model_dim: int, depth: int, num_heads: int,
                 frames_per_token: int, frame_rate_hz: float, modality: str, seed: int, frozen: bool = True):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.in_dim = in_dim
        self.model_dim = model_dim
        self.depth = depth
        self.frames_per_token = frames_per_token
        self.frame_rate_hz = frame_rate_hz
        self.modality = modality
        self.seed = seed
        self.cfg = AttentionConfig(model_dim, num_heads)
        self.embedding = Param(rng.normal(0.0, 1.0, size=(vocab_size, in_dim)))
        self.input_proj = Linear(in_dim, model_dim, rng)
        self.layers = [EncoderLayer(self.cfg, rng) for _ in range(depth)]
        if frozen:
            self.freeze()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params())

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.size == 0:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise KeyError(f"unknown token in {tokens.tolist()}")
        return np.repeat(self.embedding.value[tokens], self.frames_per_token, axis=0)

    def forward(self, frames) -> list[Tensor]:
        """Per-layer outputs [layer 1, ..., layer L] for one utterance."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim}-dim input frames, got {x.shape[1]}")
        h = add(self.input_proj(x), Tensor(sinusoidal_positions(x.shape[0], self.model_dim)))
        outs = []
        for layer in self.layers:
            h = layer(h)
            outs.append(h)
        return outs

    def encode_frames(self, frames: np.ndarray) -> list[np.ndarray]:
        with no_grad():
            return [t.value for t in self.forward(frames)]

    def encode(self, tokens, noise=None, layer: int | None = None) -> FeatureSequence:
        """Layer-``layer`` (1-based, default last) activations for ``tokens``."""
        layer = self.depth if layer is None else layer
        if not 1 <= layer <= self.depth:
            raise ValueError(f"layer {layer} outside 1..{self.depth}")
        raw = self.embed(tokens)
        if noise is not None:
            noise = noise.frames if isinstance(noise, FeatureSequence) else np.asarray(noise, dtype=np.float64)
            if noise.shape != raw.shape:
                raise ValueError(f"noise shape {noise.shape} != frames {raw.shape}")
            raw = raw + noise
        outs = self.encode_frames(raw)
        return FeatureSequence(outs[layer - 1], self.frame_rate_hz, self.modality)


def resample_matrix(src_len: int, target_len: int) -> np.ndarray:
    """(target_len x src_len) linear-interpolation weights, endpoints aligned."""
    if src_len < 1:
        raise ValueError("source length must be >= 1")
    if target_len < 1:
        raise ValueError("target length must be >= 1")
    r = np.zeros((target_len, src_len))
    if src_len == 1 or target_len == 1:
        r[:, 0] = 1.0
        return r
    for i in range(target_len):
        num = i * (src_len - 1)
        lo, rem = divmod(num, target_len - 1)
        w = rem / (target_len - 1)
        r[i, lo] += 1.0 - w
        if w > 0:
            r[i, lo + 1] += w
    return r


def block_resample_matrix(src_lens, target_lens) -> np.ndarray:
    """Block-diagonal resampler for several utterances stacked in time."""
    rows, cols = sum(target_lens), sum(src_lens)
    out = np.zeros((rows, cols))
    r0 = c0 = 0
    for s, t in zip(src_lens, target_lens):
        out[r0 : r0 + t, c0 : c0 + s] = resample_matrix(s, t)
        r0 += t
        c0 += s
    return out


def resample_to(x, target_len: int):
    """Linearly resample along time to ``target_len`` frames (differentiable)."""
    if isinstance(x, FeatureSequence):
        if target_len < 1:
            raise ValueError("target length must be >= 1")
        frames = resample_matrix(x.length, target_len) @ x.frames
        rate = x.frame_rate_hz * (target_len - 1) / (x.length - 1) if x.length > 1 and target_len > 1 else x.frame_rate_hz
        return FeatureSequence(frames, rate, x.modality)
    x = x if isinstance(x, Tensor) else Tensor(x)
    return matmul(Tensor(resample_matrix(x.shape[0], target_len)), x)


class Projector(Module):
    """Affine frame map D_v -> D_a."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Param(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Param(np.zeros((1, d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return project(x, self.weight, self.bias)


def project(x, weight, bias):
    """``x @ weight + bias`` per frame; accepts FeatureSequence or Tensor."""
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    b = bias if isinstance(bias, Tensor) else Tensor(np.asarray(bias, dtype=np.float64).reshape(1, -1))
    if isinstance(x, FeatureSequence):
        if x.dim != w.shape[0] or b.shape != (1, w.shape[1]):
            raise ValueError(f"projection shape mismatch: {x.dim} -> {w.shape}, bias {b.shape}")
        return FeatureSequence(x.frames @ w.value + b.value, x.frame_rate_hz, x.modality)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ValueError(f"projection shape mismatch: {x.shape} @ {w.shape}, bias {b.shape}")
    return add(matmul(x, w), b)


@dataclass
class EncodedUtterance:
    """Frozen-encoder activations for one utterance (all layers kept)."""

    uid: str
    tokens: np.ndarray
    audio_layers: list[np.ndarray]
    visual_layers: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def audio_len(self) -> int:
        return self.audio_layers[-1].shape[0]

    @property
    def visual_len(self) -> int:
        return self.visual_layers[-1].shape[0]

