"""Sparse modality alignment: visual queries refined against audio context."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .encoders import FeatureSequence
from .numerics import (
    AttentionConfig,
    Module,
    MultiHeadAttention,
    Param,
    Tensor,
    add,
    mul,
    stop_grad,
    tanh,
)


def _as_tensor(x) -> Tensor:
    if isinstance(x, FeatureSequence):
        return Tensor(x.frames)
    return x if isinstance(x, Tensor) else Tensor(x)


class AlignmentBlock(Module):
    """Self-attention over visual frames, then cross-attention into audio.

    The output gate starts at zero so a fresh block is the identity.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.out_gate = Param(np.zeros((1, 1)))


def align_block(xv, xa, block: AlignmentBlock, self_mask=None, cross_mask=None) -> Tensor:
    xv = _as_tensor(xv)
    xa = _as_tensor(xa)
    if xv.shape[0] != xa.shape[0]:
        raise ValueError(f"alignment needs a shared time axis: {xv.shape[0]} visual vs {xa.shape[0]} audio frames")
    if xv.shape[1] != block.cfg.model_dim or xa.shape[1] != block.cfg.model_dim:
        raise ValueError("feature dims must equal the block's model dim")
    memory = stop_grad(xa)
    attended = block.self_attn(xv, xv, xv, self_mask)
    ctx = block.cross_attn(attended, memory, memory, cross_mask)
    return add(xv, mul(tanh(block.out_gate), ctx))


class SmaStack(Module):
    """Three alignment blocks tied to upper audio-encoder layers.

    ``insertion_layers`` are 1-based encoder layer indices. With
    ``per_layer_audio=False`` every block reads the final audio layer.
    """

    def __init__(self, cfg: AttentionConfig, encoder_depth: int, rng: np.random.Generator,
                 insertion_layers: Sequence[int] | None = None, per_layer_audio: bool = True,
                 num_blocks: int = 3):
        if insertion_layers is None:
            insertion_layers = tuple(range(encoder_depth - num_blocks + 1, encoder_depth + 1))
        insertion_layers = tuple(int(i) for i in insertion_layers)
        if len(insertion_layers) != num_blocks:
            raise ValueError(f"need {num_blocks} insertion layers, got {insertion_layers}")
        if any(b <= a for a, b in zip(insertion_layers, insertion_layers[1:])):
            raise ValueError("insertion layers must be strictly increasing")
        lowest = encoder_depth // 2
        if insertion_layers[0] < max(lowest, 1) or insertion_layers[-1] > encoder_depth:
            raise ValueError(f"insertion layers {insertion_layers} must lie in {lowest}..{encoder_depth}")
        self.cfg = cfg
        self.encoder_depth = encoder_depth
        self.insertion_layers = insertion_layers
        self.per_layer_audio = per_layer_audio
        self.blocks = [AlignmentBlock(cfg, rng) for _ in range(num_blocks)]


def align(xv_projected, audio_layer_outputs: Sequence, stack: SmaStack, self_mask=None, cross_mask=None) -> Tensor:
    """Apply the blocks in order; block i reads audio layer insertion_layers[i]."""
    if len(audio_layer_outputs) < stack.encoder_depth:
        missing = [i for i in stack.insertion_layers if i > len(audio_layer_outputs)]
        if missing or not stack.per_layer_audio:
            raise ValueError(f"missing audio layer outputs for layers {missing or [stack.encoder_depth]}")
    x = _as_tensor(xv_projected)
    for block, layer in zip(stack.blocks, stack.insertion_layers):
        idx = layer - 1 if stack.per_layer_audio else len(audio_layer_outputs) - 1
        x = align_block(x, audio_layer_outputs[idx], block, self_mask, cross_mask)
    return x
