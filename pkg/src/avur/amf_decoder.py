"""Toy recognition decoder with uncertainty-gated visual fusion layers.

Each base decoder layer is preceded by an inserted fusion layer. A
forward-only probe measures how spread out the token's attention over audio
frames is; that normalised entropy sets a sigmoid amplitude, and a tanh
direction scalar per branch sets the sign of the visual injection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import AUDIO, VISUAL, EncodedUtterance, Projector, ToyEncoder, block_resample_matrix
from .numerics import (
    AdamW,
    AttentionConfig,
    BlockMask,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Param,
    Tensor,
    add,
    backward,
    causal_mask,
    cosine_lr,
    cross_entropy,
    matmul,
    mul,
    no_grad,
    row_entropy,
    scale,
    sigmoid,
    softmax_rows,
    stop_grad,
    take_rows,
    tanh,
    transpose,
    uniform_init,
    _sigmoid,
)
from .sma import SmaStack, align

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Training loss went non-finite or exceeded ten times its initial level."""


INITIAL_WINDOW = 10


def check_divergence(losses: list[float], initial: float | None, tag: str, step: int) -> float | None:
    """Raise on a non-finite loss or one above 10x the mean of the first steps.

    The initial level averages the first ``INITIAL_WINDOW`` losses so one easy
    opening batch does not set a hair trigger. Returns the (possibly newly
    fixed) initial level.
    """
    value = losses[-1]
    if not math.isfinite(value):
        raise TrainingDiverged(f"{tag}: non-finite loss at step {step}")
    if initial is None and len(losses) >= INITIAL_WINDOW:
        initial = float(np.mean(losses[:INITIAL_WINDOW]))
    if initial is not None and value > 10 * initial:
        raise TrainingDiverged(f"{tag}: loss {value:.3f} exceeded 10x initial {initial:.3f} at step {step}")
    return initial


# gates and uncertainty

def probe_attention(q, xa, layer: "AmfLayer", mask=None) -> Tensor:
    """Forward-only acoustic probe; no gradient reaches ``q`` or ``xa``."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    xa = xa if isinstance(xa, Tensor) else Tensor(xa)
    if xa.shape[0] < 1:
        raise ValueError("probe needs at least one audio frame")
    d = layer.probe_wq.shape[0]
    if q.shape[1] != d or xa.shape[1] != d:
        raise ValueError(f"probe expects {d}-dim queries and memory")
    qp = matmul(stop_grad(q), layer.probe_wq)
    kp = matmul(stop_grad(xa), layer.probe_wk)
    scores = scale(matmul(qp, transpose(kp)), 1.0 / math.sqrt(d))
    return softmax_rows(scores, mask)


def _inv_log(frames) -> np.ndarray:
    t = np.asarray(frames, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(t > 1, 1.0 / np.log(np.maximum(t, 2.0)), 0.0)


def uncertainty(a_rows, frames=None):
    """Normalised attention entropy in [0, 1] (natural log; T = 1 gives 0).

    For an array, ``frames`` defaults to its row length and a float (single
    row) or column of floats is returned. For a Tensor the result is a
    differentiable column; ``frames`` may be a per-row count when rows
    attend over different numbers of valid frames.
    """
    if isinstance(a_rows, Tensor):
        n, t = a_rows.shape
        frames = np.full(n, t) if frames is None else np.broadcast_to(np.asarray(frames), (n,))
        return mul(row_entropy(a_rows), Tensor(_inv_log(frames).reshape(-1, 1)))
    p = np.asarray(a_rows, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(1, -1) if single else p
    t = p.shape[1] if frames is None else frames
    if t < 1:
        raise ValueError("T must be >= 1")
    logp = np.log(np.where(p > 0, p, 1.0))
    s = -(p * logp).sum(axis=1) * _inv_log(t)
    s = np.clip(s, 0.0, 1.0)
    return float(s[0]) if single else s


def amplitude_gate(s, a, b):
    """sigmoid(a * S + b); works on floats or Tensors."""
    if isinstance(s, Tensor) or isinstance(a, Tensor) or isinstance(b, Tensor):
        return sigmoid(add(mul(a, s), b))
    z = np.asarray(np.asarray(a, dtype=np.float64) * np.asarray(s, dtype=np.float64) + b, dtype=np.float64)
    g = _sigmoid(np.atleast_1d(z))
    return g.reshape(z.shape) if z.ndim else float(g[0])


# layers

class AmfLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, probe_trainable: bool = True):
        d = cfg.model_dim
        self.cfg = cfg
        self.probe_wq = Param(uniform_init(rng, d, (d, d)), requires_grad=probe_trainable)
        self.probe_wk = Param(uniform_init(rng, d, (d, d)), requires_grad=probe_trainable)
        self.gate_slope = Param(np.ones((1, 1)))
        self.gate_offset = Param(np.zeros((1, 1)))
        self.dir_att = Param(np.zeros((1, 1)))
        self.dir_ff = Param(np.zeros((1, 1)))
        self.ln_att = LayerNorm(d)
        self.visual_xattn = MultiHeadAttention(cfg, rng)
        self.ln_ff = LayerNorm(d)
        self.ffw = FeedForward(d, 4 * d, rng)
        self.probe_trainable = probe_trainable

    def unfreeze(self) -> "AmfLayer":
        super().unfreeze()
        self.probe_wq.requires_grad = self.probe_trainable
        self.probe_wk.requires_grad = self.probe_trainable
        return self


@dataclass
class AmfTrace:
    """Per-layer diagnostics recorded during a forward pass."""

    uncertainty: list[np.ndarray] = field(default_factory=list)
    amplitude: list[np.ndarray] = field(default_factory=list)


def amf_layer(x, xa, xv_hat, layer: AmfLayer, probe_mask=None, visual_mask=None, frames=None,
              trace: AmfTrace | None = None) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    xa = xa if isinstance(xa, Tensor) else Tensor(xa)
    xv_hat = xv_hat if isinstance(xv_hat, Tensor) else Tensor(xv_hat)
    d = layer.cfg.model_dim
    if x.shape[1] != d or xa.shape[1] != d or xv_hat.shape[1] != d:
        raise ValueError("amf_layer: feature dims disagree with the layer")
    q = layer.ln_att(x)
    probe = probe_attention(q, xa, layer, probe_mask)
    s = uncertainty(probe, xa.shape[0] if frames is None else frames)
    amp = amplitude_gate(s, layer.gate_slope, layer.gate_offset)
    if trace is not None:
        trace.uncertainty.append(s.value[:, 0].copy())
        trace.amplitude.append(amp.value[:, 0].copy())
    ctx = layer.visual_xattn(q, xv_hat, xv_hat, visual_mask)
    x1 = add(x, mul(mul(tanh(layer.dir_att), amp), ctx))
    ff = layer.ffw(layer.ln_ff(x1))
    return add(x1, mul(mul(tanh(layer.dir_ff), amp), ff))


class DecoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.ln_ff = LayerNorm(d)
        self.ffn = FeedForward(d, 4 * d, rng)

    def __call__(self, x: Tensor, xa: Tensor, self_mask, cross_mask) -> Tensor:
        h = self.ln_self(x)
        x = add(x, self.self_attn(h, h, h, self_mask))
        x = add(x, self.cross_attn(self.ln_cross(x), xa, xa, cross_mask))
        return add(x, self.ffn(self.ln_ff(x)))


class BaseDecoder(Module):
    def __init__(self, vocab_size: int, cfg: AttentionConfig, num_layers: int, max_context: int,
                 rng: np.random.Generator):
        d = cfg.model_dim
        self.vocab_size = vocab_size
        self.max_context = max_context
        self.tok_emb = Param(rng.normal(0.0, 0.5, size=(vocab_size, d)))
        self.pos_emb = Param(rng.normal(0.0, 0.1, size=(max_context, d)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(num_layers)]
        self.ln_out = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng)


@dataclass(frozen=True)
class ModelConfig:
    num_symbols: int = 20
    num_visemes: int = 8
    audio_in_dim: int = 16
    visual_in_dim: int = 16
    audio_dim: int = 32
    visual_dim: int = 24
    num_heads: int = 4
    encoder_depth: int = 4
    decoder_layers: int = 2
    max_context: int = 16
    insertion_layers: tuple[int, ...] = (2, 3, 4)
    per_layer_audio: bool = True
    probe_trainable: bool = True
    audio_frames_per_token: int = 4
    visual_frames_per_token: int = 1
    audio_rate_hz: float = 100.0
    visual_rate_hz: float = 25.0
    encoder_seed: int = 1234
    seed: int = 0

    @property
    def bos(self) -> int:
        return self.num_symbols

    @property
    def eos(self) -> int:
        return self.num_symbols + 1

    @property
    def decoder_vocab(self) -> int:
        return self.num_symbols + 2


@dataclass
class Batch:
    """Several utterances stacked along time with segment-restricted masks."""

    tokens_in: np.ndarray
    targets: np.ndarray
    positions: np.ndarray
    audio_layers: list[Tensor]
    visual: Tensor | None
    resample: Tensor | None
    self_mask: BlockMask
    cross_mask: BlockMask | None
    audio_self_mask: BlockMask | None
    frames_per_row: np.ndarray
    audio_lens: list[int]


def _bounds(lengths) -> list[int]:
    return [0] + np.cumsum(lengths).tolist()


def _causal_blocks(lengths) -> BlockMask:
    b = _bounds(lengths)
    tri = {n: np.tril(np.ones((n, n), dtype=bool)) for n in set(lengths)}
    return BlockMask.diagonal(b, b, [tri[n] for n in lengths])


def make_batch(utts: Sequence[EncodedUtterance], bos: int, eos: int, with_visual: bool = True) -> Batch:
    tok_in, tgt, pos = [], [], []
    frames_per_row = []
    y_lens = []
    for u in utts:
        toks = [int(t) for t in u.tokens]
        tok_in += [bos] + toks
        tgt += toks + [eos]
        n = len(toks) + 1
        y_lens.append(n)
        pos += list(range(n))
        frames_per_row += [u.audio_len] * n
    a_lens = [u.audio_len for u in utts]
    depth = len(utts[0].audio_layers)
    audio_layers = [Tensor(np.concatenate([u.audio_layers[l] for u in utts], axis=0)) for l in range(depth)]
    visual = resample = None
    if with_visual:
        visual = Tensor(np.concatenate([u.visual_layers[-1] for u in utts], axis=0))
        resample = Tensor(block_resample_matrix([u.visual_len for u in utts], a_lens))
    single = len(utts) == 1
    return Batch(
        tokens_in=np.asarray(tok_in),
        targets=np.asarray(tgt),
        positions=np.asarray(pos),
        audio_layers=audio_layers,
        visual=visual,
        resample=resample,
        self_mask=_causal_blocks(y_lens),
        cross_mask=None if single else BlockMask.diagonal(_bounds(y_lens), _bounds(a_lens)),
        audio_self_mask=None if single else BlockMask.diagonal(_bounds(a_lens), _bounds(a_lens)),
        frames_per_row=np.asarray(frames_per_row),
        audio_lens=a_lens,
    )


class AvsrModel(Module):
    """Frozen encoders + alignment stack + base decoder + fusion layers."""

    def __init__(self, cfg: ModelConfig, use_sma: bool = True, use_amf: bool = True):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.audio_encoder = ToyEncoder(cfg.num_symbols, cfg.audio_in_dim, cfg.audio_dim, cfg.encoder_depth,
                                        cfg.num_heads, cfg.audio_frames_per_token, cfg.audio_rate_hz, AUDIO,
                                        seed=cfg.encoder_seed)
        self.visual_encoder = ToyEncoder(cfg.num_visemes, cfg.visual_in_dim, cfg.visual_dim, cfg.encoder_depth,
                                         cfg.num_heads, cfg.visual_frames_per_token, cfg.visual_rate_hz, VISUAL,
                                         seed=cfg.encoder_seed + 1)
        acfg = AttentionConfig(cfg.audio_dim, cfg.num_heads)
        self.decoder = BaseDecoder(cfg.decoder_vocab, acfg, cfg.decoder_layers, cfg.max_context, rng)
        self.projector = Projector(cfg.visual_dim, cfg.audio_dim, rng)
        self.sma = SmaStack(acfg, cfg.encoder_depth, rng, cfg.insertion_layers, cfg.per_layer_audio)
        self.amf = [AmfLayer(acfg, rng, cfg.probe_trainable) for _ in range(cfg.decoder_layers)]
        self.use_sma = use_sma
        self.use_amf = use_amf
        self.counters = {"sma": 0, "amf": 0}

    # parameter groups
    def fusion_modules(self) -> list[Module]:
        mods: list[Module] = []
        if self.use_amf:
            mods.append(self.projector)
            mods += self.amf
            if self.use_sma:
                mods.append(self.sma)
        return mods

    def set_trainable(self, modules: Iterable[Module]) -> None:
        self.freeze()
        for m in modules:
            m.unfreeze()

    def init_probes_from_decoder(self) -> None:
        """Copy each base layer's audio cross-attention query/key maps into its probe."""
        for amf, layer in zip(self.amf, self.decoder.layers):
            amf.probe_wq.value = layer.cross_attn.q_proj.weight.value.copy()
            amf.probe_wk.value = layer.cross_attn.k_proj.weight.value.copy()

    # forward
    def visual_memory(self, audio_layers: Sequence, visual, resample, audio_self_mask=None) -> Tensor:
        xv = matmul(resample, visual if isinstance(visual, Tensor) else Tensor(visual))
        xv = self.projector(xv)
        if self.use_sma:
            self.counters["sma"] += 1
            xv = align(xv, audio_layers, self.sma, audio_self_mask, audio_self_mask)
        return xv

    def decoder_logits(self, tokens, positions, xa, xv_hat, self_mask, cross_mask=None, frames=None,
                       trace: AmfTrace | None = None) -> Tensor:
        dec = self.decoder
        if int(np.max(positions)) >= dec.max_context:
            raise ValueError(f"prefix longer than max context {dec.max_context}")
        x = add(take_rows(dec.tok_emb, tokens), take_rows(dec.pos_emb, positions))
        for i, layer in enumerate(dec.layers):
            if self.use_amf and xv_hat is not None:
                self.counters["amf"] += 1
                x = amf_layer(x, xa, xv_hat, self.amf[i], cross_mask, cross_mask, frames, trace)
            x = layer(x, xa, self_mask, cross_mask)
        return dec.out(dec.ln_out(x))

    def batch_logits(self, batch: Batch) -> Tensor:
        xa = batch.audio_layers[-1]
        xv_hat = None
        if self.use_amf and batch.visual is not None:
            xv_hat = self.visual_memory(batch.audio_layers, batch.visual, batch.resample, batch.audio_self_mask)
        return self.decoder_logits(batch.tokens_in, batch.positions, xa, xv_hat, batch.self_mask,
                                   batch.cross_mask, batch.frames_per_row)

    def loss(self, batch: Batch) -> Tensor:
        return cross_entropy(self.batch_logits(batch), batch.targets)

    def memories(self, utt: EncodedUtterance) -> tuple[Tensor, Tensor | None]:
        """Audio memory and (if fusion is on) refined visual memory for one utterance."""
        xa = Tensor(utt.audio_layers[-1])
        if not self.use_amf:
            return xa, None
        with no_grad():
            r = Tensor(block_resample_matrix([utt.visual_len], [utt.audio_len]))
            xv_hat = self.visual_memory([Tensor(a) for a in utt.audio_layers], utt.visual_layers[-1], r)
        return xa, xv_hat


def decode_step(prefix: Sequence[int], xa, xv_hat, model: AvsrModel) -> np.ndarray:
    """Next-token distribution after ``prefix`` (which starts with BOS)."""
    prefix = [int(t) for t in prefix]
    if not prefix or prefix[0] != model.config.bos:
        raise ValueError("prefix must start with BOS")
    if len(prefix) > model.decoder.max_context:
        raise ValueError(f"prefix length {len(prefix)} exceeds max context {model.decoder.max_context}")
    xa = xa if isinstance(xa, Tensor) else Tensor(xa)
    xv = None if xv_hat is None else (xv_hat if isinstance(xv_hat, Tensor) else Tensor(xv_hat))
    n = len(prefix)
    with no_grad():
        logits = model.decoder_logits(np.asarray(prefix), np.arange(n), xa, xv,
                                      causal_mask(np.zeros(n), np.arange(n)))
    z = logits.value[-1]
    e = np.exp(z - z.max())
    return e / e.sum()


# N-best lists

@dataclass
class NBestList:
    uid: str
    candidates: list[tuple[int, ...]]
    infer_scores: list[float]
    forced: list[bool] = field(default_factory=list)
    rescore_scores: list[float] | None = None

    def __post_init__(self):
        if len(self.candidates) != len(self.infer_scores):
            raise ValueError("one score per candidate")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates must be distinct")
        if not self.forced:
            self.forced = [False] * len(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def top(self) -> tuple[int, ...]:
        return self.candidates[0]


def write_nbest(path, lists: Iterable[NBestList]) -> None:
    """One record per line: uid<TAB>rank<TAB>space-separated ids<TAB>s_infer."""
    with open(path, "w", encoding="utf-8") as f:
        for nb in lists:
            for rank, (cand, score) in enumerate(zip(nb.candidates, nb.infer_scores), start=1):
                f.write(f"{nb.uid}\t{rank}\t{' '.join(str(t) for t in cand)}\t{score!r}\n")


def read_nbest(path) -> list[NBestList]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"N-best file not found: {path}")
    grouped: dict[str, list[tuple[int, tuple[int, ...], float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            uid, rank, toks, score = parts
            cand = tuple(int(t) for t in toks.split()) if toks else ()
            grouped.setdefault(uid, []).append((int(rank), cand, float(score)))
    out = []
    for uid, rows in grouped.items():
        rows.sort()
        out.append(NBestList(uid, [r[1] for r in rows], [r[2] for r in rows]))
    return out


def beam_search(model: AvsrModel, xa, xv_hat, beam_width: int, n: int, max_len: int | None = None,
                uid: str = "") -> NBestList:
    """Length-normalised beam search for one utterance.

    Each step keeps the ``beam_width`` best expansions by cumulative
    log-probability (ties: lexicographic token ids); EOS expansions are
    finalised. ``max_len`` counts generated tokens including EOS, and
    s_infer divides by that count. Hypotheses still open at ``max_len`` are
    returned, flagged as forced, only if too few finished.
    """
    return beam_search_many(model, [(uid, xa, xv_hat)], beam_width, n, max_len)[0]


def beam_search_many(model: AvsrModel, items, beam_width: int, n: int, max_len: int | None = None,
                     chunk: int = 16) -> list[NBestList]:
    """Beam search over several (uid, xa, xv_hat) items, stacked per step."""
    if beam_width < 1 or n < 1 or n > beam_width:
        raise ValueError("need beam_width >= n >= 1")
    max_len = model.decoder.max_context if max_len is None else min(max_len, model.decoder.max_context)
    out: list[NBestList] = []
    for c0 in range(0, len(items), chunk):
        out += _beam_chunk(model, items[c0 : c0 + chunk], beam_width, n, max_len)
    return out


def _beam_chunk(model, items, beam_width, n, max_len) -> list[NBestList]:
    cfg = model.config
    as_t = lambda x: None if x is None else (x if isinstance(x, Tensor) else Tensor(x))
    mems = [(as_t(xa), as_t(xv)) for _, xa, xv in items]
    actives: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in items]
    finished: list[list[tuple[float, tuple[int, ...], bool]]] = [[] for _ in items]
    for step in range(max_len):
        live = [i for i, a in enumerate(actives) if a]
        if not live:
            break
        L = step + 1
        rows, blocks, frames, xa_parts, xv_parts = [], [], [], [], []
        r0 = k0 = 0
        for i in live:
            xa, xv = mems[i]
            nb = len(actives[i])
            rows += [[cfg.bos, *toks] for toks, _ in actives[i]]
            blocks.append((r0, r0 + nb * L, k0, k0 + xa.shape[0]))
            frames += [xa.shape[0]] * (nb * L)
            xa_parts.append(xa)
            xv_parts.append(xv)
            r0 += nb * L
            k0 += xa.shape[0]
        n_beams = r0 // L
        xa_all = xa_parts[0] if len(live) == 1 else Tensor(np.concatenate([x.value for x in xa_parts]))
        if xv_parts[0] is None:
            xv_all = None
        else:
            xv_all = xv_parts[0] if len(live) == 1 else Tensor(np.concatenate([x.value for x in xv_parts]))
        cross = None if len(live) == 1 else BlockMask(blocks, (r0, k0))
        with no_grad():
            logits = model.decoder_logits(np.asarray(rows).reshape(-1), np.tile(np.arange(L), n_beams), xa_all,
                                          xv_all, _causal_blocks([L] * n_beams), cross, np.asarray(frames))
        last = logits.value[L - 1 :: L]
        z = last - last.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        b = 0
        for i in live:
            expansions = []
            for toks, score in actives[i]:
                row = logp[b]
                b += 1
                for tok in range(cfg.decoder_vocab):
                    if tok != cfg.bos:
                        expansions.append((score + row[tok], toks + (tok,)))
            expansions.sort(key=lambda e: (-e[0], e[1]))
            nxt = []
            for score, toks in expansions[:beam_width]:
                if toks[-1] == cfg.eos:
                    finished[i].append((score / len(toks), toks[:-1], False))
                else:
                    nxt.append((toks, score))
            actives[i] = nxt
    results = []
    for (uid, _, _), fin, act in zip(items, finished, actives):
        ranked = sorted(fin, key=lambda f: (-f[0], f[1]))
        if len(ranked) < n:
            forced = sorted(((s / len(t), t, True) for t, s in act), key=lambda f: (-f[0], f[1]))
            ranked += forced[: n - len(ranked)]
        ranked = ranked[:n]
        results.append(NBestList(uid, [r[1] for r in ranked], [float(r[0]) for r in ranked], [r[2] for r in ranked]))
    return results


def greedy_decode(model: AvsrModel, xa, xv_hat, max_len: int | None = None) -> tuple[int, ...]:
    cfg = model.config
    max_len = model.decoder.max_context if max_len is None else max_len
    prefix = [cfg.bos]
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(decode_step(prefix, xa, xv_hat, model)))
        if tok == cfg.eos:
            break
        out.append(tok)
        prefix.append(tok)
    return tuple(out)


# training

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 200


@dataclass
class TrainResult:
    losses: list[float]

    def moving_average(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x.copy()
        c = np.cumsum(np.concatenate([[0.0], x]))
        return (c[window:] - c[:-window]) / window


def _train(model: AvsrModel, utts: Sequence[EncodedUtterance], cfg: TrainConfig, with_visual: bool,
           tag: str) -> TrainResult:
    params = model.trainable()
    if not params:
        raise ValueError("nothing to train")
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    initial = None
    for step in range(cfg.steps):
        idx = rng.choice(len(utts), size=min(cfg.batch_size, len(utts)), replace=False)
        batch = make_batch([utts[i] for i in sorted(idx)], model.config.bos, model.config.eos, with_visual)
        opt.zero_grad()
        loss = model.loss(batch)
        backward(loss)
        value = loss.item()
        losses.append(value)
        initial = check_divergence(losses, initial, tag, step)
        opt.step(cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("%s step %d loss %.4f", tag, step + 1, float(np.mean(losses[-cfg.log_every :])))
    return TrainResult(losses)


def train_base(utts: Sequence[EncodedUtterance], model: AvsrModel, cfg: TrainConfig) -> TrainResult:
    """Audio-only pre-training of the base decoder (the stand-in for a pretrained recogniser)."""
    model.set_trainable([model.decoder])
    use_amf = model.use_amf
    model.use_amf = False
    try:
        return _train(model, utts, cfg, with_visual=False, tag="base")
    finally:
        model.use_amf = use_amf
        model.freeze()


def train_stage1(utts: Sequence[EncodedUtterance], model: AvsrModel, cfg: TrainConfig) -> TrainResult:
    """Train only the alignment stack, projector and fusion layers."""
    if not (model.audio_encoder.frozen and model.visual_encoder.frozen):
        raise ValueError("encoders must be frozen for stage-1 training")
    model.set_trainable(model.fusion_modules())
    try:
        return _train(model, utts, cfg, with_visual=True, tag="stage1")
    finally:
        model.freeze()
