"""Visual-unit refinement: codebook, run-length units, prompt, LoRA scorer, rescoring."""

from __future__ import annotations

import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .amf_decoder import NBestList, check_divergence
from .encoders import sinusoidal_positions
from .kernels import nearest_centroid, run_starts
from .metrics import word_edit_distance
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
    concat_rows,
    cosine_lr,
    gelu,
    log_softmax_rows,
    matmul,
    mul,
    no_grad,
    scale,
    sum_all,
    sum_rows,
    take_rows,
    transpose,
)

log = logging.getLogger(__name__)


# codebook

@dataclass
class Codebook:
    centroids: np.ndarray
    inertia: float
    seed: int
    iterations: int
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("a codebook needs K >= 2 centroid rows")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(x.shape[0]))]
    d = nearest_centroid(x, x[centers])[1]
    for _ in range(1, k):
        total = d.sum()
        # D^2 sampling never picks a point already at zero distance
        idx = int(rng.choice(x.shape[0], p=d / total))
        centers.append(idx)
        d = np.minimum(d, nearest_centroid(x, x[idx : idx + 1])[1])
    return x[centers].copy()


def _lloyd(x: np.ndarray, c: np.ndarray, max_iters: int):
    labels, d = nearest_centroid(x, c)
    history = [float(d.sum())]
    iterations = 0
    for it in range(max_iters):
        new = np.empty_like(c)
        counts = np.bincount(labels, minlength=c.shape[0])
        for j in range(c.shape[0]):
            if counts[j]:
                # shifted mean: exact when every member is the same point
                members = x[labels == j]
                new[j] = members[0] + (members - members[0]).mean(axis=0)
        taken: set[int] = set()
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point worst served by its centroid
            far = nearest_centroid(x, new[counts > 0])[1] if (counts > 0).any() else d
            order = np.argsort(-far, kind="stable")
            pick = next(int(i) for i in order if int(i) not in taken)
            taken.add(pick)
            new[j] = x[pick]
            counts[j] = 1
        new_labels, new_d = nearest_centroid(x, new)
        if float(new_d.sum()) > history[-1]:
            # only rounding can raise the inertia here; keep the previous centroids
            break
        c, d = new, new_d
        history.append(float(d.sum()))
        iterations = it + 1
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return c, history, iterations


def kmeans_fit(frames, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 1) -> Codebook:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    With ``n_init > 1`` the lowest-inertia restart wins (earliest on ties).
    """
    x = np.ascontiguousarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("frames must be an N x D matrix")
    if k < 2:
        raise ValueError("K must be >= 2")
    if x.shape[0] < k:
        raise ValueError(f"{x.shape[0]} frames for K={k}")
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < k:
        raise ValueError(f"only {distinct} distinct points for K={k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c, history, iterations = _lloyd(x, _kmeans_pp(x, k, rng), max_iters)
        if best is None or history[-1] < best[1][-1]:
            best = (c, history, iterations)
    c, history, iterations = best
    return Codebook(c, history[-1], seed, iterations, history)


def quantize(x, cb: Codebook):
    """Nearest-centroid label; a single vector gives an int, a matrix gives an array."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    labels, _ = nearest_centroid(arr.reshape(1, -1) if single else arr, cb.centroids)
    return int(labels[0]) if single else labels


_MAGIC = b"AVURCB"
_VERSION = 1
_HEADER = struct.Struct("<6sHIIqId")


def save_codebook(cb: Codebook, path) -> None:
    """Little-endian binary: magic, version, K, D, seed, iterations, inertia, then K*D float64."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, cb.K, cb.dim, cb.seed, cb.iterations, cb.inertia))
        f.write(cb.centroids.astype("<f8").tobytes())


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated codebook file")
    magic, version, k, d, seed, iterations, inertia = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError("not a codebook file")
    if version != _VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    body = data[_HEADER.size :]
    if len(body) != 8 * k * d:
        raise ValueError("codebook size does not match its header")
    centroids = np.frombuffer(body, dtype="<f8").reshape(k, d).astype(np.float64)
    return Codebook(centroids, inertia, seed, iterations)


def export_codebook_text(cb: Codebook, path) -> None:
    lines = [f"# codebook v{_VERSION} K={cb.K} D={cb.dim} seed={cb.seed} iterations={cb.iterations} "
             f"inertia={cb.inertia!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cb.centroids]
    Path(path).write_text("\n".join(lines) + "\n")


# visual units

@dataclass
class VisualUnitSequence:
    labels: np.ndarray
    features: np.ndarray
    spans: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.spans = np.asarray(self.spans, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        m = len(self.labels)
        if self.spans.shape != (m,) or self.features.shape[0] != m:
            raise ValueError("labels, spans and features disagree in length")
        if m and (self.spans < 1).any():
            raise ValueError("span lengths must be positive")
        if m > 1 and (self.labels[1:] == self.labels[:-1]).any():
            raise ValueError("adjacent units must have distinct labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_frames(self) -> int:
        return int(self.spans.sum())

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.spans)[:-1]]).astype(np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.starts + (self.spans - 1) / 2.0

    def expand(self) -> np.ndarray:
        """Per-frame labels (inverse of the compression on labels)."""
        return np.repeat(self.labels, self.spans)


def rle_compress(labels, frames) -> VisualUnitSequence:
    labels = np.asarray(labels, dtype=np.int64)
    x = frames.frames if hasattr(frames, "frames") else np.asarray(frames, dtype=np.float64)
    if labels.ndim != 1 or x.ndim != 2 or labels.shape[0] != x.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} frames")
    starts = run_starts(labels)
    ends = np.append(starts[1:], labels.shape[0])
    feats = np.add.reduceat(x, starts, axis=0) / (ends - starts)[:, None] if len(starts) else x[:0]
    return VisualUnitSequence(labels[starts], feats, ends - starts)


def visual_units(frames, cb: Codebook) -> VisualUnitSequence:
    x = frames.frames if hasattr(frames, "frames") else np.asarray(frames, dtype=np.float64)
    return rle_compress(quantize(x, cb), x)


class UnitCache:
    """Units computed once per utterance; concurrent reads, exclusive insertion."""

    def __init__(self):
        self._items: dict[str, VisualUnitSequence] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, uid: str, compute: Callable[[], VisualUnitSequence]) -> VisualUnitSequence:
        item = self._items.get(uid)
        if item is not None:
            self.hits += 1
            return item
        with self._lock:
            item = self._items.get(uid)
            if item is None:
                self.misses += 1
                item = compute()
                self._items[uid] = item
            else:
                self.hits += 1
        return item

    def __len__(self) -> int:
        return len(self._items)


# prompt

def load_template(version: str = "v1") -> str:
    return resources.files("avur").joinpath("resources", f"prompt_template_{version}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class Prompt:
    text: str
    units: VisualUnitSequence = field(compare=False, repr=False)
    candidates: tuple[tuple[int, ...], ...]


def _render_candidate(c) -> str:
    return "{" + " ".join(str(int(t)) for t in c) + "}"


def build_prompt(units: VisualUnitSequence, nbest, template: str | None = None) -> Prompt:
    cands = nbest.candidates if isinstance(nbest, NBestList) else list(nbest)
    if not cands:
        raise ValueError("empty N-best list")
    template = load_template() if template is None else template
    text = template.format(tokens=" ".join(str(int(k)) for k in units.labels),
                           candidates=", ".join(_render_candidate(c) for c in cands))
    return Prompt(text, units, tuple(tuple(int(t) for t in c) for c in cands))


# scorer

class LoraLinear(Module):
    """Frozen linear map plus a trainable low-rank update ``(alpha/r) * B A``."""

    def __init__(self, base: Linear, rank: int, alpha: float, dropout: float, rng: np.random.Generator):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        d_in, d_out = base.weight.shape
        self.base = base
        self.lora_a = Param(rng.uniform(-1.0, 1.0, size=(rank, d_in)) / math.sqrt(d_in))
        self.lora_b = Param(np.zeros((d_out, rank)))
        self.rank = rank
        self.scaling = alpha / rank
        self.dropout = dropout
        self.training = False
        self._rng = np.random.default_rng(rng.integers(2**32))

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        h = x
        if self.training and self.dropout > 0:
            keep = (self._rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
            h = mul(x, Tensor(keep))
        delta = matmul(matmul(h, transpose(self.lora_a)), transpose(self.lora_b))
        return add(y, scale(delta, self.scaling))

    def adapters(self) -> list[Param]:
        return [self.lora_a, self.lora_b]


@dataclass(frozen=True)
class ScorerConfig:
    num_symbols: int = 20
    codebook_size: int = 16
    unit_dim: int = 24
    model_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    max_context: int = 48
    time_dim: int = 16
    head_hidden: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_dropout: float = 0.05
    use_unit_features: bool = True
    seed: int = 0


INSTR, CAND, END = 0, 1, 2


class ScorerLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d, rng)

    def __call__(self, x: Tensor, mask) -> Tensor:
        h = self.ln1(x)
        x = add(x, self.attn(h, h, h, mask))
        return add(x, self.ffn(self.ln2(x)))


class ScoreHead(Module):
    """Per-token scalar correction; zero output layer so it starts silent."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.fc2.weight.value[:] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class _Rows:
    """Row bookkeeping for a stacked batch of scorer sequences."""

    index: list[int]
    lengths: list[int]
    spans: list[tuple[int, int]]
    targets: np.ndarray


class Scorer(Module):
    """Small causal language model standing in for the rescoring LLM.

    Each candidate is scored in its own sequence
    ``[INSTR] units... [CAND] y_1 .. y_n [END]``, so candidates never see one
    another. The score is the mean over the n+1 predictions made from
    ``[CAND]`` through ``y_n`` of the next-token log-probability plus a
    learned per-token head term.

    ``pretrain_lm`` fits the base (special embeddings, transformer, output
    layer) on text alone; ``adapt_mode`` then freezes it and leaves the
    unit/token projections, the head and the LoRA adapters on q/k/v/o
    trainable.
    """

    def __init__(self, cfg: ScorerConfig):
        self.config = cfg
        base_rng = np.random.default_rng([cfg.seed, 0])
        rng = np.random.default_rng([cfg.seed, 1])
        d = cfg.model_dim
        acfg = AttentionConfig(d, cfg.num_heads)
        self.special = Param(base_rng.normal(0.0, 1.0, size=(3, d)))
        self.layers = [ScorerLayer(acfg, base_rng) for _ in range(cfg.num_layers)]
        self.ln_out = LayerNorm(d)
        self.lm_out = Linear(d, cfg.num_symbols + 1, base_rng)
        self.unit_proj = Linear(cfg.codebook_size + cfg.unit_dim + cfg.time_dim, d, rng)
        self.token_proj = Linear(cfg.num_symbols + cfg.time_dim, d, rng)
        self.head = ScoreHead(d, cfg.head_hidden, rng)
        for layer in self.layers:
            a = layer.attn
            for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
                setattr(a, name, LoraLinear(getattr(a, name), cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng))
        self._positions = sinusoidal_positions(cfg.max_context, d)
        self.adapt_mode()

    def lora_layers(self) -> list[LoraLinear]:
        return [getattr(l.attn, n) for l in self.layers for n in ("q_proj", "k_proj", "v_proj", "o_proj")]

    def adapter_params(self) -> list[Param]:
        return [p for m in self.lora_layers() for p in m.adapters()]

    def adapted_params(self) -> list[Param]:
        return self.adapter_params() + self.unit_proj.params() + self.token_proj.params() + self.head.params()

    def base_params(self) -> list[Param]:
        adapted = {id(p) for p in self.adapted_params()}
        return [p for p in self.params() if id(p) not in adapted]

    def adapt_mode(self) -> None:
        """Freeze the base; train projections, head and LoRA adapters."""
        self.freeze()
        for p in self.adapted_params():
            p.requires_grad = True

    def pretrain_mode(self) -> None:
        """Train the base language model and the token projection only."""
        self.freeze()
        for p in self.base_params() + self.token_proj.params():
            p.requires_grad = True

    def train_mode(self, on: bool = True) -> None:
        for m in self.lora_layers():
            m.training = on

    # inputs
    def _time(self, t) -> np.ndarray:
        """Sinusoidal code of (possibly fractional) visual-frame times."""
        t = np.asarray(t, dtype=np.float64)[:, None]
        i = np.arange(self.config.time_dim)[None, :]
        rates = 1.0 / np.power(100.0, (2 * (i // 2)) / self.config.time_dim)
        return np.where(i % 2 == 0, np.sin(t * rates), np.cos(t * rates))

    def unit_inputs(self, units: VisualUnitSequence) -> np.ndarray:
        cfg = self.config
        if len(units) and units.labels.max() >= cfg.codebook_size:
            raise ValueError(f"unit label {units.labels.max()} outside codebook of {cfg.codebook_size}")
        onehot = np.zeros((len(units), cfg.codebook_size))
        onehot[np.arange(len(units)), units.labels] = 1.0
        feats = units.features if cfg.use_unit_features else np.zeros((len(units), cfg.unit_dim))
        if feats.shape[1] != cfg.unit_dim:
            raise ValueError(f"unit features are {feats.shape[1]}-dim, scorer expects {cfg.unit_dim}")
        return np.concatenate([onehot, feats, self._time(units.centers)], axis=1)

    def token_inputs(self, cand) -> np.ndarray:
        cfg = self.config
        cand = np.asarray(cand, dtype=np.intp)
        if len(cand) and (cand.min() < 0 or cand.max() >= cfg.num_symbols):
            raise ValueError(f"candidate symbol outside 0..{cfg.num_symbols - 1}")
        onehot = np.zeros((len(cand), cfg.num_symbols))
        onehot[np.arange(len(cand)), cand] = 1.0
        return np.concatenate([onehot, self._time(np.arange(len(cand)))], axis=1)

    # forward
    def _token_scores(self, lists) -> tuple[Tensor, Tensor, _Rows]:
        """Per-row next-token log-probabilities and head outputs for stacked sequences."""
        cfg = self.config
        unit_rows, tok_rows = [], []
        index: list[int] = []
        lengths: list[int] = []
        spans: list[tuple[int, int]] = []
        targets: list[int] = []
        n_units = sum(0 if u is None else len(u) for u, _ in lists)
        u_off = t_off = 0
        for units, cands in lists:
            m = 0 if units is None else len(units)
            ui = 3 + u_off + np.arange(m)
            if m:
                unit_rows.append(self.unit_inputs(units))
            u_off += m
            for c in cands:
                n = len(c)
                length = m + n + 3
                if length > cfg.max_context:
                    raise ValueError(f"sequence of {length} tokens exceeds scorer context {cfg.max_context}")
                if n:
                    tok_rows.append(self.token_inputs(c))
                ti = 3 + n_units + t_off + np.arange(n)
                t_off += n
                start = len(index)
                index.extend([INSTR, *ui, CAND, *ti, END])
                # predictions made at [CAND], y_1 .. y_n target y_1 .. y_n, END
                targets.extend([-1] * (m + 1) + [int(t) for t in c] + [cfg.num_symbols, -1])
                spans.append((start + m + 1, start + m + n + 2))
                lengths.append(length)
        parts = [self.special]
        if unit_rows:
            parts.append(self.unit_proj(Tensor(np.concatenate(unit_rows))))
        if tok_rows:
            parts.append(self.token_proj(Tensor(np.concatenate(tok_rows))))
        x = take_rows(concat_rows(parts), np.asarray(index))
        x = add(x, Tensor(np.concatenate([self._positions[:n] for n in lengths])))
        bounds = np.concatenate([[0], np.cumsum(lengths)]).tolist()
        tri = {n: np.tril(np.ones((n, n), dtype=bool)) for n in set(lengths)}
        mask = BlockMask.diagonal(bounds, bounds, [tri[n] for n in lengths]) if len(lengths) > 1 else tri[lengths[0]]
        for layer in self.layers:
            x = layer(x, mask)
        h = self.ln_out(x)
        tgt = np.asarray(targets)
        pick = np.zeros((len(index), cfg.num_symbols + 1))
        rows = np.flatnonzero(tgt >= 0)
        pick[rows, tgt[rows]] = 1.0
        logp = sum_rows(mul(log_softmax_rows(self.lm_out(h)), Tensor(pick)))
        return logp, self.head(h), _Rows(index, lengths, spans, tgt)

    def score_lists(self, lists: Sequence[tuple[VisualUnitSequence, Sequence[Sequence[int]]]]) -> Tensor:
        """Scores for every candidate of every list, stacked as one column."""
        logp, head, rows = self._token_scores(lists)
        pool = np.zeros((len(rows.spans), len(rows.index)))
        for i, (a, b) in enumerate(rows.spans):
            pool[i, a:b] = 1.0 / (b - a)
        return matmul(Tensor(pool), add(logp, head))

    def lm_loss(self, sequences: Sequence[Sequence[int]], units: Sequence[VisualUnitSequence] | None = None) -> Tensor:
        """Mean next-token cross-entropy over sequences, optionally after a visual-unit prefix each."""
        lists = [(None, list(sequences))] if units is None else [(u, [y]) for u, y in zip(units, sequences)]
        logp, _, rows = self._token_scores(lists)
        w = np.zeros((1, len(rows.index)))
        w[0, rows.targets >= 0] = -1.0 / int((rows.targets >= 0).sum())
        return matmul(Tensor(w), logp)

    def __call__(self, units: VisualUnitSequence, cands) -> Tensor:
        return self.score_lists([(units, cands)])


def score_candidates(prompt: Prompt, scorer: Scorer) -> np.ndarray:
    with no_grad():
        return scorer(prompt.units, prompt.candidates).value[:, 0].copy()


# selection, loss, rescoring

def select_oracle(nbest: NBestList, reference) -> int:
    """Closest candidate by word edit distance; ties go to higher s_infer, then lower index."""
    n_ref = len(reference.split()) if isinstance(reference, str) else len(reference)
    if n_ref == 0:
        raise ValueError("empty reference")
    keys = [(word_edit_distance(reference, c), -s, i)
            for i, (c, s) in enumerate(zip(nbest.candidates, nbest.infer_scores))]
    return min(keys)[2]


def listwise_loss(scores, i_gt: int) -> Tensor:
    """-log softmax(scores)[i_gt]; ``scores`` is an N-vector or N x 1 column."""
    r = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64).reshape(-1, 1))
    row = transpose(r) if r.shape[1] == 1 else r
    n = row.shape[1]
    if n < 2:
        raise ValueError("list-wise loss needs N >= 2")
    if not 0 <= i_gt < n:
        raise IndexError(f"i_gt {i_gt} outside 0..{n - 1}")
    pick = np.zeros((1, n))
    pick[0, i_gt] = -1.0
    return sum_all(mul(log_softmax_rows(row), Tensor(pick)))


def _znorm(s: np.ndarray) -> np.ndarray:
    sd = s.std()
    return np.zeros_like(s) if sd == 0.0 else (s - s.mean()) / sd


def rescore(nbest: NBestList, units: VisualUnitSequence | None, scorer: Scorer | None, lam: float = 0.0,
            scores=None) -> NBestList:
    """Re-rank by ``lam * z(s_infer) + (1 - lam) * r``; stable, so first-pass rank breaks ties."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if scores is None:
        scores = score_candidates(build_prompt(units, nbest), scorer)
    r = np.asarray(scores, dtype=np.float64)
    if r.shape != (len(nbest),):
        raise ValueError("one rescoring score per candidate")
    key = lam * _znorm(np.asarray(nbest.infer_scores, dtype=np.float64)) + (1.0 - lam) * r
    order = sorted(range(len(nbest)), key=lambda i: -key[i])
    return NBestList(nbest.uid, [nbest.candidates[i] for i in order], [nbest.infer_scores[i] for i in order],
                     [nbest.forced[i] for i in order], [float(r[i]) for i in order])


# training

@dataclass
class ScorerTrainConfig:
    steps: int = 1500
    batch_lists: int = 8
    lr: float = 3e-4
    new_lr_scale: float = 10.0
    weight_decay: float = 0.01
    warmup: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 250


@dataclass
class RescoreExample:
    units: VisualUnitSequence
    nbest: NBestList
    i_gt: int


def make_examples(nbests: Sequence[NBestList], units: Sequence[VisualUnitSequence], references) -> list[RescoreExample]:
    """Training lists (N >= 2 only) with their oracle index."""
    out = []
    for nb, u, ref in zip(nbests, units, references):
        if len(nb) >= 2:
            out.append(RescoreExample(u, nb, select_oracle(nb, ref)))
    return out


def batch_loss(scorer: Scorer, examples: Sequence[RescoreExample]) -> Tensor:
    scores = scorer.score_lists([(e.units, e.nbest.candidates) for e in examples])
    total = None
    off = 0
    for e in examples:
        n = len(e.nbest)
        loss = listwise_loss(take_rows(scores, np.arange(off, off + n)), e.i_gt)
        total = loss if total is None else add(total, loss)
        off += n
    return scale(total, 1.0 / len(examples))


@dataclass
class LmPretrainConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 5e-3
    weight_decay: float = 0.01
    warmup: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 250


def pretrain_lm(scorer: Scorer, corpus: Sequence[Sequence[int]], cfg: LmPretrainConfig) -> list[float]:
    """Text-only next-token training of the scorer base, then freeze it for adaptation."""
    if not corpus:
        raise ValueError("empty text corpus")
    scorer.pretrain_mode()
    opt = AdamW(scorer.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 6])
    losses: list[float] = []
    initial = None
    try:
        for step in range(cfg.steps):
            idx = rng.choice(len(corpus), size=min(cfg.batch, len(corpus)), replace=False)
            opt.zero_grad()
            loss = scorer.lm_loss([corpus[i] for i in sorted(idx)])
            backward(loss)
            losses.append(loss.item())
            initial = check_divergence(losses, initial, "lm", step)
            opt.step(cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup))
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("lm step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
    finally:
        scorer.adapt_mode()
    return losses


def warmup_alignment(scorer: Scorer, pairs: Sequence[tuple[VisualUnitSequence, Sequence[int]]],
                     cfg: LmPretrainConfig) -> list[float]:
    """Next-token training on (units, reference) pairs with the base frozen.

    Only the adapted parameters move; it gives the unit projection and the
    adapters a dense per-token signal before list-wise training.
    """
    if not pairs:
        raise ValueError("no alignment pairs")
    scorer.adapt_mode()
    params = scorer.trainable()
    fresh = {id(p) for p in scorer.unit_proj.params() + scorer.head.params()}
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                lr_scale=[10.0 if id(p) in fresh else 1.0 for p in params])
    rng = np.random.default_rng([cfg.seed, 7])
    losses: list[float] = []
    initial = None
    scorer.train_mode(True)
    try:
        for step in range(cfg.steps):
            idx = sorted(rng.choice(len(pairs), size=min(cfg.batch, len(pairs)), replace=False))
            opt.zero_grad()
            loss = scorer.lm_loss([pairs[i][1] for i in idx], [pairs[i][0] for i in idx])
            backward(loss)
            losses.append(loss.item())
            initial = check_divergence(losses, initial, "align", step)
            opt.step(cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup))
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("align step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
    finally:
        scorer.train_mode(False)
    return losses


def train_scorer(scorer: Scorer, examples: Sequence[RescoreExample], cfg: ScorerTrainConfig) -> list[float]:
    if not examples:
        raise ValueError("no training lists with N >= 2")
    scorer.adapt_mode()
    params = scorer.trainable()
    # freshly initialised modules move faster than the adapters on the pretrained base
    fresh = {id(p) for p in scorer.unit_proj.params() + scorer.head.params()}
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                lr_scale=[cfg.new_lr_scale if id(p) in fresh else 1.0 for p in params])
    rng = np.random.default_rng([cfg.seed, 5])
    losses: list[float] = []
    initial = None
    scorer.train_mode(True)
    try:
        for step in range(cfg.steps):
            idx = rng.choice(len(examples), size=min(cfg.batch_lists, len(examples)), replace=False)
            opt.zero_grad()
            loss = batch_loss(scorer, [examples[i] for i in sorted(idx)])
            backward(loss)
            losses.append(loss.item())
            initial = check_divergence(losses, initial, "scorer", step)
            opt.step(cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup))
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("scorer step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
    finally:
        scorer.train_mode(False)
    return losses
