"""Synthetic audio-visual task: symbol streams, viseme collapse, noise mixing."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoders import AUDIO, VISUAL, EncodedUtterance, FeatureSequence

CLEAN = math.inf
DEFAULT_SNRS = (CLEAN, 10.0, 5.0, 0.0, -5.0, -10.0)


@dataclass
class ToyTaskConfig:
    vocab_size: int = 20
    num_visemes: int = 8
    viseme_map: tuple[int, ...] | None = None
    min_len: int = 5
    max_len: int = 12
    n_train: int = 500
    n_dev: int = 50
    n_test: int = 100
    audio_dim: int = 16
    visual_dim: int = 16
    audio_frames_per_symbol: int = 4
    visual_frames_per_symbol: int = 1
    jitter: float = 0.1
    sampler: str = "markov"
    branching: int = 3
    transition_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("empty vocabulary")
        if self.num_visemes < 1 or self.num_visemes > self.vocab_size:
            raise ValueError("need 1 <= num_visemes <= vocab_size")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad utterance length range")
        if self.sampler not in ("uniform", "markov"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "markov" and not (1 <= self.branching <= self.vocab_size and 0 <= self.transition_noise <= 1):
            raise ValueError("markov sampler needs 1 <= branching <= vocab_size and noise in [0, 1]")
        if self.viseme_map is not None:
            self.viseme_map = tuple(int(v) for v in self.viseme_map)
            check_viseme_map(self.viseme_map, self.vocab_size, self.num_visemes)

    def resolved_viseme_map(self) -> tuple[int, ...]:
        if self.viseme_map is not None:
            return self.viseme_map
        return make_viseme_map(self.vocab_size, self.num_visemes, self.seed)

    def transition_matrix(self) -> np.ndarray:
        """Row-stochastic next-symbol probabilities (uniform rows for the uniform sampler).

        The Markov sampler gives each symbol ``branching`` favoured successors,
        mixed with ``transition_noise`` of uniform mass, so sequences carry
        bigram structure a language prior can exploit.
        """
        v = self.vocab_size
        if self.sampler == "uniform":
            return np.full((v, v), 1.0 / v)
        rng = np.random.default_rng([self.seed, 8])
        t = np.full((v, v), self.transition_noise / v)
        # successors come from disjoint random permutations,
        # so the matrix stays doubly stochastic and symbol marginals uniform
        succ = np.empty((v, 0), dtype=np.intp)
        while succ.shape[1] < self.branching:
            perm = rng.permutation(v)
            if (succ == perm[:, None]).any():
                continue
            succ = np.concatenate([succ, perm[:, None]], axis=1)
        for a in range(v):
            t[a, succ[a]] += (1.0 - self.transition_noise) / self.branching
        return t


def check_viseme_map(vmap, vocab_size: int, num_visemes: int) -> None:
    if len(vmap) != vocab_size:
        raise ValueError(f"viseme map covers {len(vmap)} of {vocab_size} symbols")
    if min(vmap) < 0 or max(vmap) >= num_visemes:
        raise ValueError("viseme id out of range")
    if len(set(vmap)) == vocab_size and vocab_size > 1:
        raise ValueError("viseme map is injective; lip reading would be unambiguous")


def make_viseme_map(vocab_size: int, num_visemes: int, seed: int) -> tuple[int, ...]:
    """Random surjective many-to-one map (every viseme used at least once)."""
    rng = np.random.default_rng([seed, 7])
    base = np.arange(vocab_size) % num_visemes
    vmap = tuple(int(v) for v in rng.permutation(base))
    check_viseme_map(vmap, vocab_size, num_visemes)
    return vmap


_INT_TUPLE = ("viseme_map",)
_FLOAT = ("jitter", "transition_noise")
_STR = ("sampler",)


def load_config(path) -> ToyTaskConfig:
    """Read ``key = value`` lines under a ``[task]`` section; unknown keys are an error."""
    return _config_from_text(Path(path).read_text())


def _config_from_text(text: str) -> ToyTaskConfig:
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[task]\n" + text
    parser.read_string(text)
    if parser.sections() != ["task"]:
        raise ValueError(f"expected a single [task] section, got {parser.sections()}")
    known = {f.name: f for f in fields(ToyTaskConfig)}
    kwargs = {}
    for key, raw in parser["task"].items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        if key in _INT_TUPLE:
            kwargs[key] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif key in _FLOAT:
            kwargs[key] = float(raw)
        elif key in _STR:
            kwargs[key] = raw.strip()
        else:
            kwargs[key] = int(raw)
    return ToyTaskConfig(**kwargs)


def dump_config(cfg: ToyTaskConfig) -> str:
    lines = ["[task]"]
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if val is None:
            continue
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


@dataclass
class Utterance:
    uid: str
    tokens: np.ndarray
    audio: FeatureSequence
    visual: FeatureSequence

    @property
    def reference(self) -> tuple[int, ...]:
        return tuple(int(t) for t in self.tokens)


@dataclass
class ToyDataset:
    config: ToyTaskConfig
    viseme_map: tuple[int, ...]
    symbol_embeddings: np.ndarray
    viseme_embeddings: np.ndarray
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    @property
    def train(self) -> list[Utterance]:
        return self.splits["train"]

    @property
    def dev(self) -> list[Utterance]:
        return self.splits["dev"]

    @property
    def test(self) -> list[Utterance]:
        return self.splits["test"]


def render(tokens, table: np.ndarray, frames_per_symbol: int, jitter: float, rng) -> np.ndarray:
    x = np.repeat(table[np.asarray(tokens, dtype=np.intp)], frames_per_symbol, axis=0)
    if jitter:
        x = x + jitter * rng.standard_normal(x.shape)
    return x


def sample_symbols(trans: np.ndarray, length: int, rng) -> np.ndarray:
    """First symbol uniform, then one Markov step per symbol."""
    v = trans.shape[0]
    toks = np.empty(length, dtype=np.int64)
    toks[0] = rng.integers(v)
    cum = np.cumsum(trans, axis=1)
    for i in range(1, length):
        toks[i] = min(int(np.searchsorted(cum[toks[i - 1]], rng.random(), side="right")), v - 1)
    return toks


def gen_dataset(cfg: ToyTaskConfig) -> ToyDataset:
    vmap = cfg.resolved_viseme_map()
    rng = np.random.default_rng([cfg.seed, 1])
    sym = rng.standard_normal((cfg.vocab_size, cfg.audio_dim))
    vis = rng.standard_normal((cfg.num_visemes, cfg.visual_dim))
    vmap_arr = np.asarray(vmap)
    trans = cfg.transition_matrix()
    ds = ToyDataset(cfg, vmap, sym, vis)
    for split_id, (name, count) in enumerate((("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test))):
        srng = np.random.default_rng([cfg.seed, 2, split_id])
        utts = []
        for i in range(count):
            length = int(srng.integers(cfg.min_len, cfg.max_len + 1))
            toks = sample_symbols(trans, length, srng)
            audio = render(toks, sym, cfg.audio_frames_per_symbol, cfg.jitter, srng)
            visual = render(vmap_arr[toks], vis, cfg.visual_frames_per_symbol, cfg.jitter, srng)
            utts.append(Utterance(f"{name}-{i:04d}", toks,
                                  FeatureSequence(audio, 100.0, AUDIO),
                                  FeatureSequence(visual, 100.0 / cfg.audio_frames_per_symbol, VISUAL)))
        ds.splits[name] = utts
    return ds


def save_dataset(path, ds: ToyDataset) -> None:
    """Flat npz: per split, concatenated tokens/frames plus the per-utterance lengths."""
    arrays = {"config": np.array(dump_config(ds.config)), "viseme_map": np.asarray(ds.viseme_map),
              "symbol_embeddings": ds.symbol_embeddings, "viseme_embeddings": ds.viseme_embeddings}
    for name, utts in ds.splits.items():
        arrays[f"{name}/lengths"] = np.array([len(u.tokens) for u in utts], dtype=np.int64)
        arrays[f"{name}/tokens"] = np.concatenate([u.tokens for u in utts]).astype(np.int64)
        arrays[f"{name}/audio"] = np.concatenate([u.audio.frames for u in utts])
        arrays[f"{name}/visual"] = np.concatenate([u.visual.frames for u in utts])
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_dataset(path) -> ToyDataset:
    with np.load(path) as z:
        cfg = _config_from_text(str(z["config"]))
        ds = ToyDataset(cfg, tuple(int(v) for v in z["viseme_map"]), z["symbol_embeddings"], z["viseme_embeddings"])
        for name in ("train", "dev", "test"):
            lengths = z[f"{name}/lengths"]
            cuts = np.cumsum(lengths)[:-1]
            toks = np.split(z[f"{name}/tokens"], cuts)
            audio = np.split(z[f"{name}/audio"], cuts * cfg.audio_frames_per_symbol)
            visual = np.split(z[f"{name}/visual"], cuts * cfg.visual_frames_per_symbol)
            ds.splits[name] = [Utterance(f"{name}-{i:04d}", t, FeatureSequence(a, 100.0, AUDIO),
                                         FeatureSequence(v, 100.0 / cfg.audio_frames_per_symbol, VISUAL))
                               for i, (t, a, v) in enumerate(zip(toks, audio, visual))]
    return ds


# noise

@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    kind: str = "babble"

    def __post_init__(self):
        if self.kind not in ("gaussian", "babble"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr must be finite or the +inf clean sentinel")

    @property
    def clean(self) -> bool:
        return self.snr_db == math.inf


def energy(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def measured_snr(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(energy(signal) / energy(noise))


def babble_stream(length: int, others, rng) -> np.ndarray:
    """Sum of three other utterances' audio frames, tiled or cropped to ``length``."""
    if len(others) < 3:
        raise ValueError("babble needs at least 3 other utterances")
    picks = rng.choice(len(others), size=3, replace=False)
    out = 0.0
    for p in picks:
        frames = others[p].frames if isinstance(others[p], FeatureSequence) else np.asarray(others[p])
        reps = -(-length // frames.shape[0])
        start = int(rng.integers(0, frames.shape[0]))
        tiled = np.roll(np.tile(frames, (reps + 1, 1)), -start, axis=0)
        out = out + tiled[:length]
    return out


def noise_realization(audio: FeatureSequence, kind: str, seed, others=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return rng.standard_normal(audio.frames.shape)
    return babble_stream(audio.length, others, rng)


def mix_noise(audio: FeatureSequence, spec: NoiseSpec, seed, others=None, noise=None) -> FeatureSequence:
    """Add noise scaled to ``spec.snr_db`` on mean-squared feature energy.

    ``noise`` overrides the generated realization so one draw can be reused
    across SNRs.
    """
    if spec.clean:
        return audio
    sig = energy(audio.frames)
    if sig == 0.0:
        raise ValueError("zero-energy signal has no defined SNR")
    if noise is None:
        noise = noise_realization(audio, spec.kind, seed, others)
    n_energy = energy(noise)
    if n_energy == 0.0:
        raise ValueError("zero-energy noise")
    gain = math.sqrt(sig / (n_energy * 10.0 ** (spec.snr_db / 10.0)))
    return FeatureSequence(audio.frames + gain * noise, audio.frame_rate_hz, audio.modality)


def others_for(utts: list[Utterance], i: int) -> list[FeatureSequence]:
    return [u.audio for j, u in enumerate(utts) if j != i]


def encode_split(model, utts: list[Utterance], spec: NoiseSpec, seed: int, pool: list[Utterance] | None = None
                 ) -> list[EncodedUtterance]:
    """Run the frozen encoders once per utterance under one noise condition.

    Each utterance keeps the same noise draw at every SNR (seeded by its
    index), so conditions differ only in the noise gain.
    """
    pool = utts if pool is None else pool
    out = []
    for i, u in enumerate(utts):
        audio = u.audio
        if not spec.clean:
            others = [p.audio for p in pool if p.uid != u.uid]
            noise = noise_realization(u.audio, spec.kind, [seed, 3, i], others)
            audio = mix_noise(u.audio, spec, None, noise=noise)
        a = model.audio_encoder.encode_frames(audio.frames)
        v = model.visual_encoder.encode_frames(u.visual.frames)
        out.append(EncodedUtterance(u.uid, u.tokens, a, v, {"snr": spec.snr_db}))
    return out


def splice(a: Utterance, b: Utterance, length: int, rng, uid: str) -> Utterance:
    """Join a random crop of ``a`` with a random crop of ``b`` (``length`` symbols, capped by the sources)."""
    length = min(length, len(a.tokens) + len(b.tokens))
    fa = a.audio.length // len(a.tokens)
    fv = a.visual.length // len(a.tokens)
    na = int(rng.integers(max(1, length - len(b.tokens)), min(len(a.tokens), length - 1) + 1))
    nb = length - na
    sa = int(rng.integers(0, len(a.tokens) - na + 1))
    sb = int(rng.integers(0, len(b.tokens) - nb + 1))
    toks = np.concatenate([a.tokens[sa : sa + na], b.tokens[sb : sb + nb]])
    audio = np.concatenate([a.audio.frames[sa * fa : (sa + na) * fa], b.audio.frames[sb * fa : (sb + nb) * fa]])
    visual = np.concatenate([a.visual.frames[sa * fv : (sa + na) * fv], b.visual.frames[sb * fv : (sb + nb) * fv]])
    return Utterance(uid, toks, FeatureSequence(audio, a.audio.frame_rate_hz, AUDIO),
                     FeatureSequence(visual, a.visual.frame_rate_hz, VISUAL))


def training_pool(model, utts: list[Utterance], size: int, snrs, seed: int, kind: str = "babble",
                  min_len: int = 5, max_len: int = 12) -> list[EncodedUtterance]:
    """Encoded training examples: spliced crops of training utterances at random SNRs.

    Splicing keeps every frame from the training split but yields far more
    distinct symbol sequences, which stops the decoder memorising them.
    """
    rng = np.random.default_rng([seed, 4])
    snrs = list(snrs)
    out = []
    for i in range(size):
        ia, ib = rng.choice(len(utts), size=2, replace=False)
        length = int(rng.integers(min_len, max_len + 1))
        u = splice(utts[ia], utts[ib], length, rng, f"aug-{i:05d}")
        spec = NoiseSpec(snrs[int(rng.integers(len(snrs)))], kind)
        audio = u.audio
        if not spec.clean:
            picks = rng.choice(len(utts), size=4, replace=False)
            others = [utts[j].audio for j in picks if j not in (ia, ib)][:3]
            if len(others) < 3:
                others = [utts[j].audio for j in picks[:3]]
            audio = mix_noise(u.audio, spec, None, noise=noise_realization(u.audio, kind, rng.integers(2**32), others))
        a = model.audio_encoder.encode_frames(audio.frames)
        v = model.visual_encoder.encode_frames(u.visual.frames)
        out.append(EncodedUtterance(u.uid, u.tokens, a, v, {"snr": spec.snr_db}))
    return out
