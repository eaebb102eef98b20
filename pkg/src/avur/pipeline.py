"""Two-stage training, decoding, rescoring and CSV reports on the toy task."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .amf_decoder import AvsrModel, ModelConfig, NBestList, TrainConfig, beam_search_many, read_nbest, \
    train_base, train_stage1, write_nbest
from .data import CLEAN, DEFAULT_SNRS, NoiseSpec, ToyDataset, ToyTaskConfig, encode_split, gen_dataset, \
    sample_symbols, training_pool
from .encoders import EncodedUtterance
from .metrics import corpus_wer
from .vur import Codebook, LmPretrainConfig, Scorer, ScorerConfig, ScorerTrainConfig, UnitCache, build_prompt, \
    kmeans_fit, make_examples, pretrain_lm, rescore, save_codebook, score_candidates, train_scorer, visual_units, \
    warmup_alignment

log = logging.getLogger(__name__)

REPORT_HEADER = ("condition", "modality", "stage", "wer", "seed")
AUDIO_ONLY = "audio"
AUDIO_VISUAL = "audio-visual"
ARMS = ("full", "wo-vur", "sma-only", "amf-vur")


def condition_name(snr: float) -> str:
    return "clean" if snr == CLEAN else f"{snr:g}dB"


def parse_snr(text: str) -> float:
    text = text.strip().lower()
    if text in ("clean", "inf", "+inf"):
        return CLEAN
    return float(text[:-2] if text.endswith("db") else text)


@dataclass
class PipelineConfig:
    task: ToyTaskConfig = field(default_factory=ToyTaskConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    snrs: tuple[float, ...] = DEFAULT_SNRS
    noise_kind: str = "babble"
    noisy_snr: float = 0.0
    n_best: int = 5
    beam: int = 8
    pool_size: int = 4000
    base_steps: int = 3000
    stage1_steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    use_sma: bool = True
    use_amf: bool = True
    use_vur: bool = True
    unit_layer: int = 2
    codebook_size: int = 16
    lam: float | None = None
    lam_grid: tuple[float, ...] = tuple(i / 10 for i in range(11))
    lora_rank: int = 4
    lm_corpus: int = 20000
    lm_steps: int = 1500
    align_steps: int = 2000
    align_lr: float = 2e-3
    scorer_steps: int = 500
    scorer_lr: float = 1e-4
    scorer_lists: int = 150
    sweep_layers: tuple[int, ...] | None = None
    sweep_sizes: tuple[int, ...] = (8, 16, 32)

    @property
    def max_len(self) -> int:
        return self.task.max_len + 2

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(num_symbols=self.task.vocab_size, num_visemes=self.task.num_visemes,
                           audio_in_dim=self.task.audio_dim, visual_in_dim=self.task.visual_dim,
                           max_context=self.task.max_len + 4, seed=seed)


@dataclass
class Workspace:
    """Everything shared by the arms of one seed: data, encodings, base model, scorer base."""

    cfg: PipelineConfig
    seed: int
    data: ToyDataset
    base: AvsrModel
    pool: list[EncodedUtterance]
    dev: dict[float, list[EncodedUtterance]]
    test: dict[float, list[EncodedUtterance]]
    scorer_states: dict[tuple[int, int], dict] = field(default_factory=dict)
    codebooks: dict[tuple[int, int], Codebook] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def references(self, split: str) -> list[tuple[int, ...]]:
        return [u.reference for u in getattr(self.data, split)]


@dataclass
class Stage1Result:
    arm: str
    model: AvsrModel
    dev: dict[float, list[NBestList]]
    test: dict[float, list[NBestList]]
    train_losses: list[float] = field(default_factory=list)


class _Timer:
    def __init__(self, ws: Workspace, key: str):
        self.ws, self.key = ws, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.ws.timings[self.key] = self.ws.timings.get(self.key, 0.0) + time.perf_counter() - self.t0


def prepare(cfg: PipelineConfig, seed: int, data: ToyDataset | None = None, train: bool = True) -> Workspace:
    """Generate (or reuse) the dataset, cache encoder outputs and pre-train the base decoder.

    With ``train=False`` the base decoder is left at init, for callers that load a saved state.
    """
    data = gen_dataset(cfg.task) if data is None else data
    model = AvsrModel(cfg.model_config(seed))
    ws = Workspace(cfg, seed, data, model, [], {}, {})
    with _Timer(ws, "encode"):
        ws.pool = training_pool(model, data.train, cfg.pool_size, cfg.snrs, seed, cfg.noise_kind,
                                cfg.task.min_len, cfg.task.max_len)
        for snr in cfg.snrs:
            spec = NoiseSpec(snr, cfg.noise_kind)
            ws.dev[snr] = encode_split(model, data.dev, spec, seed + 300, data.train)
            ws.test[snr] = encode_split(model, data.test, spec, seed + 100, data.train)
    if not train:
        return ws
    with _Timer(ws, "base"):
        train_base(ws.pool, model, _train_cfg(cfg, cfg.base_steps, seed))
    return ws


def _train_cfg(cfg: PipelineConfig, steps: int, seed: int) -> TrainConfig:
    return TrainConfig(steps=steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed, log_every=max(steps // 5, 1))


def decode(model: AvsrModel, encs: Sequence[EncodedUtterance], cfg: PipelineConfig) -> list[NBestList]:
    items = [(u.uid,) + model.memories(u) for u in encs]
    return beam_search_many(model, items, cfg.beam, cfg.n_best, cfg.max_len)


def arm_model(ws: Workspace, use_sma: bool, use_amf: bool) -> AvsrModel:
    model = copy.deepcopy(ws.base)
    model.use_sma = use_sma
    model.use_amf = use_amf
    model.counters = {"sma": 0, "amf": 0}
    return model


def run_stage1(ws: Workspace, use_sma: bool = True, use_amf: bool = True, arm: str = "stage1",
               snrs: Sequence[float] | None = None) -> Stage1Result:
    """Train the fusion modules (if any) on a copy of the base model and decode dev/test."""
    cfg = ws.cfg
    snrs = cfg.snrs if snrs is None else snrs
    model = arm_model(ws, use_sma, use_amf)
    losses: list[float] = []
    if model.fusion_modules():
        with _Timer(ws, f"stage1:{arm}"):
            losses = train_stage1(ws.pool, model, _train_cfg(cfg, cfg.stage1_steps, ws.seed + 1)).losses
    with _Timer(ws, f"decode:{arm}"):
        dev = {snr: decode(model, ws.dev[snr], cfg) for snr in snrs}
        test = {snr: decode(model, ws.test[snr], cfg) for snr in snrs}
    return Stage1Result(arm, model, dev, test, losses)


def audio_only(ws: Workspace, snrs: Sequence[float] | None = None) -> Stage1Result:
    return run_stage1(ws, use_sma=False, use_amf=False, arm="audio", snrs=snrs)


def stage1_wer(ws: Workspace, res: Stage1Result, snr: float) -> float:
    return corpus_wer(ws.references("test"), [nb.top for nb in res.test[snr]])


# stage 2

def codebook_for(ws: Workspace, layer: int, k: int) -> Codebook:
    key = (layer, k)
    if key not in ws.codebooks:
        frames = np.concatenate([ws.base.visual_encoder.encode_frames(u.visual.frames)[layer - 1]
                                 for u in ws.data.train])
        ws.codebooks[key] = kmeans_fit(frames, k, seed=ws.seed)
    return ws.codebooks[key]


def _text_corpus(ws: Workspace, n: int) -> list[tuple[int, ...]]:
    """Fresh text from the task's symbol source: the stand-in for a language model's pre-training data."""
    trans = ws.cfg.task.transition_matrix()
    rng = np.random.default_rng([ws.seed, 9])
    lo, hi = ws.cfg.task.min_len, ws.cfg.task.max_len
    return [tuple(int(t) for t in sample_symbols(trans, int(rng.integers(lo, hi + 1)), rng)) for _ in range(n)]


def scorer_base(ws: Workspace, layer: int, k: int) -> Scorer:
    """Language-model pre-training on text, then unit alignment on the training pool (cached per seed)."""
    cfg = ws.cfg
    scfg = ScorerConfig(num_symbols=cfg.task.vocab_size, codebook_size=k, lora_rank=cfg.lora_rank,
                        max_context=2 * cfg.task.max_len + 8, seed=ws.seed)
    key = (layer, k)
    scorer = Scorer(scfg)
    cached = ws.scorer_states.get(key)
    if cached is not None:
        scorer.load_state_dict(cached)
        scorer.adapt_mode()
        return scorer
    cb = codebook_for(ws, layer, k)
    with _Timer(ws, "scorer-lm"):
        pretrain_lm(scorer, _text_corpus(ws, cfg.lm_corpus),
                    LmPretrainConfig(steps=cfg.lm_steps, seed=ws.seed, log_every=max(cfg.lm_steps // 5, 1)))
    with _Timer(ws, "scorer-align"):
        pairs = [(visual_units(u.visual_layers[layer - 1], cb), tuple(int(t) for t in u.tokens)) for u in ws.pool]
        warmup_alignment(scorer, pairs, LmPretrainConfig(steps=cfg.align_steps, lr=cfg.align_lr, seed=ws.seed,
                                                         log_every=max(cfg.align_steps // 5, 1)))
    ws.scorer_states[key] = scorer.state_dict()
    return scorer


@dataclass
class Stage2Result:
    arm: str
    lam: dict[float, float]
    dev_wer: dict[float, float]
    test: dict[float, list[NBestList]]
    codebook: Codebook


def _scores(scorer: Scorer, nbests, units) -> list[np.ndarray]:
    return [score_candidates(build_prompt(u, nb), scorer) for nb, u in zip(nbests, units)]


def run_stage2(ws: Workspace, s1: Stage1Result, layer: int | None = None, k: int | None = None,
               snrs: Sequence[float] | None = None) -> Stage2Result:
    """Fit units, adapt the scorer on training N-best lists, tune lambda on dev, rescore test."""
    cfg = ws.cfg
    layer = cfg.unit_layer if layer is None else layer
    k = cfg.codebook_size if k is None else k
    snrs = list(s1.test) if snrs is None else list(snrs)
    cb = codebook_for(ws, layer, k)
    scorer = scorer_base(ws, layer, k)
    cache = UnitCache()

    def units_of(u: EncodedUtterance, tag: str):
        return cache.get(f"{tag}:{u.uid}", lambda: visual_units(u.visual_layers[layer - 1], cb))

    # training lists: training utterances under fresh noise, decoded by this arm's first pass
    with _Timer(ws, f"stage2-lists:{s1.arm}"):
        examples = []
        noisy = [s for s in cfg.snrs if s != CLEAN] or list(cfg.snrs)
        subset = ws.data.train[: cfg.scorer_lists]
        for snr in noisy:
            encs = encode_split(s1.model, subset, NoiseSpec(snr, cfg.noise_kind), ws.seed + 200, ws.data.train)
            nbs = decode(s1.model, encs, cfg)
            examples += make_examples(nbs, [units_of(u, "train") for u in encs], [u.reference for u in subset])
    with _Timer(ws, f"stage2-train:{s1.arm}"):
        if examples:
            train_scorer(scorer, examples, ScorerTrainConfig(steps=cfg.scorer_steps, lr=cfg.scorer_lr,
                                                             seed=ws.seed, log_every=max(cfg.scorer_steps // 5, 1)))
    with _Timer(ws, f"stage2-rescore:{s1.arm}"):
        dev_refs = ws.references("dev")
        dev_scores = {snr: _scores(scorer, s1.dev[snr], [units_of(u, "dev") for u in ws.dev[snr]])
                      for snr in s1.dev}
        if cfg.lam is None:
            lam = {snr: tune_lambda({snr: s1.dev[snr]}, {snr: dev_scores[snr]}, dev_refs, cfg.lam_grid)
                   for snr in s1.dev}
        else:
            lam = {snr: cfg.lam for snr in s1.dev}
        dev_wer = {snr: corpus_wer(dev_refs, [rescore(nb, None, None, lam[snr], scores=r).top
                                              for nb, r in zip(s1.dev[snr], dev_scores[snr])])
                   for snr in s1.dev}
        test = {}
        for snr in snrs:
            if snr not in lam:
                raise KeyError(f"no dev lists to set lambda for condition {condition_name(snr)}")
            units = [units_of(u, "test") for u in ws.test[snr]]
            test[snr] = [rescore(nb, None, None, lam[snr], scores=r)
                         for nb, r in zip(s1.test[snr], _scores(scorer, s1.test[snr], units))]
    return Stage2Result(s1.arm, lam, dev_wer, test, cb)


def tune_lambda(dev_nbests: dict[float, list[NBestList]], dev_scores, refs, grid) -> float:
    """Interpolation weight with the lowest summed dev WER (largest on ties).

    The sum runs over the noisy conditions present, or over all of them when
    only the clean one is given. The pipeline calls it once per condition.
    """
    conds = [s for s in dev_nbests if s != CLEAN] or list(dev_nbests)
    best = None
    for lam in sorted(grid, reverse=True):
        total = sum(corpus_wer(refs, [rescore(nb, None, None, lam, scores=r).top
                                      for nb, r in zip(dev_nbests[s], dev_scores[s])]) for s in conds)
        if best is None or total < best[0] - 1e-12:
            best = (total, lam)
    return best[1]


def stage2_wer(ws: Workspace, res: Stage2Result, snr: float) -> float:
    return corpus_wer(ws.references("test"), [nb.top for nb in res.test[snr]])


# reports

@dataclass
class ReportRow:
    condition: str
    modality: str
    stage: str
    wer: float
    seed: int


def format_report(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r.condition, r.modality, r.stage, f"{r.wer:.6f}", r.seed])
    return buf.getvalue()


def write_report(path, rows: Sequence[ReportRow]) -> None:
    Path(path).write_text(format_report(rows))


def read_report(path) -> list[ReportRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header {header}")
        return [ReportRow(c, m, s, float(w), int(seed)) for c, m, s, w, seed in reader]


def mean_wer(rows: Sequence[ReportRow], **match) -> float:
    vals = [r.wer for r in rows if all(getattr(r, k) == v for k, v in match.items())]
    if not vals:
        raise KeyError(f"no rows match {match}")
    return float(np.mean(vals))


def _nbest_path(out: Path, arm: str, stage: str, snr: float, seed: int) -> Path:
    return out / f"nbest_{arm}_{stage}_{condition_name(snr)}_seed{seed}.tsv"


def save_nbests(out: Path | None, arm: str, stage: str, lists: dict[float, list[NBestList]], seed: int) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    for snr, nbs in lists.items():
        write_nbest(_nbest_path(out, arm, stage, snr, seed), nbs)


def load_nbests(out: Path, arm: str, stage: str, snrs, seed: int) -> dict[float, list[NBestList]]:
    return {snr: read_nbest(_nbest_path(out, arm, stage, snr, seed)) for snr in snrs}


def save_state(path, module) -> None:
    with open(path, "wb") as f:
        np.savez(f, **module.state_dict())


def load_state(path, module) -> None:
    with np.load(path) as z:
        module.load_state_dict({k: z[k] for k in z.files})


# experiments

def _experiment_seed(ws: Workspace, out: Path | None) -> tuple[list[ReportRow], Stage1Result, Stage2Result | None]:
    cfg, seed = ws.cfg, ws.seed
    base = audio_only(ws)
    save_nbests(out, "audio", "stage1", base.test, seed)
    s1 = run_stage1(ws, cfg.use_sma, cfg.use_amf, arm="av")
    save_nbests(out, "av", "stage1", s1.test, seed)
    s2 = run_stage2(ws, s1) if cfg.use_vur and cfg.use_amf else None
    if s2 is not None:
        save_nbests(out, "av", "stage2", s2.test, seed)
        if out is not None:
            save_codebook(s2.codebook, out / f"codebook_seed{seed}.bin")
    rows = []
    for snr in cfg.snrs:
        cond = condition_name(snr)
        rows.append(ReportRow(cond, AUDIO_ONLY, "base", stage1_wer(ws, base, snr), seed))
        rows.append(ReportRow(cond, AUDIO_VISUAL, "stage1", stage1_wer(ws, s1, snr), seed))
        if s2 is not None:
            rows.append(ReportRow(cond, AUDIO_VISUAL, "stage2", stage2_wer(ws, s2, snr), seed))
    return rows, s1, s2


def run_experiment(cfg: PipelineConfig, out: Path | None = None, data: ToyDataset | None = None
                   ) -> list[ReportRow]:
    """Audio-only, stage-1 and stage-2 WER at every SNR, for every seed."""
    rows: list[ReportRow] = []
    for seed in cfg.seeds:
        ws = prepare(cfg, seed, data)
        rows += _experiment_seed(ws, out)[0]
        log.info("seed %d timings %s", seed, {k: round(v, 1) for k, v in ws.timings.items()})
    return rows


@dataclass
class AblationOutcome:
    rows: list[ReportRow]
    counters: dict[str, dict[str, int]]
    # mean of the last 100 stage-1 training losses, keyed "arm:seed"
    final_loss: dict[str, float] = field(default_factory=dict)


def _final_loss(res: Stage1Result) -> float:
    return float(np.mean(res.train_losses[-100:])) if res.train_losses else float("nan")


def _ablation_seed(ws: Workspace, out: Path | None, abl: AblationOutcome,
                   full: tuple[Stage1Result, Stage2Result] | None = None) -> None:
    cfg, seed = ws.cfg, ws.seed
    conds = (CLEAN, cfg.noisy_snr)
    if full is None:
        full1 = run_stage1(ws, True, True, arm="wo-vur", snrs=conds)
        full2 = run_stage2(ws, full1, snrs=conds)
    else:
        full1, full2 = full
    sma = run_stage1(ws, True, False, arm="sma-only", snrs=conds)
    amf1 = run_stage1(ws, False, True, arm="amf", snrs=conds)
    amf2 = run_stage2(ws, amf1, snrs=conds)
    rows = []
    for snr in conds:
        cond = condition_name(snr)
        rows.append(ReportRow(cond, AUDIO_VISUAL, "full", stage2_wer(ws, full2, snr), seed))
        rows.append(ReportRow(cond, AUDIO_VISUAL, "wo-vur", stage1_wer(ws, full1, snr), seed))
        rows.append(ReportRow(cond, AUDIO_VISUAL, "sma-only", stage1_wer(ws, sma, snr), seed))
        rows.append(ReportRow(cond, AUDIO_VISUAL, "amf-vur", stage2_wer(ws, amf2, snr), seed))
    save_nbests(out, "full", "stage2", {s: full2.test[s] for s in conds}, seed)
    save_nbests(out, "amf-vur", "stage2", amf2.test, seed)
    abl.rows += rows
    abl.counters[f"sma-only:{seed}"] = dict(sma.model.counters)
    abl.final_loss[f"full:{seed}"] = _final_loss(full1)
    abl.final_loss[f"amf-vur:{seed}"] = _final_loss(amf1)


def run_ablation(cfg: PipelineConfig, out: Path | None = None, data: ToyDataset | None = None) -> AblationOutcome:
    """The four staged-ablation arms on clean and one noisy condition, per seed."""
    abl = AblationOutcome([], {})
    for seed in cfg.seeds:
        _ablation_seed(prepare(cfg, seed, data), out, abl)
    return abl


def run_all(cfg: PipelineConfig, out: Path | None = None, data: ToyDataset | None = None
            ) -> tuple[list[ReportRow], AblationOutcome]:
    """Experiment and ablation together, sharing each seed's base model and full arm."""
    rows: list[ReportRow] = []
    abl = AblationOutcome([], {})
    for seed in cfg.seeds:
        ws = prepare(cfg, seed, data)
        r, s1, s2 = _experiment_seed(ws, out)
        rows += r
        full = (s1, s2) if s2 is not None and cfg.use_sma and cfg.use_amf else None
        _ablation_seed(ws, None, abl, full)
        log.info("seed %d timings %s", seed, {k: round(v, 1) for k, v in ws.timings.items()})
    return rows, abl


def run_sweep(cfg: PipelineConfig, out: Path | None = None, data: ToyDataset | None = None) -> list[ReportRow]:
    """Stage-2 WER over unit layer x codebook size, clean and the noisy condition."""
    conds = (CLEAN, cfg.noisy_snr)
    rows: list[ReportRow] = []
    for seed in cfg.seeds:
        ws = prepare(cfg, seed, data)
        layers = cfg.sweep_layers or tuple(range(1, ws.base.config.encoder_depth + 1))
        s1 = run_stage1(ws, cfg.use_sma, cfg.use_amf, arm="av", snrs=conds)
        for layer in layers:
            for k in cfg.sweep_sizes:
                s2 = run_stage2(ws, s1, layer=layer, k=k, snrs=conds)
                for snr in conds:
                    rows.append(ReportRow(condition_name(snr), AUDIO_VISUAL, f"layer{layer}-K{k}",
                                          stage2_wer(ws, s2, snr), seed))
    return rows


def check_trends(rows: Sequence[ReportRow], snrs: Sequence[float]) -> dict[str, bool]:
    """Seed-averaged trend checks on an experiment report."""
    avg = lambda cond, mod, stage: mean_wer(rows, condition=cond, modality=mod, stage=stage)  # noqa: E731
    out = {}
    noisy = [s for s in snrs if s != CLEAN]
    out["av_beats_audio_0dB"] = avg("0dB", AUDIO_VISUAL, "stage2") < avg("0dB", AUDIO_ONLY, "base")
    out["av_beats_audio_-5dB"] = avg("-5dB", AUDIO_VISUAL, "stage2") < avg("-5dB", AUDIO_ONLY, "base")
    s1 = [avg(condition_name(s), AUDIO_VISUAL, "stage1") for s in noisy]
    s2 = [avg(condition_name(s), AUDIO_VISUAL, "stage2") for s in noisy]
    out["stage2_not_worse"] = all(b <= a + 1e-12 for a, b in zip(s1, s2))
    out["stage2_strictly_better_somewhere"] = any(b < a - 1e-12 for a, b in zip(s1, s2))
    ordered = sorted(snrs, reverse=True)
    audio = [avg(condition_name(s), AUDIO_ONLY, "base") for s in ordered]
    out["audio_monotone"] = all(b >= a - 1e-12 for a, b in zip(audio, audio[1:]))
    return out


def check_ablation(rows: Sequence[ReportRow], noisy_snr: float) -> dict[str, bool]:
    """Seed-averaged arm ordering on the noisy condition: full <= AMF+VUR <= SMA-only."""
    cond = condition_name(noisy_snr)
    full, amf, sma = (mean_wer(rows, condition=cond, stage=s) for s in ("full", "amf-vur", "sma-only"))
    return {"full_le_amf_vur": full <= amf + 1e-12, "amf_vur_le_sma_only": amf <= sma + 1e-12}
