"""Command-line entry point: ``avur <command> [options]``.

A staged run shares one output directory::

    avur gen-data --out run/
    avur train-stage1 --out run/
    avur train-stage2 --out run/
    avur eval --out run/

``ablate`` and ``sweep`` are self-contained and write their own CSV.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import ToyTaskConfig, dump_config, gen_dataset, load_config, load_dataset, save_dataset
from .metrics import corpus_wer, oracle_wer
from .pipeline import (
    AUDIO_ONLY,
    AUDIO_VISUAL,
    PipelineConfig,
    ReportRow,
    Stage1Result,
    audio_only,
    condition_name,
    load_nbests,
    load_state,
    parse_snr,
    prepare,
    run_ablation,
    run_stage1,
    run_stage2,
    run_sweep,
    save_nbests,
    save_state,
    stage1_wer,
    stage2_wer,
    write_report,
)
from .vur import save_codebook

log = logging.getLogger("avur")

DATASET = "dataset.npz"


def _csv(conv):
    return lambda text: tuple(conv(v) for v in text.split(",") if v.strip())


def _coerce(name: str, raw: str):
    default = getattr(PipelineConfig(), name)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        conv = parse_snr if name == "snrs" else type(default[0]) if default else float
        return _csv(conv)(raw)
    if default is None:
        return float(raw) if name == "lam" else _csv(int)(raw)
    return type(default)(raw)


def pipeline_config(args, task: ToyTaskConfig) -> PipelineConfig:
    cfg = PipelineConfig(task=task)
    over = {}
    names = {f.name for f in fields(PipelineConfig)} - {"task"}
    for item in args.set or ():
        key, _, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if key not in names:
            raise SystemExit(f"unknown pipeline setting {key!r}")
        over[key] = _coerce(key, raw.strip())
    for attr, key in (("seeds", "seeds"), ("snrs", "snrs"), ("n_best", "n_best"), ("beam", "beam"),
                      ("K", "codebook_size"), ("layer", "unit_layer"), ("lam", "lam")):
        val = getattr(args, attr, None)
        if val is not None:
            over[key] = val
    if getattr(args, "K", None) is not None and args.command == "sweep":
        over["sweep_sizes"] = (args.K,)
    if getattr(args, "layer", None) is not None and args.command == "sweep":
        over["sweep_layers"] = (args.layer,)
    over["use_sma"] = not args.no_sma
    over["use_amf"] = not args.no_amf
    over["use_vur"] = not args.no_vur
    return replace(cfg, **over)


def _task(args, out: Path) -> ToyTaskConfig:
    if args.config:
        return load_config(args.config)
    if (out / "config.ini").exists():
        return load_config(out / "config.ini")
    return ToyTaskConfig()


def _dataset(out: Path):
    path = out / DATASET
    if not path.exists():
        raise SystemExit(f"{path} not found; run gen-data first")
    return load_dataset(path)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = load_config(args.config) if args.config else ToyTaskConfig()
    ds = gen_dataset(task)
    (out / "config.ini").write_text(dump_config(task))
    save_dataset(out / DATASET, ds)
    print(f"wrote {out / DATASET}: " + ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items()))
    return 0


def cmd_train_stage1(args) -> int:
    out = Path(args.out)
    data = _dataset(out)
    cfg = pipeline_config(args, data.config)
    rows = []
    for seed in cfg.seeds:
        ws = prepare(cfg, seed, data)
        save_state(out / f"base_seed{seed}.npz", ws.base)
        base = audio_only(ws)
        s1 = run_stage1(ws, cfg.use_sma, cfg.use_amf, arm="av")
        save_state(out / f"stage1_seed{seed}.npz", s1.model)
        for arm, res in (("audio", base), ("av", s1)):
            save_nbests(out, arm, "stage1", res.test, seed)
            save_nbests(out, arm, "stage1dev", res.dev, seed)
        for snr in cfg.snrs:
            rows.append(ReportRow(condition_name(snr), AUDIO_ONLY, "base", stage1_wer(ws, base, snr), seed))
            rows.append(ReportRow(condition_name(snr), AUDIO_VISUAL, "stage1", stage1_wer(ws, s1, snr), seed))
    write_report(out / "report_stage1.csv", rows)
    print((out / "report_stage1.csv").read_text(), end="")
    return 0


def cmd_train_stage2(args) -> int:
    out = Path(args.out)
    data = _dataset(out)
    cfg = pipeline_config(args, data.config)
    if not cfg.use_vur:
        print("visual-unit rescoring disabled (--no-vur); nothing to do")
        return 0
    rows = []
    for seed in cfg.seeds:
        ws = prepare(cfg, seed, data, train=False)
        for name in (f"base_seed{seed}.npz", f"stage1_seed{seed}.npz"):
            if not (out / name).exists():
                raise SystemExit(f"{out / name} not found; run train-stage1 first")
        load_state(out / f"base_seed{seed}.npz", ws.base)
        model = ws.base.__class__(ws.base.config)
        model.use_sma, model.use_amf = cfg.use_sma, cfg.use_amf
        model.counters = {"sma": 0, "amf": 0}
        load_state(out / f"stage1_seed{seed}.npz", model)
        s1 = Stage1Result("av", model, load_nbests(out, "av", "stage1dev", cfg.snrs, seed),
                          load_nbests(out, "av", "stage1", cfg.snrs, seed))
        s2 = run_stage2(ws, s1)
        save_nbests(out, "av", "stage2", s2.test, seed)
        save_codebook(s2.codebook, out / f"codebook_seed{seed}.bin")
        for snr in cfg.snrs:
            rows.append(ReportRow(condition_name(snr), AUDIO_VISUAL, "stage2", stage2_wer(ws, s2, snr), seed))
        print(f"seed {seed}: lambda " + ", ".join(f"{condition_name(k)}={v:g}" for k, v in s2.lam.items()))
    write_report(out / "report_stage2.csv", rows)
    print((out / "report_stage2.csv").read_text(), end="")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    data = _dataset(out)
    cfg = pipeline_config(args, data.config)
    refs = [u.reference for u in data.test]
    rows = []
    for seed in cfg.seeds:
        for arm, stage, modality in (("audio", "stage1", AUDIO_ONLY), ("av", "stage1", AUDIO_VISUAL),
                                     ("av", "stage2", AUDIO_VISUAL)):
            for snr in cfg.snrs:
                try:
                    nbs = load_nbests(out, arm, stage, (snr,), seed)[snr]
                except FileNotFoundError:
                    continue
                label = "base" if arm == "audio" else stage
                rows.append(ReportRow(condition_name(snr), modality, label,
                                      corpus_wer(refs, [nb.top for nb in nbs]), seed))
                rows.append(ReportRow(condition_name(snr), modality, f"{label}-oracle", oracle_wer(refs, nbs), seed))
    if not rows:
        raise SystemExit(f"no N-best files in {out}")
    write_report(out / "report.csv", rows)
    print((out / "report.csv").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _task(args, out)
    cfg = pipeline_config(args, task)
    res = run_ablation(cfg, out)
    write_report(out / "ablation.csv", res.rows)
    print((out / "ablation.csv").read_text(), end="")
    for key, c in res.counters.items():
        print(f"{key} counters {c}")
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline_config(args, _task(args, out))
    rows = run_sweep(cfg, out)
    write_report(out / "sweep.csv", rows)
    print((out / "sweep.csv").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "generate the toy dataset"),
        "train-stage1": (cmd_train_stage1, "train base and fusion models, write N-best lists"),
        "train-stage2": (cmd_train_stage2, "fit visual units, adapt the scorer, rescore"),
        "eval": (cmd_eval, "WER and oracle WER of the saved N-best lists"),
        "ablate": (cmd_ablate, "staged ablation over the four arms"),
        "sweep": (cmd_sweep, "unit layer x codebook size grid"),
    }
    for name, (fn, help_) in commands.items():
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="task config file (key = value under [task])")
        p.add_argument("--seeds", type=_csv(int), help="comma-separated seeds")
        p.add_argument("--snrs", type=_csv(parse_snr), help="comma-separated SNRs in dB, or 'clean'")
        p.add_argument("--n-best", dest="n_best", type=int)
        p.add_argument("--beam", type=int)
        p.add_argument("--K", type=int, help="codebook size")
        p.add_argument("--layer", type=int, help="visual encoder layer for units (1-based)")
        p.add_argument("--lam", type=float, help="first-pass score weight (default: tuned on dev)")
        p.add_argument("--no-sma", action="store_true")
        p.add_argument("--no-amf", action="store_true")
        p.add_argument("--no-vur", action="store_true")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a pipeline setting, e.g. --set base_steps=500")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
