import pytest

from avur.cli import build_parser, main, pipeline_config
from avur.data import ToyTaskConfig, dump_config
from avur.pipeline import read_report


def _flags(out, extra=()):
    from conftest import TINY_PIPE

    sets = [f"{k}={v}" for k, v in TINY_PIPE.items() if k not in ("seeds", "snrs", "n_best", "beam")]
    args = ["--out", str(out), "--seeds", "0", "--snrs", "clean,0", "--n-best", "4", "--beam", "4"]
    for s in sets:
        args += ["--set", s]
    return args + list(extra)


@pytest.fixture
def run_dir(tmp_path):
    from conftest import TINY_TASK

    (tmp_path / "task.ini").write_text(dump_config(ToyTaskConfig(**TINY_TASK)))
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "task.ini")]) == 0
    return tmp_path


class TestCli:
    def test_staged_run(self, run_dir, capsys):
        assert main(["train-stage1"] + _flags(run_dir)) == 0
        assert (run_dir / "stage1_seed0.npz").exists()
        assert main(["train-stage2"] + _flags(run_dir)) == 0
        assert "lambda clean=" in capsys.readouterr().out
        assert (run_dir / "codebook_seed0.bin").exists()
        assert main(["eval"] + _flags(run_dir)) == 0
        rows = read_report(run_dir / "report.csv")
        assert {r.stage for r in rows} == {"base", "base-oracle", "stage1", "stage1-oracle", "stage2",
                                           "stage2-oracle"}
        for r in rows:
            if r.stage.endswith("-oracle"):
                top = next(x for x in rows if x.stage == r.stage[:-7] and x.condition == r.condition)
                assert r.wer <= top.wer

    def test_stage2_needs_stage1(self, run_dir):
        with pytest.raises(SystemExit):
            main(["train-stage2"] + _flags(run_dir))

    def test_ablate(self, run_dir, capsys):
        assert main(["ablate"] + _flags(run_dir)) == 0
        assert len(read_report(run_dir / "ablation.csv")) == 8
        assert "sma-only:0 counters {'sma': 0, 'amf': 0}" in capsys.readouterr().out

    def test_sweep_restricted_grid(self, run_dir):
        assert main(["sweep", "--K", "3", "--layer", "2"] + _flags(run_dir)) == 0
        assert {r.stage for r in read_report(run_dir / "sweep.csv")} == {"layer2-K3"}

    def test_overrides(self, tmp_path):
        args = build_parser().parse_args(["ablate", "--out", str(tmp_path), "--set", "lam=0.3", "--set",
                                          "lam_grid=0,0.5,1", "--no-vur", "--snrs", "clean,-5dB"])
        cfg = pipeline_config(args, ToyTaskConfig())
        assert cfg.lam == 0.3 and cfg.lam_grid == (0.0, 0.5, 1.0) and not cfg.use_vur
        assert cfg.snrs == (float("inf"), -5.0)

    def test_unknown_setting(self, tmp_path):
        args = build_parser().parse_args(["ablate", "--out", str(tmp_path), "--set", "nope=1"])
        with pytest.raises(SystemExit):
            pipeline_config(args, ToyTaskConfig())

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["train-stage1", "--out", str(tmp_path)])

    def test_staged_run_matches_in_process(self, run_dir):
        from conftest import tiny_config

        from avur.pipeline import run_experiment

        main(["train-stage1"] + _flags(run_dir))
        main(["train-stage2"] + _flags(run_dir))
        staged = read_report(run_dir / "report_stage1.csv") + read_report(run_dir / "report_stage2.csv")
        direct = run_experiment(tiny_config())
        key = lambda r: (r.condition, r.modality, r.stage)  # noqa: E731
        assert {key(r): round(r.wer, 6) for r in staged} == {key(r): round(r.wer, 6) for r in direct}
