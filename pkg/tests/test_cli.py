import numpy as np
import pytest

from advcloud import cli, pipeline
from advcloud.pipeline import Run, read_csv

TINY = """\
size = 32
n_train = 8
n_test = 4
sod_channels = 4, 4, 8, 8
sod_epochs = 2
disc_channels = 4, 4, 4, 4
disc_rounds = 1
disc_images_per_round = 4
disc_steps = 2
attack_steps = 2
alpha_m = 0.015
alpha_e = 0.03
defense_width = 4
defense_bottleneck = 4
defense_epochs = 1
batch_size = 4
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "runs"
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
    run_dir = next(out.iterdir())
    return cfg, out, run_dir


class TestErrors:
    def test_missing_prerequisite(self, tmp_path, capsys):
        code = cli.main(["attack", "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "sod.ckpt" in err and "train-sod" in err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["eval", "--bogus"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = blue\n")
        assert cli.main(["synth-data", "--config", str(cfg), "--out", str(tmp_path)]) == 3
        assert "colour" in capsys.readouterr().err

    def test_unknown_attack(self, tiny, capsys):
        cfg, out, _ = tiny
        assert cli.main(["attack", "--attack", "cw", "--config", str(cfg), "--out", str(out)]) == 3


class TestPipeline:
    def test_artifacts(self, tiny):
        _, _, run_dir = tiny
        for rel in ("config.txt", "models/sod.ckpt", "models/disc.ckpt", "models/defense-full.ckpt",
                    "attacks/advcloud.npz", "attacks/advcloud.csv", "results/sod_scores.csv", "report.md"):
            assert (run_dir / rel).exists(), rel
        assert len(list((run_dir / "attacks" / "pgd").glob("*.png"))) == 4
        assert list((run_dir / "manifests").glob("*.json"))

    def test_sidecar_norms(self, tiny):
        rows = read_csv(tiny[2] / "attacks" / "advcloud.csv")
        assert len(rows) == 4
        assert all(float(r["linf_mask"]) <= 0.03 + 1e-9 and float(r["linf_exposure"]) <= 0.06 + 1e-9
                   for r in rows)
        assert all(float(r["linf_image"]) <= 8 / 255 + 1e-6 for r in read_csv(tiny[2] / "attacks" / "fgsm.csv"))

    def test_report_tables(self, tiny):
        text = (tiny[2] / "report.md").read_text()
        for label in ("Clean Image", "Normal Cloud", "FGSM", "MIFGSM", "PGD", "VMIFGSM", "NIFGSM",
                      "AdvCloud w/o Noise", "AdvCloud w/o Exposure Matrix", "| AdvCloud |"):
            assert label in text
        assert "| Attack | MAE | F_beta | S_m |" in text
        assert "Table 4" in text and "0.9049" in text and "331.85" in text

    def test_report_rerun_identical(self, tiny, capsys):
        cfg, out, run_dir = tiny
        before = (run_dir / "report.md").read_bytes()
        assert cli.main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        assert (run_dir / "report.md").read_bytes() == before

    def test_config_written(self, tiny):
        from advcloud.config import parse_config

        cfg = parse_config((tiny[2] / "config.txt").read_text())
        assert cfg.size == 32 and cfg.n_test == 4

    def test_eval_perfect_predictions(self, tiny, monkeypatch):
        cfg_path, _, run_dir = tiny
        from advcloud.config import load_config

        run = Run(run_dir, load_config(cfg_path))
        _, gts, _, _ = run.arrays("test")
        monkeypatch.setattr(pipeline, "sod_forward", lambda net, x: gts.copy())
        monkeypatch.setattr(pipeline.Run, "manifest", lambda *a, **k: None)
        backup = (run_dir / "results" / "sod_scores.csv").read_bytes()
        try:
            pipeline.stage_eval(run)
            rows = read_csv(run_dir / "results" / "sod_scores.csv")
            assert all(float(r["mae"]) == 0 and float(r["f_beta"]) == pytest.approx(1.0) for r in rows)
        finally:
            (run_dir / "results" / "sod_scores.csv").write_bytes(backup)
