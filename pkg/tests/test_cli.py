from pathlib import Path

import numpy as np
import pytest

from deepntl.cli import CONFIG_NAME, cli_main
from deepntl.config import RunConfig, quad
from deepntl.errors import ConfigError
from deepntl.model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from deepntl.raster import Raster, load_raster, save_raster

from chain import run, toy_chain

ROOT = Path(__file__).resolve().parents[1]


class TestRunConfig:
    def test_shipped_default_matches(self):
        assert RunConfig.load(ROOT / "configs" / "default.conf") == RunConfig()

    def test_round_trip(self):
        cfg = RunConfig().update({"seed": "9", "split_by_point": "yes", "lr0": "0.5"})
        assert (cfg.seed, cfg.split_by_point, cfg.lr0) == (9, True, 0.5)
        assert RunConfig.parse(cfg.dumps()) == cfg

    @pytest.mark.parametrize("text, match", [
        ("bogus = 1", "unknown key"),
        ("seed = x", "bad value"),
        ("seed", "expected"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("split_by_point = maybe", "bad value"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.parse(text)

    def test_comments(self):
        assert RunConfig.parse("# note\nseed = 3  # trailing\n\n").seed == 3

    def test_quad(self):
        assert quad(" 1, 2,3 ,4") == (1, 2, 3, 4)
        for bad in ("1,2,3", "a,b,c,d"):
            with pytest.raises(ConfigError):
                quad(bad)


def files_of(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file()}


class TestCommands:
    def test_synth_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--seed", 7, "--rows", 64, "--cols", 64,
                       "--out", tmp_path / name) == 0
        a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
        assert set(a) == {"dmsp.ntlr", "viirs.ntlr", CONFIG_NAME}
        assert a == b
        assert load_raster(tmp_path / "a" / "viirs.ntlr").shape == (128, 128)

    def test_seed_matters(self, tmp_path):
        run("synth", "--seed", 1, "--rows", 16, "--cols", 16, "--out", tmp_path / "a")
        run("synth", "--seed", 2, "--rows", 16, "--cols", 16, "--out", tmp_path / "b")
        assert files_of(tmp_path / "a")["dmsp.ntlr"] != files_of(tmp_path / "b")["dmsp.ntlr"]

    def test_eval_identity(self, tmp_path, capsys):
        run("synth", "--rows", 16, "--cols", 16, "--out", tmp_path)
        a = tmp_path / "viirs.ntlr"
        assert run("eval", "--gt", a, "--sr", a, "--out", tmp_path / "m.csv") == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "scope_label,r,psnr,ssim,n,max_used"
        _, r, p, s, n, mx = out[1].split(",")
        assert (float(r), p, float(s), int(n), float(mx)) == (1.0, "inf", 1.0, 1024, 496.0)
        assert (tmp_path / "m.csv.config.txt").exists()

    def test_infer_mismatch(self, tmp_path, capsys):
        cfg = ModelConfig.toy(8, 8)
        (tmp_path / "m.ntlc").write_bytes(save_checkpoint(init_params(cfg), cfg))
        save_raster(tmp_path / "d16.ntlr", Raster(np.ones((16, 16))))
        save_raster(tmp_path / "d8.ntlr", Raster(np.ones((8, 8))))
        save_raster(tmp_path / "v.ntlr", Raster(np.ones((32, 32))))
        code = run("infer", "--checkpoint", tmp_path / "m.ntlc", "--dmsp-ref", tmp_path / "d16.ntlr",
                   "--dmsp-tgt", tmp_path / "d8.ntlr", "--viirs-ref", tmp_path / "v.ntlr",
                   "--out", tmp_path / "o.ntlr")
        assert code == 2
        assert "(8, 8)" in capsys.readouterr().err

    def test_infer_ok(self, tmp_path):
        cfg = ModelConfig.toy(8, 8)
        (tmp_path / "m.ntlc").write_bytes(save_checkpoint(init_params(cfg), cfg))
        save_raster(tmp_path / "d.ntlr", Raster(np.full((12, 20), 5.0)))
        save_raster(tmp_path / "v.ntlr", Raster(np.full((24, 40), 30.0)))
        assert run("infer", "--checkpoint", tmp_path / "m.ntlc", "--dmsp-ref", tmp_path / "d.ntlr",
                   "--dmsp-tgt", tmp_path / "d.ntlr", "--viirs-ref", tmp_path / "v.ntlr",
                   "--out", tmp_path / "o.ntlr", "--threads", 2) == 0
        assert load_raster(tmp_path / "o.ntlr").shape == (24, 40)
        written = RunConfig.load(tmp_path / "o.ntlr.config.txt")
        assert written.threads == 2

    @pytest.mark.parametrize("argv", [
        [], ["bogus"], ["synth", "--rows", "4"], ["synth", "--rows", "x", "--cols", "4",
                                                  "--out", "o"],
        ["dataset"], ["eval", "--gt", "a", "--sr", "b", "--frobnicate"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert cli_main(argv) == 1
        assert "usage:" in capsys.readouterr().err

    def test_help(self, capsys):
        assert cli_main(["--help"]) == 0
        assert "calibrate" in capsys.readouterr().out

    def test_bad_config(self, tmp_path, capsys):
        conf = tmp_path / "c.conf"
        conf.write_text("nonsense = 1\n")
        assert run("--config", conf, "synth", "--rows", 4, "--cols", 4, "--out", tmp_path) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run("baseline", "bilinear", "--input", tmp_path / "nope.ntlr",
                   "--out", tmp_path / "o.ntlr") == 2

    def test_global_flags_either_side(self, tmp_path):
        assert run("--seed", 3, "synth", "--rows", 8, "--cols", 8, "--out", tmp_path / "a") == 0
        assert run("synth", "--rows", 8, "--cols", 8, "--out", tmp_path / "b", "--seed", 3) == 0
        assert files_of(tmp_path / "a") == files_of(tmp_path / "b")
        assert RunConfig.load(tmp_path / "a" / CONFIG_NAME).seed == 3

    def test_baseline_and_pgm(self, tmp_path):
        save_raster(tmp_path / "d.ntlr", Raster(np.array([[0.0, 2.0]])))
        assert run("baseline", "bilinear", "--input", tmp_path / "d.ntlr",
                   "--out", tmp_path / "b.ntlr") == 0
        assert load_raster(tmp_path / "b.ntlr").data[0].tolist() == [0, 0.5, 1.5, 2]
        assert run("pgm", "--input", tmp_path / "b.ntlr", "--out", tmp_path / "b.pgm") == 0
        assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5")

    def test_tlv_and_calibrate(self, tmp_path):
        rng = np.random.default_rng(0)
        base = np.kron(rng.integers(5, 50, size=(8, 8)), np.ones((4, 4)))
        inputs = []
        for k, (prod, arr) in enumerate([("1999F12", base), ("2000F14", 0.5 * base + 3),
                                         ("2001F15", base + 1)]):
            save_raster(tmp_path / f"{k}.ntlr", Raster(arr))
            inputs += ["--input", f"{prod}={tmp_path / f'{k}.ntlr'}"]
        assert run("tlv", *inputs, "--out", tmp_path / "tlv.csv") == 0
        lines = (tmp_path / "tlv.csv").read_text().splitlines()
        assert lines[0] == "year,satellite,tlv" and len(lines) == 4
        assert run("calibrate", *inputs, "--out", tmp_path / "cal") == 0
        fits = (tmp_path / "cal" / "fits.csv").read_text().splitlines()
        assert len(fits) == 4
        assert load_raster(tmp_path / "cal" / "cf.ntlr").data.max() == 1
        assert (tmp_path / "cal" / "calibrated" / "2000F14.ntlr").exists()
        assert (tmp_path / "cal" / CONFIG_NAME).exists()

    def test_bad_product_spec(self, tmp_path):
        assert run("tlv", "--input", "nonsense", "--out", tmp_path / "t.csv") == 1


class TestChain:
    def test_artifacts(self, tmp_path):
        paths = toy_chain(tmp_path)
        params, cfg = load_checkpoint(paths["train"][0].read_bytes())
        assert (cfg.h, cfg.w, cfg.c) == (8, 8, 2)
        assert cfg.viirs_scale != 496.0  # derived from the training targets
        log = paths["train"][2].read_text().splitlines()
        assert log[0] == "epoch,train_loss,val_loss,lr" and len(log) == 3
        resolved = RunConfig.load(paths["model"] / CONFIG_NAME)
        assert (resolved.seed, resolved.epochs, resolved.tile_h) == (7, 2, 8)
        split = paths["split"][0].read_text().splitlines()
        assert split[0].startswith("example_id,split")
        assert any(",val," in line for line in split[1:])

    def test_infer_from_trained(self, tmp_path):
        paths = toy_chain(tmp_path)
        s = paths["scene"]
        assert run("infer", "--checkpoint", paths["train"][0], "--dmsp-ref", s / "dmsp_1.ntlr",
                   "--dmsp-tgt", s / "dmsp_2.ntlr", "--viirs-ref", s / "viirs_1.ntlr",
                   "--out", tmp_path / "out.ntlr") == 0
        assert load_raster(tmp_path / "out.ntlr").shape == (64, 64)
