import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from swa_codec.cli import main, parse_overrides, UsageError
from swa_codec.latents import read_latents

DATA = Path(__file__).parent / "data"


@pytest.fixture
def work(tmp_path):
    for name in ("model.swam", "input.swal", "stream.swab", "config.txt"):
        shutil.copy(DATA / name, tmp_path / name)
    return tmp_path


class TestGolden:
    def test_encode_matches_golden_stream(self, work):
        code = main(["encode", "--input", str(work / "input.swal"), "--model", str(work / "model.swam"),
                     "--k", "1", "--output", str(work / "out.swab")])
        assert code == 0
        assert (work / "out.swab").read_bytes() == (DATA / "stream.swab").read_bytes()
        assert (work / "out.swab.stats.csv").read_text() == (DATA / "stream.swab.stats.csv").read_text()
        run = json.loads((work / "run.json").read_text())
        assert run["command"] == "encode" and run["k"] == 1

    def test_decode_matches_golden_latents(self, work):
        code = main(["decode", "--input", str(work / "stream.swab"), "--model", str(work / "model.swam"),
                     "--output", str(work / "dec.swal")])
        assert code == 0
        assert (work / "dec.swal").read_bytes() == (DATA / "decoded.swal").read_bytes()
        assert (work / "dec.refined.swal").read_bytes() == (DATA / "decoded.refined.swal").read_bytes()

    def test_decoded_equals_rounded_input(self):
        dec = read_latents(DATA / "decoded.swal")
        np.testing.assert_array_equal(dec, np.clip(np.round(read_latents(DATA / "input.swal")), -64, 63))

    def test_train_reproduces_golden_model(self, work):
        code = main(["train", "--seed", "7", "--steps", "20", "--config", str(work / "config.txt"),
                     "--output", str(work / "run")])
        assert code == 0
        assert (work / "run" / "model.swam").read_bytes() == (DATA / "model.swam").read_bytes()
        log = (work / "run" / "train_log.csv").read_text().splitlines()
        assert len(log) == 21


class TestCommands:
    def test_k_clamped_with_warning(self, work, caplog):
        code = main(["encode", "--input", str(work / "input.swal"), "--model", str(work / "model.swam"),
                     "--k", "9", "--output", str(work / "o.swab")])
        assert code == 0
        assert "clamped to 2" in caplog.text
        assert json.loads((work / "run.json").read_text())["k"] == 2

    def test_ablate_with_model(self, work, capsys):
        code = main(["ablate", "--seed", "1", "--model", str(work / "model.swam"), "--kmax", "3",
                     "--config", str(work / "config.txt"), "--output", str(work / "ab")])
        assert code == 0
        rows = (work / "ab" / "ablation.csv").read_text().splitlines()
        assert rows[0] == "k,bits_per_latent"
        values = [r.split(",")[1] for r in rows[1:]]
        # D * l_w = 2 for the golden model, so k >= 2 must agree exactly
        assert values[2] == values[3]

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--output", str(tmp_path)]) == 0
        assert "max relative error" in capsys.readouterr().out
        assert (tmp_path / "gradcheck.csv").read_text().startswith("group,rel_error,grad_norm")

    def test_complexity(self, tmp_path, capsys):
        assert main(["complexity", "--output", str(tmp_path)]) == 0
        text = (tmp_path / "complexity.csv").read_text()
        assert text == capsys.readouterr().out
        assert "patch_based,reference_token_passes,4,4" in text


class TestErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            ["train", "--output", "x"],
            ["encode", "--input", "input.swal"],
            ["encode", "--input", "missing.swal", "--model", "model.swam", "--output", "o"],
            ["encode", "--input", "input.swal", "--model", "model.swam", "--output", "o", "--rate-idx", "5"],
            ["train", "--seed", "0", "--lambda", "-1", "--output", "x"],
            ["decode", "--input", "input.swal", "--model", "input.swal", "--output", "o"],
        ],
    )
    def test_usage_errors_exit_2(self, work, monkeypatch, argv):
        monkeypatch.chdir(work)
        assert main(argv) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 2

    def test_corrupt_stream_exit_1(self, work, capsys):
        blob = bytearray((work / "stream.swab").read_bytes())
        blob[40] ^= 1
        (work / "bad.swab").write_bytes(bytes(blob))
        code = main(["decode", "--input", str(work / "bad.swab"), "--model", str(work / "model.swam"),
                     "--output", str(work / "d.swal")])
        assert code == 1
        assert "CRC" in capsys.readouterr().err
        assert not (work / "d.swal").exists()

    def test_overrides_parsing(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("channels = 16  # width\n\nrho=0.5\n")
        assert parse_overrides(p) == {"channels": 16, "rho": 0.5}
        p.write_text("nonsense=1\n")
        with pytest.raises(UsageError):
            parse_overrides(p)
        p.write_text("channels=abc\n")
        with pytest.raises(UsageError):
            parse_overrides(p)
