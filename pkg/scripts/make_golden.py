"""Regenerate the golden CLI fixtures in tests/data.

Run after any intentional change to the model, coder or file formats:

    python scripts/make_golden.py
"""

from __future__ import annotations

import shutil
import sys
import tempfile
from pathlib import Path

from swa_codec.cli import main
from swa_codec.latents import write_latents
from swa_codec.training import SynthConfig, generate_clip

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"

CONFIG = """\
# tiny model and synthetic clip used by the golden CLI tests
channels = 8
heads = 2
head_dim = 4
layers = 2
l_w = 1
h_w = 1
w_w = 1
num_rate_points = 2
frames = 3
height = 4
width = 5
batch = 1
"""


def build(dest: Path) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "config.txt").write_text(CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp)
        code = main(["train", "--seed", "7", "--steps", "20", "--config", str(dest / "config.txt"),
                     "--output", str(run)])
        if code:
            sys.exit(code)
        shutil.copy(run / "model.swam", dest / "model.swam")
    synth = SynthConfig(seed=11, channels=8, frames=3, height=4, width=5)
    write_latents(dest / "input.swal", generate_clip(synth, 0))
    for argv in (
        ["encode", "--input", "input.swal", "--model", "model.swam", "--k", "1", "--output", "stream.swab"],
        ["decode", "--input", "stream.swab", "--model", "model.swam", "--output", "decoded.swal"],
    ):
        code = main([a if not a.endswith((".swal", ".swab", ".swam")) else str(dest / a) for a in argv])
        if code:
            sys.exit(code)
    (dest / "run.json").unlink(missing_ok=True)


if __name__ == "__main__":
    build(Path(sys.argv[1]) if len(sys.argv) > 1 else DATA)
    print(f"golden files written to {DATA if len(sys.argv) < 2 else sys.argv[1]}")
