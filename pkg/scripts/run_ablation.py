"""Train a toy model and sweep the number of reference frames.

    python scripts/run_ablation.py --steps 1500 --seed 0 --out ablation_run

Writes ``train_log.csv``, ``model.swam`` and ``ablation.csv`` (held-out bits
per latent for k = 0..kmax, with the context-free baseline as a last row).
"""

from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

from swa_codec.model import ModelConfig, save_model
from swa_codec.training import (
    SynthConfig,
    context_free_baseline,
    generate_clip,
    heldout_clips,
    heldout_mse,
    heldout_rate,
    train,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=1)
    ap.add_argument("--kmax", type=int, default=3)
    ap.add_argument("--heldout", type=int, default=4)
    ap.add_argument("--calibrate", action="store_true", help="data-dependent init of the rate gains")
    ap.add_argument("--out", type=Path, default=Path("ablation_run"))
    args = ap.parse_args()

    config = ModelConfig()
    synth = SynthConfig(seed=args.data_seed, channels=config.channels)
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    result = train(synth, config, args.steps, seed=args.seed, calibrate=args.calibrate)
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f}s")
    (args.out / "train_log.csv").write_text(result.csv())
    save_model(args.out / "model.swam", result.params)

    eval_synth = SynthConfig(seed=args.data_seed, channels=config.channels, frames=max(3, args.kmax + 1))
    clips = heldout_clips(eval_synth, args.heldout)
    baseline = context_free_baseline([generate_clip(synth, i) for i in range(8)], clips)
    rows = []
    for k in range(args.kmax + 1):
        bpl = heldout_rate(result.params, clips, k)
        rows.append((str(k), f"{bpl:.6f}"))
        print(f"k={k}: {bpl:.4f} bits/latent")
    rows.append(("baseline", f"{baseline.bits_per_latent:.6f}"))
    print(f"context-free baseline: {baseline.bits_per_latent:.4f} bits/latent (sigma {baseline.sigma:.3f})")
    plain, refined = heldout_mse(result.params, clips)
    print(f"MSE quantized {plain:.5f}, refined {refined:.5f}")
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "bits_per_latent"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
