"""Print the patchless vs. overlapping-window MAC comparison.

    python scripts/complexity_report.py [--decoder-layers N] [--downsample 16] [--csv out.csv]

Also prints how the reference-token passes depend on the frame extent and on
whether border windows are counted.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from swa_codec.complexity import (
    DEFAULT_DOWNSAMPLE,
    FULL_SCALE,
    PatchBased,
    Patchless,
    compare,
    count_macs,
    reference_token_passes,
    rows_to_csv,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--decoder-layers", type=int, default=None, help="override the parameter-matched depth")
    ap.add_argument("--downsample", type=int, default=DEFAULT_DOWNSAMPLE)
    ap.add_argument("--csv", type=Path)
    args = ap.parse_args()

    patch = PatchBased(decoder_layers=args.decoder_layers)
    rows = compare([Patchless(), patch], FULL_SCALE, downsample=args.downsample)
    text = rows_to_csv(rows)
    print(text, end="")
    if args.csv:
        args.csv.write_text(text)

    ours = count_macs(Patchless(), FULL_SCALE, downsample=args.downsample)
    theirs = count_macs(patch, FULL_SCALE, downsample=args.downsample)
    print(f"\ndecoder layers: {patch.resolved_decoder_layers(FULL_SCALE)}")
    print(f"patchless   {ours.kmacs_per_px():9.2f} kMACs/px")
    print(f"patch-based {theirs.kmacs_per_px():9.2f} kMACs/px")
    print(f"ratio       {theirs.total / theirs.tokens / (ours.total / ours.tokens):9.3f}")

    print("\nreference-token passes of the overlapping scheme")
    for extent in (48, 64, 128, 256):
        full = reference_token_passes(patch, (extent, extent), interior=False)
        inner = reference_token_passes(patch, (extent, extent), interior=True)
        print(f"  {extent:4d}x{extent:<4d} all positions {float(full):.4f}  interior {float(inner):.4f}")


if __name__ == "__main__":
    main()
