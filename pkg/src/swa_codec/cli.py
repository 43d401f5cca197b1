"""Command-line entry point: ``swa-codec <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .fileio import atomic_write_text

log = logging.getLogger("swa_codec")

MODEL_KEYS = {
    "channels": int,
    "heads": int,
    "head_dim": int,
    "layers": int,
    "l_w": int,
    "h_w": int,
    "w_w": int,
    "mlp_ratio": int,
    "num_rate_points": int,
    "scale_min": float,
}
SYNTH_KEYS = {
    "rho": float,
    "shift_y": int,
    "shift_x": int,
    "noise": float,
    "frames": int,
    "height": int,
    "width": int,
}
TRAIN_KEYS = {
    "batch": int,
    "lr_hi": float,
    "lr_lo": float,
    "clip_norm": float,
    "heldout_clips": int,
    "downsample": int,
}
ALL_KEYS = {**MODEL_KEYS, **SYNTH_KEYS, **TRAIN_KEYS}


class UsageError(Exception):
    """Invalid flags or inputs; reported with exit status 2."""


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    output: str | None = None
    model: str | None = None
    seed: int | None = None
    k: int | None = None
    rate_idx: int = 0
    lam: float = 100.0
    steps: int | None = None
    kmax: int | None = None
    overrides: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def parse_overrides(path) -> dict:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = ALL_KEYS[key](value)
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value for {key}: {value!r}") from None
    return out


def model_config(overrides: dict, base=None):
    from .model import ModelConfig
    from .swa import WindowSpec

    base = base or ModelConfig()
    w = base.window
    window = WindowSpec(overrides.get("l_w", w.l_w), overrides.get("h_w", w.h_w), overrides.get("w_w", w.w_w))
    kw = {k: v for k, v in overrides.items() if k in MODEL_KEYS and k not in ("l_w", "h_w", "w_w")}
    try:
        return dataclasses.replace(base, window=window, **kw)
    except ValueError as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def synth_config(overrides: dict, seed: int, channels: int):
    from .training import SynthConfig

    base = SynthConfig()
    kw = {k: v for k, v in overrides.items() if k in SYNTH_KEYS and not k.startswith("shift")}
    shift = (overrides.get("shift_y", base.shift[0]), overrides.get("shift_x", base.shift[1]))
    try:
        return SynthConfig(seed=seed, channels=channels, shift=shift, **kw)
    except ValueError as exc:
        raise UsageError(f"invalid synthetic data config: {exc}") from None


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _require(value, flag: str, command: str):
    if value is None:
        raise UsageError(f"{command} requires {flag}")
    return value


def _load_model(path):
    from .model import ModelFormatError, load_model

    p = Path(_require(path, "--model", "this command"))
    if not p.is_file():
        raise UsageError(f"model file not found: {p}")
    try:
        return load_model(p)
    except ModelFormatError as exc:
        raise UsageError(f"{p}: {exc}") from None


def _out_dir(rc: RunConfig) -> Path:
    out = Path(_require(rc.output, "--output", rc.command))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_encode(rc: RunConfig) -> int:
    from .coder import encode_gop
    from .fileio import atomic_write
    from .latents import LatentFormatError, read_latents

    params = _load_model(rc.model)
    src = Path(_require(rc.input, "--input", "encode"))
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    try:
        vol = read_latents(src)
    except LatentFormatError as exc:
        raise UsageError(f"{src}: {exc}") from None
    if vol.shape[3] != params.config.channels:
        raise UsageError(f"{src}: {vol.shape[3]} channels, model expects {params.config.channels}")
    L = vol.shape[0]
    k = params.config.receptive_frames if rc.k is None else rc.k
    if k < 0:
        raise UsageError("--k must be >= 0")
    if k > L - 1:
        log.warning("k=%d exceeds the %d stored reference frames; clamped to %d", k, L - 1, L - 1)
        k = L - 1
    rc.k = k
    if not 0 <= rc.rate_idx < params.config.num_rate_points:
        raise UsageError(f"--rate-idx must be in [0, {params.config.num_rate_points})")
    res = encode_gop(vol, params, k, rc.rate_idx)
    out = Path(_require(rc.output, "--output", "encode"))
    atomic_write(out, res.stream)
    n = int(np.prod(vol.shape[1:]))
    rows = [
        [f, 8 * nb, f"{8 * nb / n:.6f}", f"{est:.3f}", f"{tab:.3f}"]
        for f, (nb, est, tab) in enumerate(zip(res.frame_bytes, res.estimated_bits, res.table_bits))
    ]
    _write_csv(
        out.with_name(out.name + ".stats.csv"),
        ["frame", "actual_bits", "bits_per_latent", "estimated_bits", "table_bits"],
        rows,
    )
    atomic_write_text(out.parent / "run.json", rc.to_json())
    total = sum(res.frame_bytes) * 8
    print(f"encoded {L} frames: {total} payload bits, {total / vol.size:.4f} bits/latent, {len(res.stream)} bytes")
    return 0


def refined_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}.refined{out.suffix}")


def cmd_decode(rc: RunConfig) -> int:
    from .coder import CorruptStreamError, ModelMismatchError, decode_gop
    from .latents import write_latents

    params = _load_model(rc.model)
    src = Path(_require(rc.input, "--input", "decode"))
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    try:
        res = decode_gop(src.read_bytes(), params)
    except (CorruptStreamError, ModelMismatchError) as exc:
        raise RuntimeError(str(exc)) from None
    out = Path(_require(rc.output, "--output", "decode"))
    write_latents(out, res.symbols, quantized=True)
    write_latents(refined_path(out), res.refined)
    atomic_write_text(out.parent / "run.json", rc.to_json())
    print(f"decoded {res.symbols.shape[0]} frames to {out}")
    return 0


def _train_from_rc(rc: RunConfig, out: Path):
    from .model import save_model
    from .training import train

    config = model_config(rc.overrides)
    synth = synth_config(rc.overrides, rc.seed, config.channels)
    kw = {k: rc.overrides[k] for k in ("batch", "lr_hi", "lr_lo", "clip_norm") if k in rc.overrides}
    steps = 500 if rc.steps is None else rc.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    rc.steps = steps
    result = train(synth, config, steps, lam=rc.lam, seed=rc.seed, rate_idx=rc.rate_idx, **kw)
    save_model(out / "model.swam", result.params)
    atomic_write_text(out / "train_log.csv", result.csv())
    return result.params, synth


def cmd_train(rc: RunConfig) -> int:
    _require(rc.seed, "--seed", "train")
    out = _out_dir(rc)
    atomic_write_text(out / "run.json", rc.to_json())
    _train_from_rc(rc, out)
    atomic_write_text(out / "run.json", rc.to_json())
    print(f"trained {rc.steps} steps; model written to {out / 'model.swam'}")
    return 0


def cmd_gradcheck(rc: RunConfig) -> int:
    from .training import grad_check

    report = grad_check(seed=0 if rc.seed is None else rc.seed)
    for line in report.lines():
        print(line)
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:.0e})")
    if rc.output:
        out = _out_dir(rc)
        _write_csv(
            out / "gradcheck.csv",
            ["group", "rel_error", "grad_norm"],
            [[g, f"{e:.6e}", f"{report.grad_norms[g]:.6e}"] for g, e in sorted(report.errors.items())],
        )
        atomic_write_text(out / "run.json", rc.to_json())
    return 0 if report.passed else 1


def cmd_ablate(rc: RunConfig) -> int:
    from .training import generate_clip, heldout_rate, HELDOUT_OFFSET

    _require(rc.seed, "--seed", "ablate")
    kmax = 4 if rc.kmax is None else rc.kmax
    if kmax < 0:
        raise UsageError("--kmax must be >= 0")
    rc.kmax = kmax
    out = _out_dir(rc)
    if rc.model:
        params = _load_model(rc.model)
        synth = synth_config(rc.overrides, rc.seed, params.config.channels)
    else:
        params, synth = _train_from_rc(rc, out)
    eval_synth = dataclasses.replace(synth, frames=max(synth.frames, kmax + 1))
    n = rc.overrides.get("heldout_clips", 4)
    clips = [generate_clip(eval_synth, HELDOUT_OFFSET + i) for i in range(n)]
    rows = []
    for k in range(kmax + 1):
        bpl = heldout_rate(params, clips, k, rc.rate_idx)
        rows.append([k, f"{bpl:.12f}"])
        print(f"k={k:3d} bits/latent={bpl:.6f}")
    _write_csv(out / "ablation.csv", ["k", "bits_per_latent"], rows)
    atomic_write_text(out / "run.json", rc.to_json())
    return 0


def cmd_complexity(rc: RunConfig) -> int:
    from .complexity import DEFAULT_DOWNSAMPLE, FULL_SCALE, PatchBased, Patchless, compare, rows_to_csv

    config = model_config(rc.overrides, FULL_SCALE)
    downsample = rc.overrides.get("downsample", DEFAULT_DOWNSAMPLE)
    rows = compare([Patchless(), PatchBased()], config, downsample=downsample)
    text = rows_to_csv(rows)
    if rc.output:
        out = _out_dir(rc)
        atomic_write_text(out / "complexity.csv", text)
        atomic_write_text(out / "run.json", rc.to_json())
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "complexity": cmd_complexity,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swa-codec", description="Patchless SWA entropy coding of latent volumes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--input")
        s.add_argument("--output")
        s.add_argument("--model")
        s.add_argument("--seed", type=int)
        s.add_argument("--k", type=int)
        s.add_argument("--rate-idx", type=int, default=0)
        s.add_argument("--lambda", dest="lam", type=float, default=100.0)
        s.add_argument("--steps", type=int)
        s.add_argument("--config")
        s.add_argument("--kmax", type=int)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="swa-codec: warning: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = RunConfig(
            command=args.command,
            input=args.input,
            output=args.output,
            model=args.model,
            seed=args.seed,
            k=args.k,
            rate_idx=args.rate_idx,
            lam=args.lam,
            steps=args.steps,
            kmax=args.kmax,
            overrides=parse_overrides(args.config),
        )
        if rc.lam < 0:
            raise UsageError("--lambda must be >= 0")
        return COMMANDS[args.command](rc)
    except UsageError as exc:
        print(f"swa-codec: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"swa-codec: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
