"""Toy-scale training on synthetic translating latents."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import tensor as tc
from .coder import DEFAULT_SUPPORT, build_cdfs, estimate_rate_bits, estimate_rate_bits_np, quantize_latents, table_bits
from .model import ModelConfig, ModelParams, forward_teacher_forced, init_params, predict_frame
from .tensor import Tensor

HELDOUT_OFFSET = 1_000_000
CALIBRATION_OFFSET = 2_000_000
# learning-rate multipliers keyed by parameter-name substring
DEFAULT_LR_SCALE = {"bias_table": 30.0}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite."""


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    rho: float = 0.8
    shift: tuple[int, int] = (1, 1)
    noise: float = 0.2
    frames: int = 3
    height: int = 8
    width: int = 8
    channels: int = 64
    amplitude: tuple[float, float] = (1.5, 5.0)

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValueError("clip dimensions must be >= 1")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)


def _ar1_field(rng, rho, shape):
    e = rng.standard_normal(shape)
    c = math.sqrt(1.0 - rho * rho)
    f = e.copy()
    for x in range(1, shape[1]):
        f[:, x] = rho * f[:, x - 1] + c * e[:, x]
    for y in range(1, shape[0]):
        f[y] = rho * f[y - 1] + c * f[y]
    return f


def generate_clip(synth: SynthConfig, index: int = 0) -> np.ndarray:
    """One ``(L, H, W, C)`` clip: an AR(1) field rolled by ``shift`` each frame plus noise."""
    rng = np.random.default_rng((synth.seed, index))
    L, H, W, C = synth.dims
    frame = _ar1_field(rng, synth.rho, (H, W, C))
    frames = [frame]
    for _ in range(1, L):
        frame = np.roll(frame, synth.shift, axis=(0, 1)) + synth.noise * rng.standard_normal((H, W, C))
        frames.append(frame)
    amp = np.linspace(*synth.amplitude, C)
    return np.stack(frames) * amp


def heldout_clips(synth: SynthConfig, n: int) -> list[np.ndarray]:
    return [generate_clip(synth, HELDOUT_OFFSET + i) for i in range(n)]


# ---------------------------------------------------------------------------
# objective


def quantize_ste(y: Tensor) -> Tensor:
    """Round half to even in the forward pass, identity gradient in the backward pass."""
    return tc.add(y, Tensor(np.round(y.data) - y.data))


@dataclass
class LossParts:
    total: Tensor
    rate_bits_per_latent: float
    mse: float


def loss(clip, params: ModelParams, rate_idx: int = 0, lam: float = 100.0) -> LossParts:
    """Rate in bits per latent plus ``lam`` times the MSE of the LRP-refined latents."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    clip = np.asarray(clip, dtype=np.float64)
    L, H, W, C = clip.shape
    y = Tensor(clip.reshape(-1, C))
    y_hat = quantize_ste(y)
    pred = forward_teacher_forced(y_hat.data.reshape(clip.shape), params, rate_idx)
    n = y.size
    rate = tc.div(estimate_rate_bits(y_hat, pred.mu, pred.sigma), float(n))
    err = tc.sub(y, tc.add(y_hat, pred.lrp))
    mse = tc.mean(tc.mul(err, err))
    total = tc.add(rate, tc.mul(mse, lam)) if lam else rate
    return LossParts(total, rate.item(), mse.item())


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(step: int, total: int, lr_hi: float, lr_lo: float) -> float:
    if total <= 1:
        return lr_hi
    t = min(max(step, 0), total - 1) / (total - 1)
    return lr_lo + 0.5 * (lr_hi - lr_lo) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    total_steps: int = 1
    lr_hi: float = 1e-3
    lr_lo: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_scale: dict[str, float] = field(default_factory=dict)

    @classmethod
    def create(cls, params: ModelParams, total_steps: int, lr_hi=1e-3, lr_lo=1e-5) -> TrainState:
        zeros = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        return cls(params, zeros, {n: z.copy() for n, z in zeros.items()}, 0, total_steps, lr_hi, lr_lo)

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr_hi, self.lr_lo)

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        lr = self.lr
        self.step += 1
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            scale = next((f for key, f in self.lr_scale.items() if key in name), 1.0)
            self.params[name].data -= scale * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["step", "lr", "rate_bits_per_latent", "mse"], lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow(row)
        return buf.getvalue()


def calibrate_rate_gains(params: ModelParams, clips: list[np.ndarray]) -> None:
    """Data-dependent init: unit-scale inputs and per-channel output scales."""
    std = np.sqrt(np.mean([np.mean(np.round(c) ** 2, axis=(0, 1, 2)) for c in clips], axis=0))
    std = np.maximum(std, 1.0)
    R = params.config.num_rate_points
    params["rate.g_in"].data[...] = np.tile(1.0 / std, (R, 1))
    params["rate.g_mu"].data[...] = np.tile(std, (R, 1))
    params["rate.g_sigma"].data[...] = 1.0
    # softplus inverse, so that sigma starts near the channel scale
    target = np.maximum(std - params.config.scale_min, 1e-3)
    params["out.sigma.b"].data[...] = target + np.log(-np.expm1(-target))


def _trainable(params: ModelParams, freeze_rate_gains: bool) -> list[str]:
    return [n for n in params.names() if not (freeze_rate_gains and n.startswith("rate."))]


def train(
    synth: SynthConfig,
    config: ModelConfig,
    steps: int,
    lam: float = 100.0,
    seed: int = 0,
    rate_idx: int = 0,
    lr_hi: float = 3e-3,
    lr_lo: float = 3e-5,
    clip_norm: float = 1.0,
    freeze_rate_gains: bool = False,
    params: ModelParams | None = None,
    lr_scale: dict[str, float] | None = None,
    batch: int = 2,
    calibrate: bool = False,
) -> TrainResult:
    """Adam with a cosine schedule; ``batch`` fresh synthetic clips per step."""
    if synth.channels != config.channels:
        raise ValueError("synthetic channels must match the model width")
    if params is None:
        params = init_params(config, seed)
        if calibrate:
            calibrate_rate_gains(params, [generate_clip(synth, CALIBRATION_OFFSET + i) for i in range(8)])
    names = _trainable(params, freeze_rate_gains)
    state = TrainState.create(params, steps, lr_hi, lr_lo)
    state.lr_scale = dict(DEFAULT_LR_SCALE if lr_scale is None else lr_scale)
    result = TrainResult(params)
    for step in range(steps):
        batch_parts = [loss(generate_clip(synth, step * batch + i), params, rate_idx, lam) for i in range(batch)]
        total = batch_parts[0].total
        for extra in batch_parts[1:]:
            total = tc.add(total, extra.total)
        parts = LossParts(
            tc.div(total, float(batch)),
            float(np.mean([b.rate_bits_per_latent for b in batch_parts])),
            float(np.mean([b.mse for b in batch_parts])),
        )
        value = parts.total.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at step {step} (rate={parts.rate_bits_per_latent}, mse={parts.mse})"
            )
        for n in names:
            params[n].zero_grad()
        grads = tc.backward(parts.total, [params[n] for n in names])
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingDivergedError(f"non-finite gradient at step {step} (loss={value})")
        scale = clip_norm / norm if clip_norm and norm > clip_norm else 1.0
        result.log.append(
            {"step": step, "lr": state.lr, "rate_bits_per_latent": parts.rate_bits_per_latent, "mse": parts.mse}
        )
        state.apply({n: g * scale for n, g in zip(names, grads)})
    return result


# ---------------------------------------------------------------------------
# evaluation


def heldout_rate(
    params: ModelParams,
    clips: list[np.ndarray],
    k: int,
    rate_idx: int = 0,
    support=DEFAULT_SUPPORT,
) -> float:
    """Bits per latent of the quantized integer tables with at most ``k`` reference frames."""
    bits = 0.0
    count = 0
    scale_min = params.config.scale_min
    for clip in clips:
        sym = quantize_latents(clip, support)
        for f in range(sym.shape[0]):
            mu, sigma, _ = predict_frame(sym.astype(np.float64), f, params, k, rate_idx)
            bits += table_bits(sym[f], build_cdfs(mu, sigma, support, scale_min=scale_min), support[0])
            count += sym[f].size
    return bits / count


def heldout_mse(params: ModelParams, clips: list[np.ndarray], rate_idx: int = 0) -> tuple[float, float]:
    """MSE of quantized and of LRP-refined latents against the originals."""
    plain = refined = 0.0
    n = 0
    for clip in clips:
        y_hat = np.round(clip)
        pred = forward_teacher_forced(y_hat, params, rate_idx)
        r = pred.lrp.data.reshape(clip.shape)
        plain += float(np.sum((clip - y_hat) ** 2))
        refined += float(np.sum((clip - y_hat - r) ** 2))
        n += clip.size
    return plain / n, refined / n


@dataclass(frozen=True)
class Baseline:
    sigma: float
    bits_per_latent: float


def context_free_baseline(
    train_clips: list[np.ndarray],
    eval_clips: list[np.ndarray],
    support=DEFAULT_SUPPORT,
    scale_min: float = 0.02,
) -> Baseline:
    """Zero-mean Gaussian with one global scale fitted on ``train_clips``."""
    sym = np.concatenate([quantize_latents(c, support).ravel() for c in train_clips])

    def bits(log_sigma):
        s = math.exp(log_sigma)
        return estimate_rate_bits_np(sym, np.zeros(sym.shape), np.full(sym.shape, s), support)

    res = minimize_scalar(bits, bounds=(math.log(scale_min), math.log(100.0)), method="bounded")
    sigma = math.exp(res.x)
    total = 0.0
    n = 0
    for clip in eval_clips:
        s = quantize_latents(clip, support)
        cum = build_cdfs(np.zeros(s.shape), np.full(s.shape, sigma), support, scale_min=scale_min)
        total += table_bits(s, cum, support[0])
        n += s.size
    return Baseline(sigma, total / n)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    grad_norms: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        return [
            f"{g:<24s} rel_err={e:.3e} |grad|={self.grad_norms[g]:.3e}" for g, e in sorted(self.errors.items())
        ]


def grad_check_config() -> ModelConfig:
    from .swa import WindowSpec

    return ModelConfig(channels=8, heads=2, head_dim=4, layers=2, window=WindowSpec(1, 1, 1), num_rate_points=2)


def grad_check(
    config: ModelConfig | None = None,
    tolerance: float = 1e-4,
    seed: int = 0,
    dims: tuple[int, int, int] = (1, 3, 3),
    probes: int = 4,
    eps: float = 1e-5,
    lam: float = 100.0,
    rate_idx: int = 1,
    freeze_rate_gains: bool = False,
) -> GradCheckReport:
    """Central finite differences against analytic gradients, per parameter group.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)`` on sampled entries.
    The step is ``eps * max(1, |theta|)``; near the cube root of float64
    precision, which balances truncation against cancellation.
    """
    config = config or grad_check_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, std=0.3)
    for name, t in params.tensors.items():
        if name.startswith("rate.") or name.endswith(("gain", "bias", ".b", "b1", "b2", "bias_table")):
            base = 1.0 if name.startswith("rate.") or name.endswith("gain") else 0.0
            t.data = base + rng.normal(0.0, 0.3, t.shape)
        if freeze_rate_gains and name.startswith("rate."):
            t.requires_grad = False
    clip = rng.normal(0.0, 2.0, (*dims, config.channels))

    def f() -> float:
        return loss(clip, params, rate_idx, lam).total.item()

    parts = loss(clip, params, rate_idx, lam)
    names = params.names()
    grads = dict(zip(names, tc.backward(parts.total, [params[n] for n in names])))
    errors: dict[str, float] = {}
    norms: dict[str, float] = {}
    for group, members in params.groups().items():
        worst = 0.0
        gnorm = 0.0
        for name in members:
            t = params[name]
            g = grads[name]
            gnorm += float(np.sum(g * g))
            if not t.requires_grad:
                continue
            flat = np.abs(g).ravel()
            top = list(np.argsort(-flat, kind="stable")[:probes])
            top += list(rng.choice(flat.size, size=min(probes, flat.size), replace=False))
            for i in dict.fromkeys(int(j) for j in top):
                idx = np.unravel_index(i, t.shape)
                old = t.data[idx]
                h = eps * max(1.0, abs(old))
                t.data[idx] = old + h
                up = f()
                t.data[idx] = old - h
                down = f()
                t.data[idx] = old
                num = (up - down) / (2 * h)
                ana = g[idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        norms[group] = math.sqrt(gnorm)
        if any(params[n].requires_grad for n in members):
            errors[group] = worst
    return GradCheckReport(errors, norms, tolerance)
