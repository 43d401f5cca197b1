"""Analytic multiply-accumulate counts for patchless and patch-based entropy models.

All counts are integers in MACs; ``*_per_px`` values divide by the number of
source pixels per hyperpixel (``downsample ** 2``).  Every modeling
assumption about the patch-based baseline is a named field of
:class:`PatchBased` so the comparison can be redone under other choices.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import ModelConfig
from .swa import Dims, WindowSpec, scan_coords

COMPONENTS = ("projections", "attention_scores", "attention_values", "mlp", "heads")
DEFAULT_DOWNSAMPLE = 16


@dataclass(frozen=True)
class Patchless:
    name: str = "patchless"


@dataclass(frozen=True)
class PatchBased:
    """Overlapping-window temporal context with an autoregressive patch decoder.

    ``decoder_layers=None`` picks the largest depth whose parameter count does
    not exceed the patchless model's.
    """

    patch: int = 8
    context: int = 16
    stride: int = 8
    ref_frames: int = 2
    encoder_layers: int = 6
    decoder_layers: int | None = None
    causal_decoder: bool = True
    name: str = "patch_based"

    def __post_init__(self):
        if self.context < self.patch or (self.context - self.patch) % 2:
            raise ValueError("context must exceed patch by an even margin")

    def resolved_decoder_layers(self, config: ModelConfig) -> int:
        if self.decoder_layers is not None:
            return self.decoder_layers
        # per-layer weights in units of C^2: SWA/encoder block 4 + 2r, decoder block 8 + 2r
        r = config.mlp_ratio
        budget = config.layers * (4 + 2 * r) - self.encoder_layers * (4 + 2 * r)
        return max(budget // (8 + 2 * r), 0)


@dataclass
class CostBreakdown:
    scheme: str
    macs: dict[str, int]  # total over the counted tokens
    tokens: int  # hyperpixels the totals are spread over
    downsample: int = DEFAULT_DOWNSAMPLE
    extra: dict[str, Fraction] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def per_hyperpixel(self, component: str | None = None) -> float:
        v = self.total if component is None else self.macs[component]
        return v / self.tokens

    def per_px(self, component: str | None = None) -> float:
        return self.per_hyperpixel(component) / self.downsample**2

    def kmacs_per_px(self, component: str | None = None) -> float:
        return self.per_px(component) / 1000.0


# ---------------------------------------------------------------------------
# patchless


def interior_visible(window: WindowSpec) -> int:
    """Strictly-earlier keys visible to a query with a full window."""
    h = 2 * window.h_w + 1
    w = 2 * window.w_w + 1
    return window.l_w * h * w + window.h_w * w + window.w_w


def _axis_sum(size: int, reach: int, causal_side: bool) -> tuple[int, int]:
    """Sum over positions of the clipped full span and of the clipped earlier span."""
    full = sum(min(c + reach, size - 1) - max(c - reach, 0) + 1 for c in range(size))
    before = sum(min(c, reach) for c in range(size))
    return full, before


def total_visible_strict(dims: Dims, window: WindowSpec) -> int:
    """Sum of strictly-earlier visible keys over every query of ``dims``."""
    L, H, W = dims
    rows, above = _axis_sum(H, window.h_w, True)
    cols, left = _axis_sum(W, window.w_w, True)
    frames_before = sum(min(l, window.l_w) for l in range(L))
    return frames_before * rows * cols + L * above * cols + L * H * left


def patchless_cost(
    config: ModelConfig,
    dims: Dims | None = None,
    downsample: int = DEFAULT_DOWNSAMPLE,
    exact: bool = False,
) -> CostBreakdown:
    """MACs of the SWA model.

    ``exact=False`` charges every hyperpixel the full-window cost of a
    decoded token.  ``exact=True`` reproduces the teacher-forced pass over
    ``dims`` operation by operation, including border clipping, the zero
    prepend row and layer-one queries computed on the content stream.
    """
    C, D, r = config.channels, config.layers, config.mlp_ratio
    if exact:
        if dims is None:
            raise ValueError("exact accounting needs dims")
        T = int(np.prod(dims))
        strict = total_visible_strict(dims, config.window)
        if D == 0:
            macs = dict.fromkeys(COMPONENTS, 0)
        else:
            proj = 3 * (T + 1) * C * C + T * C * C + (D - 1) * 4 * T * C * C
            att = D * (strict + T) * C
            macs = {
                "projections": proj,
                "attention_scores": att,
                "attention_values": att,
                "mlp": D * 2 * r * T * C * C,
                "heads": 3 * T * C * C,
            }
        return CostBreakdown("patchless", macs, T, downsample)
    vis = interior_visible(config.window) + 1
    macs = {
        "projections": D * 4 * C * C,
        "attention_scores": D * vis * C,
        "attention_values": D * vis * C,
        "mlp": D * 2 * r * C * C,
        "heads": 3 * C * C if D else 0,
    }
    return CostBreakdown("patchless", macs, 1, downsample)


# ---------------------------------------------------------------------------
# patch-based


def patch_based_cost(
    scheme: PatchBased,
    config: ModelConfig,
    downsample: int = DEFAULT_DOWNSAMPLE,
) -> CostBreakdown:
    """MACs per interior patch of the overlapping-window scheme, same width as ``config``."""
    C, r = config.channels, config.mlp_ratio
    n_q = scheme.patch**2
    n_mem = scheme.ref_frames * scheme.context**2
    E = scheme.encoder_layers
    X = scheme.resolved_decoder_layers(config)
    # decoder self-attention keys summed over the patch's queries
    self_keys = n_q * (n_q + 1) // 2 if scheme.causal_decoder else n_q * n_q
    proj = E * 4 * n_mem * C * C + X * (4 * n_q * C * C + 2 * n_q * C * C + 2 * n_mem * C * C)
    att = E * n_mem * n_mem * C + X * (self_keys + n_q * n_mem) * C
    macs = {
        "projections": proj,
        "attention_scores": att,
        "attention_values": att,
        "mlp": E * 2 * r * n_mem * C * C + X * 2 * r * n_q * C * C,
        "heads": 3 * n_q * C * C if (E + X) else 0,
    }
    return CostBreakdown(scheme.name, macs, n_q, downsample)


def count_macs(scheme, config: ModelConfig, dims: Dims | None = None,
               downsample: int = DEFAULT_DOWNSAMPLE, exact: bool = False) -> CostBreakdown:
    if isinstance(scheme, Patchless):
        return patchless_cost(config, dims, downsample, exact)
    if isinstance(scheme, PatchBased):
        return patch_based_cost(scheme, config, downsample)
    raise TypeError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# reference-token processing


def window_passes(scheme: PatchBased, extent: int) -> np.ndarray:
    """How many context windows cover each position along one axis."""
    margin = (scheme.context - scheme.patch) // 2
    passes = np.zeros(extent, dtype=np.int64)
    for start in range(0, extent, scheme.stride):
        lo = max(start - margin, 0)
        hi = min(start + scheme.patch + margin, extent)
        passes[lo:hi] += 1
    return passes


def reference_token_passes(scheme, extent: tuple[int, int] = (64, 64), interior: bool = True) -> Fraction:
    """Mean number of times a reference hyperpixel is encoded per coded frame.

    Interior accounting ignores positions within one context window of the
    frame border.
    """
    if isinstance(scheme, Patchless):
        return Fraction(1)
    H, W = extent
    py = window_passes(scheme, H)
    px = window_passes(scheme, W)
    if interior:
        pad = scheme.context
        py, px = py[pad : H - pad], px[pad : W - pad]
        if not len(py) or not len(px):
            raise ValueError("extent too small for interior accounting")
    return Fraction(int(py.sum() * px.sum()), len(py) * len(px))


def position_visible_counts(dims: Dims, window: WindowSpec) -> np.ndarray:
    """Strict causal visible-key count for every query of ``dims`` (scan order)."""
    from .swa import visible_count

    return np.array([visible_count(tuple(c), dims, window, causal=True) for c in scan_coords(dims)])


# ---------------------------------------------------------------------------
# report


FULL_SCALE = ModelConfig(
    channels=768,
    heads=12,
    head_dim=64,
    layers=20,
    window=WindowSpec(2, 3, 3),
    mlp_ratio=4,
    num_rate_points=4,
)


def compare(schemes, config: ModelConfig, dims: Dims | None = None,
            downsample: int = DEFAULT_DOWNSAMPLE) -> list[dict]:
    """Per-component rows plus a reference-token passes line.

    The first scheme is the reference for ratios.  In the
    ``reference_token_passes`` rows the value column holds passes per
    reference hyperpixel rather than MACs.
    """
    costs = [count_macs(s, config, dims, downsample) for s in schemes]
    base = costs[0]
    rows = []
    for s, cost in zip(schemes, costs):
        for comp in (*COMPONENTS, "total"):
            key = None if comp == "total" else comp
            v = cost.per_px(key)
            ref = base.per_px(key)
            rows.append(
                {
                    "scheme": cost.scheme,
                    "component": comp,
                    "macs_per_px": v,
                    "ratio_vs_patchless": v / ref if ref else float("nan"),
                }
            )
    base_passes = reference_token_passes(schemes[0])
    for s in schemes:
        p = reference_token_passes(s)
        rows.append(
            {
                "scheme": s.name,
                "component": "reference_token_passes",
                "macs_per_px": float(p),
                "ratio_vs_patchless": float(p / base_passes),
            }
        )
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["scheme", "component", "macs_per_px", "ratio_vs_patchless"], lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({**row, "macs_per_px": f"{row['macs_per_px']:.6g}", "ratio_vs_patchless": f"{row['ratio_vs_patchless']:.6g}"})
    return buf.getvalue()
