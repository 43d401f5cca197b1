"""3D sliding-window attention over latent volumes in line-scan order.

A volume of ``L x H x W`` hyperpixels is flattened frame-major, then row-major
(``t = l*H*W + y*W + x``).  Query ``m`` attends to key ``n`` when their offset
lies inside the window; the score gets a learned relative bias
``s[dl + l_w, dy + h_w, dx + w_w]`` and is scaled together with ``q.k`` by
``1/sqrt(d_k)``.  No padding tokens exist: border queries simply see fewer keys.

:func:`dense_masked_attention` materialises the full ``T x T`` bias matrix and
serves as the oracle.  :func:`blocked_swa` walks query/key blocks, skips every
block pair whose entries are all masked, and never builds the full matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .tensor import DegenerateRowError, Tensor

Dims = tuple[int, int, int]
Position = tuple[int, int, int]

DEFAULT_BLOCK_SIZE = 16


@dataclass(frozen=True)
class WindowSpec:
    """Maximum |offset| along (frames, rows, columns)."""

    l_w: int
    h_w: int
    w_w: int

    def __post_init__(self):
        for name in ("l_w", "h_w", "w_w"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def kernel_shape(self) -> tuple[int, int, int]:
        return (2 * self.l_w + 1, 2 * self.h_w + 1, 2 * self.w_w + 1)

    @property
    def cells(self) -> int:
        a, b, c = self.kernel_shape
        return a * b * c

    def contains(self, dl: int, dy: int, dx: int) -> bool:
        return abs(dl) <= self.l_w and abs(dy) <= self.h_w and abs(dx) <= self.w_w

    def cell(self, dl, dy, dx):
        """Flat index of an offset into a bias table (works on arrays too)."""
        _, kh, kw = self.kernel_shape
        return ((dl + self.l_w) * kh + (dy + self.h_w)) * kw + (dx + self.w_w)


# ---------------------------------------------------------------------------
# scan order


def scan_index(pos: Position, dims: Dims) -> int:
    l, y, x = pos
    _, h, w = dims
    return (l * h + y) * w + x


def scan_position(t: int, dims: Dims) -> Position:
    _, h, w = dims
    l, rem = divmod(int(t), h * w)
    y, x = divmod(rem, w)
    return l, y, x


@lru_cache(maxsize=128)
def _coords(dims: Dims) -> np.ndarray:
    L, H, W = dims
    l, y, x = np.meshgrid(np.arange(L), np.arange(H), np.arange(W), indexing="ij")
    out = np.stack([l.ravel(), y.ravel(), x.ravel()], axis=1)
    out.setflags(write=False)
    return out


def scan_coords(dims: Dims) -> np.ndarray:
    """``(T, 3)`` array of ``(l, y, x)`` in scan order."""
    return _coords(tuple(int(d) for d in dims))


# ---------------------------------------------------------------------------
# geometry primitives


def window_bias(m: Position, n: Position, window: WindowSpec, table: np.ndarray) -> float:
    """Relative bias from query ``m`` to key ``n``, or ``-inf`` outside the window."""
    dl, dy, dx = (n[0] - m[0], n[1] - m[1], n[2] - m[2])
    if not window.contains(dl, dy, dx):
        return -math.inf
    return float(np.asarray(table)[dl + window.l_w, dy + window.h_w, dx + window.w_w])


def causal_mask(m: Position, n: Position, dims: Dims, include_self: bool = False) -> bool:
    """True when key ``n`` is already decoded when predicting ``m``."""
    tm, tn = scan_index(m, dims), scan_index(n, dims)
    return tn < tm or (include_self and tn == tm)


def _resolve_self(causal: bool, include_self: bool | None) -> bool:
    return (not causal) if include_self is None else bool(include_self)


def _span(c: int, reach: int, size: int) -> int:
    return min(c + reach, size - 1) - max(c - reach, 0) + 1


def visible_count(
    m: Position,
    dims: Dims,
    window: WindowSpec,
    causal: bool = True,
    include_self: bool | None = None,
) -> int:
    """Number of keys visible to query ``m`` (closed form)."""
    include_self = _resolve_self(causal, include_self)
    l, y, x = m
    L, H, W = dims
    rows = _span(y, window.h_w, H)
    cols = _span(x, window.w_w, W)
    if not causal:
        return _span(l, window.l_w, L) * rows * cols - (0 if include_self else 1)
    earlier_frames = min(l, window.l_w) * rows * cols
    rows_above = min(y, window.h_w) * cols
    left = min(x, window.w_w)
    return earlier_frames + rows_above + left + int(include_self)


def visibility_mask(
    dims: Dims, window: WindowSpec, causal: bool = True, include_self: bool | None = None
) -> np.ndarray:
    """``(T, T)`` boolean matrix, row = query, column = key."""
    include_self = _resolve_self(causal, include_self)
    c = scan_coords(dims)
    d = c[None, :, :] - c[:, None, :]
    vis = (
        (np.abs(d[..., 0]) <= window.l_w)
        & (np.abs(d[..., 1]) <= window.h_w)
        & (np.abs(d[..., 2]) <= window.w_w)
    )
    t = np.arange(len(c))
    if causal:
        vis &= t[None, :] < t[:, None]
    if include_self:
        vis[t, t] = True
    else:
        vis[t, t] = False
    return vis


def offset_cells(dims: Dims, window: WindowSpec) -> np.ndarray:
    """``(T, T)`` flat bias-table index of every offset (clipped outside the window)."""
    c = scan_coords(dims)
    d = c[None, :, :] - c[:, None, :]
    dl = np.clip(d[..., 0], -window.l_w, window.l_w)
    dy = np.clip(d[..., 1], -window.h_w, window.h_w)
    dx = np.clip(d[..., 2], -window.w_w, window.w_w)
    return window.cell(dl, dy, dx)


def bias_matrix(
    dims: Dims,
    window: WindowSpec,
    table: np.ndarray,
    causal: bool = True,
    include_self: bool | None = None,
) -> np.ndarray:
    """Full ``T x T`` bias matrix for one head (window bias plus causal mask)."""
    flat = np.asarray(table, dtype=np.float64).reshape(-1)
    vis = visibility_mask(dims, window, causal, include_self)
    return np.where(vis, flat[offset_cells(dims, window)], -np.inf)


def dense_bias(
    dims: Dims,
    window: WindowSpec,
    tables: Tensor,
    causal: bool = True,
    include_self: bool | None = None,
) -> list[Tensor]:
    """Per-head bias matrices as differentiable functions of the tables."""
    vis = visibility_mask(dims, window, causal, include_self)
    cells = offset_cells(dims, window)
    out = []
    for i in range(tables.shape[0]):
        flat = tc.reshape(tc.take_rows(tables, [i]), (window.cells,))
        out.append(tc.where(vis, tc.take_rows(flat, cells), -np.inf))
    return out


# ---------------------------------------------------------------------------
# weights


@dataclass
class AttentionWeights:
    """Projections; head ``i`` uses columns ``i*d_k:(i+1)*d_k`` of ``wq``/``wk``/``wv``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        c = self.wq.shape[0]
        hd = self.heads * self.head_dim
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (c, hd):
                raise tc.ShapeError(f"{name} must be {(c, hd)}, got {getattr(self, name).shape}")
        if self.wo.shape != (hd, c):
            raise tc.ShapeError(f"wo must be {(hd, c)}, got {self.wo.shape}")

    @classmethod
    def init(
        cls,
        channels: int,
        heads: int,
        head_dim: int,
        rng: np.random.Generator,
        std: float = 0.02,
        out_scale: float = 1.0,
        requires_grad: bool = True,
    ) -> AttentionWeights:
        hd = heads * head_dim

        def draw(shape, s):
            return Tensor(rng.normal(0.0, s, size=shape), requires_grad=requires_grad)

        return cls(
            draw((channels, hd), std),
            draw((channels, hd), std),
            draw((channels, hd), std),
            draw((hd, channels), std * out_scale),
            heads,
            head_dim,
        )


@dataclass
class KernelStats:
    """Instrumentation counters for the block-skipping kernel."""

    total_blocks: int = 0
    visited_blocks: int = 0
    score_macs: int = 0
    value_macs: int = 0
    executed_macs: int = 0
    calls: int = field(default=0)


# ---------------------------------------------------------------------------
# dense oracle


def dense_masked_attention(
    Y: Tensor,
    weights: AttentionWeights,
    B,
    Y_kv: Tensor | None = None,
) -> Tensor:
    """Reference multi-head attention with an explicit per-head bias matrix.

    ``B`` is a sequence of ``(T_q, T_k)`` arrays or tensors whose masked entries
    are ``-inf``.  Keys and values come from ``Y_kv`` (default ``Y``).
    """
    Y_kv = Y if Y_kv is None else Y_kv
    d = weights.head_dim
    scale = 1.0 / math.sqrt(d)
    q = tc.matmul(Y, weights.wq)
    k = tc.matmul(Y_kv, weights.wk)
    v = tc.matmul(Y_kv, weights.wv)
    heads = []
    for i in range(weights.heads):
        qi = tc.slice_cols(q, i * d, (i + 1) * d)
        ki = tc.slice_cols(k, i * d, (i + 1) * d)
        vi = tc.slice_cols(v, i * d, (i + 1) * d)
        scores = tc.add(tc.matmul(qi, tc.transpose(ki)), tc.constant(B[i]))
        probs = tc.softmax_lastdim(tc.mul(scores, scale))
        heads.append(tc.matmul(probs, vi))
    return tc.matmul(tc.concat_cols(heads), weights.wo)


# ---------------------------------------------------------------------------
# block plan


@dataclass
class _Pair:
    k0: int
    k1: int
    mask: np.ndarray
    cell: np.ndarray
    cell_visible: np.ndarray
    visible: int


@dataclass
class KernelPlan:
    dims: Dims
    window: WindowSpec
    causal: bool
    include_self: bool
    block_size: int
    query_blocks: list[tuple[int, int, list[_Pair]]]
    total_blocks: int
    visited_blocks: int
    visible_pairs: int


@lru_cache(maxsize=256)
def kernel_plan(
    dims: Dims, window: WindowSpec, causal: bool, include_self: bool, block_size: int
) -> KernelPlan:
    """Visited block pairs with their masks; depends on geometry only."""
    if block_size < 1:
        raise ValueError("block_size must be positive")
    L, H, W = dims
    T = L * H * W
    coords = scan_coords(dims)
    t = np.arange(T)
    n_blocks = -(-T // block_size)
    k_boxes = []
    for kb in range(n_blocks):
        c = coords[kb * block_size : (kb + 1) * block_size]
        k_boxes.append((c.min(axis=0), c.max(axis=0)))
    reach = np.array([window.l_w, window.h_w, window.w_w])

    blocks = []
    visited = 0
    visible_pairs = 0
    for qb in range(n_blocks):
        a, b = qb * block_size, min((qb + 1) * block_size, T)
        qc = coords[a:b]
        qmin, qmax = qc.min(axis=0), qc.max(axis=0)
        first_frame = max(int(qmin[0]) - window.l_w, 0)
        lo = scan_index((first_frame, 0, 0), dims)
        if causal:
            hi = b - 1
        else:
            hi = scan_index((min(int(qmax[0]) + window.l_w, L - 1), H - 1, W - 1), dims)
        pairs = []
        for kb in range(lo // block_size, hi // block_size + 1):
            k0, k1 = kb * block_size, min((kb + 1) * block_size, T)
            if causal and k0 > b - 1:
                continue
            kmin, kmax = k_boxes[kb]
            gap = np.maximum(0, np.maximum(kmin - qmax, qmin - kmax))
            if (gap > reach).any():
                continue
            d = coords[k0:k1][None, :, :] - qc[:, None, :]
            mask = (np.abs(d) <= reach).all(axis=-1)
            tq, tk = t[a:b, None], t[None, k0:k1]
            if causal:
                mask &= (tk < tq) | ((tk == tq) & include_self)
            elif not include_self:
                mask &= tk != tq
            n_vis = int(mask.sum())
            if n_vis == 0:
                continue
            dl = np.clip(d[..., 0], -window.l_w, window.l_w)
            dy = np.clip(d[..., 1], -window.h_w, window.h_w)
            dx = np.clip(d[..., 2], -window.w_w, window.w_w)
            cell = np.where(mask, window.cell(dl, dy, dx), 0)
            pairs.append(_Pair(k0, k1, mask, cell, cell[mask], n_vis))
            visited += 1
            visible_pairs += n_vis
        blocks.append((a, b, pairs))
    return KernelPlan(
        dims, window, causal, include_self, block_size, blocks, n_blocks * n_blocks, visited, visible_pairs
    )


# ---------------------------------------------------------------------------
# fused kernel


def _heads_first(x: np.ndarray, heads: int) -> np.ndarray:
    T = x.shape[0]
    return np.ascontiguousarray(x.reshape(T, heads, -1).transpose(1, 0, 2))


def _forward(plan, q, k, v, tab, scale, extra):
    h, T, d = q.shape
    out = np.empty_like(q)
    lse = np.empty((h, T))
    for a, b, pairs in plan.query_blocks:
        qb = q[:, a:b]
        if extra is not None:
            ks, vs, cell = extra
            m = (np.einsum("hqd,hqd->hq", qb, ks[:, a:b]) + tab[:, cell[a:b]]) * scale
            l = np.ones_like(m)
            acc = vs[:, a:b].copy()
        else:
            m = np.full((h, b - a), -np.inf)
            l = np.zeros((h, b - a))
            acc = np.zeros((h, b - a, d))
        for p in pairs:
            s = (qb @ k[:, p.k0 : p.k1].transpose(0, 2, 1) + tab[:, p.cell]) * scale
            s = np.where(p.mask, s, -np.inf)
            m_new = np.maximum(m, s.max(axis=-1))
            seen = np.isfinite(m_new)
            ref = np.where(seen, m_new, 0.0)
            had = np.isfinite(m)
            alpha = np.where(had, np.exp(np.where(had, m - ref, 0.0)), 0.0)
            e = np.exp(np.where(p.mask, s - ref[..., None], 0.0)) * p.mask
            l = l * alpha + e.sum(axis=-1)
            acc = acc * alpha[..., None] + e @ v[:, p.k0 : p.k1]
            m = m_new
        if not np.isfinite(m).all():
            raise DegenerateRowError("query with no visible key")
        out[:, a:b] = acc / l[..., None]
        lse[:, a:b] = m + np.log(l)
    return out, lse


def _backward(plan, q, k, v, tab, scale, extra, out, lse, dout):
    h, T, d = q.shape
    cells = tab.shape[1]
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    dtab = np.zeros(h * cells)
    head_base = (np.arange(h) * cells)[:, None]
    delta = (dout * out).sum(axis=-1)
    dks = dvs = None
    if extra is not None:
        ks, vs, cell = extra
        dks, dvs = np.zeros_like(ks), np.zeros_like(vs)
    for a, b, pairs in plan.query_blocks:
        qb, dob = q[:, a:b], dout[:, a:b]
        lse_b, delta_b = lse[:, a:b], delta[:, a:b]
        if extra is not None:
            s0 = (np.einsum("hqd,hqd->hq", qb, ks[:, a:b]) + tab[:, cell[a:b]]) * scale
            p0 = np.exp(s0 - lse_b)
            dvs[:, a:b] += p0[..., None] * dob
            ds0 = p0 * (np.einsum("hqd,hqd->hq", dob, vs[:, a:b]) - delta_b) * scale
            dq[:, a:b] += ds0[..., None] * ks[:, a:b]
            dks[:, a:b] += ds0[..., None] * qb
            dtab += np.bincount((head_base + cell[a:b][None, :]).ravel(), ds0.ravel(), h * cells)
        for p in pairs:
            kb, vb = k[:, p.k0 : p.k1], v[:, p.k0 : p.k1]
            s = (qb @ kb.transpose(0, 2, 1) + tab[:, p.cell]) * scale
            e = np.exp(np.where(p.mask, s - lse_b[..., None], 0.0)) * p.mask
            dv[:, p.k0 : p.k1] += e.transpose(0, 2, 1) @ dob
            ds = e * (dob @ vb.transpose(0, 2, 1) - delta_b[..., None]) * scale
            dq[:, a:b] += ds @ kb
            dk[:, p.k0 : p.k1] += ds.transpose(0, 2, 1) @ qb
            dtab += np.bincount(
                (head_base + p.cell_visible[None, :]).ravel(), ds[:, p.mask].ravel(), h * cells
            )
    return dq, dk, dv, dtab.reshape(h, cells), dks, dvs


def swa_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    tables: Tensor,
    dims: Dims,
    window: WindowSpec,
    heads: int,
    causal: bool = True,
    include_self: bool | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
    self_kv: tuple[Tensor, Tensor] | None = None,
    self_cells: np.ndarray | None = None,
    stats: KernelStats | None = None,
) -> Tensor:
    """Fused windowed attention on projected ``(T, heads*d_k)`` tensors.

    ``self_kv`` optionally adds one extra key/value per query that is always
    visible, with bias taken from table cell ``self_cells[m]``.
    """
    dims = tuple(int(x) for x in dims)
    T = dims[0] * dims[1] * dims[2]
    for name, x in (("q", q), ("k", k), ("v", v)):
        if x.shape[0] != T or x.shape[1] % heads:
            raise tc.ShapeError(f"{name} has shape {x.shape}, expected ({T}, heads*d_k)")
    if tables.shape != (heads, *window.kernel_shape):
        raise tc.ShapeError(f"tables must be {(heads, *window.kernel_shape)}, got {tables.shape}")
    include_self = _resolve_self(causal, include_self)
    plan = kernel_plan(dims, window, bool(causal), include_self, int(block_size))
    d = q.shape[1] // heads
    scale = 1.0 / math.sqrt(d)
    qh, kh, vh = (_heads_first(x.data, heads) for x in (q, k, v))
    tab = tables.data.reshape(heads, -1)
    extra = None
    parents = [q, k, v, tables]
    if self_kv is not None:
        cells = np.asarray(self_cells, dtype=np.intp)
        extra = (_heads_first(self_kv[0].data, heads), _heads_first(self_kv[1].data, heads), cells)
        parents += list(self_kv)
    out, lse = _forward(plan, qh, kh, vh, tab, scale, extra)

    pairs = plan.visible_pairs + (T if extra is not None else 0)
    tc.record_macs("attention_scores", pairs * heads * d)
    tc.record_macs("attention_values", pairs * heads * d)
    if stats is not None:
        stats.calls += 1
        stats.total_blocks += plan.total_blocks
        stats.visited_blocks += plan.visited_blocks
        stats.score_macs += pairs * heads * d
        stats.value_macs += pairs * heads * d
        executed = sum((b - a) * (p.k1 - p.k0) for a, b, ps in plan.query_blocks for p in ps)
        stats.executed_macs += 2 * heads * d * (executed + (T if extra is not None else 0))

    def to_rows(x):
        return x.transpose(1, 0, 2).reshape(T, -1)

    def bw(g):
        dq, dk, dv, dtab, dks, dvs = _backward(
            plan, qh, kh, vh, tab, scale, extra, out, lse, _heads_first(g, heads)
        )
        grads = [to_rows(dq), to_rows(dk), to_rows(dv), dtab.reshape(tables.shape)]
        if extra is not None:
            grads += [to_rows(dks), to_rows(dvs)]
        return tuple(grads)

    return tc._result(to_rows(out), tuple(parents), bw)


def blocked_swa(
    Y: Tensor,
    dims: Dims,
    window: WindowSpec,
    tables: Tensor,
    weights: AttentionWeights,
    causal: bool = True,
    include_self: bool | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
    stats: KernelStats | None = None,
) -> Tensor:
    """Multi-head sliding-window attention of a flattened volume ``Y``."""
    q = tc.matmul(Y, weights.wq)
    k = tc.matmul(Y, weights.wk)
    v = tc.matmul(Y, weights.wv)
    a = swa_attention(
        q, k, v, tables, dims, window, weights.heads, causal, include_self, block_size, stats=stats
    )
    return tc.matmul(a, weights.wo)
