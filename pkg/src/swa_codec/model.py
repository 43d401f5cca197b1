"""Decoder-only SWA transformer predicting Gaussian parameters per hyperpixel.

Token layout.  Every hyperpixel ``m = (l, y, x)`` owns one *slot* whose
output predicts ``m``.  The slot's input is the previous hyperpixel of the
same row, ``y_hat(l, y, x-1)``; the first slot of row ``y`` instead receives
the hyperpixel directly above the row start, ``y_hat(l, y-1, 0)``, and the
very first slot of a frame receives a zero vector.  Each row thus has ``W``
inputs for ``W`` predictions and the row's last latent is never an input.

The first block attends from the slots into the committed latents at their
true coordinates: keys strictly earlier in scan order inside the window plus
the slot's own input (bias cell of that input's coordinate, ``(l, y-1, 0)``
for a row start).  Later blocks attend among slots with the self position
visible.  Information therefore reaches ``m`` only from latents strictly
before it and within ``layers * window`` along each axis.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as tc
from .swa import DEFAULT_BLOCK_SIZE, Dims, WindowSpec, scan_coords, swa_attention
from .tensor import Tensor

LN_EPS = 1e-6
MODEL_MAGIC = b"SWAM"
MODEL_VERSION = 1


class SequencingError(RuntimeError):
    """Decode calls arrived out of scan order."""


class ModelFormatError(ValueError):
    """A model file is malformed or inconsistent with its config."""


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    heads: int = 4
    head_dim: int = 16
    layers: int = 4
    window: WindowSpec = WindowSpec(2, 3, 3)
    mlp_ratio: int = 4
    num_rate_points: int = 4
    scale_min: float = 0.02

    def __post_init__(self):
        if self.heads * self.head_dim != self.channels:
            raise ValueError(
                f"heads*head_dim must equal channels ({self.heads}*{self.head_dim} != {self.channels})"
            )
        if self.layers < 1 or self.mlp_ratio < 1 or self.num_rate_points < 1:
            raise ValueError("layers, mlp_ratio and num_rate_points must be >= 1")
        if not self.scale_min > 0:
            raise ValueError("scale_min must be positive")
        # the prepended input sits one row up or one column left of its slot
        if self.window.h_w < 1 or self.window.w_w < 1:
            raise ValueError("window needs h_w >= 1 and w_w >= 1")

    @property
    def receptive_frames(self) -> int:
        """Temporal reach of the whole stack in frames."""
        return self.layers * self.window.l_w


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in serialization order."""
    C, R = config.channels, config.num_rate_points
    hidden = config.mlp_ratio * C
    shapes = [(f"rate.{g}", (R, C)) for g in ("g_in", "g_mu", "g_sigma", "g_lrp")]
    for i in range(config.layers):
        p = f"block{i}."
        shapes += [
            (p + "ln1.gain", (C,)),
            (p + "ln1.bias", (C,)),
            (p + "attn.wq", (C, C)),
            (p + "attn.wk", (C, C)),
            (p + "attn.wv", (C, C)),
            (p + "attn.wo", (C, C)),
            (p + "attn.bias_table", (config.heads, *config.window.kernel_shape)),
            (p + "ln2.gain", (C,)),
            (p + "ln2.bias", (C,)),
            (p + "mlp.w1", (C, hidden)),
            (p + "mlp.b1", (hidden,)),
            (p + "mlp.w2", (hidden, C)),
            (p + "mlp.b2", (C,)),
        ]
    shapes += [("out.ln.gain", (C,)), ("out.ln.bias", (C,))]
    for head in ("mu", "sigma", "lrp"):
        shapes += [(f"out.{head}.w", (C, C)), (f"out.{head}.b", (C,))]
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [n for n, _ in param_shapes(self.config)]

    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by kind (rate gains, bias tables, ...)."""
        out: dict[str, list[str]] = {}
        for name in self.names():
            key = name.split(".", 1)[1] if name.startswith("block") else name
            out.setdefault(key, []).append(name)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self, requires_grad: bool = True) -> ModelParams:
        return ModelParams(
            self.config,
            {n: Tensor(t.data, requires_grad=requires_grad) for n, t in self.tensors.items()},
        )


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    """Normal(0, std) projections, residual outputs scaled by 1/sqrt(2*layers)."""
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2 * config.layers)
    tensors = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("rate.") or leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("bias", "b", "b1", "b2", "bias_table"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
            if leaf in ("wo", "w2"):
                data *= out_scale
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# serialization


def serialize_model(params: ModelParams) -> bytes:
    c = params.config
    w = c.window
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack(
            "<9Id",
            c.channels,
            c.heads,
            c.head_dim,
            c.layers,
            w.l_w,
            w.h_w,
            w.w_w,
            c.mlp_ratio,
            c.num_rate_points,
            c.scale_min,
        ),
    ]
    shapes = param_shapes(c)
    parts.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes:
        data = params[name].data
        if data.shape != shape:
            raise ModelFormatError(f"{name}: shape {data.shape} != {shape}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_model(blob: bytes) -> ModelParams:
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        vals = struct.unpack_from("<9Id", blob, 8)
        config = ModelConfig(
            channels=vals[0],
            heads=vals[1],
            head_dim=vals[2],
            layers=vals[3],
            window=WindowSpec(vals[4], vals[5], vals[6]),
            mlp_ratio=vals[7],
            num_rate_points=vals[8],
            scale_min=vals[9],
        )
        pos = 8 + struct.calcsize("<9Id")
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        expected = param_shapes(config)
        if count != len(expected):
            raise ModelFormatError(f"expected {len(expected)} tensors, found {count}")
        tensors = {}
        for name, shape in expected:
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            got = blob[pos : pos + n].decode("utf-8")
            pos += n
            if got != name:
                raise ModelFormatError(f"tensor order mismatch: expected {name}, found {got}")
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            if tuple(dims) != shape:
                raise ModelFormatError(f"{name}: stored shape {dims} != {shape}")
            size = int(np.prod(shape)) * 8
            data = np.frombuffer(blob[pos : pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
            tensors[name] = Tensor(data, requires_grad=True, name=name)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"truncated or invalid model file: {exc}") from exc
    if pos != len(blob):
        raise ModelFormatError("trailing bytes after last tensor")
    return ModelParams(config, tensors)


def save_model(path, params: ModelParams) -> None:
    from .fileio import atomic_write

    atomic_write(path, serialize_model(params))


def load_model(path) -> ModelParams:
    return deserialize_model(Path(path).read_bytes())


def model_hash(params: ModelParams) -> bytes:
    """8-byte fingerprint of the serialized model."""
    return hashlib.sha256(serialize_model(params)).digest()[:8]


# ---------------------------------------------------------------------------
# input sequence


def build_input_sequence(frame: np.ndarray, row: int) -> np.ndarray:
    """Inputs of one row, ``[above, y(row,0), ..., y(row,W-2)]`` as ``(W, C)``."""
    frame = np.asarray(frame, dtype=np.float64)
    H, W, C = frame.shape
    first = frame[row - 1, 0] if row >= 1 else np.zeros(C)
    return np.concatenate([first[None, :], frame[row, : W - 1]], axis=0)


@lru_cache(maxsize=128)
def slot_sources(dims: Dims, window: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Content row feeding each slot (``T`` = zero row) and its bias cell."""
    L, H, W = dims
    T = L * H * W
    t = np.arange(T)
    c = scan_coords(dims)
    y, x = c[:, 1], c[:, 2]
    src = np.where(x >= 1, t - 1, np.where(y >= 1, t - W, T))
    cell = np.where(x >= 1, window.cell(0, 0, -1), window.cell(0, -1, 0))
    src.setflags(write=False)
    cell.setflags(write=False)
    return src, cell


# ---------------------------------------------------------------------------
# teacher-forced forward


@dataclass
class Prediction:
    """Per-hyperpixel outputs over a volume, rows in scan order."""

    mu: Tensor
    sigma: Tensor
    lrp: Tensor
    dims: Dims
    kv: list[tuple[np.ndarray, np.ndarray]] | None = None

    def frame(self, l: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        L, H, W = self.dims
        sl = slice(l * H * W, (l + 1) * H * W)
        return tuple(t.data[sl].reshape(H, W, -1) for t in (self.mu, self.sigma, self.lrp))


def _gain(params: ModelParams, name: str, rate_idx: int) -> Tensor:
    g = params[f"rate.{name}"]
    return tc.reshape(tc.take_rows(g, [rate_idx]), (g.shape[1],))


def _mlp(params, p, h):
    a = tc.layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)
    z = tc.gelu(tc.linear(a, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    return tc.add(h, tc.linear(z, params[p + "mlp.w2"], params[p + "mlp.b2"]))


def _heads(params: ModelParams, h: Tensor, rate_idx: int, rate_scaling: bool):
    config = params.config
    f = tc.layer_norm(h, params["out.ln.gain"], params["out.ln.bias"], LN_EPS)
    raw = {k: tc.linear(f, params[f"out.{k}.w"], params[f"out.{k}.b"]) for k in ("mu", "sigma", "lrp")}
    if rate_scaling:
        raw = {k: tc.scale_channels(v, _gain(params, f"g_{k}", rate_idx)) for k, v in raw.items()}
    mu = raw["mu"]
    sigma = tc.add(tc.softplus(raw["sigma"]), config.scale_min)
    lrp = tc.mul(tc.tanh(raw["lrp"]), 0.5)
    return mu, sigma, lrp


def check_rate_idx(config: ModelConfig, rate_idx: int) -> None:
    if not 0 <= rate_idx < config.num_rate_points:
        raise ValueError(f"rate_idx {rate_idx} outside [0, {config.num_rate_points})")


def forward_teacher_forced(
    volume: np.ndarray,
    params: ModelParams,
    rate_idx: int = 0,
    block_size: int = DEFAULT_BLOCK_SIZE,
    rate_scaling: bool = True,
    return_kv: bool = False,
) -> Prediction:
    """One causal pass over a committed ``(L, H, W, C)`` volume.

    Earlier frames act as context for later ones; callers keep the frames
    they want predictions for.
    """
    config = params.config
    check_rate_idx(config, rate_idx)
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 4 or vol.shape[3] != config.channels:
        raise tc.ShapeError(f"volume must be (L, H, W, {config.channels}), got {vol.shape}")
    L, H, W, C = vol.shape
    dims = (L, H, W)
    T = L * H * W
    window = config.window
    src, self_cells = slot_sources(dims, window)
    rows = np.arange(T)

    x = Tensor(vol.reshape(T, C))
    if rate_scaling:
        x = tc.scale_channels(x, _gain(params, "g_in", rate_idx))
    content = tc.concat_rows([x, Tensor(np.zeros((1, C)))])
    kv = []

    h = None
    for i in range(config.layers):
        p = f"block{i}."
        first = i == 0
        stream = content if first else h
        a = tc.layer_norm(stream, params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
        q = tc.matmul(a, params[p + "attn.wq"])
        k = tc.matmul(a, params[p + "attn.wk"])
        v = tc.matmul(a, params[p + "attn.wv"])
        if first:
            att = swa_attention(
                tc.take_rows(q, src),
                tc.take_rows(k, rows),
                tc.take_rows(v, rows),
                params[p + "attn.bias_table"],
                dims,
                window,
                config.heads,
                causal=True,
                include_self=False,
                block_size=block_size,
                self_kv=(tc.take_rows(k, src), tc.take_rows(v, src)),
                self_cells=self_cells,
            )
            h = tc.take_rows(content, src)
        else:
            att = swa_attention(
                q,
                k,
                v,
                params[p + "attn.bias_table"],
                dims,
                window,
                config.heads,
                causal=True,
                include_self=True,
                block_size=block_size,
            )
        if return_kv:
            kv.append((k.data, v.data))
        h = tc.add(h, tc.matmul(att, params[p + "attn.wo"]))
        h = _mlp(params, p, h)

    mu, sigma, lrp = _heads(params, h, rate_idx, rate_scaling)
    return Prediction(mu, sigma, lrp, dims, kv if return_kv else None)


def predict_frame(
    clip: np.ndarray,
    frame: int,
    params: ModelParams,
    reference_frames: int,
    rate_idx: int = 0,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prediction for ``clip[frame]`` given at most ``reference_frames`` earlier frames.

    Frames beyond the stack's temporal reach contribute exactly nothing, so the
    context is trimmed to that reach.
    """
    n_ctx = min(reference_frames, frame, params.config.receptive_frames)
    pred = forward_teacher_forced(clip[frame - n_ctx : frame + 1], params, rate_idx, block_size)
    return pred.frame(n_ctx)


def apply_lrp(y_hat: np.ndarray, lrp: np.ndarray) -> np.ndarray:
    """Add the predicted quantization residual to the decoded latent."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    lrp = np.asarray(lrp, dtype=np.float64)
    if y_hat.shape != lrp.shape:
        raise tc.ShapeError(f"shape mismatch {y_hat.shape} vs {lrp.shape}")
    return y_hat + lrp


# ---------------------------------------------------------------------------
# incremental decoding


@dataclass
class KVCache:
    """Per-layer keys/values for reference frames plus the current frame.

    ``keys[i]`` has shape ``(len(frame_ids) + 1, H*W, heads, d_k)``; the last
    frame slot is the one being decoded.  Layer 0 holds latents, later layers
    hold slot states.
    """

    frame_ids: list[int]
    keys: list[np.ndarray]
    values: list[np.ndarray]

    def evict_older_than(self, frame: int) -> None:
        keep = [j for j, f in enumerate(self.frame_ids) if f >= frame]
        idx = keep + [len(self.frame_ids)]
        self.frame_ids = [self.frame_ids[j] for j in keep]
        self.keys = [k[idx] for k in self.keys]
        self.values = [v[idx] for v in self.values]


@lru_cache(maxsize=64)
def _decode_geometry(n_ref: int, H: int, W: int, window: WindowSpec):
    """Strictly-earlier in-window keys (flat cache rows) and bias cells per position."""
    dims = (n_ref + 1, H, W)
    coords = scan_coords(dims)
    base = n_ref * H * W
    out = []
    for j in range(H * W):
        m = coords[base + j]
        d = coords[: base + j] - m
        inside = (np.abs(d) <= (window.l_w, window.h_w, window.w_w)).all(axis=1)
        rows = np.nonzero(inside)[0]
        cells = window.cell(d[rows, 0], d[rows, 1], d[rows, 2])
        out.append((rows, cells))
    return out


class DecodeSession:
    """Scan-order decoding with cached keys and values.

    Per frame: :meth:`begin_frame`, then alternate :meth:`decode_step` and
    :meth:`commit` for every hyperpixel.
    """

    def __init__(
        self,
        params: ModelParams,
        frame_shape: tuple[int, int],
        rate_idx: int = 0,
        reference_frames: int | None = None,
        trim_cache: bool = True,
    ):
        config = params.config
        check_rate_idx(config, rate_idx)
        self.params = params
        self.config = config
        self.H, self.W = frame_shape
        self.rate_idx = rate_idx
        self.trim_cache = trim_cache
        self.history: list[np.ndarray] = []
        self.reference_frames = config.receptive_frames
        if reference_frames is not None:
            self.set_reference_frames(reference_frames)
        self.cache: KVCache | None = None
        self._cursor = 0
        self._pending: int | None = None
        self._current: np.ndarray | None = None
        self._geometry = None

        a = params.arrays()
        self._w = a
        self._g = {k: a[f"rate.{k}"][rate_idx] for k in ("g_in", "g_mu", "g_sigma", "g_lrp")}
        self._scale = 1.0 / math.sqrt(config.head_dim)
        self._tables = [a[f"block{i}.attn.bias_table"].reshape(config.heads, -1) for i in range(config.layers)]
        ln0 = np.zeros(config.channels)
        ln0 = _ln(ln0, a["block0.ln1.gain"], a["block0.ln1.bias"])
        self._zero_k = (ln0 @ a["block0.attn.wk"]).reshape(config.heads, -1)
        self._zero_v = (ln0 @ a["block0.attn.wv"]).reshape(config.heads, -1)
        w = config.window
        self._cell_left = w.cell(0, 0, -1)
        self._cell_up = w.cell(0, -1, 0)

    def set_reference_frames(self, k: int) -> None:
        if k < 0:
            raise ValueError("reference frame count must be >= 0")
        self.reference_frames = int(k)

    @property
    def frame_index(self) -> int:
        return len(self.history)

    def begin_frame(self) -> None:
        if self._current is not None:
            raise SequencingError("previous frame not finished")
        config = self.config
        f = len(self.history)
        n_ctx = min(self.reference_frames, f, config.receptive_frames)
        held = min(n_ctx, config.window.l_w) if self.trim_cache else n_ctx
        HW = self.H * self.W
        shape = (held + 1, HW, config.heads, config.head_dim)
        keys = [np.zeros(shape) for _ in range(config.layers)]
        values = [np.zeros(shape) for _ in range(config.layers)]
        if n_ctx:
            ctx = np.stack(self.history[f - n_ctx :])
            pred = forward_teacher_forced(ctx, self.params, self.rate_idx, return_kv=True)
            for i, (k, v) in enumerate(pred.kv):
                tail = slice((n_ctx - held) * HW, n_ctx * HW)
                keys[i][:held] = k[tail].reshape(held, HW, config.heads, -1)
                values[i][:held] = v[tail].reshape(held, HW, config.heads, -1)
        self.cache = KVCache(list(range(f - held, f)), keys, values)
        self._geometry = _decode_geometry(held, self.H, self.W, config.window)
        self._current = np.zeros((self.H, self.W, config.channels))
        self._cursor = 0
        self._pending = None

    def _attend(self, layer, q, keys, values, cells, extra=None):
        tab = self._tables[layer]
        s = np.einsum("hd,nhd->hn", q, keys) + tab[:, cells]
        v = values
        if extra is not None:
            ek, ev, ecell = extra
            s = np.concatenate([(np.einsum("hd,hd->h", q, ek) + tab[:, ecell])[:, None], s], axis=1)
            v = np.concatenate([ev[None], values], axis=0)
        s = s * self._scale
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        p = e / e.sum(axis=1, keepdims=True)
        return np.einsum("hn,nhd->hd", p, v).reshape(-1)

    def decode_step(self, position: tuple[int, int] | None = None):
        """Predict ``(mu, sigma, lrp)`` for the next hyperpixel in scan order."""
        if self._current is None:
            raise SequencingError("call begin_frame() first")
        if self._pending is not None:
            raise SequencingError("commit the previous hyperpixel before the next step")
        j = self._cursor
        y, x = divmod(j, self.W)
        if position is not None and tuple(position) != (y, x):
            raise SequencingError(f"requested {tuple(position)}, next in scan order is {(y, x)}")
        config, a = self.config, self._w
        cache = self.cache
        held = len(cache.frame_ids)
        HW = self.H * self.W
        row = held * HW + j
        strict_rows, strict_cells = self._geometry[j]

        if x >= 1:
            src = (y, x - 1)
            cell = self._cell_left
        elif y >= 1:
            src = (y - 1, 0)
            cell = self._cell_up
        else:
            src = None
            cell = self._cell_up
        if src is None:
            inp = np.zeros(config.channels)
            ek, ev = self._zero_k, self._zero_v
        else:
            inp = self._current[src] * self._g["g_in"]
            s_row = held * HW + src[0] * self.W + src[1]
            ek, ev = cache.keys[0].reshape(-1, config.heads, config.head_dim)[s_row], cache.values[0].reshape(
                -1, config.heads, config.head_dim
            )[s_row]

        h = inp
        for i in range(config.layers):
            p = f"block{i}."
            stream = inp if i == 0 else h
            ln = _ln(stream, a[p + "ln1.gain"], a[p + "ln1.bias"])
            q = (ln @ a[p + "attn.wq"]).reshape(config.heads, -1)
            K = cache.keys[i].reshape(-1, config.heads, config.head_dim)
            V = cache.values[i].reshape(-1, config.heads, config.head_dim)
            if i == 0:
                att = self._attend(0, q, K[strict_rows], V[strict_rows], strict_cells, (ek, ev, cell))
            else:
                K[row] = (ln @ a[p + "attn.wk"]).reshape(config.heads, -1)
                V[row] = (ln @ a[p + "attn.wv"]).reshape(config.heads, -1)
                rows = np.append(strict_rows, row)
                cells = np.append(strict_cells, config.window.cell(0, 0, 0))
                att = self._attend(i, q, K[rows], V[rows], cells)
            h = h + att @ a[p + "attn.wo"]
            z = _ln(h, a[p + "ln2.gain"], a[p + "ln2.bias"])
            z = _gelu(z @ a[p + "mlp.w1"] + a[p + "mlp.b1"])
            h = h + (z @ a[p + "mlp.w2"] + a[p + "mlp.b2"])

        f = _ln(h, a["out.ln.gain"], a["out.ln.bias"])
        g = self._g
        mu = (f @ a["out.mu.w"] + a["out.mu.b"]) * g["g_mu"]
        raw_sigma = (f @ a["out.sigma.w"] + a["out.sigma.b"]) * g["g_sigma"]
        sigma = config.scale_min + (np.maximum(raw_sigma, 0.0) + np.log1p(np.exp(-np.abs(raw_sigma))))
        lrp = 0.5 * np.tanh((f @ a["out.lrp.w"] + a["out.lrp.b"]) * g["g_lrp"])
        self._pending = j
        return mu, sigma, lrp

    def commit(self, value: np.ndarray) -> None:
        """Commit the decoded latent of the pending hyperpixel."""
        if self._pending is None:
            raise SequencingError("no pending hyperpixel to commit")
        config, a = self.config, self._w
        j = self._pending
        y, x = divmod(j, self.W)
        value = np.asarray(value, dtype=np.float64)
        self._current[y, x] = value
        ln = _ln(value * self._g["g_in"], a["block0.ln1.gain"], a["block0.ln1.bias"])
        held = len(self.cache.frame_ids)
        self.cache.keys[0][held, j] = (ln @ a["block0.attn.wk"]).reshape(config.heads, -1)
        self.cache.values[0][held, j] = (ln @ a["block0.attn.wv"]).reshape(config.heads, -1)
        self._pending = None
        self._cursor += 1
        if self._cursor == self.H * self.W:
            self.history.append(self._current)
            self._current = None

    def add_frame(self, frame: np.ndarray) -> None:
        """Append an already-known frame to the history without decoding it."""
        if self._current is not None:
            raise SequencingError("cannot add a frame while one is being decoded")
        self.history.append(np.asarray(frame, dtype=np.float64).copy())

    def decode_frame(self, frame: np.ndarray):
        """Run every step of one frame, committing the given latents; returns the predictions."""
        self.begin_frame()
        C = self.config.channels
        mu = np.empty((self.H, self.W, C))
        sigma, lrp = np.empty_like(mu), np.empty_like(mu)
        for j in range(self.H * self.W):
            y, x = divmod(j, self.W)
            mu[y, x], sigma[y, x], lrp[y, x] = self.decode_step((y, x))
            self.commit(frame[y, x])
        return mu, sigma, lrp


def _ln(x, gain, bias):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    return centered * inv_std * gain + bias


def _gelu(x):
    from scipy.special import erf

    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
