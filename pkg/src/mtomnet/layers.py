"""Neural building blocks: linear, CNN encoder, graph convolution, BiLSTM,
layer norm and token cross-attention."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor

HIDDEN = 64
TOKEN_DIM = 16
MIN_FRAME = 22  # smallest H, W the three-block CNN accepts


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _uniform(rng, (out_dim, in_dim), math.sqrt(1.0 / in_dim), dtype)
        self.bias = _zeros((out_dim,), dtype) if bias else None

    def expected_parameters(self) -> int:
        return self.out_dim * self.in_dim + (self.out_dim if self.bias is not None else 0)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32, k: int = 3):
        self.weight = _uniform(rng, (out_ch, in_ch, k, k), math.sqrt(1.0 / (in_ch * k * k)), dtype)
        self.bias = _zeros((out_ch,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv2d(x, self.weight, self.bias)


class CnnEncoder(Module):
    """Three conv3x3 -> ReLU -> max-pool blocks (last pool global), then a
    linear projection to a 64-vector per frame."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32, in_ch: int = 3,
                 channels: tuple[int, ...] = (16, 32, 64), out_dim: int = HIDDEN):
        self.channels = tuple(channels)
        self.in_ch = in_ch
        chans = (in_ch,) + self.channels
        self.convs = [Conv2d(a, b, rng, dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.proj = Linear(chans[-1], out_dim, rng, dtype)

    def expected_parameters(self) -> int:
        chans = (self.in_ch,) + self.channels
        convs = sum(b * a * 9 + b for a, b in zip(chans[:-1], chans[1:]))
        return convs + self.proj.expected_parameters()

    def __call__(self, frames: Tensor) -> Tensor:
        return cnn_forward(frames, self)


def cnn_forward(frames: Tensor, enc: CnnEncoder) -> Tensor:
    """[C,H,W] -> [64] or [N,C,H,W] -> [N,64]."""
    h, w = frames.shape[-2:]
    if h < MIN_FRAME or w < MIN_FRAME:
        raise ValueError(f"frame {h}x{w} is below the CNN minimum of {MIN_FRAME}x{MIN_FRAME}")
    x = frames
    last = len(enc.convs) - 1
    for i, conv in enumerate(enc.convs):
        x = tn.relu(conv(x))
        x = tn.global_maxpool(x) if i == last else tn.maxpool2d(x, 2, 2)
    return enc.proj(x)


# --------------------------------------------------------------------------
# graph convolution
# --------------------------------------------------------------------------

def gcn_normalize(adj) -> np.ndarray:
    """Symmetric normalisation with self-loops, D^-1/2 (A + I) D^-1/2.

    Works on a single [n, n] matrix or a stack [..., n, n].
    """
    a = np.asarray(adj.data if isinstance(adj, Tensor) else adj)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ValueError("adjacency has negative entries")
    a_tilde = a + np.eye(a.shape[-1], dtype=a.dtype)
    d = a_tilde.sum(axis=-1)
    inv = 1.0 / np.sqrt(d)
    return inv[..., :, None] * a_tilde * inv[..., None, :]


class GcnLayer(Module):
    """Bias-free Kipf-Welling layer, ``act(A_hat X W^T)``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _uniform(rng, (out_dim, in_dim), math.sqrt(1.0 / in_dim), dtype)

    def expected_parameters(self) -> int:
        return self.out_dim * self.in_dim

    def __call__(self, a_hat, x: Tensor) -> Tensor:
        ax = tn.matmul(tn.as_tensor(a_hat, dtype=x.dtype), x)
        return tn.gelu(tn.linear(ax, self.weight))


class GcnEncoder(Module):
    """One GCN layer, GELU, mean over nodes, linear projection to 64."""

    def __init__(self, in_dim: int, rng: np.random.Generator, dtype=np.float32, hidden: int = HIDDEN, out_dim: int = HIDDEN):
        self.gcn = GcnLayer(in_dim, hidden, rng, dtype)
        self.proj = Linear(hidden, out_dim, rng, dtype)

    def expected_parameters(self) -> int:
        return self.gcn.expected_parameters() + self.proj.expected_parameters()

    def __call__(self, a_hat, x: Tensor) -> Tensor:
        return gcn_forward(a_hat, x, self)


def gcn_forward(a_hat, x: Tensor, enc: GcnEncoder) -> Tensor:
    """[n, F] -> [64], or batched [N, n, F] -> [N, 64]."""
    n_nodes = x.shape[-2]
    if tn.as_tensor(a_hat).shape[-1] != n_nodes:
        raise ValueError(f"adjacency covers {tn.as_tensor(a_hat).shape[-1]} nodes, features have {n_nodes}")
    h = enc.gcn(a_hat, x)
    return enc.proj(tn.mean(h, axis=-2))


# --------------------------------------------------------------------------
# recurrent
# --------------------------------------------------------------------------

class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.dim, self.eps = dim, eps
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = _zeros((dim,), dtype)

    def expected_parameters(self) -> int:
        return 2 * self.dim

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layernorm(x, self.gain, self.bias, self.eps)


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_scan(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over [B, T, D] as a single recorded op.

    Returns [B, T, 2H] holding ``h_t`` in the first half and ``c_t`` in the
    second, both aligned with input position ``t``.  Gate order is
    input, forget, cell, output; the initial state is zero.
    """
    xd = x.data
    bsz, steps, _ = xd.shape
    hid = w_hh.shape[1]
    wi, wh = w_ih.data, w_hh.data
    pre = xd @ wi.T + b.data  # B T 4H
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = np.zeros((bsz, hid), dtype=xd.dtype)
    c = np.zeros((bsz, hid), dtype=xd.dtype)
    out = np.empty((bsz, steps, 2 * hid), dtype=xd.dtype)
    cache = {}
    for t in order:
        a = pre[:, t] + h @ wh.T
        i, f, o = _sig(a[:, :hid]), _sig(a[:, hid:2 * hid]), _sig(a[:, 3 * hid:])
        g = np.tanh(a[:, 2 * hid:3 * hid])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache[t] = (h, c, i, f, g, o, tc)
        h, c = o * tc, c_new
        out[:, t, :hid], out[:, t, hid:] = h, c

    def rule(grad):
        da_all = np.empty_like(pre)
        dh_next = np.zeros((bsz, hid), dtype=xd.dtype)
        dc_next = np.zeros((bsz, hid), dtype=xd.dtype)
        dwh = np.zeros_like(wh)
        for t in reversed(list(order)):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            dh = grad[:, t, :hid] + dh_next
            dc = grad[:, t, hid:] + dc_next + dh * o * (1 - tc * tc)
            da = np.concatenate([
                dc * g * i * (1 - i),
                dc * c_prev * f * (1 - f),
                dc * i * (1 - g * g),
                dh * tc * o * (1 - o),
            ], axis=1)
            da_all[:, t] = da
            dh_next = da @ wh
            dc_next = dc * f
            dwh += da.T @ h_prev
        flat = da_all.reshape(-1, 4 * hid)
        dx = (da_all @ wi) if x.requires_grad else None
        dwi = flat.T @ xd.reshape(-1, xd.shape[-1])
        return dx, dwi, dwh, flat.sum(axis=0)

    return tn.custom_op(out, (x, w_ih, w_hh, b), rule, "lstm_scan")


class LstmDirection(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        bound = math.sqrt(1.0 / hidden)
        self.w_ih = _uniform(rng, (4 * hidden, in_dim), bound, dtype)
        self.w_hh = _uniform(rng, (4 * hidden, hidden), bound, dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = Tensor(b, requires_grad=True)


class BiLstm(Module):
    """Single-layer bidirectional LSTM.

    ``H[t] = [h_fwd(t) || h_bwd(t)]`` where the backward direction has read
    positions ``t..T-1``; ``c = [c_fwd(T-1) || c_bwd(0)]``.
    """

    def __init__(self, in_dim: int, rng: np.random.Generator, dtype=np.float32, hidden: int = HIDDEN):
        self.in_dim, self.hidden = in_dim, hidden
        self.fwd = LstmDirection(in_dim, hidden, rng, dtype)
        self.bwd = LstmDirection(in_dim, hidden, rng, dtype)

    def expected_parameters(self) -> int:
        return 2 * (4 * self.hidden * (self.in_dim + self.hidden) + 4 * self.hidden)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return bilstm_forward(x, self)


def bilstm_forward(x: Tensor, lstm: BiLstm) -> tuple[Tensor, Tensor]:
    """[T, D] -> (H [T, 2H], c [2H]); batched [B, T, D] -> ([B, T, 2H], [B, 2H])."""
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1,) + x.shape)
    if x.shape[1] == 0:
        raise ValueError("empty sequence")
    hid = lstm.hidden
    f = lstm_scan(x, lstm.fwd.w_ih, lstm.fwd.w_hh, lstm.fwd.bias, reverse=False)
    b = lstm_scan(x, lstm.bwd.w_ih, lstm.bwd.w_hh, lstm.bwd.bias, reverse=True)
    H = tn.concat([f[:, :, :hid], b[:, :, :hid]], axis=-1)
    c = tn.concat([f[:, -1, hid:], b[:, 0, hid:]], axis=-1)
    if squeeze:
        return tn.reshape(H, H.shape[1:]), tn.reshape(c, c.shape[1:])
    return H, c


def final_hidden(H: Tensor) -> Tensor:
    """Summary hidden state: forward state at the last position joined with
    the backward state at the first, i.e. each direction after reading
    the whole window."""
    half = H.shape[-1] // 2
    return tn.concat([H[..., -1, :half], H[..., 0, half:]], axis=-1)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

class CrossAttention(Module):
    """Single-head attention between two vectors viewed as token sequences.

    A ``dim`` vector is split into ``dim // 16`` tokens of width 16.  Queries
    come from ``q_vec``, keys and values from ``kv_vec``; all four
    projections are bias-free ``dim x dim`` maps applied to the flat vector.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, token_dim: int = TOKEN_DIM):
        if dim % token_dim:
            raise ValueError(f"dim {dim} is not a multiple of token width {token_dim}")
        self.dim, self.token_dim = dim, token_dim
        bound = math.sqrt(1.0 / dim)
        self.w_q = _uniform(rng, (dim, dim), bound, dtype)
        self.w_k = _uniform(rng, (dim, dim), bound, dtype)
        self.w_v = _uniform(rng, (dim, dim), bound, dtype)
        self.w_o = _uniform(rng, (dim, dim), bound, dtype)

    def expected_parameters(self) -> int:
        return 4 * self.dim * self.dim

    def __call__(self, q_vec: Tensor, kv_vec: Tensor) -> Tensor:
        return cross_attention(q_vec, kv_vec, self)[0]


def cross_attention(q_vec: Tensor, kv_vec: Tensor, att: CrossAttention) -> tuple[Tensor, Tensor]:
    """Returns (output with the shape of ``q_vec``, attention weights [..., n, n])."""
    d = att.dim
    if q_vec.shape[-1] != d or kv_vec.shape[-1] != d:
        raise ValueError(f"cross_attention expects vectors of length {d}, got {q_vec.shape} and {kv_vec.shape}")
    if q_vec.shape != kv_vec.shape:
        raise ValueError("query and key/value vectors must have the same shape (broadcast kv first)")
    lead = q_vec.shape[:-1]
    n, w = d // att.token_dim, att.token_dim
    q = tn.reshape(tn.linear(q_vec, att.w_q), lead + (n, w))
    k = tn.reshape(tn.linear(kv_vec, att.w_k), lead + (n, w))
    v = tn.reshape(tn.linear(kv_vec, att.w_v), lead + (n, w))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    scores = tn.scale(tn.matmul(q, tn.transpose(k, axes)), 1.0 / math.sqrt(w))
    weights = tn.softmax(scores, axis=-1)
    mixed = tn.reshape(tn.matmul(weights, v), lead + (d,))
    return tn.linear(mixed, att.w_o), weights
