"""Recurrent, attention and gated building blocks of the SA-MULCAT network.

Sequence layers take inputs shaped ``[..., M, F]``: any leading axes are
independent slices that share parameters, ``M`` is the sequence axis and
``F`` the feature axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import _lstm_kernels as _kern
from . import tensor as T
from .tensor import DimensionError, Function, Tensor


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclass fields (and lists of them) yielding ``(dotted_name, Tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif hasattr(obj, "__dataclass_fields__"):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None or not f.metadata.get("param", True):
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


@dataclass
class LstmParams:
    """One LSTM direction; gate rows ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4H, I]
    w_hh: Tensor  # [4H, H]
    b: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, hidden: int) -> "LstmParams":
        w_ih = _uniform(rng, (4 * hidden, n_in), hidden)
        w_hh = _uniform(rng, (4 * hidden, hidden), hidden)
        b = _uniform(rng, (4 * hidden,), hidden)
        b.data[hidden : 2 * hidden] = 1.0
        return cls(w_ih, w_hh, b)

    @classmethod
    def zeros(cls, n_in: int, hidden: int) -> "LstmParams":
        return cls(
            T.parameter(np.zeros((4 * hidden, n_in))),
            T.parameter(np.zeros((4 * hidden, hidden))),
            T.parameter(np.zeros(4 * hidden)),
        )


@dataclass
class BlstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @classmethod
    def init(cls, rng, n_in: int, hidden: int) -> "BlstmParams":
        return cls(LstmParams.init(rng, n_in, hidden), LstmParams.init(rng, n_in, hidden))


@dataclass
class Projection:
    """Weight ``[out, in]`` plus optional bias ``[out]``."""

    w: Tensor
    b: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, n_out: int, n_in: int, bias: bool = True) -> "Projection":
        w = _uniform(rng, (n_out, n_in), n_in)
        b = _uniform(rng, (n_out,), n_in) if bias else None
        return cls(w, b)

    def __call__(self, x, axis: int = -1) -> Tensor:
        return T.pointwise_linear(x, self.w, self.b, axis=axis)


@dataclass
class AttentionParams:
    query: Projection  # [D, N]
    key: Projection  # [D, N]
    value: Projection  # [D, N]
    merge: Projection  # [N, D]
    fuse: Projection  # [N, 2N]

    @property
    def dim(self) -> int:
        return self.query.w.shape[0]

    @classmethod
    def init(cls, rng, n: int, d: int) -> "AttentionParams":
        return cls(
            Projection.init(rng, d, n),
            Projection.init(rng, d, n),
            Projection.init(rng, d, n),
            Projection.init(rng, n, d),
            Projection.init(rng, n, 2 * n),
        )


@dataclass
class GatedRnnParams:
    blstm1: BlstmParams
    blstm2: BlstmParams
    out: Projection  # [N, 2H + N]

    @classmethod
    def init(cls, rng, n: int, hidden: int) -> "GatedRnnParams":
        return cls(
            BlstmParams.init(rng, n, hidden),
            BlstmParams.init(rng, n, hidden),
            Projection.init(rng, n, 2 * hidden + n),
        )


@dataclass
class SubblockParams:
    attention: Optional[AttentionParams]
    rnn: GatedRnnParams

    @classmethod
    def init(cls, rng, n: int, hidden: int, d: int, with_attention: bool = True) -> "SubblockParams":
        att = AttentionParams.init(rng, n, d) if with_attention else None
        return cls(att, GatedRnnParams.init(rng, n, hidden))


@dataclass
class SaMulcatParams:
    """Parameters of the ``index``-th block (1-based)."""

    index: int = field(metadata={"param": False})
    dense: Optional[Projection]  # [N, index*N]; absent in block 1 or without dense connectivity
    intra: SubblockParams
    inter: SubblockParams

    @classmethod
    def init(
        cls,
        rng,
        index: int,
        n: int,
        hidden: int,
        d: int,
        dense_connectivity: bool = True,
        self_attention: bool = True,
    ) -> "SaMulcatParams":
        if index < 1:
            raise ValueError("block index starts at 1")
        dense = Projection.init(rng, n, index * n) if dense_connectivity and index > 1 else None
        return cls(
            index,
            dense,
            SubblockParams.init(rng, n, hidden, d, self_attention),
            SubblockParams.init(rng, n, hidden, d, self_attention),
        )


# ---------------------------------------------------------------------------
# LSTM


def lstm_step(x, h, c, p: LstmParams) -> tuple[Tensor, Tensor]:
    """Single LSTM cell update built from primitive ops.

    Works on ``[I]`` vectors or batches ``[..., I]``.
    """
    x, h, c = T.as_tensor(x), T.as_tensor(h), T.as_tensor(c)
    H = p.hidden
    if x.shape[-1] != p.n_in or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs I={p.n_in}, H={H}")
    z = T.add(T.add(T.linear(x, p.w_ih), T.linear(h, p.w_hh)), p.b)
    i = T.sigmoid(z[..., 0:H])
    f = T.sigmoid(z[..., H : 2 * H])
    g = T.tanh(z[..., 2 * H : 3 * H])
    o = T.sigmoid(z[..., 3 * H : 4 * H])
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


class MultiLstm(Function):
    """K independent LSTMs over one shared input ``[B, M, I]``, zero initial state.

    Directions flagged in ``reverse`` scan the sequence backwards.  Internally
    the forward directions are grouped ahead of the reversed ones so a single
    time loop advances all K recurrences through a block-diagonal
    hidden-to-hidden matrix.  Backpropagation through time runs in a compiled
    loop, so the whole group is a single tape node.  Output is ``[B, M, K*H]``.
    """

    def forward(self, x, *weights, reverse=()):
        K = len(weights) // 3
        Bn, M, _ = x.shape
        H = weights[1].shape[1]
        rev = [bool(r) for r in reverse[:K]]
        order = [k for k in range(K) if not rev[k]] + [k for k in range(K) if rev[k]]
        n_fwd = K - sum(rev)
        w_ih = np.concatenate([weights[3 * k] for k in order], axis=0)  # [K*4H, I]
        bias = np.concatenate([weights[3 * k + 2] for k in order])
        w_hh = np.stack([weights[3 * k + 1] for k in order])  # [K, 4H, H]
        x_tm = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(M * Bn, -1)
        xp = (x_tm @ w_ih.T + bias).reshape(M, Bn, K, 4 * H)
        acts, c_prev, tanh_c, hs = _scan_forward(xp, w_hh, n_fwd)
        self.saved = (x_tm, w_ih, w_hh, acts, c_prev, tanh_c, hs)
        self.order, self.K, self.H = order, K, H
        self.rev_flags = np.arange(K) >= n_fwd
        if order != list(range(K)):
            hs = hs[:, :, np.argsort(order)]
        return hs.reshape(M, Bn, K * H).transpose(1, 0, 2)

    def backward(self, grad):
        x_tm, w_ih, w_hh, acts, c_prev, tanh_c, hs = self.saved
        K, H, order = self.K, self.H, self.order
        M, Bn = acts.shape[:2]
        g = grad.transpose(1, 0, 2).reshape(M, Bn, K, H)[:, :, order]
        dz, dw_hh = _kern.scan_backward(g, acts, c_prev, tanh_c, hs, w_hh, self.rev_flags)
        dz2 = dz.reshape(M * Bn, K * 4 * H)
        dx = (dz2 @ w_ih).reshape(M, Bn, -1).transpose(1, 0, 2)
        dw_ih = dz2.T @ x_tm
        db = dz2.sum(axis=0)
        grads = [None] * (3 * K)
        for slot, k in enumerate(order):
            rows = slice(slot * 4 * H, (slot + 1) * 4 * H)
            grads[3 * k : 3 * k + 3] = [dw_ih[rows], dw_hh[slot], db[rows]]
        return [dx] + grads


def _scan_forward(xp: np.ndarray, w_hh: np.ndarray, n_fwd: int):
    """Vectorised LSTM scan over time-major ``xp [M, B, K, 4H]``.

    Recurrences ``k < n_fwd`` run forwards and the rest backwards; every
    buffer is indexed by sequence position.
    """
    M, Bn, K, G = xp.shape
    H = G // 4
    w_bd = np.zeros((K * H, K * G))  # block-diagonal recurrent weights
    for k in range(K):
        w_bd[k * H : (k + 1) * H, k * G : (k + 1) * G] = w_hh[k].T
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so one tanh covers all four gates
    scale = np.full(G, 0.5)
    scale[2 * H : 3 * H] = 1.0
    offset = np.where(scale == 1.0, 0.0, 0.5)
    acts = np.empty((M, Bn, K, G))
    c_prev = np.empty((M, Bn, K, H))
    tanh_c = np.empty((M, Bn, K, H))
    hs = np.empty((M, Bn, K, H))
    h = np.zeros((Bn, K, H))
    c = np.zeros((Bn, K, H))
    a = np.empty((Bn, K, G))
    f, r = slice(0, n_fwd), slice(n_fwd, K)
    for s in range(M):
        tf, tr = s, M - 1 - s
        np.matmul(h.reshape(Bn, K * H), w_bd, out=a.reshape(Bn, K * G))
        a[:, f] += xp[tf, :, f]
        a[:, r] += xp[tr, :, r]
        a *= scale
        np.tanh(a, out=a)
        a *= scale
        a += offset
        c_prev[tf, :, f], c_prev[tr, :, r] = c[:, f], c[:, r]
        acts[tf, :, f], acts[tr, :, r] = a[:, f], a[:, r]
        c *= a[..., H : 2 * H]
        c += a[..., :H] * a[..., 2 * H : 3 * H]
        tc = np.tanh(c)
        np.multiply(a[..., 3 * H :], tc, out=h)
        tanh_c[tf, :, f], tanh_c[tr, :, r] = tc[:, f], tc[:, r]
        hs[tf, :, f], hs[tr, :, r] = h[:, f], h[:, r]
    return acts, c_prev, tanh_c, hs


def multi_lstm(x, params: list, reverse: list) -> Tensor:
    """Run several LSTMs on ``[..., M, I]``; returns ``[..., M, K*H]`` in list order."""
    x = T.as_tensor(x)
    hidden = {p.hidden for p in params}
    if len(hidden) != 1:
        raise DimensionError("multi_lstm: all LSTMs must share the hidden size")
    for p in params:
        if x.shape[-1] != p.n_in:
            raise DimensionError(f"lstm: input features {x.shape[-1]} vs {p.n_in}")
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:]) if len(lead) != 1 else x
    weights = [w for p in params for w in (p.w_ih, p.w_hh, p.b)]
    out = MultiLstm.apply(flat, *weights, reverse=tuple(bool(r) for r in reverse))
    return out.reshape(lead + out.shape[-2:]) if len(lead) != 1 else out


def lstm_sequence(x, p: LstmParams, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over ``[..., M, I]``; returns ``[..., M, H]``."""
    return multi_lstm(x, [p], [reverse])


def blstm(x, p_fwd: LstmParams, p_bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM: ``[..., M, I] -> [..., M, 2H]`` (forward half first)."""
    x = T.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError("blstm needs at least one step")
    return multi_lstm(x, [p_fwd, p_bwd], [False, True])


# ---------------------------------------------------------------------------
# attention and gating


def attention_weights(z, p: AttentionParams) -> Tensor:
    """Softmax over keys of scaled query-key products: ``[..., M, M]``."""
    q = p.query(z)
    k = p.key(z)
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(p.dim))
    return T.softmax(scores, axis=-1)


def self_attention(z, p: AttentionParams) -> Tensor:
    """Single-head self-attention over ``[..., M, N]`` slices with concat skip."""
    z = T.as_tensor(z)
    a = attention_weights(z, p)
    o = T.matmul(a, p.value(z))
    merged = p.merge(o)
    return p.fuse(T.concat([merged, z], axis=-1))


def gated_rnn(x, p: GatedRnnParams) -> Tensor:
    x = T.as_tensor(x)
    H = p.blstm1.fwd.hidden
    both = multi_lstm(
        x, [p.blstm1.fwd, p.blstm1.bwd, p.blstm2.fwd, p.blstm2.bwd], [False, True, False, True]
    )
    g = T.mul(both[..., : 2 * H], both[..., 2 * H :])
    return p.out(T.concat([g, x], axis=-1))


def subblock(x, p: SubblockParams) -> Tensor:
    """Self-attention (identity when absent), gated RNN, additive bypass."""
    x = T.as_tensor(x)
    y = self_attention(x, p.attention) if p.attention is not None else x
    return T.add(gated_rnn(y, p.rnn), x)


def sa_mulcat(inputs: list, p: SaMulcatParams) -> Tensor:
    """One SA-MULCAT block on ``[..., N, S, R]`` embeddings.

    ``inputs`` holds the embeddings this block consumes: all preceding block
    outputs under dense connectivity, otherwise just the previous one.  With
    more than one input they are concatenated on the feature axis and
    projected back to N channels.
    """
    if not inputs:
        raise ValueError("sa_mulcat needs at least one input")
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise DimensionError(f"sa_mulcat: inconsistent input shapes {x.shape} vs {shape}")
    nd = len(shape)
    lead = tuple(range(nd - 3))
    n_ax, s_ax, r_ax = nd - 3, nd - 2, nd - 1
    # [..., N, S, R] -> [..., S, R, N]: S slices of R x N for intra-chunk modeling
    feats = [T.permute(x, lead + (s_ax, r_ax, n_ax)) for x in inputs]
    if p.dense is not None:
        if len(feats) != p.index:
            raise DimensionError(f"block {p.index} expects {p.index} dense inputs, got {len(feats)}")
        x = p.dense(T.concat(feats, axis=-1))
    else:
        if len(feats) != 1:
            raise DimensionError(f"block {p.index} has no dense projection but got {len(feats)} inputs")
        x = feats[0]
    x = subblock(x, p.intra)
    # [..., S, R, N] -> [..., R, S, N]: R slices of S x N for inter-chunk modeling
    x = T.permute(x, lead + (s_ax, n_ax, r_ax))
    x = subblock(x, p.inter)
    # [..., R, S, N] -> [..., N, S, R]
    return T.permute(x, lead + (r_ax, s_ax, n_ax))
