"""Finite-difference verification of every differentiable op and the full loss.

Each check builds a scalar from an op's output (a fixed random weighting of
every output entry), runs reverse mode once, then compares selected entries
against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .layers import (
    AttentionParams,
    GatedRnnParams,
    LstmParams,
    SaMulcatParams,
    SubblockParams,
    attention_weights,
    blstm,
    gated_rnn,
    lstm_sequence,
    multi_lstm,
    named_parameters,
    sa_mulcat,
    self_attention,
    subblock,
)
from .model import ModelConfig, chunk, decode_block, encode, forward, init_params, merge_chunks, num_frames
from .tensor import Tensor
from .training import LossConfig, multi_scale_loss, pit_assign, si_snr_db, snr_db

TOLERANCE = 1e-4
STEP = 1e-5
DENOM_FLOOR = 1e-6  # below this, |a - n| is dominated by finite-difference roundoff


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    entries: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < self.tolerance

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} {self.max_rel_err:12.3e} {self.entries:8d} {self.seconds:8.2f}s  {status}"


def _pick(grad: np.ndarray, limit: Optional[int], rng: np.random.Generator) -> np.ndarray:
    n = grad.size
    if limit is None or n <= limit:
        return np.arange(n)
    flat = np.abs(grad.reshape(-1))
    top = np.argsort(-flat, kind="stable")[: limit // 2]
    rest = np.setdiff1d(np.arange(n), top)
    return np.concatenate([top, rng.choice(rest, size=limit - top.size, replace=False)])


def check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    limit: Optional[int] = None,
    h: float = STEP,
    seed: int = 0,
) -> tuple[float, int]:
    """Max relative error over ``tensors`` (perturbed in place); returns ``(err, entries)``."""
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    T.backward(loss_fn())
    worst, count = 0.0, 0
    with T.no_grad():
        for t in tensors.values():
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            for i in _pick(analytic, limit, rng):
                orig = flat[i]
                up, down = orig + h, orig - h
                flat[i] = up
                fp = loss_fn().item()
                flat[i] = down
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (up - down)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), DENOM_FLOOR)
                worst = max(worst, err) if np.isfinite(err) else np.inf
                count += 1
    return float(worst), count


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = rng.standard_normal(out.shape)
    return T.tsum(T.mul(out, w))


def _op_check(name, fn, shapes, seed, transform=None, limit=None):
    """Check ``fn(*inputs)`` w.r.t. every input drawn with the given shapes."""
    rng = np.random.default_rng(seed)
    inputs = {}
    for i, shape in enumerate(shapes):
        data = rng.standard_normal(shape)
        if transform is not None:
            data = transform(i, data)
        inputs[f"x{i}"] = T.as_tensor(data)
    weight_rng_state = rng.bit_generator.state

    def loss():
        wr = np.random.default_rng(0)
        wr.bit_generator.state = weight_rng_state
        return _weighted(fn(*inputs.values()), wr)

    return name, loss, inputs, limit


def _param_check(name, fn, params, seed, limit=None):
    rng = np.random.default_rng(seed)
    state = rng.bit_generator.state

    def loss():
        wr = np.random.default_rng(0)
        wr.bit_generator.state = state
        return _weighted(fn(), wr)

    return name, loss, dict(named_parameters(params)), limit


def _away_from_kinks(_, x):
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)


def _positive(_, x):
    return np.abs(x) + 0.5


def layer_checks() -> list:
    """``(name, loss_fn, tensors, limit)`` tuples for every differentiable op."""
    rng = np.random.default_rng(1234)
    c = []
    c.append(_op_check("add (broadcast)", T.add, [(3, 4), (4,)], 1))
    c.append(_op_check("sub (broadcast)", T.sub, [(2, 3, 1), (3, 4)], 2))
    c.append(_op_check("mul (broadcast)", T.mul, [(3, 4), (3, 1)], 3))
    c.append(_op_check("hadamard", lambda a, b: T.combine(a, b, "hadamard"), [(3, 4), (3, 4)], 4))
    c.append(_op_check("log", T.log, [(3, 4)], 5, _positive))
    c.append(_op_check("exp", T.exp, [(3, 4)], 6))
    c.append(_op_check("relu", T.relu, [(3, 4)], 7, _away_from_kinks))
    c.append(_op_check("sigmoid", T.sigmoid, [(3, 4)], 8))
    c.append(_op_check("tanh", T.tanh, [(3, 4)], 9))
    c.append(_op_check("prelu", lambda x, a: T.prelu(x, a, axis=-2), [(2, 3, 4), (3,)], 10, lambda i, x: _away_from_kinks(i, x) if i == 0 else x))
    c.append(_op_check("sum", lambda x: T.tsum(x, axis=1), [(3, 4, 2)], 11))
    c.append(_op_check("mean", lambda x: T.mean(x, axis=0, keepdims=True), [(3, 4)], 12))
    c.append(_op_check("reshape", lambda x: T.reshape(x, (6, 2)), [(3, 4)], 13))
    c.append(_op_check("permute", lambda x: T.permute(x, (2, 0, 1)), [(2, 3, 4)], 14))
    c.append(_op_check("concat", lambda a, b: T.concat([a, b], axis=-1), [(2, 3), (2, 2)], 15))
    c.append(_op_check("stack", lambda a, b: T.stack([a, b], axis=1), [(2, 3), (2, 3)], 16))
    c.append(_op_check("getitem", lambda x: x[1:, ::2], [(3, 5)], 17))
    c.append(_op_check("pad", lambda x: T.pad(x, -1, 1, 2), [(2, 3)], 18))
    c.append(_op_check("flip", lambda x: T.flip(x, 1), [(2, 3)], 19))
    c.append(_op_check("matmul (batched)", T.matmul, [(2, 3, 4), (4, 5)], 20))
    c.append(_op_check("pointwise_linear", lambda x, w, b: T.pointwise_linear(x, w, b, axis=1), [(2, 4, 3), (5, 4), (5,)], 21))
    c.append(_op_check("softmax", lambda x: T.softmax(x, axis=-1), [(3, 5)], 22))
    c.append(_op_check("frame", lambda x: T.frame(x, 4, 2), [(2, 11)], 23))
    c.append(_op_check("overlap_add", lambda f: T.overlap_add(f, 2, 10), [(2, 4, 4)], 24))
    c.append(_op_check("conv1d (stride)", lambda x, k: T.conv1d(x, k, 2), [(2, 13), (3, 4)], 25))
    c.append(_op_check("encode", lambda x, k: encode(x, k), [(13,), (3, 4)], 26))
    c.append(_op_check("chunk", lambda u: chunk(u, 4), [(2, 9)], 27))
    c.append(_op_check("merge_chunks", lambda w: merge_chunks(w, 9), [(2, 5, 4)], 28))

    # recurrent and attention layers (parameters are checked in place)
    x = T.as_tensor(rng.standard_normal((2, 5, 3)))
    lstm = LstmParams.init(rng, 3, 4)
    c.append(_param_check("lstm", lambda: lstm_sequence(x, lstm), lstm, 30))
    c.append(_op_check("lstm input", lambda v: lstm_sequence(v, lstm, reverse=True), [(2, 5, 3)], 31))
    back = LstmParams.init(rng, 3, 4)
    c.append(_param_check("blstm", lambda: blstm(x, lstm, back), [lstm, back], 32))
    multi = [LstmParams.init(rng, 3, 2) for _ in range(3)]
    c.append(_param_check("multi_lstm", lambda: multi_lstm(x, multi, [False, True, False]), multi, 33))

    z = T.as_tensor(rng.standard_normal((2, 5, 4)))
    att = AttentionParams.init(rng, 4, 3)
    c.append(_param_check("attention weights", lambda: attention_weights(z, att), att, 34))
    c.append(_param_check("self_attention", lambda: self_attention(z, att), att, 35))
    c.append(_op_check("self_attention input", lambda v: self_attention(v, att), [(2, 5, 4)], 36))
    gr = GatedRnnParams.init(rng, 4, 3)
    c.append(_param_check("gated_rnn", lambda: gated_rnn(z, gr), gr, 37))
    sb = SubblockParams.init(rng, 4, 3, 3, True)
    c.append(_param_check("subblock", lambda: subblock(z, sb), sb, 38))
    emb = [T.as_tensor(rng.standard_normal((4, 3, 4))) for _ in range(2)]
    sam = SaMulcatParams.init(rng, 2, 4, 3, 3, True, True)
    c.append(_param_check("sa_mulcat", lambda: sa_mulcat(emb, sam), sam, 39, limit=40))
    cfg = ModelConfig.tiny(N=4, P=4, R=4)
    params = init_params(cfg, 3)
    e = T.as_tensor(np.abs(rng.standard_normal((2, 4, 3, 4))))
    c.append(_param_check("decode_block", lambda: decode_block(e, params.decoder, 10, num_frames(10, 4)), params.decoder, 40))

    # objectives
    c.append(_op_check("snr_db", lambda a, b: snr_db(a, b), [(2, 16), (2, 16)], 41))
    c.append(_op_check("si_snr_db", lambda a, b: si_snr_db(a, b), [(2, 16), (2, 16)], 42))
    c.append(_op_check("pit loss", lambda a, b: pit_assign(a, b, "snr", "joint_ears")[1], [(3, 2, 16), (3, 2, 16)], 43))
    return c


def model_check(mode: str = "MIMO", n_samples: int = 160, limit: int = 6, seed: int = 0):
    """Full tiny-configuration loss w.r.t. every parameter tensor (sampled entries)."""
    cfg = ModelConfig.tiny(mode=mode)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    shape = (1, 2, n_samples) if mode == "MIMO" else (1, n_samples)
    mix = rng.standard_normal(shape)
    ref = rng.standard_normal((1, cfg.C) + ((2,) if mode == "MIMO" else (1,)) + (n_samples,))
    loss_cfg = LossConfig(multiscale=cfg.multiscale)

    def loss():
        return multi_scale_loss(forward(mix, params, cfg), ref, loss_cfg)

    return f"full model loss ({mode})", lambda: loss(), params.named(), limit


def run_suite(checks=None, tolerance: float = TOLERANCE, h: float = STEP, progress=None) -> list[CheckResult]:
    if checks is None:
        checks = layer_checks() + [model_check("MIMO"), model_check("SISO")]
    results = []
    for name, loss_fn, tensors, limit in checks:
        t0 = time.perf_counter()
        err, n = check_tensors(loss_fn, tensors, limit, h)
        res = CheckResult(name, err, n, time.perf_counter() - t0, tolerance)
        results.append(res)
        if progress is not None:
            progress(res)
    return results


def format_table(results: list[CheckResult]) -> str:
    head = f"{'check':<28} {'max rel err':>12} {'entries':>8} {'time':>9}  status"
    return "\n".join([head, "-" * len(head)] + [r.row() for r in results])
