"""Objective, optimizer and training loop.

Estimates are laid out ``[..., C, E, T]`` (speakers, ears, samples) and the
multi-scale variants carry a block axis in front: ``[..., B, C, E, T]``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, TextIO

import numpy as np

from . import tensor as T
from .model import ConfigError, ModelConfig, SagrnnParams, forward, init_params
from .tensor import DimensionError, NumericError, Tensor

logger = logging.getLogger(__name__)

EPS = 1e-8
MAX_PIT_SPEAKERS = 6


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = EPS
    multiscale: str = "all"
    objective: str = "snr"
    pit_scope: str = "joint_ears"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.multiscale not in ("all", "last3", "last"):
            raise ConfigError(f"unknown multiscale mode {self.multiscale!r}")
        if self.objective not in ("snr", "si_snr"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.pit_scope not in ("joint_ears", "per_ear"):
            raise ConfigError(f"unknown pit scope {self.pit_scope!r}")


# ---------------------------------------------------------------------------
# signal-level objectives


def _check_pair(est, ref):
    if est.shape[-1] != ref.shape[-1]:
        raise DimensionError(f"length mismatch: {est.shape[-1]} vs {ref.shape[-1]}")


def snr_db(est, ref, eps: float = EPS) -> Tensor:
    """10 log10((|ref|^2 + eps) / (|ref - est|^2 + eps)) over the last axis."""
    est, ref = T.as_tensor(est), T.as_tensor(ref)
    _check_pair(est, ref)
    err = T.sub(ref, est)
    num = T.log(T.add(T.tsum(T.mul(ref, ref), axis=-1), eps))
    den = T.log(T.add(T.tsum(T.mul(err, err), axis=-1), eps))
    return T.mul(T.sub(num, den), 10.0 / math.log(10.0))


def si_snr_db(est, ref, eps: float = EPS) -> Tensor:
    """Scale-invariant SNR: both signals made zero-mean, estimate projected onto ref."""
    est, ref = T.as_tensor(est), T.as_tensor(ref)
    _check_pair(est, ref)
    est = T.sub(est, T.mean(est, axis=-1, keepdims=True))
    ref = T.sub(ref, T.mean(ref, axis=-1, keepdims=True))
    ref_energy = T.add(T.tsum(T.mul(ref, ref), axis=-1, keepdims=True), eps)
    dot = T.tsum(T.mul(est, ref), axis=-1, keepdims=True)
    target = T.mul(T.mul(dot, _reciprocal(ref_energy)), ref)
    noise = T.sub(est, target)
    # energies relative to the estimate's own, so eps cannot reintroduce scale
    inv = _reciprocal(T.add(T.tsum(T.mul(est, est), axis=-1), eps * eps))
    num = T.log(T.add(T.mul(T.tsum(T.mul(target, target), axis=-1), inv), eps))
    den = T.log(T.add(T.mul(T.tsum(T.mul(noise, noise), axis=-1), inv), eps))
    return T.mul(T.sub(num, den), 10.0 / math.log(10.0))


class _Reciprocal(T.Function):
    def forward(self, a):
        self.out = 1.0 / a
        return self.out

    def backward(self, grad):
        return (-grad * self.out**2,)


def _reciprocal(x) -> Tensor:
    return _Reciprocal.apply(x)


def objective_db(est, ref, objective: str = "snr", eps: float = EPS) -> Tensor:
    if objective == "snr":
        return snr_db(est, ref, eps)
    if objective == "si_snr":
        return si_snr_db(est, ref, eps)
    raise ValueError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------------------
# permutation invariant training


def _pairwise_scores(est: Tensor, ref: Tensor, objective: str, eps: float) -> Tensor:
    """``scores[..., i, j, e]`` = objective(est speaker i, ref speaker j, ear e)."""
    e = T.as_tensor(est)
    r = T.as_tensor(ref)
    C = e.shape[-3]
    e_exp = e.reshape(e.shape[:-3] + (C, 1) + e.shape[-2:])
    r_exp = r.reshape(r.shape[:-3] + (1, C) + r.shape[-2:])
    shape = np.broadcast_shapes(e_exp.shape, r_exp.shape)
    e_b = T.add(e_exp, np.zeros(shape))
    r_b = T.add(r_exp, np.zeros(shape))
    return objective_db(e_b, r_b, objective, eps)


def pit_assign(est, ref, objective: str = "snr", scope: str = "joint_ears", eps: float = EPS):
    """Best speaker assignment and its loss.

    ``est`` and ``ref`` are ``[..., C, E, T]``.  ``perm[j]`` is the estimate
    index assigned to reference speaker ``j``; under ``per_ear`` scope the
    permutation has an extra trailing ear axis.  The loss is the negative
    objective averaged over speakers, ears and any leading axes.
    """
    est, ref = T.as_tensor(est), T.as_tensor(ref)
    if est.shape != ref.shape:
        raise DimensionError(f"pit: estimate {est.shape} vs reference {ref.shape}")
    C, E = est.shape[-3], est.shape[-2]
    if C > MAX_PIT_SPEAKERS:
        raise ValueError(f"pit over {C} speakers exceeds the factorial guard ({MAX_PIT_SPEAKERS})")
    if E not in (1, 2):
        raise DimensionError(f"pit expects 1 or 2 ears, got {E}")
    if scope not in ("joint_ears", "per_ear"):
        raise ValueError(f"unknown pit scope {scope!r}")
    scores = _pairwise_scores(est, ref, objective, eps)  # [..., C, C, E]
    perms = np.array(list(itertools.permutations(range(C))))  # [P, C]
    cols = np.arange(C)
    s = scores.data
    lead = s.shape[:-3]
    if scope == "joint_ears":
        # [..., P] mean score of each permutation
        per = s[..., perms, cols, :].mean(axis=(-1, -2))
        best = np.argmax(per, axis=-1)
        chosen = perms[best]  # [..., C]
        idx = np.indices(lead + (C,))
        index = tuple(idx[:-1]) + (chosen, np.broadcast_to(cols, lead + (C,)))
        picked = scores[index]  # [..., C, E]
    else:
        per = s[..., perms, cols, :].mean(axis=-2)  # [..., P, E]
        best = np.argmax(per, axis=-2)  # [..., E]
        chosen = np.moveaxis(perms[best], -1, -2)  # [..., C, E]
        idx = np.indices(lead + (C, E))
        index = tuple(idx[:-2]) + (chosen, idx[-2], idx[-1])
        picked = scores[index]
    loss = T.mul(T.mean(picked), -1.0)
    perm = chosen if chosen.ndim > 1 else tuple(int(v) for v in chosen)
    return perm, loss


def blocks_in_loss(num_blocks: int, mode: str) -> list[int]:
    """Zero-based indices of the blocks contributing to the multi-scale loss."""
    if mode == "all":
        return list(range(num_blocks))
    if mode == "last3":
        return list(range(max(0, num_blocks - 3), num_blocks))
    if mode == "last":
        return [num_blocks - 1]
    raise ValueError(f"unknown multiscale mode {mode!r}")


def multi_scale_loss(block_estimates, ref, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over the selected blocks of each block's own PIT loss."""
    block_estimates = T.as_tensor(block_estimates)
    ref = T.as_tensor(ref)
    B = block_estimates.shape[-4]
    which = blocks_in_loss(B, cfg.multiscale)
    if not which:
        raise ValueError("empty block set")
    losses = []
    for b in which:
        est_b = block_estimates[..., b, :, :, :]
        _, loss = pit_assign(est_b, ref, cfg.objective, cfg.pit_scope, cfg.epsilon)
        losses.append(loss)
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.mul(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# optimization


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(params, max_norm: float = 3.0) -> float:
    """Rescale gradients in place so their global l2 norm is at most ``max_norm``.

    Returns the scale applied (1.0 when untouched).
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class OptimState:
    """AMSGrad moments keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def amsgrad_step(state: OptimState, params: dict, lr: float) -> None:
    """One bias-corrected AMSGrad update of every named parameter that has a gradient."""
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updates = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.v_max[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        v_max = np.maximum(state.v_max[name], v)
        step = lr * (m / c1) / (np.sqrt(v_max / c2) + state.eps)
        if not np.all(np.isfinite(step)):
            raise NumericError(f"non-finite update for {name}")
        state.m[name], state.v[name], state.v_max[name] = m, v, v_max
        updates[name] = step
    for name, step in updates.items():
        params[name].data -= step


def lr_at(epoch: int, base: float = 2e-4, decay: float = 0.98, every: int = 2) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    steps_per_epoch: Optional[int] = None  # None: one pass over the training split
    lr: float = 2e-4
    lr_decay: float = 0.98
    lr_decay_every: int = 2
    max_grad_norm: float = 3.0
    validate: bool = True
    target_valid_delta_snr: Optional[float] = None  # stop once validation reaches it

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class TrainResult:
    params: SagrnnParams
    state: OptimState
    log: list = field(default_factory=list)  # per-step records
    epochs: list = field(default_factory=list)  # per-epoch summaries
    best_params: Optional[dict] = None
    best_valid: float = -math.inf


def format_step(rec: dict) -> str:
    return (
        f"step={rec['step']} epoch={rec['epoch']} lr={rec['lr']:.6e} loss={rec['loss']:.6f} "
        f"grad_norm={rec['grad_norm']:.6f} clip_scale={rec['clip_scale']:.6f}"
    )


def batch_arrays(items) -> tuple[np.ndarray, np.ndarray]:
    """Stack (mixture [2, T], references [C, 2, T]) pairs into batch arrays."""
    mix = np.stack([m for m, _ in items])
    ref = np.stack([r for _, r in items])
    return mix, ref


def model_inputs(mix: np.ndarray, ref: np.ndarray, config: ModelConfig):
    """Select what the network sees and is scored against for its mode.

    SISO models see and estimate only the left ear.
    """
    if config.mode == "MIMO":
        return mix, ref
    return mix[..., 0, :], ref[..., 0:1, :]


def mean_delta_snr(params, config: ModelConfig, items, eps: float = EPS) -> float:
    """Mean SNR improvement of the last block's best-permutation estimates."""
    from .cues import snr_np

    vals = []
    with T.no_grad():
        for mix, ref in items:
            x, r = model_inputs(mix[None], ref[None], config)
            est = forward(x, params, config).data[0, -1]  # [C, E, T]
            r = r[0]
            perm, _ = pit_assign(est, r, "snr", "joint_ears", eps)
            m = x[0] if config.mode == "MIMO" else x[0][None]
            for j, i in enumerate(perm):
                for e in range(r.shape[1]):
                    vals.append(snr_np(est[i, e], r[j, e], eps) - snr_np(m[e], r[j, e], eps))
    return float(np.mean(vals))


def _loss_and_grads(params, plist, x, r, model_cfg, loss_cfg):
    """Forward and backward with per-op checks off; a non-finite result is
    replayed with checks on so the error names the offending op."""
    for checked in (False, True):
        params.zero_grad()
        with T.numeric_checks(checked):
            loss = multi_scale_loss(forward(x, params, model_cfg), r, loss_cfg)
            loss.backward()
        grad_norm = global_norm([p.grad for p in plist if p.grad is not None])
        if math.isfinite(loss.item()) and math.isfinite(grad_norm):
            return loss, grad_norm
    raise NumericError(f"non-finite loss {loss.item()} or gradient norm {grad_norm}")


def fit(
    model_cfg: ModelConfig,
    train_items: list,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: Optional[LossConfig] = None,
    seed: int = 0,
    valid_items: Optional[list] = None,
    params: Optional[SagrnnParams] = None,
    log_stream: Optional[TextIO] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train on in-memory ``(mixture [2, T], references [C, 2, T])`` items.

    Deterministic for a given seed: parameter init and minibatch shuffling
    draw from independent streams derived from it.
    """
    if not train_items:
        raise ValueError("empty training set")
    if loss_cfg is None:
        loss_cfg = LossConfig(multiscale=model_cfg.multiscale)
    init_rng, shuffle_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    if params is None:
        params = init_params(model_cfg, init_rng)
    named = params.named()
    plist = list(named.values())
    state = OptimState()
    result = TrainResult(params=params, state=state)
    n = len(train_items)
    steps_per_epoch = train_cfg.steps_per_epoch or max(1, math.ceil(n / train_cfg.batch_size))
    step = 0
    order: list[int] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.lr, train_cfg.lr_decay, train_cfg.lr_decay_every)
        losses = []
        t0 = time.perf_counter()
        for _ in range(steps_per_epoch):
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                break
            if len(order) < train_cfg.batch_size:
                order.extend(shuffle_rng.permutation(n).tolist())
            idx, order = order[: train_cfg.batch_size], order[train_cfg.batch_size :]
            mix, ref = batch_arrays([train_items[i] for i in idx])
            x, r = model_inputs(mix, ref, model_cfg)
            try:
                loss, grad_norm = _loss_and_grads(params, plist, x, r, model_cfg, loss_cfg)
                scale = clip_grad_norm(plist, train_cfg.max_grad_norm)
                amsgrad_step(state, named, lr)
            except NumericError as exc:
                raise NumericError(f"step {step} (epoch {epoch}): {exc}") from exc
            rec = dict(step=step, epoch=epoch, lr=lr, loss=loss.item(), grad_norm=grad_norm, clip_scale=scale)
            result.log.append(rec)
            if log_stream is not None:
                log_stream.write(format_step(rec) + "\n")
                log_stream.flush()
            if callback is not None:
                callback(rec)
            losses.append(rec["loss"])
            step += 1
        if not losses:
            break
        summary = dict(epoch=epoch, mean_loss=float(np.mean(losses)), seconds=time.perf_counter() - t0)
        if train_cfg.validate and valid_items:
            summary["valid_delta_snr"] = mean_delta_snr(params, model_cfg, valid_items, loss_cfg.epsilon)
            if summary["valid_delta_snr"] > result.best_valid:
                result.best_valid = summary["valid_delta_snr"]
                result.best_params = {k: v.data.copy() for k, v in named.items()}
        result.epochs.append(summary)
        logger.info("epoch %d: %s", epoch, json.dumps(summary))
        target = train_cfg.target_valid_delta_snr
        if target is not None and summary.get("valid_delta_snr", -math.inf) >= target:
            break
    return result
