import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sagrnn import tensor as T
from sagrnn.model import ConfigError, ModelConfig
from sagrnn.sim import make_scene, random_scene_spec, scene_items
from sagrnn.tensor import DimensionError, NumericError
from sagrnn.training import (
    LossConfig,
    OptimState,
    TrainConfig,
    amsgrad_step,
    blocks_in_loss,
    clip_grad_norm,
    fit,
    format_step,
    global_norm,
    lr_at,
    multi_scale_loss,
    pit_assign,
    si_snr_db,
    snr_db,
)


def unit(x):
    return x / np.linalg.norm(x)


def snr_oracle(est, ref, eps=1e-8):
    return 10 * math.log10((float(np.sum(ref**2)) + eps) / (float(np.sum((ref - est) ** 2)) + eps))


def brute_force_pit(est, ref):
    """Loop over permutations, scoring each with the scalar oracle."""
    C, E = est.shape[:2]
    best, best_perm = -math.inf, None
    for perm in itertools.permutations(range(C)):
        score = np.mean([snr_oracle(est[perm[j], e], ref[j, e]) for j in range(C) for e in range(E)])
        if score > best:
            best, best_perm = score, perm
    return best_perm, -best


# ---------------------------------------------------------------------------
# objectives


def test_snr_double_estimate_is_zero_db(rng):
    s = unit(rng.standard_normal(64))
    assert snr_db(2 * s, s).item() == pytest.approx(0.0, abs=1e-6)


def test_snr_twenty_db(rng):
    s = unit(rng.standard_normal(64))
    n = unit(rng.standard_normal(64)) * 0.1
    got = snr_db(s + n, s).item()
    assert got == pytest.approx(20.0, abs=1e-5)
    assert got == pytest.approx(10 * math.log10((1 + 1e-8) / (0.01 + 1e-8)), abs=1e-9)


def test_snr_perfect_estimate_is_capped_at_eighty_db(rng):
    s = unit(rng.standard_normal(64))
    assert snr_db(s, s).item() == pytest.approx(80.0, abs=1e-6)


def test_snr_length_mismatch():
    with pytest.raises(DimensionError):
        snr_db(np.ones(4), np.ones(5))
    with pytest.raises(DimensionError):
        si_snr_db(np.ones(4), np.ones(5))


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_si_snr_scale_invariance(alpha, seed):
    s = np.random.default_rng(seed).standard_normal(128)
    e = np.random.default_rng(seed + 1).standard_normal(128) * 0.3
    assert si_snr_db(alpha * (s + e), s).item() == pytest.approx(si_snr_db(s + e, s).item(), abs=1e-6)


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_snr_scale_pattern(alpha, rng):
    s = unit(rng.standard_normal(256))
    assert snr_db(alpha * s, s).item() == pytest.approx(-10 * math.log10((alpha - 1) ** 2 + 1e-8), abs=1e-6)


@pytest.mark.parametrize("alpha", [1e-3, 0.1, 10.0, 1e3])
def test_si_snr_of_scaled_reference_is_constant(alpha, rng):
    s = rng.standard_normal(256)
    assert si_snr_db(alpha * s, s).item() == pytest.approx(si_snr_db(s, s).item(), abs=1e-6)
    assert si_snr_db(s, s).item() == pytest.approx(80.0, abs=1e-6)


def test_si_snr_orthogonal_is_very_negative():
    t = np.arange(64)
    a, b = np.sin(2 * np.pi * 4 * t / 64), np.cos(2 * np.pi * 4 * t / 64)
    assert si_snr_db(a, b).item() < -60


@given(st.integers(0, 2**31))
def test_snr_matches_scalar_oracle(seed):
    r = np.random.default_rng(seed)
    est, ref = r.standard_normal((3, 40)), r.standard_normal((3, 40))
    got = snr_db(est, ref).data
    np.testing.assert_allclose(got, [snr_oracle(est[i], ref[i]) for i in range(3)], atol=1e-10)


# ---------------------------------------------------------------------------
# PIT


def test_pit_detects_swap(rng):
    ref = rng.standard_normal((2, 2, 50))
    est = ref[::-1] + 0.01 * rng.standard_normal((2, 2, 50))
    perm, _ = pit_assign(est, ref)
    assert perm == (1, 0)


def test_pit_loss_not_above_fixed_permutations(rng):
    est, ref = rng.standard_normal((2, 2, 50)), rng.standard_normal((2, 2, 50))
    _, loss = pit_assign(est, ref)
    for perm in ((0, 1), (1, 0)):
        fixed = -np.mean([snr_oracle(est[perm[j], e], ref[j, e]) for j in range(2) for e in range(2)])
        assert loss.item() <= fixed + 1e-12


@pytest.mark.parametrize("C", [2, 3, 4])
def test_pit_matches_brute_force(C):
    r = np.random.default_rng(C)
    for _ in range(20):
        ref = r.standard_normal((C, 2, 24))
        est = ref[r.permutation(C)] + r.standard_normal((C, 2, 24)) * r.uniform(0.1, 2)
        perm, loss = pit_assign(est, ref)
        want_perm, want_loss = brute_force_pit(est, ref)
        assert perm == want_perm
        assert loss.item() == pytest.approx(want_loss, abs=1e-10)


def test_pit_per_ear_scope_allows_different_orders(rng):
    ref = rng.standard_normal((2, 2, 60))
    est = ref.copy()
    est[:, 1] = ref[::-1, 1]  # right ear swapped
    perm, loss = pit_assign(est, ref, scope="per_ear")
    assert perm.tolist() == [[0, 1], [1, 0]]
    want = -np.mean([snr_oracle(ref[j, e], ref[j, e]) for j in range(2) for e in range(2)])
    assert loss.item() == pytest.approx(want, abs=1e-9)


def test_pit_batched_matches_per_item(rng):
    est, ref = rng.standard_normal((3, 3, 2, 30)), rng.standard_normal((3, 3, 2, 30))
    perm, loss = pit_assign(est, ref)
    singles = [pit_assign(est[i], ref[i]) for i in range(3)]
    assert [tuple(p) for p in perm] == [s[0] for s in singles]
    assert loss.item() == pytest.approx(np.mean([s[1].item() for s in singles]), abs=1e-12)


def test_pit_guards():
    with pytest.raises(ValueError):
        pit_assign(np.ones((7, 1, 4)), np.ones((7, 1, 4)))
    with pytest.raises(DimensionError):
        pit_assign(np.ones((2, 3, 4)), np.ones((2, 3, 4)))
    with pytest.raises(DimensionError):
        pit_assign(np.ones((2, 1, 4)), np.ones((3, 1, 4)))


def test_pit_gradient_flows_to_estimates(rng):
    est = T.parameter(rng.standard_normal((2, 2, 16)))
    ref = rng.standard_normal((2, 2, 16))
    assert T.grad_check(lambda e: pit_assign(e, ref)[1], est) < 1e-5


# ---------------------------------------------------------------------------
# multi-scale loss


def test_blocks_in_loss_sets():
    assert blocks_in_loss(6, "all") == [0, 1, 2, 3, 4, 5]
    assert blocks_in_loss(6, "last3") == [3, 4, 5]
    assert blocks_in_loss(6, "last") == [5]
    assert blocks_in_loss(2, "last3") == [0, 1]


def test_multi_scale_is_mean_of_block_losses(rng):
    est, ref = rng.standard_normal((4, 2, 2, 30)), rng.standard_normal((2, 2, 30))
    per_block = [brute_force_pit(est[b], ref)[1] for b in range(4)]
    assert multi_scale_loss(est, ref).item() == pytest.approx(np.mean(per_block), abs=1e-10)
    assert multi_scale_loss(est, ref, LossConfig(multiscale="last3")).item() == pytest.approx(np.mean(per_block[1:]), abs=1e-10)
    assert multi_scale_loss(est, ref, LossConfig(multiscale="last")).item() == pytest.approx(per_block[-1], abs=1e-10)


def test_multi_scale_degenerate_cases(rng):
    one, ref = rng.standard_normal((1, 2, 2, 30)), rng.standard_normal((2, 2, 30))
    single = pit_assign(one[0], ref)[1].item()
    assert multi_scale_loss(one, ref).item() == pytest.approx(single, abs=1e-12)
    same = np.repeat(one, 5, axis=0)
    assert multi_scale_loss(same, ref).item() == pytest.approx(single, abs=1e-12)


def test_loss_config_validation():
    for bad in (dict(epsilon=0), dict(multiscale="x"), dict(objective="sdr"), dict(pit_scope="x")):
        with pytest.raises(ConfigError):
            LossConfig(**bad)


# ---------------------------------------------------------------------------
# clipping and optimizer


def with_grads(*grads):
    out = []
    for g in grads:
        p = T.parameter(np.zeros_like(g))
        p.grad = np.array(g, dtype=float)
        out.append(p)
    return out


def test_clip_halves_norm_six():
    ps = with_grads(np.array([6.0, 0.0]))
    assert clip_grad_norm(ps, 3.0) == 0.5
    assert ps[0].grad.tolist() == [3.0, 0.0]


def test_clip_leaves_small_norm():
    ps = with_grads(np.array([0.6, 0.8]))
    assert clip_grad_norm(ps, 3.0) == 1.0
    assert ps[0].grad.tolist() == [0.6, 0.8]


@given(st.integers(0, 2**31), st.floats(0.1, 100))
def test_clip_caps_norm(seed, size):
    r = np.random.default_rng(seed)
    ps = with_grads(r.standard_normal(5) * size, r.standard_normal((2, 3)) * size)
    clip_grad_norm(ps, 3.0)
    assert global_norm([p.grad for p in ps]) <= 3.0 + 1e-12


def test_clip_rejects_non_finite():
    with pytest.raises(NumericError):
        clip_grad_norm(with_grads(np.array([np.nan])))


def test_amsgrad_first_step_is_learning_rate():
    p = T.parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    amsgrad_step(OptimState(), {"w": p}, 2e-4)
    assert -p.data[0] == pytest.approx(2e-4, rel=1e-7)


def test_amsgrad_three_hand_evaluated_steps():
    p = T.parameter(np.array([0.5]))
    state = OptimState()
    expected = [0.499800000002, 0.4998732207069441, 0.49990055883934764]
    for g, want in zip([1.0, -2.0, 0.5], expected):
        p.grad = np.array([g])
        amsgrad_step(state, {"w": p}, 2e-4)
        assert abs(p.data[0] - want) < 1e-12
    assert state.t == 3


def test_amsgrad_zero_gradient_never_moves(rng):
    x = rng.standard_normal(4)
    p = T.parameter(x.copy())
    state = OptimState()
    for _ in range(20):
        p.grad = np.zeros(4)
        amsgrad_step(state, {"w": p}, 1e-2)
    assert np.array_equal(p.data, x)


def test_amsgrad_vmax_monotone(rng):
    p = T.parameter(np.zeros(3))
    state = OptimState()
    prev = np.zeros(3)
    for _ in range(100):
        p.grad = rng.standard_normal(3) * rng.uniform(0, 3)
        amsgrad_step(state, {"w": p}, 1e-3)
        assert np.all(state.v_max["w"] >= prev)
        prev = state.v_max["w"].copy()


def test_amsgrad_skips_params_without_gradient():
    a, b = T.parameter(np.ones(2)), T.parameter(np.ones(2))
    a.grad = np.ones(2)
    amsgrad_step(OptimState(), {"a": a, "b": b}, 0.1)
    assert b.data.tolist() == [1.0, 1.0] and a.data[0] < 1.0


def test_amsgrad_non_finite_update_leaves_params_untouched():
    p = T.parameter(np.ones(2))
    p.grad = np.array([1.0, np.inf])
    with pytest.raises(NumericError):
        amsgrad_step(OptimState(), {"w": p}, 0.1)
    assert p.data.tolist() == [1.0, 1.0]


@pytest.mark.parametrize("epoch,want", [(0, 2e-4), (1, 2e-4), (2, 2e-4 * 0.98), (4, 1.9208e-4), (5, 1.9208e-4)])
def test_lr_schedule(epoch, want):
    assert lr_at(epoch) == pytest.approx(want, rel=1e-15)


def test_lr_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(-1)


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def short_items():
    return scene_items([make_scene(random_scene_spec(s, 0.25, 2, False)) for s in range(4)])


def test_loss_decreases_over_fifty_steps(short_items):
    cfg = ModelConfig.tiny()
    tc = TrainConfig(batch_size=4, epochs=1, steps_per_epoch=50, lr=2e-3, validate=False)
    log = fit(cfg, short_items, tc, seed=1).log
    assert len(log) == 50
    assert np.mean([r["loss"] for r in log[-5:]]) < log[0]["loss"] - 1.0


def test_fit_is_deterministic_and_logs_each_step(short_items):
    cfg = ModelConfig.tiny(mode="SISO")
    tc = TrainConfig(batch_size=2, epochs=2, steps_per_epoch=3, lr=1e-3)
    streams = [io.StringIO(), io.StringIO()]
    runs = [fit(cfg, short_items, tc, seed=5, valid_items=short_items[:2], log_stream=s) for s in streams]
    assert [r["loss"] for r in runs[0].log] == [r["loss"] for r in runs[1].log]
    assert streams[0].getvalue() == streams[1].getvalue()
    lines = streams[0].getvalue().splitlines()
    assert len(lines) == 6 and lines[0] == format_step(runs[0].log[0])
    assert all(k in lines[0] for k in ("step=", "epoch=", "lr=", "loss=", "grad_norm=", "clip_scale="))
    assert len(runs[0].epochs) == 2 and "valid_delta_snr" in runs[0].epochs[0]
    assert runs[0].best_params is not None
    for a, b in zip(runs[0].params.parameters(), runs[1].params.parameters()):
        assert np.array_equal(a.data, b.data)


def test_fit_respects_max_steps_and_schedule(short_items):
    tc = TrainConfig(batch_size=4, epochs=5, steps_per_epoch=1, max_steps=3, lr=1e-3, lr_decay=0.5, lr_decay_every=1, validate=False)
    log = fit(ModelConfig.tiny(mode="SISO"), short_items, tc, seed=0).log
    assert [r["lr"] for r in log] == [1e-3, 5e-4, 2.5e-4]


def test_fit_reports_step_context_on_numeric_failure(short_items):
    bad = [(m * np.nan, r) for m, r in short_items]
    tc = TrainConfig(batch_size=2, epochs=1, steps_per_epoch=2, validate=False)
    with pytest.raises(NumericError, match=r"step 0 \(epoch 0\)"):
        fit(ModelConfig.tiny(mode="SISO"), bad, tc)


def test_fit_rejects_empty_and_bad_configs():
    with pytest.raises(ValueError):
        fit(ModelConfig.tiny(), [])
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
