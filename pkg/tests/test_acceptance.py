"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see the ``verdict`` fixture) which is
also repeated in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest

from sagrnn import gradcheck as G
from sagrnn import tensor as T
from sagrnn.checkpoint import load_checkpoint, save_checkpoint
from sagrnn.cues import broadband_ild, cue_report
from sagrnn.evaluation import evaluate_model
from sagrnn.layers import AttentionParams, attention_weights
from sagrnn.model import ModelConfig, block_fan_in, chunk, init_params, merge_chunks, mimo_forward, padded_length, separate
from sagrnn.sim import DatasetConfig, gen_dataset, make_scene, random_scene_spec, scene_items, spatialize, synth_speech_like, woodworth_itd, write_wav
from sagrnn.training import (
    OptimState,
    TrainConfig,
    amsgrad_step,
    blocks_in_loss,
    clip_grad_norm,
    fit,
    global_norm,
    lr_at,
    mean_delta_snr,
    pit_assign,
    si_snr_db,
    snr_db,
)

OVERFIT_SCENES = 4
OVERFIT_MAX_STEPS = 2000
OVERFIT_MAX_SECONDS = 30 * 60
DESK_TEST_SCENES = 16


@pytest.fixture(scope="module")
def overfit():
    """Tiny MIMO model trained on four fixed noise-free half-second scenes."""
    cfg = ModelConfig.tiny(mode="MIMO")
    items = scene_items([make_scene(random_scene_spec(s, 0.5, 2, noisy=False)) for s in range(OVERFIT_SCENES)])
    train_cfg = TrainConfig(
        batch_size=OVERFIT_SCENES,
        epochs=OVERFIT_MAX_STEPS // 50,
        steps_per_epoch=50,
        lr=1e-2,
        lr_decay=0.97,
        lr_decay_every=1,
        target_valid_delta_snr=10.0,
    )
    t0 = time.perf_counter()
    result = fit(cfg, items, train_cfg, seed=0, valid_items=items)
    return cfg, items, result, time.perf_counter() - t0


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = G.run_suite(tolerance=1e-4, h=1e-5)
    elapsed = time.perf_counter() - t0
    print(G.format_table(results))
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and elapsed < 300 and G.STEP == 1e-5
    verdict(1, ok, f"{len(results)} checks, worst rel err {worst:.2e} (< 1e-4), {elapsed:.0f} s (< 300 s)")


def test_criterion_02_plumbing_identities(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for L, R in itertools.product([1, 5, 13, 40, 127], [2, 4, 14]):
        u = rng.standard_normal((3, L))
        worst = max(worst, np.max(np.abs(merge_chunks(chunk(u, R), L).data - u)))
    for n, P in itertools.product([1, 7, 33, 200], [2, 4, 8]):
        x = rng.standard_normal(n)
        frames = T.frame(np.pad(x, (0, padded_length(n, P, P // 2) - n)), P, P // 2)
        worst = max(worst, np.max(np.abs(T.overlap_add(frames, P // 2, n, normalize=True).data - x)))

    p = AttentionParams.init(rng, 6, 4)
    w = attention_weights(rng.standard_normal((3, 9, 6)) * 4, p).data
    row_err = float(np.max(np.abs(w.sum(-1) - 1)))

    cfg = ModelConfig.tiny()
    params = init_params(cfg, 5)
    left, right = rng.standard_normal(700), rng.standard_normal(700)
    a = mimo_forward(left, right, params, cfg).data
    b = mimo_forward(right, left, params, cfg).data
    swap_exact = bool(np.array_equal(a, b[:, :, ::-1]))

    ok = worst <= 1e-12 and row_err <= 1e-12 and swap_exact
    verdict(2, ok, f"roundtrip err {worst:.1e}, attention row err {row_err:.1e}, ear swap bit-exact={swap_exact}")


def _snr(est, ref, eps=1e-8):
    return 10 * math.log10((float(np.sum(ref**2)) + eps) / (float(np.sum((ref - est) ** 2)) + eps))


def test_criterion_03_pit_matches_exhaustive_search(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    total = 0
    for C in (2, 3, 4):
        for _ in range(100):
            ref = rng.standard_normal((C, 2, 20))
            est = ref[rng.permutation(C)] * rng.uniform(0.2, 2) + rng.standard_normal((C, 2, 20)) * rng.uniform(0.1, 3)
            scores = {
                perm: np.mean([_snr(est[perm[j], e], ref[j, e]) for j in range(C) for e in range(2)])
                for perm in itertools.permutations(range(C))
            }
            want = max(scores, key=scores.get)
            perm, loss = pit_assign(est, ref)
            total += 1
            if perm != want or abs(loss.item() + scores[want]) > 1e-10:
                mismatches += 1
    verdict(3, mismatches == 0, f"{total - mismatches}/{total} instances agree (C = 2, 3, 4)")


def test_criterion_04_objective_scale_behaviour(verdict):
    rng = np.random.default_rng(4)
    s = rng.standard_normal(512)
    s /= np.linalg.norm(s)
    alphas = (0.1, 1.0, 10.0)
    si = [si_snr_db(a * s, s).item() for a in alphas]
    si_spread = max(si) - min(si)
    snr_err = max(abs(snr_db(a * s, s).item() + 10 * math.log10((a - 1) ** 2 + 1e-8)) for a in alphas)
    ok = si_spread <= 1e-6 and snr_err <= 1e-6
    verdict(4, ok, f"si_snr spread {si_spread:.1e} dB, snr deviation {snr_err:.1e} dB")


def test_criterion_05_optimizer_conformance(verdict):
    # hand evaluation with beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected moments
    x, m, v, vmax, lr = 0.5, 0.0, 0.0, 0.0, 2e-4
    expected = []
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        vmax = max(vmax, v)
        x -= lr * (m / (1 - 0.9**t)) / (math.sqrt(vmax / (1 - 0.999**t)) + 1e-8)
        expected.append(x)
    p = T.parameter(np.array([0.5]))
    state = OptimState()
    got = []
    for g in [1.0, -2.0, 0.5]:
        p.grad = np.array([g])
        amsgrad_step(state, {"w": p}, lr)
        got.append(p.data[0])
    frozen = [0.499800000002, 0.4998732207069441, 0.49990055883934764]
    opt_err = max(max(abs(a - b), abs(a - c)) for a, b, c in zip(got, expected, frozen))

    schedule_ok = all(lr_at(e) == 2e-4 * 0.98 ** (e // 2) for e in range(60))

    rng = np.random.default_rng(5)
    clip_err = 0.0
    for _ in range(50):
        ps = [T.parameter(np.zeros(s)) for s in ((4,), (2, 3))]
        for q in ps:
            q.grad = rng.standard_normal(q.shape) * rng.uniform(1, 50)
        before = global_norm([q.grad for q in ps])
        clip_grad_norm(ps, 3.0)
        after = global_norm([q.grad for q in ps])
        clip_err = max(clip_err, abs(after - min(before, 3.0)))

    ok = opt_err <= 1e-12 and schedule_ok and clip_err <= 1e-12
    verdict(5, ok, f"amsgrad err {opt_err:.1e}, schedule exact={schedule_ok}, clip err {clip_err:.1e}")


def test_criterion_06_overfit_run(overfit, verdict):
    cfg, items, result, seconds = overfit
    steps = len(result.log)
    delta = mean_delta_snr(result.params, cfg, items)
    ok = delta >= 10.0 and steps <= OVERFIT_MAX_STEPS and seconds <= OVERFIT_MAX_SECONDS
    verdict(6, ok, f"mean delta SNR {delta:.2f} dB (>= 10) after {steps} steps (<= 2000) in {seconds / 60:.1f} min (<= 30)")


def test_criterion_07_cue_closed_loop(verdict):
    worst_itd = worst_az = worst_ild = 0.0
    for theta in (-60, -30, 0, 30, 60):
        sig = spatialize(synth_speech_like(500 + theta, 1.0), theta)
        rep = cue_report(sig)
        worst_itd = max(worst_itd, abs(rep.itd_us - woodworth_itd(theta) * 1e6))
        worst_az = max(worst_az, abs(float(np.mean(rep.azimuth_deg)) - theta))
        worst_ild = max(worst_ild, abs(broadband_ild(sig) - 10 * math.sin(math.radians(theta))))
    ok = worst_itd <= 30 and worst_az <= 5 and worst_ild <= 1
    verdict(7, ok, f"worst ITD err {worst_itd:.1f} us, azimuth err {worst_az:.2f} deg, ILD err {worst_ild:.2f} dB")


def test_criterion_08_cue_preservation(overfit, verdict):
    cfg, _, result, _ = overfit
    test_items = scene_items(
        [make_scene(random_scene_spec(1000 + s, 0.5, 2, noisy=False)) for s in range(DESK_TEST_SCENES)]
    )
    summary = evaluate_model(result.params, cfg, test_items)["summary"]
    est, mix = summary["estimate"], summary["mixture"]
    ok = est["delta_azimuth_deg"] < mix["delta_azimuth_deg"] and est["delta_itd_us"] < mix["delta_itd_us"]
    verdict(
        8,
        ok,
        f"azimuth err {est['delta_azimuth_deg']:.2f} vs mixture {mix['delta_azimuth_deg']:.2f} deg, "
        f"ITD err {est['delta_itd_us']:.1f} vs mixture {mix['delta_itd_us']:.1f} us",
    )


def test_criterion_09_ablation_structure(verdict):
    expected = {
        "full": ([1, 2, 3, 4, 5, 6], True, [0, 1, 2, 3, 4, 5]),
        "i": ([1, 2, 3, 4, 5, 6], True, [3, 4, 5]),
        "ii": ([1, 2, 3, 4, 5, 6], True, [5]),
        "iii": ([1] * 6, True, [0, 1, 2, 3, 4, 5]),
        "iv": ([1, 2, 3, 4, 5, 6], False, [0, 1, 2, 3, 4, 5]),
        "v": ([1] * 6, False, [0, 1, 2, 3, 4, 5]),
    }
    bad = []
    for variant, (fan_in, attention, loss_blocks) in expected.items():
        cfg = ModelConfig.ablation(variant, N=4, H=2, D=2, R=4)
        params = init_params(cfg, 0)
        got_fan_in = [1 if p.dense is None else p.dense.w.shape[1] // cfg.N for p in params.blocks]
        got_attention = {p.intra.attention is not None for p in params.blocks} | {
            p.inter.attention is not None for p in params.blocks
        }
        ok = (
            block_fan_in(cfg) == fan_in
            and got_fan_in == fan_in
            and got_attention == {attention}
            and blocks_in_loss(cfg.B, cfg.multiscale) == loss_blocks
        )
        if not ok:
            bad.append(variant)
    verdict(9, not bad, f"variants full, i-v structurally as expected; mismatches: {bad or 'none'}")


def test_criterion_10_determinism_and_persistence(tmp_path, verdict):
    cfg_data = DatasetConfig(n_train=4, n_valid=1, n_test=1, duration=0.25, seed=10)
    gen_dataset(cfg_data, tmp_path / "a")
    gen_dataset(cfg_data, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    data_same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    cfg = ModelConfig.tiny()
    items = scene_items([make_scene(random_scene_spec(s, 0.25, 2)) for s in range(3)])
    train_cfg = TrainConfig(batch_size=2, epochs=1, steps_per_epoch=4, lr=1e-3, validate=False)
    runs = [fit(cfg, items, train_cfg, seed=10) for _ in range(2)]
    curves_same = [r["loss"] for r in runs[0].log] == [r["loss"] for r in runs[1].log]

    for k, run in enumerate(runs):
        write_wav(tmp_path / f"sep{k}.wav", separate(items[0][0], run.params, cfg)[0])
    wavs_same = (tmp_path / "sep0.wav").read_bytes() == (tmp_path / "sep1.wav").read_bytes()

    save_checkpoint(runs[0].params, cfg, runs[0].state, tmp_path / "c1.sgrn", extra={"seed": 10})
    params, cfg2, state, extra = load_checkpoint(tmp_path / "c1.sgrn", expected=cfg)
    save_checkpoint(params, cfg2, state, tmp_path / "c2.sgrn", extra=extra)
    ckpt_same = (tmp_path / "c1.sgrn").read_bytes() == (tmp_path / "c2.sgrn").read_bytes()

    ok = len(files) > 6 and data_same and curves_same and wavs_same and ckpt_same
    verdict(
        10,
        ok,
        f"datasets={data_same} ({len(files)} files), loss curves={curves_same}, wavs={wavs_same}, checkpoint={ckpt_same}",
    )
