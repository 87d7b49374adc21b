import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import hilbert

from sagrnn.cues import (
    UndefinedCueError,
    broadband_ild,
    cue_errors,
    cue_report,
    frame_cues,
    gammatone_bank,
    histogram_mode,
    itd_to_azimuth,
    qualified,
    sep_metrics,
    si_snr_np,
    snr_np,
    utterance_ild,
    utterance_itd,
)
from sagrnn.sim import BinauralSignal, spatialize, synth_speech_like, woodworth_itd


@pytest.fixture(scope="module")
def bank():
    return gammatone_bank()


@pytest.fixture(scope="module")
def speech():
    return synth_speech_like(21, 1.0)


def delayed(x, n):
    return np.concatenate([np.zeros(n), x[: x.size - n]])


# ---------------------------------------------------------------------------
# filterbank


def test_bank_layout(bank):
    assert bank.centers.size == 32
    assert np.all(np.diff(bank.centers) > 0)
    for ch, target in zip(bank.ild_channels, (2070.0, 3080.0, 3750.0)):
        assert abs(bank.centers[ch] - target) / target < 0.03
    assert np.all(bank.centers[bank.itd_channels] <= 1500.0)


@pytest.mark.parametrize("ch", [3, 12, 20, 27])
def test_tone_peaks_in_its_channel(bank, ch):
    t = np.arange(8000) / 8000
    out = bank(np.sin(2 * np.pi * bank.centers[ch] * t))
    assert int(np.argmax(np.sqrt(np.mean(out**2, axis=1)))) == ch


def test_bank_zero_and_linearity(bank, rng):
    assert not bank(np.zeros(300)).any()
    x, y = rng.standard_normal(500), rng.standard_normal(500)
    lhs = bank(2.5 * x - 0.7 * y)
    np.testing.assert_allclose(lhs, 2.5 * bank(x) - 0.7 * bank(y), atol=1e-10)


def test_bank_delay_compensation_aligns_impulse(bank):
    imp = np.zeros(1000)
    imp[200] = 1.0
    env_peaks = np.argmax(np.abs(hilbert(bank(imp), axis=1)), axis=1)
    # every channel's compensated envelope peaks within a few samples of the impulse
    assert np.all(np.abs(env_peaks - 200) <= 3)


# ---------------------------------------------------------------------------
# unit-level cues


def test_four_sample_delay_is_500_us(speech, bank):
    sig = BinauralSignal(speech, delayed(speech, 4))
    cues = frame_cues(sig)
    mask = qualified(cues, bank.itd_channels)
    assert mask.sum() > 100
    assert np.all(np.abs(cues.itd_us[mask] - 500.0) <= 15.0)
    assert utterance_itd(sig, cues) == pytest.approx(500.0, abs=15.0)


def test_boundary_peaks_are_not_itd_estimates(speech, bank):
    # 1.5 ms exceeds the +-1 ms search window, so many peaks sit on its edge
    cues = frame_cues(BinauralSignal(speech, delayed(speech, 12)))
    edge = cues.valid & ~cues.itd_ok
    assert edge[:, bank.itd_channels].sum() > 50
    assert np.all(np.abs(cues.itd_us[cues.itd_ok]) <= 937.5 + 1e-9)
    assert np.all(np.abs(cues.itd_us[edge]) == 1000.0)


def test_half_amplitude_gives_six_db(speech, bank):
    sig = BinauralSignal(speech, 0.5 * speech)
    cues = frame_cues(sig)
    assert np.allclose(cues.ild_db[cues.valid], 10 * math.log10(4), atol=1e-9)
    for ch in bank.ild_channels:
        assert utterance_ild(sig, ch, cues) == pytest.approx(6.02, abs=0.5)
    assert broadband_ild(sig) == pytest.approx(6.0206, abs=1e-4)


def test_symmetric_input_has_zero_cues(speech, bank):
    sig = BinauralSignal(speech, speech)
    assert utterance_itd(sig) == pytest.approx(0.0, abs=2.0)
    for ch in bank.ild_channels:
        assert utterance_ild(sig, ch) == pytest.approx(0.0, abs=0.5)


def test_ear_swap_negates_cues(speech, bank):
    sig = spatialize(speech, 40)
    a, b = frame_cues(sig), frame_cues(sig.swapped())
    m = a.valid & b.valid
    np.testing.assert_allclose(a.ild_db[m], -b.ild_db[m], atol=1e-9)
    assert utterance_itd(sig.swapped()) == pytest.approx(-utterance_itd(sig), abs=15.0)


@settings(max_examples=8)
@given(st.floats(0.05, 20))
def test_common_scale_changes_no_cue(speech, alpha):
    sig = spatialize(speech[:4000], -25)
    a, b = cue_report(sig), cue_report(BinauralSignal(alpha * sig.left, alpha * sig.right))
    assert a.itd_us == b.itd_us
    assert a.ild_db == pytest.approx(b.ild_db, abs=1e-9)
    np.testing.assert_allclose(a.azimuth_deg, b.azimuth_deg, atol=1e-9)


def test_silence_is_undefined():
    sig = BinauralSignal(np.zeros(2000), np.zeros(2000))
    with pytest.raises(UndefinedCueError):
        utterance_itd(sig)
    with pytest.raises(UndefinedCueError):
        utterance_ild(sig, gammatone_bank().ild_channels[0])


def test_ild_rejects_non_designated_channel(speech):
    with pytest.raises(ValueError):
        utterance_ild(BinauralSignal(speech, speech), 0)


def test_histogram_mode_of_constant_values():
    assert histogram_mode(np.full(50, 123.4), 500, (-1000, 1000)) == pytest.approx(123.4, abs=2.0)
    assert histogram_mode(np.full(9, -3.3), 40, (-20, 20)) == pytest.approx(-3.3, abs=0.5)


def test_itd_lookup_clamps_and_inverts():
    assert itd_to_azimuth(5000.0) == 90.0 and itd_to_azimuth(-5000.0) == -90.0
    assert itd_to_azimuth(woodworth_itd(37) * 1e6) == pytest.approx(37.0, abs=0.01)


def test_sixty_degree_shadow_orders_ild_channels(bank):
    sig = spatialize(synth_speech_like(8, 1.0), 60)
    lo, _, hi = bank.ild_channels
    assert utterance_ild(sig, hi) >= utterance_ild(sig, lo)


# ---------------------------------------------------------------------------
# closed loop with the simulator


@pytest.mark.parametrize("theta", [-60, -30, 0, 30, 60])
def test_closed_loop_recovers_head_model(theta):
    sig = spatialize(synth_speech_like(100 + theta, 1.0), theta)
    rep = cue_report(sig)
    want_itd = woodworth_itd(theta) * 1e6
    assert abs(rep.itd_us - want_itd) <= 30.0
    assert abs(np.mean(rep.azimuth_deg) - theta) <= 5.0
    assert abs(broadband_ild(sig) - 10 * math.sin(math.radians(theta))) <= 1.0


# ---------------------------------------------------------------------------
# error summaries and separation metrics


def test_cue_errors_identity_and_common_scale(speech):
    ref = spatialize(speech, 20)
    for est in (ref, ref.scaled(0.3)):
        err = cue_errors(est, ref)
        assert err["delta_itd_us"] == 0.0
        assert err["delta_azimuth_deg"] == pytest.approx(0.0, abs=1e-9)
        assert err["delta_ild_db"] == pytest.approx([0.0, 0.0, 0.0], abs=1e-9)


def test_cue_errors_one_ear_doubled(speech):
    ref = spatialize(speech, 0)
    err = cue_errors(ref.scaled(2.0, 1.0), ref)
    assert err["delta_ild_db"] == pytest.approx([6.02] * 3, abs=0.5)
    assert err["delta_itd_us"] == pytest.approx(0.0, abs=4.0)


def test_cue_errors_length_mismatch(speech):
    with pytest.raises(ValueError):
        cue_errors(BinauralSignal(speech, speech), BinauralSignal(speech[:-1], speech[:-1]))


def test_sep_metrics_definitions(rng):
    ref = BinauralSignal(rng.standard_normal(400), rng.standard_normal(400))
    mix = ref + BinauralSignal(rng.standard_normal(400), rng.standard_normal(400))
    assert sep_metrics(mix, ref, mix) == {"delta_snr_db": 0.0, "delta_si_snr_db": 0.0}
    perfect = sep_metrics(ref, ref, mix)
    cap = np.mean([10 * math.log10((np.sum(r**2) + 1e-8) / 1e-8) for r in (ref.left, ref.right)])
    base = np.mean([snr_np(m, r) for m, r in ((mix.left, ref.left), (mix.right, ref.right))])
    assert perfect["delta_snr_db"] == pytest.approx(cap - base, abs=1e-9)


def test_sep_metrics_against_formula(rng):
    ref = BinauralSignal(rng.standard_normal(300), rng.standard_normal(300))
    noise = BinauralSignal(rng.standard_normal(300), rng.standard_normal(300))
    mix = ref + noise
    est = ref + noise.scaled(0.1)

    def snr(e, r):
        return 10 * math.log10((sum(v * v for v in r) + 1e-8) / (sum((a - b) ** 2 for a, b in zip(r, e)) + 1e-8))

    want = np.mean([snr(e, r) - snr(m, r) for e, r, m in ((est.left, ref.left, mix.left), (est.right, ref.right, mix.right))])
    assert sep_metrics(est, ref, mix)["delta_snr_db"] == pytest.approx(want, abs=1e-9)
    assert sep_metrics(est, ref, mix)["delta_snr_db"] == pytest.approx(20.0, abs=1.0)


def test_si_snr_np_scale_invariant(rng):
    r, n = rng.standard_normal(200), rng.standard_normal(200)
    assert si_snr_np(3 * (r + 0.2 * n), r) == pytest.approx(si_snr_np(r + 0.2 * n, r), abs=1e-6)
    assert si_snr_np(1e-3 * r, r) == pytest.approx(si_snr_np(r, r), abs=1e-6)
