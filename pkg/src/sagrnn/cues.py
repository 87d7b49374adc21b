"""Interaural cue estimation on a gammatone cochleagram, plus separation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .sim import SAMPLE_RATE, BinauralSignal, woodworth_itd

N_CHANNELS = 32
LOW_FREQ = 115.0
HIGH_FREQ = 3700.0
ITD_MAX_FREQ = 1500.0
ILD_TARGETS = (2070.0, 3080.0, 3750.0)
FRAME_SEC = 0.020
HOP_SEC = 0.010
MAX_LAG_SEC = 0.001
ENERGY_FLOOR = 1e-10
QUALIFY_DB = 40.0
ITD_BINS, ITD_RANGE = 500, (-1000.0, 1000.0)
ILD_BINS, ILD_RANGE = 40, (-20.0, 20.0)
GT_TAPS = 1024


class UndefinedCueError(ValueError):
    """No time-frequency unit qualified for the requested cue."""


def erb_number(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_number_inv(e):
    return (10 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f):
    return 24.7 * (0.00437 * np.asarray(f, dtype=np.float64) + 1.0)


@dataclass(frozen=True)
class GammatoneBank:
    centers: np.ndarray
    sample_rate: int
    filters: np.ndarray  # [C, taps], unit gain at each center
    delays: np.ndarray  # per-channel envelope-peak delay (samples)

    @property
    def itd_channels(self) -> np.ndarray:
        return np.flatnonzero(self.centers <= ITD_MAX_FREQ)

    @property
    def ild_channels(self) -> tuple:
        return tuple(int(np.argmin(np.abs(self.centers - f))) for f in ILD_TARGETS)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """``[..., T] -> [..., C, T]`` delay-compensated channel signals."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[-1]
        out = fftconvolve(x[..., None, :], self.filters, axes=-1)
        idx = self.delays[:, None] + np.arange(n)[None, :]
        return np.take_along_axis(out, np.broadcast_to(idx, out.shape[:-1] + (n,)), axis=-1)


@lru_cache(maxsize=4)
def gammatone_bank(sample_rate: int = SAMPLE_RATE, n_channels: int = N_CHANNELS) -> GammatoneBank:
    """4th-order gammatone FIR bank, ERB-spaced centers from 115 Hz to 3.7 kHz."""
    centers = erb_number_inv(np.linspace(erb_number(LOW_FREQ), erb_number(HIGH_FREQ), n_channels))
    t = np.arange(GT_TAPS) / sample_rate
    b = 1.019 * erb_bandwidth(centers)
    filters = (t**3)[None, :] * np.exp(-2 * np.pi * b[:, None] * t[None, :]) * np.cos(2 * np.pi * centers[:, None] * t[None, :])
    resp = np.abs(filters @ np.exp(-2j * np.pi * np.outer(t, centers)))
    filters = filters / np.diag(resp)[:, None]
    delays = np.round(3.0 / (2 * np.pi * b) * sample_rate).astype(int)
    centers.setflags(write=False)
    return GammatoneBank(centers, sample_rate, filters, delays)


def cochleagram(x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return gammatone_bank(sample_rate)(x)


@dataclass
class FrameCues:
    """Per (frame, channel) unit cues.

    ``valid`` marks units above the energy floor.  ``itd_ok`` additionally
    requires the correlation peak to be interior to the lag window; a maximum
    on the boundary only says the true peak lies outside +-1 ms.
    """

    itd_us: np.ndarray
    ild_db: np.ndarray
    energy: np.ndarray
    valid: np.ndarray
    centers: np.ndarray
    itd_ok: np.ndarray


def _frame_starts(n: int, frame: int, hop: int, margin: int) -> np.ndarray:
    """Frames whose cross-correlation window (``margin`` samples each side) lies inside the signal."""
    usable = n - frame - 2 * margin
    if usable < 0:
        return np.zeros(0, dtype=int)
    return margin + np.arange(usable // hop + 1) * hop


def frame_cues(sig: BinauralSignal) -> FrameCues:
    """ITD from the normalized cross-correlation peak, ILD from the energy ratio.

    Positive ITD means the right ear lags; positive ILD means the left ear is
    louder.
    """
    fs = sig.sample_rate
    bank = gammatone_bank(fs)
    gl = bank(sig.left)
    gr = bank(sig.right)
    frame, hop = int(round(FRAME_SEC * fs)), int(round(HOP_SEC * fs))
    max_lag = int(round(MAX_LAG_SEC * fs))
    starts = _frame_starts(len(sig), frame, hop, max_lag)
    F, C = starts.size, gl.shape[0]
    lags = np.arange(-max_lag, max_lag + 1)
    rp = np.pad(gr, ((0, 0), (max_lag, max_lag)))
    fidx = starts[:, None] + np.arange(frame)[None, :]  # [F, frame]
    widx = starts[:, None] + np.arange(frame + 2 * max_lag)[None, :]
    itd = np.zeros((F, C))
    ild = np.zeros((F, C))
    energy = np.zeros((F, C))
    valid = np.zeros((F, C), dtype=bool)
    itd_ok = np.zeros((F, C), dtype=bool)
    for c in range(C):
        L = gl[c][fidx]  # [F, frame]
        W = rp[c][widx]  # [F, frame + 2 lag]
        Rl = np.lib.stride_tricks.sliding_window_view(W, frame, axis=1)  # [F, lags, frame]
        el = np.sum(L * L, axis=1)
        er_lag = np.sum(Rl * Rl, axis=2)
        er = er_lag[:, max_lag]
        cc = np.einsum("fn,fkn->fk", L, Rl) / np.sqrt(np.maximum(el[:, None] * er_lag, 1e-300))
        k = np.argmax(cc, axis=1)
        delta = np.zeros(F)
        inner = (k > 0) & (k < lags.size - 1)
        fi = np.flatnonzero(inner)
        if fi.size:
            ym, y0, yp = cc[fi, k[fi] - 1], cc[fi, k[fi]], cc[fi, k[fi] + 1]
            den = ym - 2 * y0 + yp
            delta[fi] = np.where(den < 0, 0.5 * (ym - yp) / np.where(den < 0, den, -1.0), 0.0)
        itd[:, c] = (lags[k] + delta) * 1e6 / fs
        energy[:, c] = el + er
        ok = (el + er > ENERGY_FLOOR) & (el > 0) & (er > 0)
        valid[:, c] = ok
        itd_ok[:, c] = ok & inner
        ild[ok, c] = 10 * np.log10(el[ok] / er[ok])
    return FrameCues(itd, ild, energy, valid, bank.centers, itd_ok)


def qualified(cues: FrameCues, channels) -> np.ndarray:
    """Units of ``channels`` within 40 dB of the loudest unit among them."""
    channels = np.atleast_1d(channels)
    mask = np.zeros_like(cues.valid)
    sub = cues.valid[:, channels]
    if not sub.any():
        return mask
    e = cues.energy[:, channels]
    top = e[sub].max()
    mask[:, channels] = sub & (e >= top * 10 ** (-QUALIFY_DB / 10))
    return mask


def histogram_mode(values: np.ndarray, bins: int, value_range: tuple) -> float:
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    i = int(np.argmax(counts))
    return 0.5 * (edges[i] + edges[i + 1])


def utterance_itd(sig: BinauralSignal, cues: FrameCues | None = None) -> float:
    """Mode (500 bins over +-1 ms) of low-frequency unit ITDs, in microseconds."""
    cues = cues or frame_cues(sig)
    bank = gammatone_bank(sig.sample_rate)
    mask = qualified(cues, bank.itd_channels) & cues.itd_ok
    if not mask.any():
        raise UndefinedCueError("no qualifying low-frequency units for ITD")
    return histogram_mode(cues.itd_us[mask], ITD_BINS, ITD_RANGE)


def utterance_ild(sig: BinauralSignal, channel: int, cues: FrameCues | None = None) -> float:
    """Mode (40 bins over +-20 dB) of one channel's unit ILDs."""
    bank = gammatone_bank(sig.sample_rate)
    if channel not in bank.ild_channels:
        raise ValueError(f"channel {channel} is not one of the designated ILD channels {bank.ild_channels}")
    cues = cues or frame_cues(sig)
    mask = qualified(cues, [channel])
    if not mask.any():
        raise UndefinedCueError(f"no qualifying units in channel {channel}")
    return histogram_mode(cues.ild_db[mask], ILD_BINS, ILD_RANGE)


@lru_cache(maxsize=1)
def _itd_table():
    az = np.linspace(-90.0, 90.0, 1801)
    itd = np.array([woodworth_itd(a) * 1e6 for a in az])
    return itd, az


def itd_to_azimuth(itd_us):
    """Invert the head model by monotone table lookup, clamped to [-90, 90]."""
    itd, az = _itd_table()
    return np.interp(itd_us, itd, az)


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cw = np.cumsum(w)
    return float(v[np.searchsorted(cw, 0.5 * cw[-1])])


def azimuth_frames(sig: BinauralSignal, cues: FrameCues | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(frame_indices, azimuth_deg)`` for frames with qualifying low-frequency units."""
    cues = cues or frame_cues(sig)
    bank = gammatone_bank(sig.sample_rate)
    mask = qualified(cues, bank.itd_channels) & cues.itd_ok
    frames, az = [], []
    for f in np.flatnonzero(mask.any(axis=1)):
        m = mask[f]
        frames.append(f)
        az.append(weighted_median(cues.itd_us[f, m], cues.energy[f, m]))
    frames = np.array(frames, dtype=int)
    return frames, itd_to_azimuth(np.array(az, dtype=np.float64))


def broadband_ild(sig: BinauralSignal) -> float:
    return 10 * math.log10(np.sum(sig.left**2) / np.sum(sig.right**2))


@dataclass
class CueReport:
    itd_us: float
    ild_db: tuple  # one per designated channel
    azimuth_frames: np.ndarray
    azimuth_deg: np.ndarray

    def to_dict(self) -> dict:
        return {
            "itd_us": self.itd_us,
            "ild_db": list(self.ild_db),
            "mean_azimuth_deg": float(np.mean(self.azimuth_deg)) if self.azimuth_deg.size else None,
        }


def cue_report(sig: BinauralSignal) -> CueReport:
    cues = frame_cues(sig)
    bank = gammatone_bank(sig.sample_rate)
    itd = utterance_itd(sig, cues)
    ild = tuple(utterance_ild(sig, ch, cues) for ch in bank.ild_channels)
    frames, az = azimuth_frames(sig, cues)
    return CueReport(itd, ild, frames, az)


def cue_errors(est: BinauralSignal, ref: BinauralSignal) -> dict:
    """Absolute ITD/ILD differences and mean frame-level azimuth error."""
    if len(est) != len(ref):
        raise ValueError(f"length mismatch: {len(est)} vs {len(ref)}")
    a, b = cue_report(est), cue_report(ref)
    common, ia, ib = np.intersect1d(a.azimuth_frames, b.azimuth_frames, return_indices=True)
    if common.size == 0:
        raise UndefinedCueError("no frames with azimuth estimates in both signals")
    return {
        "delta_itd_us": abs(a.itd_us - b.itd_us),
        "delta_ild_db": [abs(x - y) for x, y in zip(a.ild_db, b.ild_db)],
        "delta_azimuth_deg": float(np.mean(np.abs(a.azimuth_deg[ia] - b.azimuth_deg[ib]))),
    }


# ---------------------------------------------------------------------------
# separation metrics (plain numpy; independent of the training objective code)


def snr_np(est, ref, eps: float = 1e-8) -> float:
    est, ref = np.asarray(est, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    return float(10 * np.log10((np.sum(ref**2) + eps) / (np.sum((ref - est) ** 2) + eps)))


def si_snr_np(est, ref, eps: float = 1e-8) -> float:
    est, ref = np.asarray(est, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    target = (np.dot(est, ref) / (np.dot(ref, ref) + eps)) * ref
    noise = est - target
    inv = 1.0 / (np.dot(est, est) + eps * eps)
    return float(10 * np.log10((np.dot(target, target) * inv + eps) / (np.dot(noise, noise) * inv + eps)))


def sep_metrics(est: BinauralSignal, ref: BinauralSignal, mixture: BinauralSignal, eps: float = 1e-8) -> dict:
    """SNR and SI-SNR improvements over the mixture, averaged over ears."""
    if not len(est) == len(ref) == len(mixture):
        raise ValueError("length mismatch between estimate, reference and mixture")
    d_snr, d_si = [], []
    for e, r, m in ((est.left, ref.left, mixture.left), (est.right, ref.right, mixture.right)):
        d_snr.append(snr_np(e, r, eps) - snr_np(m, r, eps))
        d_si.append(si_snr_np(e, r, eps) - si_snr_np(m, r, eps))
    return {"delta_snr_db": float(np.mean(d_snr)), "delta_si_snr_db": float(np.mean(d_si))}
