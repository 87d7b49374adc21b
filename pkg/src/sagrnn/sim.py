"""Synthetic binaural scenes: spherical-head HRIRs, pseudo-speech, spatial noise.

Azimuth convention: degrees in [-90, 90]; positive azimuths are on the
listener's left, so the right ear lags (positive ITD) and the left ear is
louder (positive ILD, left over right).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

SAMPLE_RATE = 8000
HEAD_RADIUS = 0.0875  # m
SPEED_OF_SOUND = 343.0  # m/s
ILD_SLOPE_DB = 10.0
HRIR_TAPS = 33
SHADOW_CUTOFF_FRONT = 4000.0
SHADOW_CUTOFF_SIDE = 1500.0
MAX_NOISES = 10
SNR_RANGE = (-10.0, 10.0)


class SceneError(ValueError):
    pass


@dataclass
class BinauralSignal:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise ValueError(f"ear signals must be equal-length 1-D arrays: {self.left.shape} vs {self.right.shape}")

    def __len__(self) -> int:
        return self.left.size

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def stacked(self) -> np.ndarray:
        return np.stack([self.left, self.right])

    @classmethod
    def from_array(cls, arr: np.ndarray, sample_rate: int = SAMPLE_RATE) -> "BinauralSignal":
        arr = np.asarray(arr)
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise ValueError(f"expected [2, T] array, got {arr.shape}")
        return cls(arr[0], arr[1], sample_rate)

    def swapped(self) -> "BinauralSignal":
        return BinauralSignal(self.right, self.left, self.sample_rate)

    def scaled(self, gain_left: float, gain_right: Optional[float] = None) -> "BinauralSignal":
        gain_right = gain_left if gain_right is None else gain_right
        return BinauralSignal(self.left * gain_left, self.right * gain_right, self.sample_rate)

    def __add__(self, other: "BinauralSignal") -> "BinauralSignal":
        return BinauralSignal(self.left + other.left, self.right + other.right, self.sample_rate)


# ---------------------------------------------------------------------------
# head model


def woodworth_itd(azimuth_deg: float) -> float:
    """Spherical-head ITD in seconds; positive when the right ear lags."""
    theta = math.radians(abs(azimuth_deg))
    if abs(azimuth_deg) > 90:
        raise ValueError(f"azimuth {azimuth_deg} outside [-90, 90]")
    return math.copysign(HEAD_RADIUS / SPEED_OF_SOUND * (theta + math.sin(theta)), azimuth_deg) if azimuth_deg else 0.0


def model_ild_db(azimuth_deg: float) -> float:
    """Broadband left-over-right level difference of the head model."""
    return ILD_SLOPE_DB * math.sin(math.radians(azimuth_deg))


def shadow_coefficient(azimuth_deg: float, sample_rate: int = SAMPLE_RATE) -> float:
    """Pole of the far-ear one-pole low-pass, ``y[n] = (1 - a) x[n] + a y[n-1]``.

    The cutoff (-3 dB point) falls linearly with |azimuth| from 4 kHz to 1.5 kHz.
    """
    frac = abs(azimuth_deg) / 90.0
    fc = SHADOW_CUTOFF_FRONT + (SHADOW_CUTOFF_SIDE - SHADOW_CUTOFF_FRONT) * frac
    w = 2.0 * math.pi * min(fc, sample_rate / 2.0) / sample_rate
    k = 2.0 - math.cos(w)
    return k - math.sqrt(k * k - 1.0)


def fractional_delay(delay: float, taps: int = HRIR_TAPS) -> np.ndarray:
    """Blackman-windowed sinc delaying by ``delay`` samples (unit DC gain)."""
    n = np.arange(taps, dtype=np.float64)
    x = n - delay
    half = (taps - 1) / 2.0
    u = np.clip(x / half, -1.0, 1.0)  # window follows the shifted peak
    window = 0.42 + 0.5 * np.cos(np.pi * u) + 0.08 * np.cos(2 * np.pi * u)
    h = np.sinc(x) * window
    return h / h.sum()


def synth_hrir(azimuth_deg: float, sample_rate: int = SAMPLE_RATE, taps: int = HRIR_TAPS):
    """Left and right impulse responses, ``taps`` long, nominal delay at the center tap."""
    if abs(azimuth_deg) > 90:
        raise ValueError(f"azimuth {azimuth_deg} outside [-90, 90]")
    center = (taps - 1) / 2.0
    half_itd = woodworth_itd(azimuth_deg) * sample_rate / 2.0
    delays = [center - half_itd, center + half_itd]
    gains = [10 ** (model_ild_db(azimuth_deg) / 40.0), 10 ** (-model_ild_db(azimuth_deg) / 40.0)]
    far = None
    if azimuth_deg > 0:
        far = 1
    elif azimuth_deg < 0:
        far = 0
    a = 0.0
    if far is not None:
        a = shadow_coefficient(azimuth_deg, sample_rate)
        # keep the low-frequency delay of the far ear on the head-model ITD
        delays[far] -= a / (1.0 - a)
    out = []
    for ear in (0, 1):
        h = fractional_delay(delays[ear], taps) * gains[ear]
        if ear == far:
            h = lfilter([1.0 - a], [1.0, -a], h)
        out.append(h)
    return out[0], out[1]


def spatialize(mono: np.ndarray, azimuth_deg: float, sample_rate: int = SAMPLE_RATE) -> BinauralSignal:
    mono = np.asarray(mono, dtype=np.float64)
    h_left, h_right = synth_hrir(azimuth_deg, sample_rate)
    c = (len(h_left) - 1) // 2
    n = mono.size
    left = np.convolve(mono, h_left)[c : c + n]
    right = np.convolve(mono, h_right)[c : c + n]
    return BinauralSignal(left, right, sample_rate)


# ---------------------------------------------------------------------------
# sources


def _smooth_track(rng: np.random.Generator, n: int, step: int, lo: float, hi: float, start: float, jitter: float) -> np.ndarray:
    knots = max(2, n // step + 2)
    vals = start + np.cumsum(rng.normal(0.0, jitter, knots))
    vals = np.clip(vals, lo, hi)
    return np.interp(np.arange(n), np.arange(knots) * step, vals)


def _resonance(f: np.ndarray, center: np.ndarray, bandwidth: float) -> np.ndarray:
    r = f / center
    return 1.0 / np.sqrt((1.0 - r * r) ** 2 + (f * bandwidth / center**2) ** 2)


def synth_speech_like(seed: int, duration: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Deterministic pseudo-speech with unit RMS.

    A harmonic train with a wandering F0 (90-220 Hz) is weighted by three
    drifting formant resonances and amplitude-modulated at a syllabic rate.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    ctrl = int(0.1 * sample_rate)
    f0 = _smooth_track(rng, n, ctrl, 90.0, 220.0, rng.uniform(100.0, 190.0), 8.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    formants = [
        _smooth_track(rng, n, int(0.15 * sample_rate), lo, hi, rng.uniform(lo, hi), (hi - lo) / 8)
        for lo, hi in ((300.0, 850.0), (900.0, 2300.0), (2400.0, 3400.0))
    ]
    n_harm = int((sample_rate / 2 - 100) // 90)
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * f0
        alive = fk < sample_rate / 2 - 50
        if not alive.any():
            break
        amp = sum(
            g * _resonance(fk, fc, bw) for fc, bw, g in zip(formants, (80.0, 120.0, 200.0), (1.0, 0.5, 0.25))
        )
        x += np.where(alive, amp / k, 0.0) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    x /= np.sqrt(np.mean(x * x))
    # breath noise keeps the top octave populated
    x += 0.05 * lfilter([1.0, -0.9], [1.0], rng.standard_normal(n))
    rate = rng.uniform(3.0, 6.0)
    env = 0.5 - 0.5 * np.cos(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    env = 0.03 + env**1.5
    x *= env
    return x / np.sqrt(np.mean(x * x))


def synth_noise(seed: int, duration: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Pink-ish (one-pole low-passed) Gaussian noise with unit RMS."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    x = lfilter([1.0], [1.0, -0.7], rng.standard_normal(n))
    return x / np.sqrt(np.mean(x * x))


def scale_to_snr(noise: BinauralSignal, speech_left: np.ndarray, snr_db: float) -> BinauralSignal:
    """Scale both noise ears by one factor so the left-ear SNR equals ``snr_db``."""
    e_noise = float(np.sum(noise.left**2))
    if e_noise <= 0:
        raise SceneError("noise is silent in the left ear")
    e_speech = float(np.sum(np.asarray(speech_left) ** 2))
    gain = math.sqrt(e_speech / (e_noise * 10 ** (snr_db / 10.0)))
    return noise.scaled(gain)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneSpec:
    speaker_azimuths: tuple
    duration: float = 1.0
    noise_count: int = 0
    noise_azimuths: tuple = ()
    snr_db: Optional[float] = None
    seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def validate(self) -> None:
        all_az = list(self.speaker_azimuths) + list(self.noise_azimuths)
        if len(self.speaker_azimuths) < 1:
            raise SceneError("at least one speaker is required")
        for az in all_az:
            if abs(az) > 90:
                raise SceneError(f"azimuth {az} outside [-90, 90]")
        if len(set(float(a) for a in all_az)) != len(all_az):
            raise SceneError(f"source directions must be distinct: {all_az}")
        if not 0 <= self.noise_count <= MAX_NOISES:
            raise SceneError(f"noise_count must be in [0, {MAX_NOISES}]")
        if len(self.noise_azimuths) != self.noise_count:
            raise SceneError("noise_azimuths must list one direction per noise source")
        if self.noise_count:
            if self.snr_db is None or not SNR_RANGE[0] <= self.snr_db <= SNR_RANGE[1]:
                raise SceneError(f"snr_db must lie in {SNR_RANGE} for noisy scenes")
        if self.duration <= 0:
            raise SceneError("duration must be positive")


@dataclass
class SceneTruth:
    spec: SceneSpec
    mixture: BinauralSignal
    references: list  # one BinauralSignal per speaker
    noise: Optional[BinauralSignal]
    itd_us: list
    ild_db: list
    scene_id: str = ""


def _source_seed(seed: int, kind: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, kind, index]).generate_state(1)[0])


def make_scene(spec: SceneSpec, scene_id: str = "") -> SceneTruth:
    spec.validate()
    refs = [
        spatialize(synth_speech_like(_source_seed(spec.seed, 0, i), spec.duration, spec.sample_rate), az, spec.sample_rate)
        for i, az in enumerate(spec.speaker_azimuths)
    ]
    speech = refs[0]
    for r in refs[1:]:
        speech = speech + r
    noise = None
    mixture = speech
    if spec.noise_count:
        parts = [
            spatialize(synth_noise(_source_seed(spec.seed, 1, i), spec.duration, spec.sample_rate), az, spec.sample_rate)
            for i, az in enumerate(spec.noise_azimuths)
        ]
        noise = parts[0]
        for p in parts[1:]:
            noise = noise + p
        noise = scale_to_snr(noise, speech.left, spec.snr_db)
        mixture = speech + noise
    return SceneTruth(
        spec=spec,
        mixture=mixture,
        references=refs,
        noise=noise,
        itd_us=[woodworth_itd(az) * 1e6 for az in spec.speaker_azimuths],
        ild_db=[model_ild_db(az) for az in spec.speaker_azimuths],
        scene_id=scene_id,
    )


def random_scene_spec(
    seed: int,
    duration: float = 1.0,
    n_speakers: int = 2,
    noisy: bool = False,
    min_separation: float = 20.0,
    azimuth_limit: float = 80.0,
    sample_rate: int = SAMPLE_RATE,
) -> SceneSpec:
    """Draw distinct source directions (5-degree grid), noise count and SNR from ``seed``."""
    rng = np.random.default_rng(seed)
    grid = np.arange(-azimuth_limit, azimuth_limit + 1e-9, 5.0)
    noise_count = int(rng.integers(1, MAX_NOISES + 1)) if noisy else 0
    for _ in range(1000):
        speakers = rng.choice(grid, size=n_speakers, replace=False)
        gaps = np.diff(np.sort(speakers))
        if gaps.size == 0 or gaps.min() >= min_separation:
            break
    else:
        raise SceneError("could not place speakers with the requested separation")
    free = np.setdiff1d(grid, speakers)
    noise_az = rng.choice(free, size=noise_count, replace=False) if noise_count else np.array([])
    snr = float(np.round(rng.uniform(*SNR_RANGE), 2)) if noisy else None
    return SceneSpec(
        speaker_azimuths=tuple(float(a) for a in speakers),
        duration=duration,
        noise_count=noise_count,
        noise_azimuths=tuple(float(a) for a in noise_az),
        snr_db=snr,
        seed=seed,
        sample_rate=sample_rate,
    )


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 8
    n_valid: int = 2
    n_test: int = 2
    duration: float = 1.0
    n_speakers: int = 2
    noisy: bool = False
    min_separation: float = 20.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    scenes: tuple = ()  # explicit scenes appended after the random ones

    def __post_init__(self):
        for n in (self.n_train, self.n_valid, self.n_test):
            if n < 0:
                raise SceneError("scene counts must be >= 0")
        if self.duration <= 0:
            raise SceneError("duration must be positive")
        object.__setattr__(self, "scenes", tuple(dict(s) for s in self.scenes))
        for i, _ in enumerate(self.scenes):
            self.explicit_spec(i)[1].validate()

    def explicit_spec(self, index: int) -> tuple[str, SceneSpec]:
        d = dict(self.scenes[index])
        split = d.pop("split", "test")
        if split not in SPLIT_OFFSETS:
            raise SceneError(f"unknown split {split!r}")
        allowed = {"speaker_azimuths", "noise_azimuths", "snr_db", "seed", "duration"}
        unknown = set(d) - allowed
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        noise = tuple(float(a) for a in d.get("noise_azimuths", ()))
        spec = SceneSpec(
            speaker_azimuths=tuple(float(a) for a in d.get("speaker_azimuths", ())),
            duration=float(d.get("duration", self.duration)),
            noise_count=len(noise),
            noise_azimuths=noise,
            snr_db=d.get("snr_db"),
            seed=int(d.get("seed", self.seed * 1_000_000 + 900_000 + index)),
            sample_rate=self.sample_rate,
        )
        return split, spec

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


SPLIT_OFFSETS = {"train": 0, "valid": 300_000, "test": 600_000}


def split_seed(master: int, split: str, index: int) -> int:
    """Scene seeds live in disjoint ranges per split."""
    return master * 1_000_000 + SPLIT_OFFSETS[split] + index


def write_wav(path, signal, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float32 RIFF; ``signal`` is 1-D (mono) or ``[2, T]``."""
    arr = np.asarray(signal, dtype=np.float32)
    wavfile.write(str(path), sample_rate, arr.T if arr.ndim == 2 else arr)


def read_wav(path) -> tuple[int, np.ndarray]:
    """Returns ``(rate, data)`` with data ``[channels, T]`` (or ``[T]`` mono) as float64."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    data = np.asarray(data, dtype=np.float64)
    return rate, data.T if data.ndim == 2 else data


def _jsonable(d: dict) -> dict:
    d = dict(d)
    d["scenes"] = [dict(x) for x in d["scenes"]]
    return d


def _render_scene(task) -> dict:
    out, split, sid, spec = task
    scene = make_scene(spec, sid)
    mix_path = f"{split}/{sid}_mix.wav"
    write_wav(out / mix_path, scene.mixture.stacked(), spec.sample_rate)
    ref_paths = []
    for j, ref in enumerate(scene.references):
        rp = f"{split}/{sid}_s{j}.wav"
        write_wav(out / rp, ref.stacked(), spec.sample_rate)
        ref_paths.append(rp)
    return {
        "id": sid,
        "split": split,
        "paths": {"mixture": mix_path, "references": ref_paths},
        "azimuths_deg": list(spec.speaker_azimuths),
        "noise_azimuths_deg": list(spec.noise_azimuths),
        "noise_count": spec.noise_count,
        "snr_db": spec.snr_db,
        "seed": spec.seed,
        "duration": spec.duration,
        "ground_truth": {"itd_us": scene.itd_us, "ild_db": scene.ild_db},
    }


def gen_dataset(config: DatasetConfig, out_dir, n_jobs: int = 1) -> dict:
    """Render train/valid/test scenes to WAV files and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for split, count in (("train", config.n_train), ("valid", config.n_valid), ("test", config.n_test)):
        for i in range(count):
            seed = split_seed(config.seed, split, i)
            spec = random_scene_spec(
                seed, config.duration, config.n_speakers, config.noisy, config.min_separation, sample_rate=config.sample_rate
            )
            jobs.append((split, f"{split}_{i:05d}", spec))
    for k in range(len(config.scenes)):
        split, spec = config.explicit_spec(k)
        jobs.append((split, f"{split}_x{k:05d}", spec))
    for split in {j[0] for j in jobs}:
        (out / split).mkdir(exist_ok=True)
    tasks = [(out, split, sid, spec) for split, sid, spec in jobs]
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            entries = list(pool.map(_render_scene, tasks))  # map keeps input order
    else:
        entries = [_render_scene(t) for t in tasks]
    logger.info("rendered %d scenes into %s", len(entries), out)
    manifest = {"version": 1, "sample_rate": config.sample_rate, "config": _jsonable(asdict(config)), "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["_root"] = str(path.parent)
    return manifest


def load_items(manifest: dict, split: str) -> list:
    """``(mixture [2, T], references [C, 2, T], entry)`` triples of one split."""
    root = Path(manifest["_root"])
    items = []
    for e in manifest["entries"]:
        if e["split"] != split:
            continue
        _, mix = read_wav(root / e["paths"]["mixture"])
        refs = np.stack([read_wav(root / p)[1] for p in e["paths"]["references"]])
        items.append((mix, refs, e))
    return items


def scene_items(scenes: Sequence[SceneTruth]) -> list:
    """In-memory ``(mixture, references)`` pairs for training without disk I/O."""
    return [(s.mixture.stacked(), np.stack([r.stacked() for r in s.references])) for s in scenes]
