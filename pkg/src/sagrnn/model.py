"""Encoder, chunking, stacked SA-MULCAT blocks and the shared decoder.

Waveforms may carry leading batch axes: ``[..., T]``.  Embeddings are laid
out ``[..., N, S, R]`` (channels, chunks, frames-per-chunk).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Projection, SaMulcatParams, named_parameters, sa_mulcat
from .tensor import DimensionError, Tensor

MULTISCALE_MODES = ("all", "last3", "last")
MODES = ("SISO", "MIMO")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    P: int = 8
    N: int = 128
    R: int = 126
    H: int = 128
    D: int = 64
    B: int = 6
    C: int = 2
    dense_connectivity: bool = True
    self_attention: bool = True
    multiscale: str = "all"
    mode: str = "MIMO"

    def __post_init__(self):
        if self.P < 2 or self.P % 2:
            raise ConfigError(f"P must be even and >= 2, got {self.P}")
        if self.R < 2 or self.R % 2:
            raise ConfigError(f"R must be even and >= 2, got {self.R}")
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.C < 2:
            raise ConfigError("C must be >= 2")
        for name in ("N", "H", "D"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.multiscale not in MULTISCALE_MODES:
            raise ConfigError(f"multiscale must be one of {MULTISCALE_MODES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(P=8, N=16, R=14, H=8, D=8, B=2, C=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def ablation(cls, variant: str, **overrides) -> "ModelConfig":
        """Ablation variants: 'full', 'i', 'ii', 'iii', 'iv', 'v'."""
        toggles = {
            "full": {},
            "i": {"multiscale": "last3"},
            "ii": {"multiscale": "last"},
            "iii": {"dense_connectivity": False},
            "iv": {"self_attention": False},
            "v": {"dense_connectivity": False, "self_attention": False},
        }
        if variant not in toggles:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        return cls(**{**overrides, **toggles[variant]})

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Decoder:
    slopes: Tensor  # [N]
    proj: Projection  # [C*N, N]
    basis: Tensor  # [P, N]


@dataclass
class SagrnnParams:
    encoder: Tensor  # [N, P] (reference encoder in MIMO)
    blocks: list
    decoder: Decoder
    encoder_nonref: Optional[Tensor] = None
    fusion: Optional[Projection] = None  # [N, 2N]

    def named(self) -> dict[str, Tensor]:
        return dict(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> SagrnnParams:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c = config
    enc = T.parameter(rng.uniform(-1, 1, (c.N, c.P)) / np.sqrt(c.P))
    enc_nonref = fusion = None
    if c.mode == "MIMO":
        enc_nonref = T.parameter(rng.uniform(-1, 1, (c.N, c.P)) / np.sqrt(c.P))
        fusion = Projection.init(rng, c.N, 2 * c.N)
    blocks = [
        SaMulcatParams.init(rng, b, c.N, c.H, c.D, c.dense_connectivity, c.self_attention)
        for b in range(1, c.B + 1)
    ]
    decoder = Decoder(
        slopes=T.parameter(np.full(c.N, 0.25)),
        proj=Projection.init(rng, c.C * c.N, c.N, bias=False),
        basis=T.parameter(rng.uniform(-1, 1, (c.P, c.N)) / np.sqrt(c.N)),
    )
    return SagrnnParams(enc, blocks, decoder, enc_nonref, fusion)


def check_params(params: SagrnnParams, config: ModelConfig) -> None:
    c = config
    if params.encoder.shape != (c.N, c.P):
        raise ConfigError(f"encoder shape {params.encoder.shape} does not match N={c.N}, P={c.P}")
    if len(params.blocks) != c.B:
        raise ConfigError(f"{len(params.blocks)} blocks in params, config says B={c.B}")
    if (params.fusion is None) != (c.mode == "SISO"):
        raise ConfigError(f"parameter layout does not match mode {c.mode}")
    if params.decoder.proj.w.shape != (c.C * c.N, c.N):
        raise ConfigError("decoder projection does not match C and N")


# ---------------------------------------------------------------------------
# plumbing


def padded_length(length: int, size: int, hop: int) -> int:
    """Smallest L' >= max(length, size) with (L' - size) divisible by hop."""
    if length <= size:
        return size
    return size + -(-(length - size) // hop) * hop


def encode(wave, kernels) -> Tensor:
    """``[..., T] -> [..., N, L]``: tail-pad, strided conv at hop P/2, ReLU."""
    wave = T.as_tensor(wave)
    n_samples = wave.shape[-1]
    if n_samples == 0:
        raise DimensionError("encode: empty input")
    P = kernels.shape[1]
    hop = P // 2
    total = padded_length(n_samples, P, hop)
    if total > n_samples:
        wave = T.pad(wave, axis=-1, after=total - n_samples)
    return T.relu(T.conv1d(wave, kernels, stride=hop))


def num_frames(n_samples: int, P: int) -> int:
    return (padded_length(n_samples, P, P // 2) - P) // (P // 2) + 1


def chunk(U, R: int) -> Tensor:
    """``[..., L] -> [..., S, R]`` overlapped chunks at hop R/2 (tail zero-padded)."""
    U = T.as_tensor(U)
    if R % 2:
        raise DimensionError("chunk size R must be even")
    L = U.shape[-1]
    total = padded_length(L, R, R // 2)
    if total > L:
        U = T.pad(U, axis=-1, after=total - L)
    return T.frame(U, R, R // 2)


def merge_chunks(W, length: int | None = None) -> Tensor:
    """``[..., S, R] -> [..., L]``: overlap-add at hop R/2, divide by overlap count."""
    W = T.as_tensor(W)
    R = W.shape[-1]
    return T.overlap_add(W, hop=R // 2, length=length, normalize=True)


def decode_block(emb, decoder: Decoder, n_samples: int, n_frames: int) -> Tensor:
    """``[..., N, S, R] -> [..., C, T]`` waveform estimates for every speaker."""
    emb = T.as_tensor(emb)
    N = emb.shape[-3]
    C = decoder.proj.w.shape[0] // N
    P = decoder.basis.shape[0]
    x = T.prelu(emb, decoder.slopes, axis=-3)
    x = decoder.proj(x, axis=-3)  # [..., C*N, S, R]
    lead = x.shape[:-3]
    x = x.reshape(lead + (C, N) + x.shape[-2:])
    frames = merge_chunks(x, length=n_frames)  # [..., C, N, L]
    frames = T.swap_last(frames)  # [..., C, L, N]
    samples = T.linear(frames, decoder.basis)  # [..., C, L, P]
    return T.overlap_add(samples, hop=P // 2, length=n_samples, normalize=True)


def _blocks_forward(U, params: SagrnnParams, config: ModelConfig, n_samples: int) -> Tensor:
    n_frames = U.shape[-1]
    emb0 = chunk(U, config.R)  # [..., N, S, R]
    outputs = [emb0]
    estimates = []
    for p in params.blocks:
        inputs = outputs if config.dense_connectivity else outputs[-1:]
        out = sa_mulcat(inputs, p)
        outputs.append(out)
        estimates.append(decode_block(out, params.decoder, n_samples, n_frames))
    return T.stack(estimates, axis=-3)  # [..., B, C, T]


def block_fan_in(config: ModelConfig) -> list[int]:
    """Number of embeddings each block consumes (introspection for ablations)."""
    return [b if config.dense_connectivity else 1 for b in range(1, config.B + 1)]


def siso_forward(wave, params: SagrnnParams, config: ModelConfig) -> Tensor:
    """``[..., T] -> [..., B, C, T]`` estimates after every block."""
    if config.mode != "SISO":
        raise ConfigError("siso_forward requires mode SISO")
    check_params(params, config)
    wave = T.as_tensor(wave)
    U = encode(wave, params.encoder)
    return _blocks_forward(U, params, config, wave.shape[-1])


def miso_forward(ref_wave, nonref_wave, params: SagrnnParams, config: ModelConfig) -> Tensor:
    """Reference-ear estimates ``[..., B, C, T]`` from both ears."""
    if params.fusion is None or params.encoder_nonref is None:
        raise ConfigError("miso_forward needs MIMO parameters (two encoders and fusion)")
    ref_wave, nonref_wave = T.as_tensor(ref_wave), T.as_tensor(nonref_wave)
    if ref_wave.shape != nonref_wave.shape:
        raise DimensionError(f"ear lengths differ: {ref_wave.shape} vs {nonref_wave.shape}")
    U_ref = encode(ref_wave, params.encoder)
    U_non = encode(nonref_wave, params.encoder_nonref)
    U = params.fusion(T.concat([U_ref, U_non], axis=-2), axis=-2)
    return _blocks_forward(U, params, config, ref_wave.shape[-1])


def mimo_forward(left, right, params: SagrnnParams, config: ModelConfig) -> Tensor:
    """``[..., B, C, 2, T]``: each ear takes its turn as the reference."""
    if config.mode != "MIMO":
        raise ConfigError("mimo_forward requires mode MIMO")
    check_params(params, config)
    left, right = T.as_tensor(left), T.as_tensor(right)
    if left.shape != right.shape:
        raise DimensionError(f"ear lengths differ: {left.shape} vs {right.shape}")
    refs = T.stack([left, right], axis=-2)  # [..., 2, T]
    nonrefs = T.stack([right, left], axis=-2)
    est = miso_forward(refs, nonrefs, params, config)  # [..., 2, B, C, T]
    nd = est.ndim
    lead = tuple(range(nd - 4))
    return T.permute(est, lead + (nd - 3, nd - 2, nd - 4, nd - 1))


def forward(mixture, params: SagrnnParams, config: ModelConfig) -> Tensor:
    """Dispatch on mode; ``mixture`` is ``[..., 2, T]`` (MIMO) or ``[..., T]`` (SISO).

    Returns ``[..., B, C, E, T]`` with E=2 for MIMO and E=1 for SISO.
    """
    mixture = T.as_tensor(mixture)
    if config.mode == "MIMO":
        if mixture.ndim < 2 or mixture.shape[-2] != 2:
            raise DimensionError(f"MIMO input must be [..., 2, T], got {mixture.shape}")
        return mimo_forward(mixture[..., 0, :], mixture[..., 1, :], params, config)
    est = siso_forward(mixture, params, config)
    return est.reshape(est.shape[:-1] + (1, est.shape[-1]))


def separate(mixture: np.ndarray, params: SagrnnParams, config: ModelConfig) -> np.ndarray:
    """Binaural speaker estimates ``[C, 2, T]`` from a ``[2, T]`` mixture (last block).

    SISO models run on each ear independently, so their speaker order may
    differ between ears.
    """
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.ndim != 2 or mixture.shape[0] != 2:
        raise DimensionError(f"expected a [2, T] mixture, got {mixture.shape}")
    with T.no_grad():
        est = forward(mixture, params, config).data
    if config.mode == "MIMO":
        return est[-1]  # [C, 2, T]
    return np.moveaxis(est[:, -1, :, 0, :], 0, 1)  # [2, C, T] -> [C, 2, T]
