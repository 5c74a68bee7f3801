"""Quantized phase shifts, bit mapping, the AWGN feedback channel and the IRS link."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2 * math.pi


@dataclass(frozen=True)
class PhaseSample:
    index: int
    bits: tuple[int, ...]
    radians: float

    @property
    def K(self) -> int:
        return len(self.bits)


def index_to_bits(index, K: int) -> np.ndarray:
    """MSB-first K-bit expansion; works elementwise on integer arrays."""
    index = np.asarray(index, dtype=np.int64)
    shifts = np.arange(K - 1, -1, -1, dtype=np.int64)
    return ((index[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_index(bits) -> np.ndarray:
    bits = np.asarray(bits)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bit vectors may only contain 0 and 1")
    K = bits.shape[-1]
    weights = 1 << np.arange(K - 1, -1, -1, dtype=np.int64)
    return (bits.astype(np.int64) * weights).sum(axis=-1)


def quantize_phase(theta: float, K: int) -> PhaseSample:
    """Snap ``theta`` to the nearest of the 2^K uniform grid points (ties round up)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if not math.isfinite(theta):
        raise ValueError(f"phase must be finite, got {theta}")
    levels = 1 << K
    step = TWO_PI / levels
    index = math.floor((theta % TWO_PI) / step + 0.5) % levels
    return PhaseSample(index, tuple(int(b) for b in index_to_bits(index, K)), index * step)


def phase_from_bits(bits) -> float:
    bits = np.asarray(bits)
    index = int(bits_to_index(bits))
    return index * TWO_PI / (1 << bits.shape[-1])


def generate_indices(count: int, K: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 1 << K, size=count, dtype=np.int64)


def generate_dataset(count: int, K: int, seed: int) -> list[PhaseSample]:
    """i.i.d. uniform quantized phases; see ``generate_bits`` for the array form."""
    idx = generate_indices(count, K, seed)
    step = TWO_PI / (1 << K)
    bits = index_to_bits(idx, K)
    return [PhaseSample(int(i), tuple(int(b) for b in row), int(i) * step) for i, row in zip(idx, bits)]


def generate_bits(count: int, K: int, seed: int, dtype=np.float32) -> np.ndarray:
    """Same draws as ``generate_dataset`` as a ``(count, 1, K)`` network input."""
    return index_to_bits(generate_indices(count, K, seed), K).astype(dtype)[:, None, :]


@dataclass(frozen=True)
class ChannelConfig:
    g: float = 1.0
    snr_db: float = 10.0

    def noise_variance(self, code_power: float) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return code_power * 10.0 ** (-self.snr_db / 10.0)


def code_power(code: np.ndarray) -> float:
    return float(np.mean(np.square(code, dtype=np.float64)))


def awgn_channel(code: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Real feedback channel ``g * code + n`` with SNR referenced to the batch code power.

    ``rng=None`` or ``snr_db=+inf`` gives the noiseless channel.
    """
    return awgn_forward(code, cfg, rng)[0]


class ChannelTape(NamedTuple):
    code: np.ndarray
    unit_noise: np.ndarray | None
    sigma: float


def awgn_forward(code: np.ndarray, cfg: ChannelConfig,
                 rng: np.random.Generator | None) -> tuple[np.ndarray, ChannelTape]:
    """``awgn_channel`` that also returns what ``awgn_backward`` needs.

    The noise is ``sigma(code) * z`` with ``z`` standard normal, so its power
    follows the code power and is differentiated as such.
    """
    code = np.asarray(code)
    if not np.isfinite(code).all():
        raise ValueError("code contains non-finite values")
    out = cfg.g * code
    if rng is None or (math.isinf(cfg.snr_db) and cfg.snr_db > 0):
        return out, ChannelTape(code, None, 0.0)
    power = code_power(code)
    if power <= 0:
        warnings.warn("all-zero code; transmitting without noise", RuntimeWarning, stacklevel=2)
        return out, ChannelTape(code, None, 0.0)
    sigma = math.sqrt(cfg.noise_variance(power))
    z = rng.standard_normal(code.shape, dtype=np.float64).astype(code.dtype, copy=False)
    return out + sigma * z, ChannelTape(code, z, sigma)


def awgn_backward(tape: ChannelTape, cfg: ChannelConfig, upstream: np.ndarray) -> np.ndarray:
    d_code = cfg.g * upstream
    if tape.unit_noise is None or tape.sigma == 0:
        return d_code
    # sigma = sqrt(ratio * mean(code^2))  =>  dsigma/dcode = ratio * code / (n * sigma)
    ratio = 10.0 ** (-cfg.snr_db / 10.0)
    d_sigma = float(np.sum(upstream * tape.unit_noise, dtype=np.float64))
    return d_code + (d_sigma * ratio / (tape.code.size * tape.sigma)) * tape.code


def hard_decision(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------- IRS link model

@dataclass(frozen=True)
class LinkRealization:
    h_sr: np.ndarray
    h_rd: np.ndarray
    h_sd: complex
    rho: float = 1.0
    P: float = 1.0
    sigma_d2: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.P <= 0 or self.sigma_d2 <= 0:
            raise ValueError("transmit power and noise variance must be positive")
        if np.shape(self.h_sr) != np.shape(self.h_rd):
            raise ValueError("h_sr and h_rd must have the same length")

    @property
    def M(self) -> int:
        return len(self.h_sr)


def random_link(M: int, rng: np.random.Generator, rho: float = 1.0, P: float = 1.0,
                sigma_d2: float = 1.0) -> LinkRealization:
    """Unit-variance circularly-symmetric complex Gaussian (Rayleigh) draws."""
    def cn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)
    return LinkRealization(cn(M), cn(M), complex(cn(1)[0]), rho, P, sigma_d2)


def optimal_phase(link: LinkRealization, m: int) -> float:
    """Phase aligning the m-th cascaded path with the direct path, in [0, 2pi)."""
    a, b = link.h_sr[m], link.h_rd[m]
    if a == 0 or b == 0 or link.h_sd == 0:
        raise ValueError("phase is undefined for a zero channel coefficient")
    theta = np.angle(link.h_sd) - np.angle(a * b)
    return float(theta % TWO_PI)


def optimal_phases(link: LinkRealization) -> np.ndarray:
    return np.array([optimal_phase(link, m) for m in range(link.M)])


def received_signal(link: LinkRealization, phases, s: complex = 1.0, noise: complex = 0.0) -> complex:
    """Received sample at the user for the given IRS phases."""
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (link.M,):
        raise ValueError(f"expected {link.M} phases, got shape {phases.shape}")
    reflect = link.rho * np.exp(1j * phases)
    cascaded = np.sum(link.h_rd * reflect * link.h_sr)
    return complex(math.sqrt(link.P) * cascaded * s + math.sqrt(link.P) * link.h_sd * s + noise)
