"""Channel-in-the-loop training, Adam, learning-rate decay and evaluation metrics."""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .channel import (ChannelConfig, PhaseSample, awgn_backward, awgn_channel, awgn_forward,
                      bits_to_index, hard_decision)
from .tensor import ConfigurationError

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``params`` holds the last parameters that gave a finite loss and
    ``records`` the metrics collected before the failure.
    """

    def __init__(self, message: str, params=None, records=None):
        super().__init__(message)
        self.params = params
        self.records = list(records or [])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 200
    lr0: float = 1e-3
    decay_rate: float = 0.99
    decay_steps: int = 1000
    train_snr_db: float = 10.0
    g: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self, spec: M.NetworkSpec | None = None) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if not 0 < self.decay_rate <= 1:
            raise ConfigurationError("decay_rate must lie in (0, 1]")
        if self.decay_steps < 1:
            raise ConfigurationError("decay_steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if spec is not None and spec.bn_layer_count() and self.batch_size < 2:
            raise ConfigurationError("batch norm layers need batch_size >= 2")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_nmse_linear: float
    val_nmse_db: float
    bit_error_rate: float
    lr: float
    wall_time_seconds: float


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


# ---------------------------------------------------------------- losses and metrics

def _flat(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    return batch.reshape(batch.shape[0], -1)


def mse_loss(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    """Mean over samples of the squared Euclidean reconstruction error."""
    if np.shape(reconstruction) != np.shape(truth):
        raise ValueError(f"shape mismatch: {np.shape(reconstruction)} vs {np.shape(truth)}")
    diff = _flat(reconstruction).astype(np.float64) - _flat(truth)
    return float(np.sum(diff * diff) / diff.shape[0])


def mse_loss_grad(reconstruction: np.ndarray, truth: np.ndarray) -> np.ndarray:
    reconstruction = np.asarray(reconstruction)
    return 2 * (reconstruction - truth) / reconstruction.shape[0]


def nmse(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    """Squared-error norm over the squared truth norm (linear scale)."""
    truth = np.asarray(truth, dtype=np.float64)
    denom = float(np.sum(truth * truth))
    if denom == 0:
        raise ValueError("NMSE is undefined for an all-zero reference")
    diff = np.asarray(reconstruction, dtype=np.float64) - truth
    return float(np.sum(diff * diff)) / denom


def to_db(value: float) -> float:
    return 10.0 * math.log10(value) if value > 0 else -math.inf


def bit_error_rate(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(hard_decision(reconstruction) != np.asarray(truth).astype(np.uint8)))


def phase_nmse(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    """NMSE on radian phases after hard decision of both bit vectors."""
    K = np.shape(truth)[-1]
    step = 2 * math.pi / (1 << K)
    est = bits_to_index(hard_decision(_flat(reconstruction))) * step
    ref = bits_to_index(_flat(truth).astype(np.uint8)) * step
    return nmse(est, ref)


def lr_schedule(lr0: float, decay_rate: float, total_steps: int, decay_steps: int) -> float:
    if decay_steps < 1:
        raise ValueError("decay_steps must be at least 1")
    return lr0 * decay_rate ** (total_steps / decay_steps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter array {i} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------- training

def as_bits(dataset, dtype=np.float32) -> np.ndarray:
    """Accept a ``(n, 1, K)`` / ``(n, K)`` bit array or a list of PhaseSample."""
    if isinstance(dataset, np.ndarray):
        arr = dataset
    else:
        items = list(dataset)
        if items and isinstance(items[0], PhaseSample):
            arr = np.array([s.bits for s in items])
        else:
            arr = np.asarray(items)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3 or arr.shape[1] != 1 or len(arr) == 0:
        raise ValueError(f"dataset must be a non-empty (n, 1, K) bit array, got shape {arr.shape}")
    return arr.astype(dtype, copy=False)


def loss_and_grads(spec: M.NetworkSpec, params: M.ParameterStore, bits: np.ndarray,
                   channel: ChannelConfig, rng: np.random.Generator | None,
                   mode: str = "train") -> tuple[float, list[np.ndarray], np.ndarray]:
    """One forward/backward pass through encoder, channel and decoder."""
    code, etape = M.encode(spec, params, bits, mode)
    if not np.isfinite(code).all():
        raise DivergenceError("encoder produced a non-finite code")
    received, ctape = awgn_forward(code, channel, rng)
    out, dtape = M.decode(spec, params, received, mode)
    loss = mse_loss(out, bits)
    d_received, dgrads = M.decode_backward(spec, params, dtape, mse_loss_grad(out, bits))
    _, egrads = M.encode_backward(spec, params, etape, awgn_backward(ctape, channel, d_received))
    return loss, M.flatten_grads(params, {**egrads, **dgrads}), out


def predict(spec: M.NetworkSpec, params: M.ParameterStore, bits: np.ndarray, channel: ChannelConfig,
            rng: np.random.Generator | None, chunk: int = 10000) -> np.ndarray:
    """Eval-mode reconstruction through the channel, chunked to bound memory."""
    outs = []
    for start in range(0, len(bits), chunk):
        _, out = M.forward(spec, params, bits[start:start + chunk], "eval",
                           channel=lambda c: awgn_channel(c, channel, rng))
        outs.append(out)
    return np.concatenate(outs)


def train(spec: M.NetworkSpec, params: M.ParameterStore, dataset, cfg: TrainConfig,
          val_dataset=None, progress: bool = False) -> tuple[M.ParameterStore, list[MetricsRecord]]:
    """Train ``params`` in place; returns them with one record per epoch.

    Validation runs in eval mode through the channel at the training SNR, with
    the same noise draw every epoch so epochs are comparable.
    """
    cfg.validate(spec)
    data = as_bits(dataset, params.dtype)
    val = as_bits(val_dataset, params.dtype) if val_dataset is not None else data
    shuffle_seed, noise_seed, val_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    noise_rng = np.random.default_rng(noise_seed)
    channel = ChannelConfig(cfg.g, cfg.train_snr_db)

    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    records: list[MetricsRecord] = []
    last_good = params.copy()
    start = time.perf_counter()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        lr = lr_schedule(cfg.lr0, cfg.decay_rate, state.t, cfg.decay_steps)
        for b in range(0, n, cfg.batch_size):
            batch = data[order[b:b + cfg.batch_size]]
            if len(batch) < 2 and spec.bn_layer_count():
                continue
            lr = lr_schedule(cfg.lr0, cfg.decay_rate, state.t, cfg.decay_steps)
            try:
                loss, grads, _ = loss_and_grads(spec, params, batch, channel, noise_rng)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} in epoch {epoch}", last_good, records) from None
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}", last_good, records)
            try:
                adam_step(arrays, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), last_good, records) from None
            total += loss * len(batch)
            seen += len(batch)
        out = predict(spec, params, val, channel, np.random.default_rng(val_seed))
        if not np.isfinite(out).all():
            raise DivergenceError(f"non-finite validation output in epoch {epoch}", last_good, records)
        last_good = params.copy()
        val_nmse = nmse(out, val)
        records.append(MetricsRecord(
            epoch=epoch,
            train_loss=total / max(seen, 1),
            val_nmse_linear=val_nmse,
            val_nmse_db=to_db(val_nmse),
            bit_error_rate=bit_error_rate(out, val),
            lr=lr,
            wall_time_seconds=time.perf_counter() - start,
        ))
        if progress:
            r = records[-1]
            log.info("epoch %d loss %.5f val nmse %.5f (%.2f dB) ber %.4f",
                     epoch, r.train_loss, r.val_nmse_linear, r.val_nmse_db, r.bit_error_rate)
    return params, records


def evaluate(spec: M.NetworkSpec, params: M.ParameterStore, dataset, snr_db: float,
             trials_seed: int, g: float = 1.0, epoch: int = 0) -> MetricsRecord:
    """Test-set NMSE and BER through the feedback channel at ``snr_db``."""
    data = as_bits(dataset, params.dtype)
    start = time.perf_counter()
    out = predict(spec, params, data, ChannelConfig(g, snr_db), np.random.default_rng(trials_seed))
    value = nmse(out, data)
    return MetricsRecord(epoch, mse_loss(out, data), value, to_db(value),
                         bit_error_rate(out, data), math.nan, time.perf_counter() - start)


def time_inference(spec: M.NetworkSpec, params: M.ParameterStore, dataset, repetitions: int = 5) -> float:
    """Median wall time of a full noiseless forward pass over ``dataset``."""
    if repetitions < 3:
        raise ValueError("repetitions must be at least 3")
    data = as_bits(dataset, params.dtype)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict(spec, params, data, ChannelConfig(), None)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)
