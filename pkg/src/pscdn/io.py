"""On-disk formats: weights, datasets, experiment configs and metric CSVs.

Weights file (all integers little-endian)::

    "PSCD"  u16 version  u16 K  u16 C  u16 N  8s variant tag  u16 layer count
            u32 total file length in bytes
    per layer:  u16 id length, id bytes, u8 array count,
                per array: u8 ndim, u32 dims..., float32 values
    u32 CRC-32 of every preceding byte

Dataset file::

    "QPSD"  u32 count  u16 K  packed bits (row-major, MSB first, zero-padded)
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .tensor import ConfigurationError
from .training import MetricsRecord, TrainConfig

WEIGHTS_MAGIC = b"PSCD"
WEIGHTS_VERSION = 1
DATASET_MAGIC = b"QPSD"

_HEADER = struct.Struct("<4sHHHH8sHI")
_DATASET_HEADER = struct.Struct("<4sIH")


class WeightsFormatError(ValueError):
    pass


class ChecksumError(WeightsFormatError):
    pass


class VersionError(WeightsFormatError):
    pass


class TruncatedFileError(WeightsFormatError):
    pass


# ---------------------------------------------------------------- weights

def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return (struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + arr.tobytes())


def weights_to_bytes(params: M.ParameterStore, spec: M.NetworkSpec) -> bytes:
    params.check(spec)
    body = bytearray()
    for e in params:
        lid = e.layer_id.encode("ascii")
        arrays = [e.weight, e.bias]
        if e.running_mean is not None:
            arrays += [e.running_mean, e.running_var]
        body += struct.pack("<H", len(lid)) + lid + struct.pack("<B", len(arrays))
        for arr in arrays:
            body += _pack_array(arr)
    buf = bytearray(_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, spec.K, spec.C, spec.N,
                                 spec.name.encode("ascii"), len(params), _HEADER.size + len(body) + 4))
    buf += body
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def save_weights(params: M.ParameterStore, spec: M.NetworkSpec, path) -> None:
    Path(path).write_bytes(weights_to_bytes(params, spec))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError("weights file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def weights_from_bytes(data: bytes) -> tuple[M.ParameterStore, M.NetworkSpec]:
    if len(data) < _HEADER.size + 4:
        raise TruncatedFileError("weights file is truncated")
    magic, version, K, C, N, tag, n_layers, length = _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"unsupported weights version {version} (expected {WEIGHTS_VERSION})")
    if len(data) < length:
        raise TruncatedFileError(f"weights file is truncated ({len(data)} of {length} bytes)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if len(data) != length or zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("weights checksum mismatch")
    entries = _parse_layers(data, n_layers)
    spec = M.build_network(tag.rstrip(b"\0").decode("ascii"), K, C, N)
    params = M.ParameterStore(entries)
    params.check(spec)
    return params, spec


def _parse_layers(data: bytes, n_layers: int) -> list[M.LayerParams]:
    r = _Reader(data, len(data) - 4)
    r.pos = _HEADER.size
    entries = []
    for _ in range(n_layers):
        (id_len,) = r.unpack("<H")
        lid = r.take(id_len).decode("ascii", errors="replace")
        (count,) = r.unpack("<B")
        arrays = []
        for _ in range(count):
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape))
        if count not in (2, 4):
            raise WeightsFormatError(f"layer {lid}: unexpected array count {count}")
        entries.append(M.LayerParams(lid, *arrays))
    if r.pos != r.end:
        raise WeightsFormatError("trailing bytes after the last layer record")
    return entries


def load_weights(path) -> tuple[M.ParameterStore, M.NetworkSpec]:
    return weights_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets

def save_dataset(bits: np.ndarray, path) -> None:
    bits = np.asarray(bits).reshape(len(bits), -1).astype(np.uint8)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("dataset must contain only 0/1 values")
    count, K = bits.shape
    Path(path).write_bytes(_DATASET_HEADER.pack(DATASET_MAGIC, count, K) + np.packbits(bits).tobytes())


def load_dataset(path, dtype=np.float32) -> np.ndarray:
    """Returns a ``(count, 1, K)`` bit array."""
    data = Path(path).read_bytes()
    if len(data) < _DATASET_HEADER.size:
        raise TruncatedFileError("dataset file is truncated")
    magic, count, K = _DATASET_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise WeightsFormatError(f"bad dataset magic {magic!r}")
    payload = np.frombuffer(data, dtype=np.uint8, offset=_DATASET_HEADER.size)
    if len(payload) * 8 < count * K:
        raise TruncatedFileError("dataset payload is truncated")
    bits = np.unpackbits(payload, count=count * K).reshape(count, K)
    return bits.astype(dtype)[:, None, :]


# ---------------------------------------------------------------- config

PRESETS = ("none", "table1", "fig3-pscdn", "table2-pscdn")
PRESET_CRS = ((2, 9), (3, 9), (4, 9), (5, 9))


@dataclass
class ExperimentConfig:
    model: str = "pscdn"
    preset: str = "none"
    K: int = M.DEFAULT_K
    C: int = 2
    N: int = M.DEFAULT_N
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 100000
    n_val: int = 30000
    n_test: int = 100000
    out_dir: str = "runs/out"
    seed: int = 0
    seeds: int = 1
    snr_grid: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    eval_snr_db: float = 10.0
    weights: str | None = None
    train_data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    timing_repetitions: int = 5

    def validate(self) -> None:
        if self.model not in M.MODEL_NAMES:
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.preset != "none" and self.K != 9:
            raise ConfigurationError("presets are defined for K=9")
        if self.preset == "table2-pscdn" and (self.C, self.K) not in PRESET_CRS:
            raise ConfigurationError(f"preset CR must be one of {', '.join(f'{c}/{k}' for c, k in PRESET_CRS)}")
        for name in ("n_train", "n_val", "n_test", "seeds"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        self.train.validate(M.build_network(self.model, self.K, self.C, self.N))
        for name in ("weights", "train_data", "val_data", "test_data"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"{name} file {path!r} does not exist")


_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_INT_KEYS = {"K", "C", "N", "n_train", "n_val", "n_test", "seed", "seeds", "timing_repetitions"}
_STR_KEYS = {"model", "preset", "out_dir", "weights", "train_data", "val_data", "test_data"}
_FLOAT_KEYS = {"eval_snr_db"}


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            cfg.seed = cfg.train.seed = _parse_int(key, value)
        elif key in _TRAIN_KEYS:
            conv = _parse_int if key in ("epochs", "batch_size", "decay_steps", "seed") else _parse_float
            setattr(cfg.train, key, conv(key, value))
        elif key in _INT_KEYS:
            setattr(cfg, key, _parse_int(key, value))
        elif key in _STR_KEYS:
            setattr(cfg, key, value or None)
        elif key in _FLOAT_KEYS:
            setattr(cfg, key, _parse_float(key, value))
        elif key == "snr_grid":
            cfg.snr_grid = tuple(_parse_float(key, v) for v in value.split(",") if v.strip())
        else:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
    if cfg.model is None or cfg.preset is None or cfg.out_dir is None:
        raise ConfigurationError("model, preset and out_dir may not be empty")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "train":
            lines += [f"{k} = {getattr(value, k)}" for k in _TRAIN_KEYS if k != "seed"]
        elif f.name == "snr_grid":
            lines.append(f"snr_grid = {', '.join(repr(v) for v in value)}")
        elif value is not None:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- CSV

CSV_COLUMNS = ("epoch", "train_loss", "val_nmse_linear", "val_nmse_db", "ber", "lr", "wall_time_s")


def export_metrics_csv(records: list[MetricsRecord], path) -> None:
    if not records:
        raise ValueError("no metrics to export")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_nmse_linear), repr(r.val_nmse_db),
                        repr(r.bit_error_rate), repr(r.lr), repr(r.wall_time_seconds)])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_nmse_linear"]),
                          float(r["val_nmse_db"]), float(r["ber"]), float(r["lr"]), float(r["wall_time_s"]))
            for r in rows]


def write_table_csv(header: list[str], rows: list[list], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
