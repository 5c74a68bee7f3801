"""PSCDN / PSCN network construction, forward and backward passes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, ShapeError

#: Filter count for the default PSCDN; gives 88833 weights at K=9, C=2, near the
#: published 85699-weight model (see ``count_parameters``).
DEFAULT_N = 56
DEFAULT_K = 9
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# kind -> (activation, batch norm)
_CONV_KINDS: dict[str, tuple[str | None, bool]] = {
    "ConvReLU": ("relu", False),
    "Conv": (None, False),
    "ConvSigmoid": ("sigmoid", False),
    "ConvBNReLU": ("relu", True),
    "ConvBN": (None, True),
    "ConvBNSigmoid": ("sigmoid", True),
    "DenoiseModule": (None, False),
}
_WITH_BN = {"ConvReLU": "ConvBNReLU", "Conv": "ConvBN", "ConvSigmoid": "ConvBNSigmoid"}

VARIANTS = ("a", "b", "c", "d", "e", "f")
MODEL_NAMES = ("pscdn",) + tuple(f"pscn-{v}" for v in VARIANTS)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 1
    out_channels: int = 0
    shape: tuple[int, int] | None = None  # target shape, Reshape only

    def __post_init__(self) -> None:
        if self.kind == "Reshape":
            if self.shape is None:
                raise ConfigurationError("Reshape layer needs a target shape")
            return
        if self.kind not in _CONV_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size not in (1, 3):
            raise ConfigurationError(f"kernel size must be 1 or 3, got {self.kernel_size}")
        if self.out_channels < 1:
            raise ConfigurationError("out_channels must be positive")

    @property
    def is_conv(self) -> bool:
        return self.kind != "Reshape"

    @property
    def activation(self) -> str | None:
        return _CONV_KINDS[self.kind][0] if self.is_conv else None

    @property
    def batch_norm(self) -> bool:
        return _CONV_KINDS[self.kind][1] if self.is_conv else False

    def with_bn(self) -> LayerSpec:
        if self.kind not in _WITH_BN:
            raise ConfigurationError(f"cannot add batch norm to {self.kind}")
        return LayerSpec(_WITH_BN[self.kind], self.kernel_size, self.out_channels)


def ConvReLU(kernel_size: int, out_channels: int) -> LayerSpec:
    return LayerSpec("ConvReLU", kernel_size, out_channels)


def Conv(kernel_size: int, out_channels: int) -> LayerSpec:
    return LayerSpec("Conv", kernel_size, out_channels)


def ConvSigmoid(kernel_size: int, out_channels: int) -> LayerSpec:
    return LayerSpec("ConvSigmoid", kernel_size, out_channels)


def Reshape(shape: tuple[int, int]) -> LayerSpec:
    return LayerSpec("Reshape", shape=tuple(shape))


def DenoiseModule(out_channels: int) -> LayerSpec:
    """Concat(decoder input, noise feature) -> 1x1 conv -> subtract from decoder input."""
    return LayerSpec("DenoiseModule", 1, out_channels)


@dataclass(frozen=True)
class NetworkSpec:
    K: int
    C: int
    N: int
    encoder_layers: tuple[LayerSpec, ...]
    decoder_layers: tuple[LayerSpec, ...]
    bn_variant: str = "none"
    denoising: bool = False

    def __post_init__(self) -> None:
        _check_dims(self.K, self.N, self.C)

    @property
    def cr(self) -> float:
        return self.C / self.K

    @property
    def name(self) -> str:
        return "pscdn" if self.bn_variant == "none" else f"pscn-{self.bn_variant}"

    def conv_layer_counts(self) -> tuple[int, int]:
        return (sum(l.is_conv for l in self.encoder_layers),
                sum(l.is_conv for l in self.decoder_layers))

    def bn_layer_count(self) -> int:
        return sum(l.batch_norm for l in self.encoder_layers + self.decoder_layers)


def _check_dims(K: int, N: int, C: int) -> None:
    if K < 2:
        raise ConfigurationError(f"K must be at least 2, got {K}")
    if N < 1:
        raise ConfigurationError(f"N must be positive, got {N}")
    if not 1 <= C < K:
        raise ConfigurationError(f"code dimension C={C} must satisfy 1 <= C < K={K}")


def build_encoder(K: int, N: int, C: int) -> tuple[LayerSpec, ...]:
    _check_dims(K, N, C)
    return (
        ConvReLU(3, N),
        ConvReLU(3, N),
        ConvReLU(3, N),
        Reshape((K * N, 1)),
        Conv(1, C),
    )


def build_decoder(K: int, N: int, C: int, denoising: bool) -> tuple[LayerSpec, ...]:
    _check_dims(K, N, C)
    if denoising:
        body = [ConvReLU(3, N), DenoiseModule(C)] + [ConvReLU(3, N)] * 8
    else:
        body = [ConvReLU(3, N)] * 10
    return tuple(body) + (ConvSigmoid(3, K), Reshape((1, K)))


def build_pscdn(K: int = DEFAULT_K, C: int = 2, N: int = DEFAULT_N) -> NetworkSpec:
    return NetworkSpec(K, C, N, build_encoder(K, N, C), build_decoder(K, N, C, True),
                       bn_variant="none", denoising=True)


def build_pscn_variant(variant: str, K: int = DEFAULT_K, N: int = DEFAULT_N, C: int = 2) -> NetworkSpec:
    """PSCN (no denoising) with batch norm placed per ablation variant a-f.

    ``a`` has no BN, ``b``..``e`` put BN on the first 1..4 encoder convs and
    ``f`` on every conv in both halves.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown PSCN variant {variant!r}")
    enc = list(build_encoder(K, N, C))
    dec = list(build_decoder(K, N, C, False))
    if variant == "f":
        enc = [l.with_bn() if l.is_conv else l for l in enc]
        dec = [l.with_bn() if l.is_conv else l for l in dec]
    elif variant != "a":
        remaining = VARIANTS.index(variant)
        for i, layer in enumerate(enc):
            if layer.is_conv and remaining:
                enc[i] = layer.with_bn()
                remaining -= 1
    return NetworkSpec(K, C, N, tuple(enc), tuple(dec), bn_variant=variant, denoising=False)


def build_network(model: str, K: int = DEFAULT_K, C: int = 2, N: int = DEFAULT_N) -> NetworkSpec:
    if model == "pscdn":
        return build_pscdn(K, C, N)
    if model.startswith("pscn-"):
        return build_pscn_variant(model[5:], K, N, C)
    raise ConfigurationError(f"unknown model {model!r}; expected one of {', '.join(MODEL_NAMES)}")


@dataclass(frozen=True)
class LayerGeometry:
    layer_id: str
    layer: LayerSpec
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        in_ch = self.in_shape[0]
        if self.layer.kind == "DenoiseModule":
            # sees the decoder input concatenated with the noise feature
            in_ch += self.out_shape[0]
        return (self.layer.out_channels, in_ch, self.layer.kernel_size)


def _stack_geometry(prefix: str, layers, in_shape) -> list[LayerGeometry]:
    out = []
    shape = tuple(in_shape)
    stack_in = shape
    for i, layer in enumerate(layers):
        if layer.kind == "Reshape":
            if layer.shape[0] * layer.shape[1] != shape[0] * shape[1]:
                raise ShapeError(f"{prefix}{i}: cannot reshape {shape} to {layer.shape}")
            new = tuple(layer.shape)
        elif layer.kind == "DenoiseModule":
            if layer.out_channels != stack_in[0] or shape[1] != stack_in[1]:
                raise ShapeError(f"{prefix}{i}: denoise output must match the stack input {stack_in}")
            new = stack_in
        else:
            new = (layer.out_channels, shape[1])
        out.append(LayerGeometry(f"{prefix}{i}", layer, shape, new))
        shape = new
    return out


def geometry(spec: NetworkSpec) -> tuple[list[LayerGeometry], list[LayerGeometry]]:
    enc = _stack_geometry("enc", spec.encoder_layers, (1, spec.K))
    code_shape = enc[-1].out_shape
    if code_shape != (spec.C, 1):
        raise ShapeError(f"encoder produces {code_shape}, expected ({spec.C}, 1)")
    dec = _stack_geometry("dec", spec.decoder_layers, code_shape)
    if dec[-1].out_shape != (1, spec.K):
        raise ShapeError(f"decoder produces {dec[-1].out_shape}, expected (1, {spec.K})")
    return enc, dec


def count_parameters(spec: NetworkSpec) -> int:
    """Trainable weights plus biases; BN running statistics are not counted."""
    total = 0
    for g in sum(geometry(spec), []):
        if g.layer.is_conv:
            out_ch, in_ch, k = g.weight_shape
            total += out_ch * in_ch * k + out_ch
    return total


@dataclass
class LayerParams:
    layer_id: str
    weight: np.ndarray
    bias: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


@dataclass
class ParameterStore:
    entries: list[LayerParams] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._index = {e.layer_id: e for e in self.entries}

    def __getitem__(self, layer_id: str) -> LayerParams:
        return self._index[layer_id]

    def __iter__(self) -> Iterator[LayerParams]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (weight, bias per layer)."""
        out = []
        for e in self.entries:
            out += [e.weight, e.bias]
        return out

    def copy(self) -> ParameterStore:
        return ParameterStore(copy.deepcopy(self.entries))

    def astype(self, dtype) -> ParameterStore:
        out = self.copy()
        for e in out.entries:
            e.weight = e.weight.astype(dtype)
            e.bias = e.bias.astype(dtype)
            if e.running_mean is not None:
                e.running_mean = e.running_mean.astype(dtype)
                e.running_var = e.running_var.astype(dtype)
        return out

    @property
    def dtype(self):
        return self.entries[0].weight.dtype

    def check(self, spec: NetworkSpec) -> None:
        expected = [g for g in sum(geometry(spec), []) if g.layer.is_conv]
        if [g.layer_id for g in expected] != [e.layer_id for e in self.entries]:
            raise ShapeError("parameter store does not match the network layout")
        for g in expected:
            e = self[g.layer_id]
            if e.weight.shape != g.weight_shape or e.bias.shape != (g.weight_shape[0],):
                raise ShapeError(f"{g.layer_id}: expected weight {g.weight_shape}, got {e.weight.shape}")


def _effective_taps(g: LayerGeometry) -> int:
    # under same-padding a length-L input only ever meets min(k, 2L - 1) taps
    return min(g.layer.kernel_size, 2 * g.in_shape[1] - 1)


def init_parameters(spec: NetworkSpec, seed: int, dtype=np.float32, scheme: str = "glorot",
                    effective_fan: bool = False) -> ParameterStore:
    """Fan-based uniform weights, zero biases; BN running stats start at (0, 1).

    ``scheme`` is ``"glorot"`` (variance 2/(fan_in+fan_out)) or ``"he"``
    (variance 2/fan_in).  With ``effective_fan`` the fans count only the kernel
    taps that can touch the input, which matters for kernel-3 layers at length 1.
    """
    if scheme not in ("glorot", "he"):
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    entries = []
    for g in sum(geometry(spec), []):
        if not g.layer.is_conv:
            continue
        out_ch, in_ch, k = g.weight_shape
        taps = _effective_taps(g) if effective_fan else k
        fan_in, fan_out = in_ch * taps, out_ch * taps
        var = 2.0 / (fan_in + fan_out) if scheme == "glorot" else 2.0 / fan_in
        limit = np.sqrt(3.0 * var)
        w = rng.uniform(-limit, limit, size=g.weight_shape).astype(dtype)
        entry = LayerParams(g.layer_id, w, np.zeros(out_ch, dtype=dtype))
        if g.layer.batch_norm:
            entry.running_mean = np.zeros(out_ch, dtype=dtype)
            entry.running_var = np.ones(out_ch, dtype=dtype)
        entries.append(entry)
    return ParameterStore(entries)


# ---------------------------------------------------------------- forward/backward

@dataclass
class Tape:
    """Intermediate values from one stack's forward pass, consumed by backward."""
    stack_input: np.ndarray
    records: list = field(default_factory=list)
    train: bool = False


def _conv_forward(layer: LayerSpec, p: LayerParams, x: np.ndarray, train: bool):
    z = T.conv1d(x, p.weight, p.bias)
    bn_cache = None
    if layer.batch_norm:
        if train:
            z, bn_cache = T.batch_norm(z, BN_EPS)
            p.running_mean *= BN_MOMENTUM
            p.running_mean += (1 - BN_MOMENTUM) * bn_cache.mean.astype(p.running_mean.dtype)
            p.running_var *= BN_MOMENTUM
            p.running_var += (1 - BN_MOMENTUM) * bn_cache.var.astype(p.running_var.dtype)
        else:
            z = T.batch_norm_inference(z, p.running_mean, p.running_var, BN_EPS)
    if layer.activation == "relu":
        a = T.relu(z)
    elif layer.activation == "sigmoid":
        a = T.sigmoid(z)
    else:
        a = z
    return a, (x, z, a, bn_cache)


def _conv_backward(layer: LayerSpec, p: LayerParams, rec, dy: np.ndarray):
    x, z, a, bn_cache = rec
    if layer.activation == "relu":
        dy = T.relu_backward(z, dy).input_grad
    elif layer.activation == "sigmoid":
        dy = T.sigmoid_backward(a, dy).input_grad
    if layer.batch_norm:
        if bn_cache is not None:
            dy = T.batch_norm_backward(bn_cache, dy).input_grad
        else:
            dy = dy / np.sqrt(p.running_var + BN_EPS)[None, :, None]
    return T.conv1d_backward(x, p.weight, dy)


def _forward_stack(geo: list[LayerGeometry], params: ParameterStore, x: np.ndarray, train: bool):
    tape = Tape(stack_input=x, train=train)
    for g in geo:
        layer = g.layer
        if layer.kind == "Reshape":
            tape.records.append(x.shape)
            x = T.reshape(x, layer.shape)
        elif layer.kind == "DenoiseModule":
            p = params[g.layer_id]
            joined = T.concat_channels(tape.stack_input, x)
            estimate = T.conv1d(joined, p.weight, p.bias)
            tape.records.append((joined, estimate))
            x = T.residual_sub(tape.stack_input, estimate)
        else:
            x, rec = _conv_forward(layer, params[g.layer_id], x, train)
            tape.records.append(rec)
    return x, tape


def _backward_stack(geo: list[LayerGeometry], params: ParameterStore, tape: Tape, dy: np.ndarray):
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    d_stack_input = np.zeros_like(tape.stack_input, dtype=dy.dtype)
    for g, rec in zip(reversed(geo), reversed(tape.records)):
        layer = g.layer
        if layer.kind == "Reshape":
            dy = T.reshape_backward(rec, dy).input_grad
        elif layer.kind == "DenoiseModule":
            joined, _ = rec
            d_in, d_est = T.residual_sub_backward(dy)
            pg = T.conv1d_backward(joined, params[g.layer_id].weight, d_est)
            d_skip, dy = T.concat_channels_backward(tape.stack_input.shape[1], pg.input_grad)
            d_stack_input = d_stack_input + d_in + d_skip
            grads[g.layer_id] = pg.param_grads
        else:
            pg = _conv_backward(layer, params[g.layer_id], rec, dy)
            grads[g.layer_id] = pg.param_grads
            dy = pg.input_grad
    return dy + d_stack_input, grads


def _as_batch(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2 and x.shape == shape:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != shape:
        raise ShapeError(f"expected input of shape (batch, {shape[0]}, {shape[1]}), got {x.shape}")
    return x


def encode(spec: NetworkSpec, params: ParameterStore, x: np.ndarray, mode: str = "eval"):
    """Map a batch of bit vectors ``(B, 1, K)`` to codes ``(B, C, 1)``."""
    enc, _ = geometry(spec)
    return _forward_stack(enc, params, _as_batch(x, (1, spec.K)), mode == "train")


def decode(spec: NetworkSpec, params: ParameterStore, code: np.ndarray, mode: str = "eval"):
    """Map (possibly noisy) codes ``(B, C, 1)`` to reconstructions ``(B, 1, K)``."""
    _, dec = geometry(spec)
    return _forward_stack(dec, params, _as_batch(code, (spec.C, 1)), mode == "train")


def encode_backward(spec: NetworkSpec, params: ParameterStore, tape: Tape, d_code: np.ndarray):
    enc, _ = geometry(spec)
    return _backward_stack(enc, params, tape, d_code)


def decode_backward(spec: NetworkSpec, params: ParameterStore, tape: Tape, d_out: np.ndarray):
    _, dec = geometry(spec)
    return _backward_stack(dec, params, tape, d_out)


def forward(spec: NetworkSpec, params: ParameterStore, x: np.ndarray, mode: str = "eval",
            channel: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Encoder, optional channel on the code, decoder.  Returns ``(code, output)``."""
    code, _ = encode(spec, params, x, mode)
    received = channel(code) if channel is not None else code
    out, _ = decode(spec, params, received, mode)
    return code, out


def flatten_grads(params: ParameterStore, grads: dict) -> list[np.ndarray]:
    """Order gradients like ``ParameterStore.arrays``."""
    out = []
    for e in params:
        dw, db = grads[e.layer_id]
        out += [dw, db]
    return out
