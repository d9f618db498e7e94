"""Strided convolutional encoder, recurrent context network and prediction heads."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import core_math as cm
from .core_math import Tensor


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    hidden_dim: int = 32
    widths: tuple[int, ...] = (8, 4)
    strides: tuple[int, ...] = (4, 2)
    context_layers: int = 1
    n_predictions: int = 12

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and of equal length")
        if min(self.strides) < 1 or min(self.widths) < 1:
            raise ValueError("widths and strides must be positive")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2 for channel normalization")
        if self.n_predictions < 1 or self.context_layers < 1 or self.hidden_dim < 1:
            raise ValueError("n_predictions, context_layers and hidden_dim must be positive")

    @property
    def rate_reduction(self) -> int:
        return int(np.prod(self.strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for w, s in zip(self.widths, self.strides):
            rf += (w - 1) * jump
            jump *= s
        return rf


def encoded_length(n_samples: int, widths, strides) -> int:
    """Number of latent frames the conv stack produces for ``n_samples`` inputs."""
    t = n_samples
    for w, s in zip(widths, strides):
        t = cm.conv_output_length(t, w, s)
    return t


@dataclass
class EncoderParams:
    kernels: list[Tensor]
    gains: list[Tensor]
    biases: list[Tensor]
    strides: tuple[int, ...]

    @property
    def latent_dim(self) -> int:
        return self.kernels[-1].shape[0]


@dataclass
class ContextParams:
    w_in: list[Tensor]
    w_hid: list[Tensor]
    bias: list[Tensor]

    @property
    def hidden_dim(self) -> int:
        return self.w_hid[0].shape[0]


@dataclass
class PredictionHeads:
    weight: Tensor  # (K, D, H)
    bias: Tensor  # (K, D)

    @property
    def n_predictions(self) -> int:
        return self.weight.shape[0]


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams
    context: ContextParams
    heads: PredictionHeads

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (k, g, b) in enumerate(zip(self.encoder.kernels, self.encoder.gains, self.encoder.biases)):
            out[f"encoder.{i}.kernel"] = k
            out[f"encoder.{i}.gain"] = g
            out[f"encoder.{i}.bias"] = b
        for i, (w, u, b) in enumerate(zip(self.context.w_in, self.context.w_hid, self.context.bias)):
            out[f"context.{i}.w_in"] = w
            out[f"context.{i}.w_hid"] = u
            out[f"context.{i}.bias"] = b
        out["heads.weight"] = self.heads.weight
        out["heads.bias"] = self.heads.bias
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    D, H, K = config.latent_dim, config.hidden_dim, config.n_predictions
    kernels, gains, biases = [], [], []
    c_in = 1
    for w in config.widths:
        kernels.append(cm.parameter(_uniform(rng, (D, c_in, w), c_in * w)))
        gains.append(cm.parameter(np.ones(D)))
        biases.append(cm.parameter(np.zeros(D)))
        c_in = D
    w_in, w_hid, bias = [], [], []
    d_in = D
    for _ in range(config.context_layers):
        w_in.append(cm.parameter(_uniform(rng, (d_in, 3 * H), d_in)))
        w_hid.append(cm.parameter(_uniform(rng, (H, 3 * H), H)))
        bias.append(cm.parameter(_uniform(rng, (3 * H,), H)))
        d_in = H
    heads = PredictionHeads(cm.parameter(_uniform(rng, (K, D, H), H)), cm.parameter(_uniform(rng, (K, D), H)))
    return Model(config, EncoderParams(kernels, gains, biases, config.strides), ContextParams(w_in, w_hid, bias), heads)


def encode(samples, params: EncoderParams) -> Tensor:
    """Raw samples (B, T) or (T,) -> latents (B, T', D) or (T', D)."""
    x = samples if isinstance(samples, Tensor) else Tensor(samples)
    single = x.data.ndim == 1
    h = cm.reshape(x, (1, 1, x.shape[0]) if single else (x.shape[0], 1, x.shape[1]))
    for kernel, gain, bias, stride in zip(params.kernels, params.gains, params.biases, params.strides):
        if h.shape[-1] < kernel.shape[-1]:
            raise ValueError(f"sequence of {x.shape[-1]} samples is shorter than the encoder receptive field")
        h = cm.relu(cm.channel_norm(cm.conv1d_strided(h, kernel, stride), gain, bias))
    z = cm.transpose_last(h)
    return cm.reshape(z, z.shape[1:]) if single else z


def contextualize(latents: Tensor, params: ContextParams) -> Tensor:
    """Causal summaries c_t of z_{<=t}; (B, T', D) -> (B, T', H)."""
    single = latents.data.ndim == 2
    h = cm.reshape(latents, (1,) + latents.shape) if single else latents
    if h.shape[1] < 1:
        raise ValueError("empty latent sequence")
    for w, u, b in zip(params.w_in, params.w_hid, params.bias):
        h = cm.gru(h, w, u, b)
    return cm.reshape(h, h.shape[1:]) if single else h


def predict(context: Tensor, heads: PredictionHeads) -> Tensor:
    """Row k of the result is W_k c + b_k; (..., H) -> (..., K, D)."""
    K, D, H = heads.weight.shape
    if context.shape[-1] != H:
        raise ValueError(f"context dimension {context.shape[-1]} != {H}")
    w = cm.reshape(heads.weight, (K * D, H))
    out = cm.matmul(context, cm.transpose_last(w))
    out = cm.add(out, cm.reshape(heads.bias, (K * D,)))
    return cm.reshape(out, context.shape[:-1] + (K, D))


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian):
#   b"ACPCCKPT" | u32 version | u64 step | u32 len + JSON metadata
#   | u32 len + JSON rng state | u32 tensor count
#   | per tensor: u16 name len, name, u8 dtype (0=f32, 1=f64), u32 ndim, u32 dims[ndim], raw data

CKPT_MAGIC = b"ACPCCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(tensors: dict[str, np.ndarray], step: int, rng_state: dict, metadata: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, step))
    buf.write(_pack_json(metadata))
    buf.write(_pack_json(rng_state))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)) + raw_name)
        buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes):
    """Inverse of :func:`encode_checkpoint`; returns (tensors, step, rng_state, metadata)."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, step = struct.unpack("<IQ", take(12))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(take(struct.unpack("<I", take(4))[0]))
    rng_state = json.loads(take(struct.unpack("<I", take(4))[0]))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take(struct.unpack("<H", take(2))[0]).decode()
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, step, rng_state, metadata


def model_from_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> Model:
    model = init_model(config, seed=0)
    for name, p in model.parameters().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].copy()
    return model


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    d["strides"] = list(config.strides)
    return d
