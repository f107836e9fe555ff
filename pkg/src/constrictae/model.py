"""3-D convolutional autoencoder and its checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MAGIC = b"CAE1"


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "out_channels", int(self.out_channels))
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, T._triple(getattr(self, name)))

    @classmethod
    def from_obj(cls, obj) -> "LayerSpec":
        if isinstance(obj, LayerSpec):
            return obj
        if isinstance(obj, dict):
            return cls(
                int(obj["out_channels"]),
                T._triple(obj.get("kernel", 3)),
                T._triple(obj.get("stride", 1)),
                T._triple(obj.get("padding", 1)),
            )
        out, kernel, stride, padding = obj
        return cls(int(out), T._triple(kernel), T._triple(stride), T._triple(padding))


def _default_encoder() -> tuple[LayerSpec, ...]:
    return (
        LayerSpec(8, (3, 3, 3), (1, 2, 2), (1, 1, 1)),
        LayerSpec(16, (3, 3, 3), (2, 2, 2), (1, 1, 1)),
        LayerSpec(16, (3, 3, 3), (2, 2, 2), (1, 1, 1)),
    )


@dataclass(frozen=True)
class AEConfig:
    """Architecture of the autoencoder.

    ``input_shape`` is ``(T, C, H, W)``. ``decoder_layers`` left empty mirrors
    the encoder with transposed convolutions ending at ``C`` channels.
    """

    input_shape: tuple[int, int, int, int] = (8, 1, 32, 32)
    encoder_layers: tuple[LayerSpec, ...] = field(default_factory=_default_encoder)
    decoder_layers: tuple[LayerSpec, ...] = ()
    leaky_slope: float = 0.2
    drop_last_encoder_activation: bool = True
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "encoder_layers", tuple(LayerSpec.from_obj(l) for l in self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(LayerSpec.from_obj(l) for l in self.decoder_layers))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be four positive extents (T, C, H, W), got {self.input_shape}")
        if not self.encoder_layers:
            raise ValueError("autoencoder needs at least one encoder layer")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in [0, 1), got {self.leaky_slope}")
        T.dtype_for(self.precision)

    @property
    def resolved_decoder(self) -> tuple[LayerSpec, ...]:
        if self.decoder_layers:
            return self.decoder_layers
        enc = self.encoder_layers
        ins = [self.input_shape[1]] + [l.out_channels for l in enc[:-1]]
        return tuple(LayerSpec(c, l.kernel, l.stride, l.padding) for l, c in zip(reversed(enc), reversed(ins)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_layers"] = [asdict(l) for l in self.decoder_layers]
        d["encoder_layers"] = [asdict(l) for l in self.encoder_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        return cls(**d)


@dataclass
class _Plan:
    encoder: list[tuple[LayerSpec, int, tuple[int, int, int]]]  # (layer, in_channels, output extents)
    decoder: list[tuple[LayerSpec, int, tuple[int, int, int], tuple[int, int, int]]]  # + output_padding
    latent: tuple[int, int, int, int]


def plan(config: AEConfig) -> _Plan:
    """Static shape walk through the network; raises on any inconsistent layer."""
    t, c, h, w = config.input_shape
    sizes = [(t, h, w)]
    channels = [c]
    encoder = []
    for i, layer in enumerate(config.encoder_layers):
        size = T.conv_output_shape(sizes[-1], layer.kernel, layer.stride, layer.padding)
        if min(size) < 1:
            raise ShapeError(f"encoder layer {i} ({layer}) maps extents {sizes[-1]} to empty output {size}")
        encoder.append((layer, channels[-1], size))
        sizes.append(size)
        channels.append(layer.out_channels)

    decoder = []
    size, ch = sizes[-1], channels[-1]
    dec_layers = config.resolved_decoder
    targets = list(reversed(sizes[:-1]))
    if len(dec_layers) != len(targets):
        raise ShapeError(
            f"decoder has {len(dec_layers)} layers but the encoder has {len(targets)}; "
            "mirrored decoders must match layer for layer"
        )
    for i, (layer, target) in enumerate(zip(dec_layers, targets)):
        base = T.conv_transpose_output_shape(size, layer.kernel, layer.stride, layer.padding, 0)
        extra = tuple(tt - bb for tt, bb in zip(target, base))
        if any(e < 0 or e >= s for e, s in zip(extra, layer.stride)):
            raise ShapeError(
                f"decoder layer {i} ({layer}) cannot map extents {size} to {target}"
            )
        decoder.append((layer, ch, target, extra))
        size, ch = target, layer.out_channels
    if ch != c:
        raise ShapeError(f"decoder layer {len(dec_layers) - 1} emits {ch} channels, input has {c}")
    latent_size = sizes[-1]
    return _Plan(encoder, decoder, (latent_size[0], channels[-1], latent_size[1], latent_size[2]))


def latent_shape(config: AEConfig) -> tuple[int, int, int, int]:
    """``(T', C', H', W')`` of the encoder output for ``config``."""
    return plan(config).latent


class Autoencoder:
    def __init__(self, config: AEConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self._plan = plan(config)
        self.dtype = T.dtype_for(config.precision)
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()
        self._check_params()

    @classmethod
    def init(cls, config: AEConfig) -> "Autoencoder":
        return cls(config)

    # Kaiming-uniform: weights ~ U(-b, b), b = gain * sqrt(3 / fan_in), with the
    # gain of the activation that follows the layer (1 for linear outputs).
    # Biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.config.seed)
        slope = self.config.leaky_slope
        leaky_gain = math.sqrt(2.0 / (1.0 + slope * slope))
        n_enc, n_dec = len(self._plan.encoder), len(self._plan.decoder)
        params: dict[str, Tensor] = {}
        for name, shape, fan_in in self._param_shapes():
            if name.endswith(".bias"):
                bound = 1.0 / math.sqrt(fan_in)
            else:
                part, idx = name.split(".")[:2]
                linear = (part == "encoder" and int(idx) == n_enc - 1 and self.config.drop_last_encoder_activation) or (
                    part == "decoder" and int(idx) == n_dec - 1
                )
                bound = (1.0 if linear else leaky_gain) * math.sqrt(3.0 / fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)
        return params

    def _param_shapes(self):
        for i, (layer, cin, _) in enumerate(self._plan.encoder):
            fan_in = cin * math.prod(layer.kernel)
            yield f"encoder.{i}.weight", (layer.out_channels, cin) + layer.kernel, fan_in
            yield f"encoder.{i}.bias", (layer.out_channels,), fan_in
        for i, (layer, cin, _, _) in enumerate(self._plan.decoder):
            # transposed conv: fan-in seen by the weight's second axis
            fan_in = layer.out_channels * math.prod(layer.kernel)
            yield f"decoder.{i}.weight", (cin, layer.out_channels) + layer.kernel, fan_in
            yield f"decoder.{i}.bias", (layer.out_channels,), fan_in

    def _check_params(self) -> None:
        expected = {name: shape for name, shape, _ in self._param_shapes()}
        if list(expected) != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, config implies {shape}")
            if self.params[name].dtype != self.dtype:
                raise ShapeError(f"parameter {name} is {self.params[name].dtype}, config wants {np.dtype(self.dtype)}")

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return self._plan.latent

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------
    def _to_channels_first(self, X: Tensor) -> Tensor:
        t, c, h, w = self.config.input_shape
        if X.ndim == 4:
            X = T.reshape(X, (1,) + X.shape)
        if X.ndim != 5 or X.shape[1:] != (t, c, h, w):
            raise ShapeError(f"input shape {X.shape} does not match configured (N,) + {(t, c, h, w)}")
        return T.transpose(X, (0, 2, 1, 3, 4))

    def encode(self, X: Tensor) -> Tensor:
        """Map clips ``(N, T, C, H, W)`` to latents ``(N, T', C', H', W')``."""
        if X.dtype != self.dtype:
            X = Tensor(X.data.astype(self.dtype))
        h = self._to_channels_first(X)
        last = len(self._plan.encoder) - 1
        for i, (layer, _, _) in enumerate(self._plan.encoder):
            h = T.conv3d(h, self.params[f"encoder.{i}.weight"], self.params[f"encoder.{i}.bias"], layer.stride, layer.padding)
            if i < last or not self.config.drop_last_encoder_activation:
                h = T.leaky_relu(h, self.config.leaky_slope)
        return T.transpose(h, (0, 2, 1, 3, 4))

    def decode(self, F: Tensor) -> Tensor:
        """Map latents ``(N, T', C', H', W')`` back to clips ``(N, T, C, H, W)``."""
        lt, lc, lh, lw = self.latent_shape
        if F.ndim == 4:
            F = T.reshape(F, (1,) + F.shape)
        if F.ndim != 5 or F.shape[1:] != (lt, lc, lh, lw):
            raise ShapeError(f"latent shape {F.shape} does not match configured (N,) + {self.latent_shape}")
        h = T.transpose(F, (0, 2, 1, 3, 4))
        last = len(self._plan.decoder) - 1
        for i, (layer, _, _, extra) in enumerate(self._plan.decoder):
            h = T.conv3d_transpose(
                h,
                self.params[f"decoder.{i}.weight"],
                self.params[f"decoder.{i}.bias"],
                layer.stride,
                layer.padding,
                extra,
            )
            if i < last:
                h = T.leaky_relu(h, self.config.leaky_slope)
        return T.transpose(h, (0, 2, 1, 3, 4))

    def forward(self, X: Tensor) -> tuple[Tensor, Tensor]:
        F = self.encode(X)
        return self.decode(F), F

    __call__ = forward

    def copy(self) -> "Autoencoder":
        return Autoencoder(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.params.items()},
        )

    # -- persistence ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            write_checkpoint(fh, self)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Autoencoder":
        with open(path, "rb") as fh:
            return read_checkpoint(fh)


class CheckpointError(ValueError):
    pass


_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_checkpoint(fh: BinaryIO, model: Autoencoder) -> None:
    """Write ``model`` in the CAE1 layout.

    ``"CAE1" | u32 len | config JSON (UTF-8) | u32 count | count * param``
    where each param is ``u16 len | name | u8 dtype | u8 ndim | u32 dims... | data``,
    all little-endian.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(cfg)))
    fh.write(cfg)
    fh.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def read_checkpoint(fh: BinaryIO) -> Autoencoder:
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"unknown checkpoint magic {magic!r}")
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        config = AEConfig.from_dict(json.loads(_read_exact(fh, n).decode("utf-8")))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"parameter {name}: unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        data = np.frombuffer(_read_exact(fh, dtype.itemsize * math.prod(shape)), dtype=dtype).reshape(shape)
        params[name] = Tensor(data.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint parameters")
    try:
        return Autoencoder(config, params)
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
